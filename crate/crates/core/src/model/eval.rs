//! Perplexity and multiple-choice scoring.

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lora::LoraAdapterSet;
use crate::tensor::kernels::log_softmax_into;

/// Sum of next-token negative log-likelihoods of `seq` and the number of
/// predicted positions (`len - 1`).
pub fn sequence_nll(model: &LanguageModel, adapters: Option<&LoraAdapterSet>, seq: &[usize]) -> Result<(f64, usize)> {
    if seq.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits = model.logits(seq, adapters)?;
    let v = model.config().vocab_size;
    let mut lp = vec![0.0; v];
    let mut nll = 0.0;
    for t in 0..seq.len() - 1 {
        log_softmax_into(&logits.data()[t * v..(t + 1) * v], &mut lp);
        nll -= lp[seq[t + 1]];
    }
    Ok((nll, seq.len() - 1))
}

/// `exp` of the token-weighted mean next-token cross-entropy over `dataset`.
pub fn perplexity(
    model: &LanguageModel,
    adapters: Option<&LoraAdapterSet>,
    dataset: &[Vec<usize>],
    exec: Execution,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("perplexity of an empty dataset".into()));
    }
    let parts = exec.map(dataset, |seq| sequence_nll(model, adapters, seq));
    let (mut nll, mut count) = (0.0, 0usize);
    for p in parts {
        let (n, c) = p?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::Input("dataset has no predictable positions".into()));
    }
    Ok((nll / count as f64).exp())
}

/// How a choice's log-likelihood is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceScoring {
    /// Log-likelihood divided by the number of choice tokens.
    #[default]
    MeanLogLikelihood,
    /// Raw summed log-likelihood.
    SumLogLikelihood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceScores {
    pub chosen: usize,
    pub scores: Vec<f64>,
}

/// Scores each choice by the log-likelihood of its tokens conditioned on
/// `prompt` and returns the argmax (lowest index wins ties).
pub fn score_choices(
    model: &LanguageModel,
    adapters: Option<&LoraAdapterSet>,
    prompt: &[usize],
    choices: &[Vec<usize>],
    scoring: ChoiceScoring,
) -> Result<ChoiceScores> {
    if choices.len() < 2 {
        return Err(Error::Input(format!("need at least 2 choices, got {}", choices.len())));
    }
    if prompt.is_empty() {
        return Err(Error::Input("prompt must contain at least one token".into()));
    }
    let v = model.config().vocab_size;
    let mut lp = vec![0.0; v];
    let mut scores = Vec::with_capacity(choices.len());
    for choice in choices {
        if choice.is_empty() {
            return Err(Error::Input("empty choice".into()));
        }
        let seq: Vec<usize> = prompt.iter().chain(choice).copied().collect();
        if seq.len() > model.config().context_len {
            return Err(Error::Input(format!(
                "prompt+choice length {} exceeds context {}",
                seq.len(),
                model.config().context_len
            )));
        }
        let logits = model.logits(&seq, adapters)?;
        let mut ll = 0.0;
        for (j, &tok) in choice.iter().enumerate() {
            let row = prompt.len() + j - 1;
            log_softmax_into(&logits.data()[row * v..(row + 1) * v], &mut lp);
            ll += lp[tok];
        }
        scores.push(match scoring {
            ChoiceScoring::MeanLogLikelihood => ll / choice.len() as f64,
            ChoiceScoring::SumLogLikelihood => ll,
        });
    }
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(ChoiceScores { chosen, scores })
}
