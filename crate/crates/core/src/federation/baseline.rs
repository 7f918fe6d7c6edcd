//! Shared workload construction, evaluation and the comparison runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{run_fedcollm, RunFailure};
use super::train::{client_update, BatchCursor, ClientState, ServerState};
use super::{FedConfig, RoundTranscript};
use crate::data::{make_mcq_set_from, Corpus, FederatedSplit, McqInstance, McqShape};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lora::{LoraAdapterSet, LoraConfig};
use crate::model::{perplexity, score_choices, ChoiceScoring, LanguageModel, ModelConfig};
use crate::rng::derive_seed;

/// Frozen base models, adapter layouts and tokenized shards for one experiment.
#[derive(Debug, Clone)]
pub struct Workload {
    pub slm: LanguageModel,
    pub llm: LanguageModel,
    pub slm_lora: LoraConfig,
    pub llm_lora: LoraConfig,
    pub clients: Vec<Vec<Vec<usize>>>,
    pub aux: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
    pub mcq: Vec<McqInstance>,
}

impl Workload {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        corpus: &Corpus,
        split: &FederatedSplit,
        slm: ModelConfig,
        llm: ModelConfig,
        slm_lora: LoraConfig,
        llm_lora: LoraConfig,
        mcq_count: usize,
        mcq_seed: u64,
    ) -> Result<Self> {
        let v = corpus.vocab.len();
        for (name, cfg) in [("slm", &slm), ("llm", &llm)] {
            if cfg.vocab_size != v {
                return Err(Error::Config(format!(
                    "{name} vocab_size {} differs from the corpus vocabulary {v}",
                    cfg.vocab_size
                )));
            }
        }
        slm_lora.validate(slm.d_model)?;
        llm_lora.validate(llm.d_model)?;
        let ctx = slm.context_len.min(llm.context_len);
        let mcq = make_mcq_set_from(corpus, &split.eval, mcq_count, McqShape::default(), mcq_seed)?;
        Ok(Workload {
            slm: LanguageModel::init(slm)?,
            llm: LanguageModel::init(llm)?,
            slm_lora,
            llm_lora,
            clients: split.clients.iter().map(|ids| corpus.model_inputs(ids, ctx)).collect(),
            aux: corpus.model_inputs(&split.auxiliary, ctx),
            eval: corpus.model_inputs(&split.eval, ctx),
            mcq,
        })
    }

    /// `θ⁰`, identical on the server and every client.
    pub fn initial_theta(&self) -> Result<LoraAdapterSet> {
        LoraAdapterSet::new(self.slm.config(), self.slm_lora.clone())
    }

    /// `ω⁰`
    pub fn initial_omega(&self) -> Result<LoraAdapterSet> {
        LoraAdapterSet::new(self.llm.config(), self.llm_lora.clone())
    }

    pub fn client_states(&self, cfg: &FedConfig) -> Result<Vec<ClientState<'_>>> {
        let theta = self.initial_theta()?;
        Ok(self
            .clients
            .iter()
            .enumerate()
            .map(|(id, data)| ClientState {
                id,
                data,
                slm: &self.slm,
                adapter: theta.clone(),
                lr: cfg.lr_theta,
                epochs: cfg.local_epochs,
                batch_size: cfg.client_batch,
            })
            .collect())
    }

    /// Server state; without the LLM no distillation can run.
    pub fn server_state(&self, cfg: &FedConfig, with_llm: bool) -> Result<ServerState<'_>> {
        Ok(ServerState {
            slm: &self.slm,
            theta: self.initial_theta()?,
            llm: with_llm.then_some(&self.llm),
            omega: if with_llm { Some(self.initial_omega()?) } else { None },
            aux: &self.aux,
            distill_steps: cfg.distill_steps,
            lr_theta: cfg.lr_theta,
            lr_omega: cfg.lr_omega,
            weights: cfg.distill,
            batch_size: cfg.distill_batch,
            cursor: BatchCursor::new(self.aux.len(), derive_seed(cfg.seed, "server.cursor", &[])),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelScores {
    pub perplexity: f64,
    pub mcq_accuracy: f64,
}

/// Held-out perplexity and multiple-choice accuracy.
pub fn evaluate(
    model: &LanguageModel,
    adapters: Option<&LoraAdapterSet>,
    eval: &[Vec<usize>],
    mcq: &[McqInstance],
    scoring: ChoiceScoring,
    exec: Execution,
) -> Result<ModelScores> {
    let ppl = perplexity(model, adapters, eval, exec)?;
    let correct = exec.map(mcq, |inst| {
        score_choices(model, adapters, &inst.model_prompt(), &inst.choices, scoring).map(|s| s.chosen == inst.gold)
    });
    let mut hits = 0usize;
    for c in correct {
        hits += c? as usize;
    }
    Ok(ModelScores {
        perplexity: ppl,
        mcq_accuracy: if mcq.is_empty() { 0.0 } else { hits as f64 / mcq.len() as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ZeroShot,
    Standalone,
    FedAvg,
    Centralized,
    #[serde(rename = "fedcollm")]
    FedCoLlm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::ZeroShot,
        BaselineKind::Standalone,
        BaselineKind::FedAvg,
        BaselineKind::Centralized,
        BaselineKind::FedCoLlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::ZeroShot => "zero_shot",
            BaselineKind::Standalone => "standalone",
            BaselineKind::FedAvg => "fedavg",
            BaselineKind::Centralized => "centralized",
            BaselineKind::FedCoLlm => "fedcollm",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown run kind {s:?}")))
    }
}

/// Row-comparable result of any run kind. Models a run does not train are
/// evaluated untouched; `clients` lists per-client SLM scores where
/// clients keep separate adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: BaselineKind,
    pub slm: ModelScores,
    pub llm: ModelScores,
    pub clients: Vec<ModelScores>,
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub report: EvalReport,
    pub theta: Option<LoraAdapterSet>,
    pub omega: Option<LoraAdapterSet>,
    pub client_adapters: Vec<LoraAdapterSet>,
    pub transcripts: Vec<RoundTranscript>,
    pub base_before: Vec<String>,
    pub base_after: Vec<String>,
}

fn mean_scores(scores: &[ModelScores]) -> ModelScores {
    let n = scores.len() as f64;
    ModelScores {
        perplexity: scores.iter().map(|s| s.perplexity).sum::<f64>() / n,
        mcq_accuracy: scores.iter().map(|s| s.mcq_accuracy).sum::<f64>() / n,
    }
}

fn failure(e: RunFailure) -> Error {
    match e.error {
        Error::Protocol(m) => Error::Protocol(format!("round {}: {m}", e.transcripts.len().saturating_sub(1))),
        other => other,
    }
}

/// Runs one experiment kind end to end and evaluates it on the shared
/// held-out sets. `on_round` observes federated round transcripts.
pub fn run_baseline(
    kind: BaselineKind,
    w: &Workload,
    cfg: &FedConfig,
    on_round: &mut dyn FnMut(&RoundTranscript),
) -> Result<BaselineRun> {
    cfg.validate()?;
    let exec = cfg.execution;
    let eval = |m: &LanguageModel, a: Option<&LoraAdapterSet>| evaluate(m, a, &w.eval, &w.mcq, cfg.scoring, exec);
    let checksums = || vec![w.slm.checksum(), w.llm.checksum()];
    let base_before = checksums();
    let mut run = BaselineRun {
        report: EvalReport {
            kind,
            slm: ModelScores::default(),
            llm: ModelScores::default(),
            clients: Vec::new(),
        },
        theta: None,
        omega: None,
        client_adapters: Vec::new(),
        transcripts: Vec::new(),
        base_before,
        base_after: Vec::new(),
    };
    let (mut slm_done, mut llm_done) = (false, false);
    match kind {
        BaselineKind::ZeroShot => {}
        BaselineKind::Standalone => {
            let clients = w.client_states(cfg)?;
            let finals = exec.map(&clients, |c| -> Result<LoraAdapterSet> {
                let mut adapter = c.adapter.clone();
                for round in 0..cfg.rounds {
                    adapter = client_update(c, &adapter, round, cfg.seed, exec)?.adapter;
                }
                Ok(adapter)
            });
            for a in finals {
                let a = a?;
                run.report.clients.push(eval(&w.slm, Some(&a))?);
                run.client_adapters.push(a);
            }
            if !run.report.clients.is_empty() {
                run.report.slm = mean_scores(&run.report.clients);
                slm_done = true;
            }
        }
        BaselineKind::FedAvg | BaselineKind::FedCoLlm => {
            let with_llm = kind == BaselineKind::FedCoLlm;
            let mut fed_cfg = cfg.clone();
            if !with_llm {
                fed_cfg.distill_steps = 0;
            }
            let mut clients = w.client_states(&fed_cfg)?;
            let mut server = w.server_state(&fed_cfg, with_llm)?;
            let out = run_fedcollm(&fed_cfg, &mut clients, &mut server, on_round).map_err(failure)?;
            run.report.slm = eval(&w.slm, Some(&out.theta))?;
            slm_done = true;
            if let Some(omega) = &out.omega {
                run.report.llm = eval(&w.llm, Some(omega))?;
                llm_done = true;
            }
            run.theta = Some(out.theta);
            run.omega = out.omega;
            run.client_adapters = out.client_adapters;
            run.transcripts = out.transcripts;
        }
        BaselineKind::Centralized => {
            let union: Vec<Vec<usize>> = w.clients.iter().flatten().chain(&w.aux).cloned().collect();
            let trainer = ClientState {
                id: 0,
                data: &union,
                slm: &w.llm,
                adapter: w.initial_omega()?,
                lr: cfg.lr_omega,
                epochs: cfg.rounds * cfg.local_epochs,
                batch_size: cfg.client_batch,
            };
            let seed = derive_seed(cfg.seed, "centralized", &[]);
            let omega = client_update(&trainer, &trainer.adapter, 0, seed, exec)?.adapter;
            run.report.llm = eval(&w.llm, Some(&omega))?;
            llm_done = true;
            run.omega = Some(omega);
        }
    }
    if !slm_done {
        run.report.slm = eval(&w.slm, None)?;
    }
    if !llm_done {
        run.report.llm = eval(&w.llm, None)?;
    }
    run.base_after = checksums();
    Ok(run)
}
