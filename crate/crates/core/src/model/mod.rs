//! Decoder-only transformer language model.
//!
//! Pre-norm blocks with learned positional embeddings, GELU MLP (4× width)
//! and an untied output head. The same architecture serves as the server's
//! large model and the shared small model; only [`ModelConfig`] differs.

mod eval;

pub use eval::{perplexity, score_choices, sequence_nll, ChoiceScoring, ChoiceScores};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{BoundLora, LoraAdapterSet, Target};
use crate::rng::{derive_seed, gaussian_vec, rng_from};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale small model: 2 layers, width 64, 4 heads.
    pub fn slm_preset(vocab_size: usize, context_len: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            context_len,
            seed,
        }
    }

    /// Desk-scale large model: 4 layers, width 128, 8 heads.
    pub fn llm_preset(vocab_size: usize, context_len: usize, seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 8,
            vocab_size,
            context_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config(format!("context_len must be >= 2, got {}", self.context_len)));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `2·V·d + C·d + L·(12·d² + 13·d) + 2·d`.
    pub fn param_count(&self) -> usize {
        let (v, d, c, l) = (self.vocab_size, self.d_model, self.context_len, self.n_layers);
        2 * v * d + c * d + l * (12 * d * d + 13 * d) + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

const BLOCK_NAMES: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.o.weight",
    "attn.o.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc.weight",
    "mlp.fc.bias",
    "mlp.proj.weight",
    "mlp.proj.bias",
];

impl Block {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc_w,
            &self.fc_b,
            &self.proj_w,
            &self.proj_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.proj_w,
            &mut self.proj_b,
        ]
    }
}

/// Base parameters of one transformer. All tensors are frozen
/// (`requires_grad == false`) unless a caller flips them.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
}

/// Expected shape of every named tensor for `config`, in canonical order.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, c) = (config.vocab_size, config.d_model, config.context_len);
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
    let block_shapes: [Vec<usize>; 16] = [
        vec![d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![4 * d, d],
        vec![4 * d],
        vec![d, 4 * d],
        vec![d],
    ];
    for l in 0..config.n_layers {
        for (name, shape) in BLOCK_NAMES.iter().zip(block_shapes.iter()) {
            out.push((format!("layers.{l}.{name}"), shape.clone()));
        }
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out.push(("head.weight".to_string(), vec![v, d]));
    out
}

fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if name.ends_with(".gain") {
        vec![1.0; n]
    } else if name.ends_with(".bias") {
        vec![0.0; n]
    } else {
        let mut rng = rng_from(derive_seed(seed, name, &[]));
        gaussian_vec(&mut rng, n, INIT_STD)
    };
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}

impl LanguageModel {
    /// Deterministic initialization from `config.seed`: N(0, 0.02²) weights
    /// and embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, config.seed);
                (name, t)
            })
            .collect();
        Self::from_named(config, tensors)
    }

    /// Assembles a model from named tensors in any order. Every expected
    /// name must be present with the expected shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Input(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::dims("load tensor", t.shape(), shape));
            }
            Ok(t.with_requires_grad(false))
        };
        let ordered = tensor_shapes(&config)
            .iter()
            .map(|(name, shape)| take(name, shape))
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Input(format!("unexpected tensor {extra}")));
        }
        let mut it = ordered.into_iter();
        let mut next = || it.next().expect("ordered covers every tensor");
        let tok_emb = next();
        let pos_emb = next();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_w: next(),
                fc_b: next(),
                proj_w: next(),
                proj_b: next(),
            });
        }
        let lnf_gain = next();
        let lnf_bias = next();
        let head = next();
        Ok(LanguageModel {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &self.lnf_bias));
        out.push(("head.weight".to_string(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors_mut()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &mut self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &mut self.lnf_bias));
        out.push(("head.weight".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over all base parameters in canonical order.
    pub fn checksum(&self) -> String {
        let all: Vec<f64> = self
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        crate::checksum_f64(&all)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds context {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass in `g` and returns the `[len × vocab]` logits.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, tokens: &[usize], lora: Option<&BoundLora>) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        if let Some(l) = lora {
            l.check_fits(&self.config)?;
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.param(&self.tok_emb);
        let pos = g.param(&self.pos_emb);
        let te = g.embedding(tok, tokens)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let heads = self.config.n_heads;
        for (layer, b) in self.blocks.iter().enumerate() {
            let (g1, b1) = (g.param(&b.ln1_gain), g.param(&b.ln1_bias));
            let h = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
            let q = project(g, h, &b.wq, &b.bq, lora, layer, Target::Q)?;
            let k = project(g, h, &b.wk, &b.bk, lora, layer, Target::K)?;
            let v = project(g, h, &b.wv, &b.bv, lora, layer, Target::V)?;
            let a = g.causal_attention(q, k, v, heads)?;
            let o = project(g, a, &b.wo, &b.bo, lora, layer, Target::O)?;
            x = g.add(x, o)?;
            let (g2, b2) = (g.param(&b.ln2_gain), g.param(&b.ln2_bias));
            let h = g.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
            let (fw, fb) = (g.param(&b.fc_w), g.param(&b.fc_b));
            let m = g.matmul_nt(h, fw)?;
            let m = g.add_row(m, fb)?;
            let m = g.gelu(m);
            let (pw, pb) = (g.param(&b.proj_w), g.param(&b.proj_b));
            let m = g.matmul_nt(m, pw)?;
            let m = g.add_row(m, pb)?;
            x = g.add(x, m)?;
        }
        let (gf, bf) = (g.param(&self.lnf_gain), g.param(&self.lnf_bias));
        let x = g.layer_norm(x, gf, bf, LAYER_NORM_EPS)?;
        let head = g.param(&self.head);
        g.matmul_nt(x, head)
    }

    /// Logits without keeping the graph around.
    pub fn logits(&self, tokens: &[usize], adapters: Option<&LoraAdapterSet>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = adapters.map(|a| a.bind_frozen(&mut g));
        let out = self.forward(&mut g, tokens, bound.as_ref())?;
        Ok(g.to_tensor(out))
    }
}

#[allow(clippy::too_many_arguments)]
fn project<'a>(
    g: &mut Graph<'a>,
    x: NodeId,
    w: &'a Tensor,
    b: &'a Tensor,
    lora: Option<&BoundLora>,
    layer: usize,
    target: Target,
) -> Result<NodeId> {
    let (wn, bn) = (g.param(w), g.param(b));
    let y = g.matmul_nt(x, wn)?;
    let y = g.add_row(y, bn)?;
    match lora.map(|l| l.apply(g, x, layer, target)).transpose()?.flatten() {
        Some(delta) => g.add(y, delta),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests;
