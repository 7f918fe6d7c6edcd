//! Low-rank adapters on the attention projections.
//!
//! Each targeted projection `W` (`[d × d]`, applied as `x·Wᵀ`) gains a
//! trainable pair `A: [r × d]`, `B: [d × r]` with effective weight
//! `W + (α/r)·B·A`. `B` starts at zero, so fresh adapters leave the model's
//! outputs exactly unchanged.
//!
//! The flattened form (layers ascending, targets q,k,v,o, `A` before `B`,
//! row-major) is the transport and checkpoint representation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{derive_seed, gaussian_vec, rng_from};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Q, Target::K, Target::V, Target::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Target> {
        match s.trim() {
            "q" => Ok(Target::Q),
            "k" => Ok(Target::K),
            "v" => Ok(Target::V),
            "o" => Ok(Target::O),
            other => Err(Error::Config(format!("unknown LoRA target {other:?}, expected q/k/v/o"))),
        }
    }

    /// Bitmask over q,k,v,o (bit 0 = q).
    pub fn mask(targets: &[Target]) -> u8 {
        targets.iter().fold(0, |m, t| m | (1 << t.index()))
    }

    pub fn from_mask(mask: u8) -> Vec<Target> {
        Target::ALL.into_iter().filter(|t| mask & (1 << t.index()) != 0).collect()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
    pub seed: u64,
}

impl LoraConfig {
    /// Adapter config with α = 2r.
    pub fn new(rank: usize, targets: &[Target], seed: u64) -> Self {
        LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            targets: targets.to_vec(),
            seed,
        }
        .canonical()
    }

    /// Targets sorted into q,k,v,o order and deduplicated.
    pub fn canonical(mut self) -> Self {
        self.targets.sort();
        self.targets.dedup();
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if self.rank > d_model {
            return Err(Error::Config(format!("LoRA rank {} exceeds d_model {d_model}", self.rank)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig::new(8, &[Target::Q, Target::V], 0)
    }
}

/// Parameter count and share of the full model for one adapter upload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmittedParams {
    pub count: usize,
    pub fraction: f64,
}

/// `n_layers · |targets| · 2 · d_model · r` and its fraction of `full_count`.
pub fn count_transmitted_params(
    n_layers: usize,
    d_model: usize,
    lora: &LoraConfig,
    full_count: usize,
) -> Result<TransmittedParams> {
    lora.validate(d_model)?;
    if full_count == 0 {
        return Err(Error::Input("full-model parameter count must be positive".into()));
    }
    let targets = lora.clone().canonical().targets.len();
    let count = n_layers * targets * 2 * d_model * lora.rank;
    Ok(TransmittedParams {
        count,
        fraction: count as f64 / full_count as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub layer: usize,
    pub target: Target,
    /// `[r × d]`
    pub a: Tensor,
    /// `[d × r]`
    pub b: Tensor,
}

impl LoraEntry {
    /// `ΔW = scale · B · A`, shape `[d × d]`.
    pub fn delta(&self, scale: f64) -> Tensor {
        let mut d = self.b.matmul(&self.a).expect("entry shapes are consistent");
        d.data_mut().iter_mut().for_each(|x| *x *= scale);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    config: LoraConfig,
    n_layers: usize,
    d_model: usize,
    entries: Vec<LoraEntry>,
}

impl LoraAdapterSet {
    /// Fresh adapters: `A ~ N(0, 0.02²)` from the config seed, `B = 0`.
    pub fn new(model: &ModelConfig, config: LoraConfig) -> Result<Self> {
        Self::for_dims(model.n_layers, model.d_model, config)
    }

    /// Same as [`LoraAdapterSet::new`] given only the depth and width.
    pub fn for_dims(n_layers: usize, d_model: usize, config: LoraConfig) -> Result<Self> {
        let config = config.canonical();
        config.validate(d_model)?;
        let (r, d) = (config.rank, d_model);
        let mut entries = Vec::new();
        for layer in 0..n_layers {
            for &target in &config.targets {
                let mut rng = rng_from(derive_seed(config.seed, "lora.a", &[layer as u64, target.index() as u64]));
                let a = Tensor::new(vec![r, d], gaussian_vec(&mut rng, r * d, LORA_INIT_STD))?;
                entries.push(LoraEntry {
                    layer,
                    target,
                    a: a.with_requires_grad(true),
                    b: Tensor::zeros(&[d, r]).with_requires_grad(true),
                });
            }
        }
        Ok(LoraAdapterSet {
            config,
            n_layers,
            d_model: d,
            entries,
        })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn entries(&self) -> &[LoraEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [LoraEntry] {
        &mut self.entries
    }

    pub fn entry(&self, layer: usize, target: Target) -> Option<&LoraEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.target == target)
    }

    /// `ΔW` for one adapted projection.
    pub fn delta(&self, layer: usize, target: Target) -> Option<Tensor> {
        self.entry(layer, target).map(|e| e.delta(self.config.scale()))
    }

    /// Number of scalars in the flattened form.
    pub fn num_params(&self) -> usize {
        self.entries.len() * 2 * self.d_model * self.config.rank
    }

    /// True when `other` can be averaged with `self` (same shapes and scale).
    pub fn same_layout(&self, other: &LoraAdapterSet) -> bool {
        self.n_layers == other.n_layers
            && self.d_model == other.d_model
            && self.config.rank == other.config.rank
            && self.config.alpha == other.config.alpha
            && self.config.targets == other.config.targets
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for e in &self.entries {
            out.extend_from_slice(e.a.data());
            out.extend_from_slice(e.b.data());
        }
        out
    }

    /// Overwrites every adapter value from a flattened vector.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims("unflatten", &[self.num_params()], &[flat.len()]));
        }
        let mut off = 0;
        for e in &mut self.entries {
            for t in [&mut e.a, &mut e.b] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// A copy of `self`'s layout holding the values of `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<LoraAdapterSet> {
        let mut out = self.clone();
        out.clear_grads();
        out.load_flat(flat)?;
        Ok(out)
    }

    pub fn checksum(&self) -> String {
        crate::checksum_f64(&self.flatten())
    }

    /// Every trainable tensor in flattened order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().flat_map(|e| [&mut e.a, &mut e.b]).collect()
    }

    /// Installs gradients from a flattened vector.
    pub fn set_grads_flat(&mut self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.num_params() {
            return Err(Error::dims("set_grads_flat", &[self.num_params()], &[grads.len()]));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.set_grad(grads[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Registers A and B as gradient-tracked leaves of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundLora {
        self.bind_inner(g, true)
    }

    /// Registers A and B as constants (evaluation only).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> BoundLora {
        self.bind_inner(g, false)
    }

    fn bind_inner<'a>(&'a self, g: &mut Graph<'a>, track: bool) -> BoundLora {
        let mut slots = vec![None; self.n_layers * Target::ALL.len()];
        for e in &self.entries {
            let (a, b) = if track {
                (g.param(&e.a), g.param(&e.b))
            } else {
                (g.param_frozen(&e.a), g.param_frozen(&e.b))
            };
            slots[e.layer * Target::ALL.len() + e.target.index()] = Some((a, b));
        }
        BoundLora {
            scale: self.config.scale(),
            n_layers: self.n_layers,
            d_model: self.d_model,
            slots,
            order: self
                .entries
                .iter()
                .map(|e| slots_index(e.layer, e.target))
                .collect(),
        }
    }
}

fn slots_index(layer: usize, target: Target) -> usize {
    layer * Target::ALL.len() + target.index()
}

/// Graph handles for one adapter set bound into a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundLora {
    scale: f64,
    n_layers: usize,
    d_model: usize,
    slots: Vec<Option<(NodeId, NodeId)>>,
    order: Vec<usize>,
}

impl BoundLora {
    pub fn check_fits(&self, model: &ModelConfig) -> Result<()> {
        if self.n_layers != model.n_layers || self.d_model != model.d_model {
            return Err(Error::Config(format!(
                "adapters built for {} layers × width {} do not fit a model with {} layers × width {}",
                self.n_layers, self.d_model, model.n_layers, model.d_model
            )));
        }
        Ok(())
    }

    /// `scale · (x·Aᵀ)·Bᵀ` for the targeted projection, if adapted.
    pub fn apply(&self, g: &mut Graph<'_>, x: NodeId, layer: usize, target: Target) -> Result<Option<NodeId>> {
        let Some((a, b)) = self.slots.get(slots_index(layer, target)).copied().flatten() else {
            return Ok(None);
        };
        let h = g.matmul_nt(x, a)?;
        let d = g.matmul_nt(h, b)?;
        Ok(Some(g.scale(d, self.scale)))
    }

    /// Gradients of the last backward pass, flattened like
    /// [`LoraAdapterSet::flatten`]. Unreached tensors contribute zeros.
    pub fn grads(&self, g: &Graph<'_>) -> Vec<f64> {
        let mut out = Vec::new();
        for &slot in &self.order {
            let (a, b) = self.slots[slot].expect("ordered slots are bound");
            out.extend(g.grad_or_zeros(a));
            out.extend(g.grad_or_zeros(b));
        }
        out
    }
}
