//! Experiment configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fedcollm::data::{bundled_corpus, load_corpus, partition, Corpus, FederatedSplit, PartitionScheme};
use fedcollm::federation::{FedConfig, TransportKind, Workload};
use fedcollm::lora::{LoraConfig, Target};
use fedcollm::model::ModelConfig;
use fedcollm::rng::derive_seed;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterShape {
    pub rank: usize,
    /// Defaults to `2 · rank`.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub targets: Vec<Target>,
}

impl Default for AdapterShape {
    fn default() -> Self {
        AdapterShape {
            rank: 8,
            alpha: None,
            targets: vec![Target::Q, Target::V],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    /// Corpus file (`.jsonl` or plain text). Absent means the bundled corpus.
    pub corpus: Option<PathBuf>,
    pub clients: usize,
    pub partition: PartitionScheme,
    pub context_len: usize,
    pub slm: ModelShape,
    pub llm: ModelShape,
    pub slm_lora: AdapterShape,
    pub llm_lora: AdapterShape,
    pub mcq_count: usize,
    pub training: FedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            corpus: None,
            clients: 4,
            partition: PartitionScheme::Dirichlet { beta: 0.5 },
            context_len: 64,
            slm: ModelShape {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
            },
            llm: ModelShape {
                n_layers: 4,
                d_model: 128,
                n_heads: 8,
            },
            slm_lora: AdapterShape::default(),
            llm_lora: AdapterShape::default(),
            mcq_count: 256,
            training: FedConfig {
                rounds: 5,
                local_epochs: 1,
                distill_steps: 10,
                lr_theta: 4.0,
                lr_omega: 4.0,
                ..FedConfig::default()
            },
        }
    }
}

/// Writes `given` over `base`, recursing into objects so that a partial
/// section keeps the remaining experiment defaults. Tagged objects (with a
/// `kind`) are replaced whole, since their fields depend on the tag.
fn overlay(base: &mut serde_json::Value, given: serde_json::Value) {
    use serde_json::Value;
    match (base, given) {
        (Value::Object(b), Value::Object(g)) if !g.contains_key("kind") => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, g) => *slot = g,
    }
}

/// Everything a run needs, materialized from a config.
pub struct Prepared {
    pub corpus: Corpus,
    pub split: FederatedSplit,
    pub workload: Workload,
    pub fed: FedConfig,
}

impl ExperimentConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let given: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        overlay(&mut merged, given);
        serde_json::from_value(merged).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn with_overrides(mut self, seed: Option<u64>, transport: Option<TransportKind>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(t) = transport {
            self.training.transport = t;
        }
        self
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut errs: Vec<String> = Vec::new();
        if self.clients == 0 {
            errs.push("clients: must be at least 1".into());
        }
        if let PartitionScheme::Dirichlet { beta } = self.partition {
            if !(beta > 0.0) || !beta.is_finite() {
                errs.push(format!("partition.beta: must be > 0, got {beta}"));
            }
        }
        // Vocabulary size is only known once the corpus is read; any
        // positive placeholder exercises the remaining checks.
        for (name, shape) in [("slm", self.slm), ("llm", self.llm)] {
            if let Err(e) = self.model_config(shape, 2, 0).validate() {
                errs.push(format!("{name}: {e}"));
            }
        }
        for (name, shape, model) in [("slm_lora", &self.slm_lora, self.slm), ("llm_lora", &self.llm_lora, self.llm)] {
            if let Err(e) = adapter_config(shape, 0).validate(model.d_model) {
                errs.push(format!("{name}: {e}"));
            }
        }
        if self.training.seed != 0 {
            errs.push("training.seed: derived from the master seed; set `seed` instead".into());
        }
        if let Err(e) = self.training.validate() {
            errs.push(format!("training: {e}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  {}", errs.join("\n  "))
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    fn model_config(&self, shape: ModelShape, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: shape.n_layers,
            d_model: shape.d_model,
            n_heads: shape.n_heads,
            vocab_size,
            context_len: self.context_len,
            seed,
        }
    }

    /// Loads the corpus, splits it and initializes the frozen models.
    pub fn prepare(&self) -> anyhow::Result<Prepared> {
        self.validate()?;
        let corpus = match &self.corpus {
            Some(p) => load_corpus(p).with_context(|| format!("loading corpus {}", p.display()))?,
            None => bundled_corpus(),
        };
        let s = self.seed;
        let split = partition(&corpus, self.clients, self.partition, derive_seed(s, "partition", &[]))?;
        let v = corpus.vocab.len();
        let workload = Workload::new(
            &corpus,
            &split,
            self.model_config(self.slm, v, derive_seed(s, "slm", &[])),
            self.model_config(self.llm, v, derive_seed(s, "llm", &[])),
            adapter_config(&self.slm_lora, derive_seed(s, "slm_lora", &[])),
            adapter_config(&self.llm_lora, derive_seed(s, "llm_lora", &[])),
            self.mcq_count,
            derive_seed(s, "mcq", &[]),
        )?;
        let fed = FedConfig {
            seed: derive_seed(s, "training", &[]),
            ..self.training.clone()
        };
        Ok(Prepared {
            corpus,
            split,
            workload,
            fed,
        })
    }
}

fn adapter_config(shape: &AdapterShape, seed: u64) -> LoraConfig {
    let mut c = LoraConfig::new(shape.rank, &shape.targets, seed);
    if let Some(a) = shape.alpha {
        c.alpha = a;
    }
    c
}
