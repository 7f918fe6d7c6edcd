//! The federated co-tuning loop and its baselines.
//!
//! Each round the server broadcasts the global SLM adapter θ, every client
//! fine-tunes it on local data, the server averages the results (optionally
//! through masked aggregation) and then runs `R` mutual-distillation steps
//! between its LLM adapter ω and θ on the auxiliary set.

mod baseline;
mod run;
mod train;
mod transport;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::DistillWeights;
use crate::model::ChoiceScoring;
use crate::secagg::DEFAULT_CLIP;

pub use baseline::{evaluate, run_baseline, BaselineKind, BaselineRun, EvalReport, ModelScores, Workload};
pub use run::{run_fedcollm, RunFailure, RunOutcome};
pub use train::{
    aggregate, batch_gradient, client_update, mutual_transfer, sequence_loss, BatchCursor, ClientResult, ClientState,
    ServerState,
};
pub use transport::{Channel, TransportKind, Upload};

/// Training and protocol hyperparameters shared by every run kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    /// `T`
    pub rounds: usize,
    /// `E`
    pub local_epochs: usize,
    /// `R`
    pub distill_steps: usize,
    /// `η_θ`
    pub lr_theta: f64,
    /// `η_ω`
    pub lr_omega: f64,
    pub client_batch: usize,
    pub distill_batch: usize,
    pub distill: DistillWeights,
    pub transport: TransportKind,
    /// Fixed-point range for masked aggregation.
    pub clip: f64,
    pub scoring: ChoiceScoring,
    pub execution: Execution,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 5,
            local_epochs: 1,
            distill_steps: 10,
            lr_theta: 0.05,
            lr_omega: 0.05,
            client_batch: 8,
            distill_batch: 8,
            distill: DistillWeights::default(),
            transport: TransportKind::Plain,
            clip: DEFAULT_CLIP,
            scoring: ChoiceScoring::default(),
            execution: Execution::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_theta", self.lr_theta), ("lr_omega", self.lr_omega)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {lr}")));
            }
        }
        if self.client_batch == 0 || self.distill_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        self.distill.validate()
    }
}

/// One mutual-distillation step: batch-mean losses before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillStep {
    pub step: usize,
    pub l_f: f64,
    pub l_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    /// SHA-256 of the uploaded message payload.
    pub update_checksum: String,
    /// Token-weighted mean training loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

/// Audit record of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: usize,
    pub transport: TransportKind,
    /// Checksum of the adapter values clients start the round from.
    pub broadcast_checksum: String,
    pub clients: Vec<ClientRecord>,
    pub aggregate_checksum: String,
    pub distill: Vec<DistillStep>,
    pub bytes_down: u64,
    pub bytes_up: u64,
    /// Elements clamped by fixed-point encoding this round.
    pub clipped_elements: u64,
    /// Set when the round was aborted.
    pub error: Option<String>,
}

impl RoundTranscript {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_down + self.bytes_up
    }
}

/// Closed-form per-round traffic: one download and one upload per client.
pub fn expected_round_bytes(clients: usize, params: usize, transport: TransportKind) -> u64 {
    2 * clients as u64 * params as u64 * transport.bytes_per_value() as u64
}
