//! The round loop.

use std::fmt;

use super::train::{aggregate, client_update, mutual_transfer, ClientResult, ClientState, ServerState};
use super::transport::{bytes_to_f64s, bytes_to_u32s, f64s_to_bytes, u32s_to_bytes, Channel, TransportKind, Upload};
use super::{ClientRecord, FedConfig, RoundTranscript};
use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::rng::derive_seed;
use crate::secagg::{clipped_count, dequantize, mask_update, quantize, secure_aggregate, PairwiseSeeds};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub theta: LoraAdapterSet,
    pub omega: Option<LoraAdapterSet>,
    pub client_adapters: Vec<LoraAdapterSet>,
    pub transcripts: Vec<RoundTranscript>,
    /// Checksums of the frozen SLM (and LLM, if present) base weights
    /// before and after the run.
    pub base_before: Vec<String>,
    pub base_after: Vec<String>,
}

/// A run aborted mid-round. The last transcript carries the diagnostic.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub transcripts: Vec<RoundTranscript>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run aborted after {} round(s): {}", self.transcripts.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            error,
            transcripts: Vec::new(),
        }
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn base_checksums(server: &ServerState<'_>) -> Vec<String> {
    std::iter::once(server.slm.checksum()).chain(server.llm.map(|m| m.checksum())).collect()
}

/// Runs `cfg.rounds` rounds of broadcast, local training, aggregation and
/// mutual distillation. `on_round` sees each transcript as it completes.
///
/// With secure transport the server and clients share a reference copy
/// `θ̂` of the last broadcast. Broadcasts carry the fixed-point difference
/// to `θ̂`; uploads carry each client's fixed-point change from `θ̂`,
/// pairwise masked. The new global adapter is `θ̂` plus the unmasked mean
/// change.
pub fn run_fedcollm(
    cfg: &FedConfig,
    clients: &mut [ClientState<'_>],
    server: &mut ServerState<'_>,
    on_round: &mut dyn FnMut(&RoundTranscript),
) -> std::result::Result<RunOutcome, RunFailure> {
    cfg.validate()?;
    let k = clients.len();
    if k == 0 {
        return Err(Error::Protocol("no clients".into()).into());
    }
    if let Some((i, _)) = clients.iter().enumerate().find(|(i, c)| c.id != *i) {
        return Err(Error::Protocol(format!("client at position {i} has id {}", clients[i].id)).into());
    }
    let base_before = base_checksums(server);
    let seeds = match cfg.transport {
        TransportKind::Secure => Some(PairwiseSeeds::deal(k, derive_seed(cfg.seed, "secagg", &[]))?),
        TransportKind::Plain => None,
    };
    let mut reference = server.theta.flatten();
    let mut channel = Channel::default();
    let mut transcripts = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let mut t = RoundTranscript {
            round,
            transport: cfg.transport,
            broadcast_checksum: String::new(),
            clients: Vec::new(),
            aggregate_checksum: String::new(),
            distill: Vec::new(),
            bytes_down: 0,
            bytes_up: 0,
            clipped_elements: 0,
            error: None,
        };
        let result = run_round(cfg, round, clients, server, seeds.as_ref(), &mut reference, &mut channel, &mut t);
        (t.bytes_down, t.bytes_up) = channel.take_counts();
        if let Err(error) = result {
            t.error = Some(error.to_string());
            on_round(&t);
            transcripts.push(t);
            return Err(RunFailure { error, transcripts });
        }
        on_round(&t);
        transcripts.push(t);
    }

    let base_after = base_checksums(server);
    Ok(RunOutcome {
        theta: server.theta.clone(),
        omega: server.omega.clone(),
        client_adapters: clients.iter().map(|c| c.adapter.clone()).collect(),
        transcripts,
        base_before,
        base_after,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    cfg: &FedConfig,
    round: usize,
    clients: &mut [ClientState<'_>],
    server: &mut ServerState<'_>,
    seeds: Option<&PairwiseSeeds>,
    reference: &mut Vec<f64>,
    channel: &mut Channel,
    t: &mut RoundTranscript,
) -> Result<()> {
    let k = clients.len();
    let exec = cfg.execution;
    let round_tag = u32::try_from(round).map_err(|_| Error::Protocol("round index overflow".into()))?;

    // Broadcast.
    let theta = server.theta.flatten();
    let start = match cfg.transport {
        TransportKind::Plain => bytes_to_f64s(&channel.broadcast(&f64s_to_bytes(&theta), k))?,
        TransportKind::Secure => {
            let delta = sub(&theta, reference);
            t.clipped_elements += clipped_count(&delta, cfg.clip) as u64;
            let wire = channel.broadcast(&u32s_to_bytes(&quantize(&delta, cfg.clip)?), k);
            *reference = add(reference, &dequantize(&bytes_to_u32s(&wire)?, cfg.clip)?);
            reference.clone()
        }
    };
    t.broadcast_checksum = crate::checksum_f64(&start);
    let global = server.theta.unflatten(&start)?;

    // Local training.
    let results: Vec<Result<ClientResult>> = exec.map(clients, |c| client_update(c, &global, round, cfg.seed, exec));
    let mut updated = Vec::with_capacity(k);
    for (c, r) in clients.iter_mut().zip(results) {
        let r = r.map_err(|e| Error::Protocol(format!("client {}: {e}", c.id)))?;
        c.adapter = r.adapter.clone();
        updated.push(r);
    }

    // Upload and aggregate.
    let aggregated = match cfg.transport {
        TransportKind::Plain => {
            let mut received = Vec::with_capacity(k);
            for (id, r) in updated.iter().enumerate() {
                let msg = channel.upload(Upload::Plain(f64s_to_bytes(&r.adapter.flatten())));
                t.clients.push(ClientRecord {
                    client_id: id,
                    update_checksum: msg.checksum(),
                    epoch_losses: r.epoch_losses.clone(),
                });
                let Upload::Plain(bytes) = msg else { unreachable!() };
                received.push(global.unflatten(&bytes_to_f64s(&bytes)?)?);
            }
            aggregate(&received)?
        }
        TransportKind::Secure => {
            let seeds = seeds.expect("secure transport deals seeds");
            let deltas: Vec<Vec<f64>> = updated.iter().map(|r| sub(&r.adapter.flatten(), reference)).collect();
            t.clipped_elements += deltas.iter().map(|d| clipped_count(d, cfg.clip) as u64).sum::<u64>();
            let shares = exec.map_range(k, |id| mask_update(id, &deltas[id], seeds, cfg.clip, round_tag));
            let mut received = Vec::with_capacity(k);
            for (id, (share, r)) in shares.into_iter().zip(&updated).enumerate() {
                let msg = channel.upload(Upload::Masked(share?));
                t.clients.push(ClientRecord {
                    client_id: id,
                    update_checksum: msg.checksum(),
                    epoch_losses: r.epoch_losses.clone(),
                });
                let Upload::Masked(share) = msg else { unreachable!() };
                received.push(share);
            }
            let mean = secure_aggregate(&received, cfg.clip)?;
            global.unflatten(&add(reference, &mean))?
        }
    };
    t.aggregate_checksum = aggregated.checksum();
    server.theta = aggregated;

    // Mutual knowledge transfer.
    t.distill = mutual_transfer(server, exec)?;
    Ok(())
}
