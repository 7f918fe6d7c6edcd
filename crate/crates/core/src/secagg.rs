//! Pairwise-masked aggregation over 16-bit fixed point in 32-bit lanes.
//!
//! Every pair of clients `i < j` shares a seed `s_ij`. Client `i` adds the
//! ChaCha20 expansion of `s_ij` to its quantized update and client `j`
//! subtracts it, all modulo 2³². Summing every share cancels the masks, so
//! the server recovers the fixed-point sum without seeing any single update.
//! Seeds are dealt by a trusted setup step; there is no dropout recovery.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Largest quantized level, `2¹⁶ − 1`.
pub const LEVELS: u32 = u16::MAX as u32;

pub const DEFAULT_CLIP: f64 = 0.1;

fn check_clip(clip: f64) -> Result<()> {
    if clip > 0.0 && clip.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("clip must be a positive finite number, got {clip}")))
    }
}

/// Maps each element of `v`, clamped to `[-clip, clip]`, onto `0..=65535`.
pub fn quantize(v: &[f64], clip: f64) -> Result<Vec<u32>> {
    check_clip(clip)?;
    v.iter()
        .map(|&x| {
            if x.is_nan() {
                return Err(Error::Numeric("cannot quantize NaN".into()));
            }
            let c = x.clamp(-clip, clip);
            Ok(((c + clip) / (2.0 * clip) * LEVELS as f64).round() as u32)
        })
        .collect()
}

/// Number of elements of `v` that quantization would clamp.
pub fn clipped_count(v: &[f64], clip: f64) -> usize {
    v.iter().filter(|x| x.abs() > clip).count()
}

/// Inverse of [`quantize`]; maps one level back to a real.
pub fn dequantize_one(q: u32, clip: f64) -> f64 {
    q as f64 / LEVELS as f64 * 2.0 * clip - clip
}

pub fn dequantize(q: &[u32], clip: f64) -> Result<Vec<f64>> {
    check_clip(clip)?;
    Ok(q.iter().map(|&x| dequantize_one(x, clip)).collect())
}

/// Worst-case absolute roundtrip error of [`quantize`]: half a level.
pub fn quantization_bound(clip: f64) -> f64 {
    clip / LEVELS as f64
}

/// Symmetric table of pair seeds for `k` clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseSeeds {
    k: usize,
    seeds: Vec<u64>,
}

impl PairwiseSeeds {
    /// Trusted-dealer setup: `s_ij = s_ji` derived from `root`.
    pub fn deal(k: usize, root: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Protocol("secure aggregation needs at least one client".into()));
        }
        let mut seeds = vec![0u64; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let s = derive_seed(root, "secagg.pair", &[i as u64, j as u64]);
                seeds[i * k + j] = s;
                seeds[j * k + i] = s;
            }
        }
        Ok(PairwiseSeeds { k, seeds })
    }

    pub fn clients(&self) -> usize {
        self.k
    }

    pub fn pair(&self, i: usize, j: usize) -> u64 {
        self.seeds[i * self.k + j]
    }
}

/// Counter-based mask stream for one pair in one round.
fn mask_stream(seed: u64, round: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

/// A client's upload: quantized update plus its pairwise masks, mod 2³².
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedShare {
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<u32>,
}

const HEADER: usize = 4 + 4 + 8;

impl MaskedShare {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Bytes of the masked vector itself, excluding the header.
    pub fn payload_bytes(&self) -> usize {
        self.payload.len() * 4
    }

    /// `round u32 | client_id u32 | length u64 | payload u32…`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.payload_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Protocol(format!("share truncated at {} bytes", bytes.len())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let round = u32_at(0);
        let client_id = u32_at(4);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let expected = (len as u128) * 4 + HEADER as u128;
        if expected != bytes.len() as u128 {
            return Err(Error::Protocol(format!(
                "share declares {len} elements but carries {} bytes",
                bytes.len()
            )));
        }
        let payload = bytes[HEADER..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(MaskedShare {
            round,
            client_id,
            payload,
        })
    }
}

/// Quantizes `update` and applies client `client_id`'s pairwise masks.
pub fn mask_update(client_id: usize, update: &[f64], seeds: &PairwiseSeeds, clip: f64, round: u32) -> Result<MaskedShare> {
    if client_id >= seeds.clients() {
        return Err(Error::Protocol(format!(
            "client {client_id} outside a {}-client setup",
            seeds.clients()
        )));
    }
    let mut payload = quantize(update, clip)?;
    for other in (0..seeds.clients()).filter(|&j| j != client_id) {
        let mut rng = mask_stream(seeds.pair(client_id, other), round);
        let add = client_id < other;
        for x in payload.iter_mut() {
            let m = rng.next_u32();
            *x = if add { x.wrapping_add(m) } else { x.wrapping_sub(m) };
        }
    }
    Ok(MaskedShare {
        round,
        client_id: client_id as u32,
        payload,
    })
}

fn check_shares(shares: &[MaskedShare]) -> Result<()> {
    let first = shares.first().ok_or_else(|| Error::Protocol("no shares to aggregate".into()))?;
    let mut seen = vec![false; shares.len()];
    for s in shares {
        if s.round != first.round || s.len() != first.len() {
            return Err(Error::Protocol(format!(
                "share from client {} (round {}, len {}) does not match round {} len {}",
                s.client_id,
                s.round,
                s.len(),
                first.round,
                first.len()
            )));
        }
        match seen.get_mut(s.client_id as usize) {
            Some(slot) if !*slot => *slot = true,
            _ => {
                return Err(Error::Protocol(format!(
                    "unexpected or duplicate share from client {}",
                    s.client_id
                )))
            }
        }
    }
    Ok(())
}

/// Modular sum of all shares. With every client present the masks cancel
/// and this is the sum of the quantized updates.
pub fn unmask_sum(shares: &[MaskedShare]) -> Result<Vec<u32>> {
    check_shares(shares)?;
    let mut sum = shares[0].payload.clone();
    for s in &shares[1..] {
        for (a, b) in sum.iter_mut().zip(&s.payload) {
            *a = a.wrapping_add(*b);
        }
    }
    Ok(sum)
}

/// Mean of the clients' updates recovered from their masked shares.
pub fn secure_aggregate(shares: &[MaskedShare], clip: f64) -> Result<Vec<f64>> {
    check_clip(clip)?;
    let k = shares.len() as f64;
    if shares.len() > (u32::MAX / LEVELS) as usize {
        return Err(Error::Protocol(format!("{} clients overflow 32-bit lanes", shares.len())));
    }
    Ok(unmask_sum(shares)?
        .into_iter()
        .map(|s| s as f64 / k / LEVELS as f64 * 2.0 * clip - clip)
        .collect())
}
