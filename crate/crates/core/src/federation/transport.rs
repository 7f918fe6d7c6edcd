//! In-process message boundary between server and clients.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::secagg::MaskedShare;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Adapters travel as raw f64.
    #[default]
    Plain,
    /// Fixed-point deltas; uploads are pairwise masked.
    Secure,
}

impl TransportKind {
    pub fn bytes_per_value(self) -> usize {
        match self {
            TransportKind::Plain => 8,
            TransportKind::Secure => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TransportKind::Plain),
            "secure" => Ok(TransportKind::Secure),
            other => Err(Error::Config(format!("unknown transport {other:?} (plain | secure)"))),
        }
    }
}

/// A client-to-server message.
#[derive(Debug, Clone, PartialEq)]
pub enum Upload {
    Plain(Vec<u8>),
    Masked(MaskedShare),
}

impl Upload {
    /// Metered size: the adapter payload only.
    pub fn payload_bytes(&self) -> usize {
        match self {
            Upload::Plain(b) => b.len(),
            Upload::Masked(s) => s.payload_bytes(),
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            Upload::Plain(b) => hex::encode(Sha256::digest(b)),
            Upload::Masked(s) => hex::encode(Sha256::digest(&s.to_bytes()[16..])),
        }
    }
}

/// Meters every byte of adapter payload crossing the boundary.
#[derive(Debug, Clone, Default)]
pub struct Channel {
    down: u64,
    up: u64,
}

impl Channel {
    /// Sends `payload` to each of `recipients` clients; returns what they receive.
    pub fn broadcast(&mut self, payload: &[u8], recipients: usize) -> Vec<u8> {
        self.down += (payload.len() * recipients) as u64;
        payload.to_vec()
    }

    pub fn upload(&mut self, msg: Upload) -> Upload {
        self.up += msg.payload_bytes() as u64;
        msg
    }

    /// Returns `(down, up)` since the last call and resets the meter.
    pub fn take_counts(&mut self) -> (u64, u64) {
        let out = (self.down, self.up);
        *self = Channel::default();
        out
    }
}

pub(crate) fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Protocol(format!("{} bytes is not a whole number of f64s", b.len())));
    }
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn u32s_to_bytes(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn bytes_to_u32s(b: &[u8]) -> Result<Vec<u32>> {
    if b.len() % 4 != 0 {
        return Err(Error::Protocol(format!("{} bytes is not a whole number of u32s", b.len())));
    }
    Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}
