//! Little-endian binary checkpoints for base models and adapter sets.
//!
//! ```text
//! "FCLM" | version u16 | kind u8 | config block | count u32 | tensors…
//! tensor: name_len u32 | name | rank u32 | dims u64… | f64 payload
//! ```
//!
//! Model config block: n_layers, d_model, n_heads, vocab_size, context_len
//! as u32, then seed u64. Adapter config block: n_layers u32, d_model u32,
//! rank u32, alpha f64, target mask u8, seed u64.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{LoraAdapterSet, LoraConfig, Target};
use crate::model::{LanguageModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FCLM";
pub const VERSION: u16 = 1;
const KIND_MODEL: u8 = 0;
const KIND_ADAPTER: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u8) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.0.push(kind);
        w
    }

    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }

    fn u32(&mut self, x: usize) {
        let x = u32::try_from(x).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn tensors<'a>(&mut self, tensors: impl ExactSizeIterator<Item = (String, &'a Tensor)>) {
        self.u32(tensors.len());
        for (name, t) in tensors {
            self.u32(name.len());
            self.0.extend_from_slice(name.as_bytes());
            self.u32(t.shape().len());
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &x in t.data() {
                self.f64(x);
            }
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Input(format!("checkpoint truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, kind: u8) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(Error::Input("not a checkpoint: bad magic".into()));
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::Input(format!("unsupported checkpoint version {version}")));
        }
        let found = self.u8()?;
        if found != kind {
            return Err(Error::Input(format!("checkpoint kind {found}, expected {kind}")));
        }
        Ok(())
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Input("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Input("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
                .ok_or_else(|| Error::Input(format!("tensor {name} shape {shape:?} exceeds the file")))?;
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Input(format!("{} trailing bytes in checkpoint", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_model(model: &LanguageModel) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer::header(KIND_MODEL);
    for x in [c.n_layers, c.d_model, c.n_heads, c.vocab_size, c.context_len] {
        w.u32(x);
    }
    w.u64(c.seed);
    w.tensors(model.named_tensors().into_iter());
    w.0
}

pub fn decode_model(bytes: &[u8]) -> Result<LanguageModel> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(KIND_MODEL)?;
    let config = ModelConfig {
        n_layers: r.u32()?,
        d_model: r.u32()?,
        n_heads: r.u32()?,
        vocab_size: r.u32()?,
        context_len: r.u32()?,
        seed: r.u64()?,
    };
    config.validate()?;
    let tensors = r.tensors()?;
    r.finish()?;
    LanguageModel::from_named(config, tensors)
}

fn adapter_tensor_name(layer: usize, target: Target, which: &str) -> String {
    format!("layers.{layer}.attn.{}.lora_{which}", target.name())
}

pub fn encode_adapter(adapters: &LoraAdapterSet) -> Vec<u8> {
    let c = adapters.config();
    let mut w = Writer::header(KIND_ADAPTER);
    w.u32(adapters.n_layers());
    w.u32(adapters.d_model());
    w.u32(c.rank);
    w.f64(c.alpha);
    w.u8(Target::mask(&c.targets));
    w.u64(c.seed);
    let named: Vec<(String, &Tensor)> = adapters
        .entries()
        .iter()
        .flat_map(|e| {
            [
                (adapter_tensor_name(e.layer, e.target, "a"), &e.a),
                (adapter_tensor_name(e.layer, e.target, "b"), &e.b),
            ]
        })
        .collect();
    w.tensors(named.into_iter());
    w.0
}

pub fn decode_adapter(bytes: &[u8]) -> Result<LoraAdapterSet> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(KIND_ADAPTER)?;
    let n_layers = r.u32()?;
    let d_model = r.u32()?;
    let config = LoraConfig {
        rank: r.u32()?,
        alpha: r.f64()?,
        targets: Target::from_mask(r.u8()?),
        seed: r.u64()?,
    };
    let mut adapters = LoraAdapterSet::for_dims(n_layers, d_model, config)?;
    let tensors = r.tensors()?;
    r.finish()?;
    let expected: Vec<(String, Vec<usize>)> = adapters
        .entries()
        .iter()
        .flat_map(|e| {
            [
                (adapter_tensor_name(e.layer, e.target, "a"), e.a.shape().to_vec()),
                (adapter_tensor_name(e.layer, e.target, "b"), e.b.shape().to_vec()),
            ]
        })
        .collect();
    if tensors.len() != expected.len() {
        return Err(Error::Input(format!(
            "adapter checkpoint holds {} tensors, layout needs {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(adapters.num_params());
    for ((name, t), (want, shape)) in tensors.iter().zip(&expected) {
        if name != want || t.shape() != shape.as_slice() {
            return Err(Error::Input(format!(
                "adapter tensor {name} {:?} where {want} {shape:?} was expected",
                t.shape()
            )));
        }
        flat.extend_from_slice(t.data());
    }
    adapters.load_flat(&flat)?;
    Ok(adapters)
}

pub fn save_model(path: &Path, model: &LanguageModel) -> Result<()> {
    Ok(std::fs::write(path, encode_model(model))?)
}

pub fn load_model(path: &Path) -> Result<LanguageModel> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_adapter(path: &Path, adapters: &LoraAdapterSet) -> Result<()> {
    Ok(std::fs::write(path, encode_adapter(adapters))?)
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapterSet> {
    decode_adapter(&std::fs::read(path)?)
}
