//! `CAPCKPT1` checkpoint container.
//!
//! ```text
//! magic    8 bytes  "CAPCKPT1"
//! version  u32      1
//! count    u32      number of sections
//! section  tag[4] | u64 payload length | payload
//! ```
//!
//! Sections, in order: `META` (JSON: step, fingerprint, model config, seed),
//! `PARM` (parameters), `ADM1`/`ADM2` (Adam first/second moments) and `RNGS`
//! (u64 seed, u64 next step). A tensor table is a u32 count followed by
//! records of `u16 name length | name | u8 dtype (0 = f32, 1 = f64) |
//! u64 element count | little-endian values`. All integers are
//! little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::params::Parameterized;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"CAPCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub fingerprint: String,
    pub model: EncoderModel<f32>,
    pub optimizer: Adam<f32>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    fingerprint: String,
    model_config: ModelConfig,
    adam_updates: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            step: self.step,
            fingerprint: self.fingerprint.clone(),
            model_config: self.model.config.clone(),
            adam_updates: self.optimizer.updates,
        };
        let sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
            (b"META", serde_json::to_vec(&meta).expect("meta serializes")),
            (b"PARM", tensor_table(&self.model)),
            (b"ADM1", tensor_table(&self.optimizer.first)),
            (b"ADM2", tensor_table(&self.optimizer.second)),
            (b"RNGS", {
                let mut v = self.seed.to_le_bytes().to_vec();
                v.extend_from_slice(&self.step.to_le_bytes());
                v
            }),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    /// Parses a checkpoint; when `expected_fingerprint` is given it must match.
    pub fn from_bytes(bytes: &[u8], expected_fingerprint: Option<&str>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = std::collections::BTreeMap::new();
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            sections.insert(tag, r.take(len)?);
        }
        let get = |tag: &[u8; 4]| {
            sections
                .get(tag)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing section {}", String::from_utf8_lossy(tag))))
        };
        let meta: Meta = serde_json::from_slice(get(b"META")?)?;
        if let Some(expected) = expected_fingerprint {
            if expected != meta.fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: expected.to_string(),
                    found: meta.fingerprint,
                });
            }
        }
        let mut model = EncoderModel::<f32>::new(&meta.model_config, 0)?;
        read_tensor_table(get(b"PARM")?, &mut model)?;
        let mut optimizer = Adam::new(&model);
        optimizer.updates = meta.adam_updates;
        read_tensor_table(get(b"ADM1")?, &mut optimizer.first)?;
        read_tensor_table(get(b"ADM2")?, &mut optimizer.second)?;
        let mut rng = Reader {
            bytes: get(b"RNGS")?,
            pos: 0,
        };
        let seed = rng.u64()?;
        Ok(Self {
            step: meta.step,
            fingerprint: meta.fingerprint,
            model,
            optimizer,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected_fingerprint: Option<&str>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_fingerprint)
    }
}

fn tensor_table<T: Real, P: Parameterized<T>>(p: &P) -> Vec<u8> {
    let params = p.params();
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, data) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data {
            v.write_le(&mut out);
        }
    }
    out
}

fn read_tensor_table<T: Real, P: Parameterized<T>>(bytes: &[u8], into: &mut P) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()? as usize;
    let mut params = into.params_mut();
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {count} does not match model ({})",
            params.len()
        )));
    }
    for (name, data) in params.iter_mut() {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let found = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        if &found != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {found}")));
        }
        let dtype = r.take(1)?[0];
        let numel = r.u64()? as usize;
        if numel != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: {numel} values, expected {}",
                data.len()
            )));
        }
        match dtype {
            0 => {
                let raw = r.take(numel * 4)?;
                for (d, c) in data.iter_mut().zip(raw.chunks_exact(4)) {
                    *d = T::lit(f32::read_le(c) as f64);
                }
            }
            1 => {
                let raw = r.take(numel * 8)?;
                for (d, c) in data.iter_mut().zip(raw.chunks_exact(8)) {
                    *d = T::lit(f64::read_le(c));
                }
            }
            other => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {other}"))),
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
