//! Checkpoint container.
//!
//! ```text
//! magic        8 bytes  "MTILCKPT"
//! version      u32
//! record       u32 length + UTF-8 key=value lines (policy config, then meta.* keys)
//! param count  u32
//! per param:   u32 name length + name, u32 rank, u64 dims[rank], f64 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Policy, PolicyConfig};
use crate::binio::{put_f64s, put_string, put_u32, put_u64, Reader};
use crate::config::KvRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A policy plus free-form metadata (source environment, training seed, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy: Policy,
    pub meta: KvRecord,
}

impl Checkpoint {
    pub fn new(policy: Policy) -> Self {
        Checkpoint {
            policy,
            meta: KvRecord::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut record = self.policy.config().to_record();
        for (k, v) in self.meta.iter() {
            record.set(&format!("meta.{k}"), v);
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_string(&mut out, &record.render());
        let params = self.policy.named_params();
        put_u32(&mut out, params.len() as u32);
        for (name, t) in params {
            put_string(&mut out, &name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let record = KvRecord::parse(&r.string()?)?;
        let mut meta = KvRecord::new();
        for (k, v) in record.iter() {
            if let Some(key) = k.strip_prefix("meta.") {
                meta.set(key, v);
            }
        }
        let config = PolicyConfig::from_record(&record)?;
        let mut policy = Policy::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = policy
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "{count} parameters stored, config implies {}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let name = r.string()?;
            if &name != want_name {
                return Err(Error::Format(format!("expected parameter '{want_name}', found '{name}'")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            if &shape != want_shape {
                return Err(Error::Format(format!("parameter '{name}' has shape {shape:?}, expected {want_shape:?}")));
            }
            let n = shape.iter().product();
            values.push(Tensor::new(shape, r.f64s(n)?)?);
        }
        r.finish()?;
        policy.load_params(&values)?;
        Ok(Checkpoint { policy, meta })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
