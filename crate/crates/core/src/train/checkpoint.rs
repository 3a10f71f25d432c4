//! Binary checkpoint: `b"OTCK"`, `u32` version, `u64` step, 32-byte config
//! hash, `u64` seed, `u64` optimizer step, `u32` parameter count, then per
//! parameter its name (`u32` length + UTF-8) followed by the value, first
//! moment and second moment tensors.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::optim::Moments;
use crate::synth::write_atomic;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"OTCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed optimizer steps.
    pub step: usize,
    pub config_hash: [u8; 32],
    /// Base seed; per-step randomness derives from `(seed, step)`.
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub moments: Moments,
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::format(format!("checkpoint: {}", e))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.moments.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let zeros = vec![0.0; value.numel()];
            let m = self.moments.m.get(name).unwrap_or(&zeros);
            let v = self.moments.v.get(name).unwrap_or(&zeros);
            write_tensor(value, &mut out).expect("vec write");
            for buf in [m, v] {
                let t = Tensor::new(vec![buf.len()], buf.clone()).expect("1-d");
                write_tensor(&t, &mut out).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(buf);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let mut w4 = [0u8; 4];
        let mut w8 = [0u8; 8];
        r.read_exact(&mut w4).map_err(fmt_err)?;
        let version = u32::from_le_bytes(w4);
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", version)));
        }
        r.read_exact(&mut w8).map_err(fmt_err)?;
        let step = u64::from_le_bytes(w8) as usize;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(fmt_err)?;
        r.read_exact(&mut w8).map_err(fmt_err)?;
        let seed = u64::from_le_bytes(w8);
        r.read_exact(&mut w8).map_err(fmt_err)?;
        let adam_step = u64::from_le_bytes(w8);
        r.read_exact(&mut w4).map_err(fmt_err)?;
        let count = u32::from_le_bytes(w4) as usize;
        let mut params = ParamStore::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for _ in 0..count {
            r.read_exact(&mut w4).map_err(fmt_err)?;
            let len = u32::from_le_bytes(w4) as usize;
            if len > buf.len() {
                return Err(Error::format("checkpoint: parameter name length out of range"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(fmt_err)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint: name is not UTF-8"))?;
            let value: Tensor<f32> = read_tensor(&mut r).map_err(fmt_err)?;
            let mt: Tensor<f32> = read_tensor(&mut r).map_err(fmt_err)?;
            let vt: Tensor<f32> = read_tensor(&mut r).map_err(fmt_err)?;
            if mt.numel() != value.numel() || vt.numel() != value.numel() {
                return Err(Error::format(format!("checkpoint: moment size mismatch for `{}`", name)));
            }
            m.insert(name.clone(), mt.into_data());
            v.insert(name.clone(), vt.into_data());
            params.insert(name, value)?;
        }
        if (r.position() as usize) != buf.len() {
            return Err(Error::format("checkpoint: trailing bytes"));
        }
        Ok(Self {
            step,
            config_hash,
            seed,
            params,
            moments: Moments { step: adam_step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Errors unless the checkpoint was written under `hash` (or `force`).
    pub fn check_hash(&self, hash: &[u8; 32], force: bool) -> Result<()> {
        if &self.config_hash != hash && !force {
            return Err(Error::config(
                "checkpoint was written with a different configuration (pass --force to override)",
            ));
        }
        Ok(())
    }
}

/// Writes the config next to a checkpoint so `eval` and `track` can
/// rebuild the model.
pub fn write_config(dir: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(dir.join("config.toml"))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
