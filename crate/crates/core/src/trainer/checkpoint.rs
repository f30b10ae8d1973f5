//! Training checkpoints: encoder weights, Adam moments, progress and the
//! configuration echo.
//!
//! ```text
//! magic     4 bytes  "MC3C"
//! version   u32      1
//! cfg_len   u32      length of the JSON config echo
//! cfg       cfg_len bytes, UTF-8 JSON
//! stage     u8       1 = align, 2 = refine
//! epoch     u32      next epoch to run within the stage
//! step      u64      global step counter
//! w_len     u64      length of the embedded weight file
//! weights   w_len bytes in the MC3W layout
//! adam      4 x f64  lr, beta1, beta2, eps
//! tensors   u32      number of moment pairs, in encoder tensor order
//! per tensor: u64 step, u32 rows, u32 cols, rows*cols f64 first moment,
//!             rows*cols f64 second moment
//! ```
//!
//! Little-endian throughout.

use std::path::Path;

use super::{Stage, TrainConfig};
use crate::binio::{read_file, write_atomic, LeReader, LeWriter};
use crate::encoders::{EncoderDims, EncoderParams};
use crate::error::{Mc3Error, Result};
use crate::math::{AdamConfig, AdamState, Matrix};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MC3C";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub stage: Stage,
    /// Next epoch to run within `stage`.
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub progress: Progress,
    pub encoders: EncoderParams,
    pub optimizer: Vec<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let weights = self.encoders.to_bytes();
        let mut w = LeWriter::new(Vec::new());
        let _ = (|| -> std::io::Result<()> {
            w.bytes(&CHECKPOINT_MAGIC)?;
            w.u32(CHECKPOINT_VERSION)?;
            w.u32(cfg.len() as u32)?;
            w.bytes(&cfg)?;
            w.u8(self.progress.stage.number())?;
            w.u32(self.progress.epoch as u32)?;
            w.u64(self.progress.step)?;
            w.u64(weights.len() as u64)?;
            w.bytes(&weights)?;
            let a = self
                .optimizer
                .first()
                .map(|s| s.config)
                .unwrap_or(AdamConfig {
                    lr: self.config.lr,
                    ..AdamConfig::default()
                });
            w.f64s(&[a.lr, a.beta1, a.beta2, a.eps])?;
            w.u32(self.optimizer.len() as u32)?;
            for s in &self.optimizer {
                w.u64(s.step())?;
                let m = s.first_moment();
                w.u32(m.rows() as u32)?;
                w.u32(m.cols() as u32)?;
                w.f64s(m.as_slice())?;
                w.f64s(s.second_moment().as_slice())?;
            }
            Ok(())
        })();
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Mc3Error::CorruptCheckpoint(what.to_string());
        let mut r = LeReader::new(buf);
        let magic = r.magic().ok_or_else(|| corrupt("missing header"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt(&format!("bad magic {magic:?}")));
        }
        let version = r.u32().ok_or_else(|| corrupt("missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Mc3Error::VersionMismatch(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let cfg_len = r.u32().ok_or_else(|| corrupt("truncated config"))? as usize;
        let cfg_bytes = r.take(cfg_len).ok_or_else(|| corrupt("truncated config"))?;
        let config: TrainConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| corrupt(&format!("config echo: {e}")))?;
        let stage = r
            .u8()
            .and_then(Stage::from_number)
            .ok_or_else(|| corrupt("bad stage"))?;
        let epoch = r.u32().ok_or_else(|| corrupt("truncated progress"))? as usize;
        let step = r.u64().ok_or_else(|| corrupt("truncated progress"))?;
        let w_len = r.u64().ok_or_else(|| corrupt("truncated weights"))? as usize;
        let w_bytes = r.take(w_len).ok_or_else(|| corrupt("truncated weights"))?;
        let encoders = EncoderParams::from_bytes(w_bytes).map_err(|e| match e {
            Mc3Error::VersionMismatch(m) => Mc3Error::VersionMismatch(m),
            other => corrupt(&other.to_string()),
        })?;
        let a = r.f64s(4).ok_or_else(|| corrupt("truncated optimizer"))?;
        let adam = AdamConfig {
            lr: a[0],
            beta1: a[1],
            beta2: a[2],
            eps: a[3],
        };
        let n = r.u32().ok_or_else(|| corrupt("truncated optimizer"))? as usize;
        let tensors = encoders.tensors();
        if n != tensors.len() {
            return Err(corrupt(&format!(
                "{n} optimizer slots for {} parameter tensors",
                tensors.len()
            )));
        }
        let mut optimizer = Vec::with_capacity(n);
        for t in tensors {
            let st = r.u64().ok_or_else(|| corrupt("truncated optimizer"))?;
            let rows = r.u32().ok_or_else(|| corrupt("truncated optimizer"))? as usize;
            let cols = r.u32().ok_or_else(|| corrupt("truncated optimizer"))? as usize;
            if (rows, cols) != t.shape() {
                return Err(corrupt("optimizer moment shape does not match parameters"));
            }
            let m = r.f64s(rows * cols).ok_or_else(|| corrupt("truncated optimizer"))?;
            let v = r.f64s(rows * cols).ok_or_else(|| corrupt("truncated optimizer"))?;
            optimizer.push(AdamState::from_parts(
                adam,
                Matrix::new(rows, cols, m)?,
                Matrix::new(rows, cols, v)?,
                st,
            )?);
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            progress: Progress { stage, epoch, step },
            encoders,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Fails with `VersionMismatch` when the stored encoders do not have the
    /// expected shapes.
    pub fn check_compatible(&self, expected: &EncoderDims) -> Result<()> {
        let have = self.encoders.dims();
        if have.latent != expected.latent {
            return Err(Mc3Error::VersionMismatch(format!(
                "checkpoint latent dim {} but {} was requested",
                have.latent, expected.latent
            )));
        }
        if have != *expected {
            return Err(Mc3Error::VersionMismatch(format!(
                "checkpoint encoder dims {have:?} differ from requested {expected:?}"
            )));
        }
        Ok(())
    }
}

/// Reads a checkpoint written by the trainer.
pub fn resume(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}
