//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "SVAP"                    magic
//! u32                       format version (1)
//! u32 + bytes               model configuration as TOML
//! [u8; 32]                  SHA-256 of the configuration bytes
//! u64                       epoch of the stored parameters
//! f64                       best validation loss
//! u32                       tensor count, then per tensor:
//!   u32 + bytes             name
//!   u8                      dtype (0 = f64, 1 = f32)
//!   u32 + u64 × ndim        shape
//!   payload                 values in row-major order
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"SVAP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Values are rounded to `f32` when written.
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub precision: Precision,
}

/// Hex SHA-256 of the configuration's TOML form.
pub fn config_fingerprint(config: &ModelConfig) -> Result<String> {
    let text = config_text(config)?;
    Ok(hex(Sha256::digest(text.as_bytes()).as_slice()))
}

fn config_text(config: &ModelConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Checkpoint(format!("cannot encode configuration: {e}")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Model, epoch: usize, best_val_loss: f64) -> Self {
        Checkpoint {
            model,
            epoch,
            best_val_loss,
            precision: Precision::F64,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = config_text(&self.model.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut out, text.as_bytes());
        out.extend_from_slice(Sha256::digest(text.as_bytes()).as_slice());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        let tensors = self.model.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(match self.precision {
                Precision::F64 => 0,
                Precision::F32 => 1,
            });
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match self.precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}; this build reads version {FORMAT_VERSION}"
            )));
        }
        let text = r.string()?;
        let digest = r.take(32)?;
        if digest != Sha256::digest(text.as_bytes()).as_slice() {
            return Err(Error::Checkpoint(
                "configuration fingerprint does not match the stored configuration".into(),
            ));
        }
        let config: ModelConfig = toml::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
        let epoch = r.u64()? as usize;
        let best_val_loss = f64::from_le_bytes(r.array()?);
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        let mut precision = Precision::F64;
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Parse(format!("tensor `{name}` is too large")))?;
            let data = match dtype {
                0 => (0..len).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?,
                1 => {
                    precision = Precision::F32;
                    (0..len)
                        .map(|_| r.array().map(|b| f64::from(f32::from_le_bytes(b))))
                        .collect::<Result<Vec<_>>>()?
                }
                other => {
                    return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {other}")))
                }
            };
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: Model::from_named_tensors(config, tensors)?,
            epoch,
            best_val_loss,
            precision,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Parse(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("checkpoint string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::head::HeadConfig;
    use crate::pooling::{PoolingConfig, PoolingKind};

    fn model() -> Model {
        let mut cfg = ModelConfig::new(3);
        cfg.encoder = EncoderConfig { channels: [2, 2, 4] };
        cfg.pooling = PoolingConfig::new(PoolingKind::Mha, 8);
        cfg.head = HeadConfig {
            fc1: 8,
            embedding: 5,
            dropout: 0.2,
        };
        Model::new(cfg, 4).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = Checkpoint::new(model(), 7, 0.25);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn f32_payloads() {
        let mut ck = Checkpoint::new(model(), 1, 1.5);
        ck.precision = Precision::F32;
        let bytes = ck.to_bytes().unwrap();
        assert!(bytes.len() < Checkpoint::new(model(), 1, 1.5).to_bytes().unwrap().len());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.precision, Precision::F32);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let w = back.model.head.fc1_weight.data()[0];
        assert_eq!(w, ck.model.head.fc1_weight.data()[0] as f32 as f64);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Checkpoint::new(model(), 0, 1.0).to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Checkpoint(_))));
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("version 99")), "{err}");
    }

    #[test]
    fn truncation_is_parse_error() {
        let bytes = Checkpoint::new(model(), 0, 1.0).to_bytes().unwrap();
        for cut in [6, 40, bytes.len() - 3] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Parse(_))), "cut {cut}");
        }
    }

    #[test]
    fn tampered_config_fails_fingerprint() {
        let mut bytes = Checkpoint::new(model(), 0, 1.0).to_bytes().unwrap();
        let text_start = 12;
        let pos = bytes[text_start..].iter().position(|&b| b == b'3').unwrap() + text_start;
        bytes[pos] = b'4';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("fingerprint")), "{err}");
        assert_eq!(config_fingerprint(&model().config).unwrap().len(), 64);
    }
}
