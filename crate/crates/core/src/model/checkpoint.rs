//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "MGEN" | u32 version | u32 n | n bytes of JSON config | u64 count | count × f64
//! ```

use thiserror::Error;

use super::{ModelConfig, Params, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGEN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated: needed {needed} more bytes, {available} left")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint config unreadable: {0}")]
    Config(String),
    #[error("checkpoint integrity: config implies {expected} weights, payload holds {found}")]
    Integrity { expected: usize, found: usize },
}

pub fn save_checkpoint<F: Real>(params: &Params<F>) -> Vec<u8> {
    let config = serde_json::to_vec(params.config()).expect("config serializes");
    let mut out = Vec::with_capacity(20 + config.len() + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated {
                needed: n,
                available: self.bytes.len(),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Params<f64>, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let expected = super::Layout::new(&config).len();
    let count = r.u64()? as usize;
    if count != expected {
        return Err(CheckpointError::Integrity {
            expected,
            found: count,
        });
    }
    let payload = r.take(count.checked_mul(8).ok_or(CheckpointError::Integrity {
        expected,
        found: count,
    })?)?;
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Integrity {
            expected,
            found: count + r.bytes.len() / 8,
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Params::from_values(&config, values).map_err(|e| CheckpointError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> Params<f64> {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_seq_len: 8,
            ..ModelConfig::toy()
        };
        init_params(&config, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = small();
        let back = load_checkpoint(&save_checkpoint(&p)).unwrap();
        assert_eq!(back.config(), p.config());
        assert!(back.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = save_checkpoint(&small());
        bytes[0] = b'X';
        assert_eq!(load_checkpoint(&bytes).unwrap_err(), CheckpointError::BadMagic);
        assert_eq!(load_checkpoint(b"MG").unwrap_err(), CheckpointError::BadMagic);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = save_checkpoint(&small());
        bytes[4] = 9;
        assert_eq!(load_checkpoint(&bytes).unwrap_err(), CheckpointError::Version(9));
    }

    #[test]
    fn declared_count_must_match_config() {
        let p = small();
        let mut bytes = save_checkpoint(&p);
        let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count_at = 12 + config_len;
        bytes[count_at..count_at + 8].copy_from_slice(&((p.len() - 1) as u64).to_le_bytes());
        assert_eq!(
            load_checkpoint(&bytes).unwrap_err(),
            CheckpointError::Integrity { expected: p.len(), found: p.len() - 1 }
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = save_checkpoint(&small());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(load_checkpoint(&bytes), Err(CheckpointError::Truncated { .. })));
        let mut bytes = save_checkpoint(&small());
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(load_checkpoint(&bytes), Err(CheckpointError::Integrity { .. })));
    }
}
