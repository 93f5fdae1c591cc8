//! Checkpoint file layout (little-endian):
//!
//! ```text
//! 0   magic "SRLFNET\0"
//! 8   version        u16 (= 1)
//! 10  config_len     u32
//! 14  config         JSON-encoded ModelConfig, config_len bytes
//! ..  value_count    u64
//! ..  values         f32 x value_count: trainable tensors in the order of
//!                    `SrlfNet::params`, then batch-norm running statistics
//!                    in the order of `SrlfNet::buffers`
//! ..  crc32          u32 over every preceding byte
//! ```

use std::path::Path;

use super::{param_count, ModelConfig, ModelParams};
use crate::error::{Error, IoContext, Result};
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRLFNET\0";
const VERSION: u16 = 1;

pub fn write_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(params.config())?;
    let values: Vec<&[f32]> = params.params().into_iter().chain(params.buffers()).collect();
    let count: usize = values.iter().map(|v| v.len()).sum();
    let mut buf = Vec::with_capacity(30 + config.len() + 4 * count);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for v in values.iter().flat_map(|v| v.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Parses a checkpoint. When `expected` is given, the stored config must
/// equal it before any weights are accepted.
pub fn read_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let corrupt = |reason: &str| Error::Integrity {
        path: "<checkpoint>".into(),
        reason: reason.to_string(),
    };
    if bytes.len() < 26 {
        return Err(corrupt("checkpoint is truncated"));
    }
    let body = bytes.len() - 4;
    if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().unwrap()) {
        return Err(corrupt("checkpoint checksum mismatch"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not an SRLF-Net checkpoint"));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported checkpoint version {version}")));
    }
    let config_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let config_end = 14 + config_len;
    if config_end + 8 > body {
        return Err(corrupt("checkpoint is truncated"));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[14..config_end])?;
    config.validate()?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::Config(format!(
                "checkpoint was trained with {config:?}, expected {want:?}"
            )));
        }
    }
    let count = u64::from_le_bytes(bytes[config_end..config_end + 8].try_into().unwrap()) as usize;
    let values = &bytes[config_end + 8..body];
    if values.len() != 4 * count {
        return Err(corrupt("checkpoint value count does not match its length"));
    }
    let mut params = ModelParams::init(&config, 0)?;
    let expected_count = param_count(&config) + params.buffers().iter().map(|b| b.len()).sum::<usize>();
    if count != expected_count {
        return Err(corrupt(&format!(
            "checkpoint holds {count} values, config needs {expected_count}"
        )));
    }
    let mut floats = values.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for t in params.params_mut() {
        t.iter_mut().for_each(|x| *x = floats.next().unwrap());
    }
    for t in params.buffers_mut() {
        t.iter_mut().for_each(|x| *x = floats.next().unwrap());
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_atomic(path, &write_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let bytes = std::fs::read(path).io_context(|| format!("reading checkpoint {}", path.display()))?;
    read_checkpoint(&bytes, expected).map_err(|e| match e {
        Error::Integrity { reason, .. } => Error::Integrity {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            num_views: 3,
            embed_dim: 6,
            branch_sizes: vec![4, 2],
            branch_dropout: vec![0.5, 0.6],
            fusion_sizes: vec![6, 5],
            num_classes: 4,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut net = init_model(&small(), 9).unwrap();
        net.branches[1][0].norm.running_var[2] = 3.5;
        let bytes = write_checkpoint(&net).unwrap();
        let back = read_checkpoint(&bytes, Some(&small())).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn detects_corruption_and_config_mismatch() {
        let net = init_model(&small(), 9).unwrap();
        let mut bytes = write_checkpoint(&net).unwrap();
        let other = ModelConfig {
            num_classes: 5,
            ..small()
        };
        assert!(matches!(read_checkpoint(&bytes, Some(&other)), Err(Error::Config(_))));
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        assert!(matches!(read_checkpoint(&bytes, None), Err(Error::Integrity { .. })));
        assert!(read_checkpoint(&bytes[..20], None).is_err());
    }
}
