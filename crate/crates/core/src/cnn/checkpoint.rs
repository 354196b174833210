//! `LPXM` checkpoints: magic | version u16 | D u16 | the eight parameter
//! tensors in fixed order as little-endian `f32`, row-major.

use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_bytes, sha256_hex};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LPXM";
const VERSION: u16 = 1;

pub fn encode_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim as u16).to_le_bytes());
    for t in params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams<f32>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LPXM",
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut params = ModelParams::<f32>::zeros(dim)
        .map_err(|_| Error::Corrupt(format!("checkpoint dimension {dim}")))?;
    let expected = 8 + 4 * params.num_params();
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "checkpoint has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - expected
        )));
    }
    let mut words = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in &mut t.data {
            *v = words.next().expect("length checked");
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint"));
    }
    Ok(params)
}

/// Writes a checkpoint atomically and returns its SHA-256 digest.
pub fn write_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<String> {
    let bytes = encode_checkpoint(params);
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    decode_checkpoint(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::init_params;

    #[test]
    fn round_trip() {
        let p = init_params(16, 9).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(bytes.len(), 8 + 4 * p.num_params());
        assert_eq!(decode_checkpoint(&bytes, Path::new("m")).unwrap(), p);
        assert!(matches!(
            decode_checkpoint(&bytes[..100], Path::new("m")),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(decode_checkpoint(&bad, Path::new("m")), Err(Error::BadMagic { .. })));
    }
}
