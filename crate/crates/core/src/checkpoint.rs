//! Binary parameter checkpoints.
//!
//! Layout (little-endian): the magic `GILCKPT\0`, `u32` version, `u64` hash
//! of the run config, `u32` block count, then per block `u32` ndim (always
//! 2), `u64` rows, `u64` cols and `rows · cols` `f64` values in row-major
//! order. Blocks follow [`Params::blocks`](crate::model::Params::blocks).

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bytes::ByteCursor;
use crate::model::GilParameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GILCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: written for config {found:016x}, expected {expected:016x}")]
    ConfigMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
}

pub fn encode(params: &GilParameters, config_hash: u64) -> Vec<u8> {
    let blocks = params.blocks();
    let mut out = Vec::with_capacity(24 + params.num_scalars() * 8 + blocks.len() * 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for t in blocks {
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint into the layout of `template`; every block shape must
/// match. Returns the parameters and the stored config hash.
pub fn decode(bytes: &[u8], template: &GilParameters) -> Result<(GilParameters, u64), String> {
    let mut cur = ByteCursor::new(bytes);
    let truncated = || "file is truncated".to_string();
    if cur.take(8) != Some(&MAGIC[..]) {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hash = cur.u64().ok_or_else(truncated)?;
    let count = cur.u32().ok_or_else(truncated)? as usize;
    let shapes = template.shapes();
    if count != shapes.len() {
        return Err(format!("{count} blocks, model expects {}", shapes.len()));
    }
    let mut blocks = Vec::with_capacity(count);
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let ndim = cur.u32().ok_or_else(truncated)?;
        let r = cur.u64().ok_or_else(truncated)? as usize;
        let c = cur.u64().ok_or_else(truncated)? as usize;
        if ndim != 2 || (r, c) != (rows, cols) {
            return Err(format!(
                "block {i} has shape {r}×{c} (ndim {ndim}), model expects {rows}×{cols}"
            ));
        }
        let len = r.checked_mul(c).ok_or_else(truncated)?;
        if cur.remaining() / 8 < len {
            return Err(truncated());
        }
        let data: Vec<f64> = (0..len).map(|_| cur.f64().expect("length checked")).collect();
        blocks.push(Tensor::from_vec(r, c, data));
    }
    if !cur.is_empty() {
        return Err(format!("{} trailing bytes", cur.remaining()));
    }
    Ok((template.with_blocks(blocks), hash))
}

pub fn save(path: &Path, params: &GilParameters, config_hash: u64) -> Result<(), CheckpointError> {
    fs::write(path, encode(params, config_hash)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a checkpoint, checking its layout against `template` and its
/// config hash against `expected_hash`.
pub fn load(
    path: &Path,
    template: &GilParameters,
    expected_hash: u64,
) -> Result<GilParameters, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (params, found) = decode(&bytes, template).map_err(|reason| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason,
    })?;
    if found != expected_hash {
        return Err(CheckpointError::ConfigMismatch {
            path: path.to_path_buf(),
            expected: expected_hash,
            found,
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Encoder, Pooling, Readout, Weighting};

    fn arch(widths: Vec<usize>) -> Architecture {
        Architecture {
            feature_dim: 5,
            num_classes: 3,
            encoder: Encoder::Chebyshev {
                widths,
                order: 2,
                pooling: Pooling::Mean,
            },
            readout: Readout::Relation(Weighting::Reachability),
            steps: 3,
            phi_w_hidden: 4,
            dropout: 0.5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = GilParameters::init(&arch(vec![4, 3]), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &p, 0xabc).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"GILCKPT\0");
        assert_eq!(bytes.len(), 24 + p.num_blocks() * 20 + p.num_scalars() * 8);
        let q = load(&path, &p, 0xabc).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn mismatches_are_rejected() {
        let p = GilParameters::init(&arch(vec![4, 3]), 9);
        let bytes = encode(&p, 1);
        let other = GilParameters::init(&arch(vec![4, 2]), 9);
        assert!(decode(&bytes, &other).unwrap_err().contains("expects"));
        assert!(decode(&bytes[..bytes.len() - 3], &p).unwrap_err().contains("truncated"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, &p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, &p).unwrap_err().contains("magic"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &p, 1).unwrap();
        assert!(matches!(
            load(&path, &p, 2),
            Err(CheckpointError::ConfigMismatch { found: 1, expected: 2, .. })
        ));
    }
}
