//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLMC" | version: u32 | header_len: u32 | header: JSON {config, precision}
//! | tensor_count: u32
//! | per tensor: name_len: u32 | name | rank: u32 | dims: u32 * rank | values
//! | crc32 of every preceding byte: u32
//! ```
//!
//! Values are IEEE-754 `f32` or `f64` according to the header's precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmError, ModelConfig, ModelParameters, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"CLMC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    precision: Precision,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

pub fn write_checkpoint(params: &ModelParameters) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header { config: params.config.clone(), precision: params.precision })
        .expect("header serializes");
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);
    put_u32(&mut out, params.tensors.len());
    for t in &params.tensors {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.dims.len());
        for &d in &t.dims {
            put_u32(&mut out, d);
        }
        match params.precision {
            Precision::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Precision::F32 => t.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LmError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, LmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn fmt_err(m: impl Into<String>) -> LmError {
    LmError::Format(m.into())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParameters, LmError> {
    if bytes.len() < 12 {
        return Err(fmt_err("truncated"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(fmt_err("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let header_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| fmt_err(format!("header: {e}")))?;
    header.config.validate()?;
    let layout = header.config.layout();
    let count = r.u32()?;
    if count != layout.len() {
        return Err(fmt_err(format!("expected {} tensors, found {count}", layout.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dims, _) in layout {
        let len = r.u32()?;
        let found = std::str::from_utf8(r.take(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        if found != name {
            return Err(fmt_err(format!("expected tensor {name}, found {found}")));
        }
        let rank = r.u32()?;
        let found_dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if found_dims != dims {
            return Err(fmt_err(format!("tensor {name}: dims {found_dims:?}, expected {dims:?}")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match header.precision {
            Precision::F64 => {
                r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
            }
            Precision::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(format!("tensor {name} has non-finite values")));
        }
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(fmt_err("trailing bytes"));
    }
    Ok(ModelParameters { config: header.config, precision: header.precision, tensors })
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), LmError> {
    // Write-then-rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, write_checkpoint(params))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, LmError> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Family};

    fn sample(family: Family) -> ModelParameters {
        let config = ModelConfig {
            family,
            vocab_size: 12,
            embedding_dim: 8,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_length: 6,
            init_scale: 0.5,
        };
        init_model(&config, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for family in [Family::Gru, Family::Transformer] {
            let p = sample(family);
            assert_eq!(read_checkpoint(&write_checkpoint(&p)).unwrap(), p);
            let mut q = p.clone();
            q.precision = Precision::F32;
            q.quantize();
            let bytes = write_checkpoint(&q);
            assert!(bytes.len() < write_checkpoint(&p).len());
            assert_eq!(read_checkpoint(&bytes).unwrap(), q);
        }
    }

    #[test]
    fn any_corruption_is_a_format_error() {
        let bytes = write_checkpoint(&sample(Family::Gru));
        for i in [0, 3, 4, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(read_checkpoint(&bad), Err(LmError::Format(_))), "byte {i}");
        }
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 9]), Err(LmError::Format(_))));
        assert!(matches!(read_checkpoint(&[]), Err(LmError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_rejected_even_with_valid_crc() {
        let mut bytes = write_checkpoint(&sample(Family::Gru));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let err = read_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn toy_checkpoint_is_small() {
        let bytes = write_checkpoint(&sample(Family::Transformer));
        assert!(bytes.len() < 1 << 20);
        let p = sample(Family::Gru);
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert!(header_len > 0);
        assert!(write_checkpoint(&p).len() >= p.num_parameters() * 8);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.clmc");
        let p = sample(Family::Transformer);
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
