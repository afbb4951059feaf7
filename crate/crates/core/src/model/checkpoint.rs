//! Model persistence: one file holding the versioned config header
//! and every named parameter tensor in construction order, with a
//! content fingerprint that gates decoding. Load/save round-trips
//! bit for bit; the bitstream header stores the fingerprint so a
//! decoder can refuse weights other than the ones that encoded.

use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::CodecModel;

const MAGIC: &[u8; 4] = b"ETFW";
const VERSION: u32 = 1;
/// f64 little-endian; the only dtype stored today.
const DTYPE_F64: u8 = 0;

/// Canonical byte form: header, config text, then each tensor as
/// (name, dtype, rank, extents, payload). Fingerprints and files are
/// both derived from these bytes, so equal models mean equal hashes.
pub fn serialize_model(model: &CodecModel<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        let shape = tensor.shape();
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in tensor.to_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// First 8 bytes of the SHA-256 of the canonical serialization,
/// big-endian. Identity gate, not a security boundary.
pub fn model_fingerprint(model: &CodecModel<f64>) -> u64 {
    let digest = Sha256::digest(serialize_model(model));
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn save_model(path: &Path, model: &CodecModel<f64>) -> Result<()> {
    let bytes = serialize_model(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn take_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn deserialize_model(bytes: &[u8]) -> Result<CodecModel<f64>> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.take_u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.take_u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("checkpoint config is not UTF-8".into()))?;
    let cfg = ModelConfig::from_kv(cfg_text)?;
    // seed is irrelevant: every tensor is overwritten below
    let model = CodecModel::<f64>::from_config(&cfg, 0)?;
    let params = model.parameters();
    let count = r.take_u32()? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, architecture wants {}",
            params.len()
        )));
    }
    for (name, tensor) in &params {
        let name_len = r.take_u16()? as usize;
        let stored = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if stored != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: file has {stored}, architecture wants {name}"
            )));
        }
        let dtype = r.take_u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {dtype} for {name}")));
        }
        let rank = r.take_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.take_u32()? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file {shape:?}, architecture {:?}",
                tensor.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensor.set_data(&data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<CodecModel<f64>> {
    let bytes = std::fs::read(path)?;
    deserialize_model(&bytes)
}
