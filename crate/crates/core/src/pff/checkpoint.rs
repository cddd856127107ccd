//! `.pffc` parameter checkpoints.
//!
//! Little-endian: magic `"PFFC"`, version u32 = 1, then records until EOF,
//! each `name_len u32, name (UTF-8), rank u32, extents u32 × rank, f64 payload`.

use std::fs;
use std::path::Path;

use super::{PffError, Result};
use crate::embedding::{ByteReader, EmbeddingError, FORMAT_VERSION};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFFC";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PffError + '_ {
    move |source| PffError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(e: EmbeddingError) -> PffError {
    match e {
        EmbeddingError::Format { offset, message } => PffError::Checkpoint { offset, message },
        other => PffError::Embedding(other),
    }
}

pub fn checkpoint_bytes(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, checkpoint_bytes(tensors)).map_err(io(path))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC).map_err(fmt_err)?;
    r.version().map_err(fmt_err)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let at = r.offset();
        let len = r.u32("name length").map_err(fmt_err)? as usize;
        let name = std::str::from_utf8(r.take(len, "name").map_err(fmt_err)?)
            .map_err(|_| PffError::Checkpoint {
                offset: at + 4,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank").map_err(fmt_err)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent").map_err(fmt_err)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_at = r.offset();
        let data = r.f64s(n, "payload").map_err(fmt_err)?;
        let t = Tensor::new(&shape, data).map_err(|e| PffError::Checkpoint {
            offset: payload_at,
            message: format!("tensor {name:?}: {e}"),
        })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    parse_checkpoint(&fs::read(path).map_err(io(path))?)
}

/// Copies checkpoint values into `targets`, matching by name and shape.
pub fn restore(targets: Vec<(String, &mut Tensor)>, records: &[(String, Tensor)]) -> Result<()> {
    if targets.len() != records.len() {
        return Err(PffError::Contract(format!(
            "checkpoint holds {} tensors, model expects {}",
            records.len(),
            targets.len()
        )));
    }
    for (name, t) in targets {
        let (_, src) = records
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PffError::Contract(format!("checkpoint lacks tensor {name:?}")))?;
        if src.shape() != t.shape() {
            return Err(PffError::Contract(format!(
                "tensor {name:?}: checkpoint shape {:?}, model shape {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}
