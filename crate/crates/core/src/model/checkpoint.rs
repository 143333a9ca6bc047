//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! magic (8 bytes), version, config length + config JSON, tensor count,
//! then per tensor: name length + UTF-8 name, rows, cols, `rows·cols`
//! little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Result, UfoError};
use crate::tensorops::DenseArray;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UFOCKPT\0";
const VERSION: u32 = 1;
/// Guards allocations driven by a corrupt length field.
const MAX_FIELD: usize = 1 << 28;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| UfoError::Checkpoint(format!("field {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| UfoError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    let v = u32::from_le_bytes(b) as usize;
    if v > MAX_FIELD {
        return Err(UfoError::Checkpoint(format!("implausible field value {v}")));
    }
    Ok(v)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| UfoError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    let cfg = serde_json::to_vec(model.config()).map_err(|e| UfoError::Checkpoint(e.to_string()))?;
    put_u32(&mut w, cfg.len())?;
    w.write_all(&cfg)?;
    put_u32(&mut w, model.params().len())?;
    for (name, value) in model.params().iter() {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, value.rows())?;
        put_u32(&mut w, value.cols())?;
        let mut bytes = Vec::with_capacity(value.len() * 4);
        for v in value.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, validating every tensor against the layout implied
/// by the stored configuration.
pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    if r.read_exact(&mut magic).is_err() || &magic != CHECKPOINT_MAGIC {
        return Err(UfoError::Checkpoint("bad checkpoint header".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(UfoError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = get_u32(&mut r)?;
    let config: ModelConfig = serde_json::from_slice(&get_bytes(&mut r, len)?)
        .map_err(|e| UfoError::Checkpoint(format!("bad config block: {e}")))?;
    let mut model = Model::new(config, 0).map_err(|e| UfoError::Checkpoint(format!("stored config is invalid: {e}")))?;
    let count = get_u32(&mut r)?;
    if count != model.params().len() {
        return Err(UfoError::Checkpoint(format!(
            "{count} tensors stored, configuration needs {}",
            model.params().len()
        )));
    }
    for k in 0..count {
        let n = get_u32(&mut r)?;
        let name = String::from_utf8(get_bytes(&mut r, n)?)
            .map_err(|_| UfoError::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (get_u32(&mut r)?, get_u32(&mut r)?);
        let id = model.params().ids().nth(k).expect("count checked");
        let expected = model.params().get(id);
        if model.params().name(id) != name || expected.shape() != (rows, cols) {
            return Err(UfoError::Checkpoint(format!(
                "tensor {k} is '{name}' {rows}x{cols}, expected '{}' {}x{}",
                model.params().name(id),
                expected.rows(),
                expected.cols()
            )));
        }
        let bytes = get_bytes(&mut r, rows * cols * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        *model.params_mut().get_mut(id) = DenseArray::from_vec(rows, cols, data)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(UfoError::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
