//! Binary checkpoint format.
//!
//! ```text
//! magic       8 bytes   "PSLMCKPT"
//! version     u32 LE
//! config_len  u32 LE
//! config      config_len bytes of JSON (ModelConfig)
//! n_params    u64 LE
//! params      n_params x f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let config = serde_json::to_vec(model.config())?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(model.num_params() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given, the stored configuration
/// must match it exactly.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<ModelState> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |detail: &str| Error::Format {
        what: "checkpoint",
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    if let Some(expected) = expected {
        if *expected != config {
            return Err(Error::CheckpointMismatch(format!(
                "stored {config:?}, expected {expected:?}"
            )));
        }
    }
    let mut n = [0u8; 8];
    r.read_exact(&mut n)?;
    let n = u64::from_le_bytes(n) as usize;
    let mut params = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(bad("trailing bytes"));
    }
    ModelState::from_parts(config, params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
