//! Shared binary tensor container and structured-text sidecars.
//!
//! Container layout, little-endian throughout:
//! `magic "OTCY0001" | dtype u32 (1 = f32, 2 = f64) | rank u32 | dims u64^rank
//! | raw values in C order`. Sidecars are TOML files next to the tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OTCY0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }
}

/// Writes an array with the given element type (f64 data is narrowed when
/// `dtype` is `F32`).
pub fn write_tensor(path: &Path, array: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&dtype.code().to_le_bytes())?;
    w.write_all(&(array.ndim() as u32).to_le_bytes())?;
    for &d in array.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let standard = array.as_standard_layout();
    match dtype {
        Dtype::F64 => {
            for v in standard.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in standard.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor, widening f32 payloads to f64.
pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serialization(format!(
            "{} is not a tensor container (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let dtype = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Serialization(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf)?;
        dims.push(u64::from_le_bytes(u64buf) as usize);
    }
    let len: usize = dims.iter().product();
    let mut values = Vec::with_capacity(len);
    match dtype {
        2 => {
            for _ in 0..len {
                r.read_exact(&mut u64buf)?;
                values.push(f64::from_le_bytes(u64buf));
            }
        }
        1 => {
            for _ in 0..len {
                r.read_exact(&mut u32buf)?;
                values.push(f32::from_le_bytes(u32buf) as f64);
            }
        }
        other => {
            return Err(Error::Serialization(format!("unknown dtype code {other}")));
        }
    }
    ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| Error::Serialization(format!("shape mismatch: {e}")))
}

/// Writes TOML metadata next to a tensor (or anywhere).
pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text =
        toml::to_string_pretty(meta).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}
