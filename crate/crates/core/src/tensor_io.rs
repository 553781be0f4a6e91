//! Raw little-endian tensor files described by JSON manifest entries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub file: String,
    pub layout: String,
    pub byte_order: String,
}

impl TensorEntry {
    pub fn new(name: &str, shape: &[usize], dtype: DType) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype,
            file: format!("{name}.bin"),
            layout: "row-major".into(),
            byte_order: "little-endian".into(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn load_error(&self, reason: impl Into<String>) -> Error {
        Error::Load {
            tensor: self.name.clone(),
            reason: reason.into(),
        }
    }
}

fn write_bytes(dir: &Path, entry: &TensorEntry, bytes: Vec<u8>) -> Result<()> {
    let path = dir.join(&entry.file);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f32(dir: &Path, name: &str, shape: &[usize], data: &[f32]) -> Result<TensorEntry> {
    let entry = TensorEntry::new(name, shape, DType::F32);
    if entry.numel() != data.len() {
        return Err(Error::config(format!("tensor `{name}`: shape {shape:?} does not match {} values", data.len())));
    }
    write_bytes(dir, &entry, data.iter().flat_map(|v| v.to_le_bytes()).collect())?;
    Ok(entry)
}

pub fn write_f64(dir: &Path, name: &str, shape: &[usize], data: &[f64]) -> Result<TensorEntry> {
    let entry = TensorEntry::new(name, shape, DType::F64);
    if entry.numel() != data.len() {
        return Err(Error::config(format!("tensor `{name}`: shape {shape:?} does not match {} values", data.len())));
    }
    write_bytes(dir, &entry, data.iter().flat_map(|v| v.to_le_bytes()).collect())?;
    Ok(entry)
}

fn read_checked(dir: &Path, entry: &TensorEntry, dtype: DType) -> Result<Vec<u8>> {
    if entry.dtype != dtype {
        return Err(entry.load_error(format!("expected dtype {dtype:?}, found {:?}", entry.dtype)));
    }
    if entry.layout != "row-major" || entry.byte_order != "little-endian" {
        return Err(entry.load_error(format!("unsupported layout {} / {}", entry.layout, entry.byte_order)));
    }
    if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
        return Err(entry.load_error(format!("file name `{}` escapes the archive", entry.file)));
    }
    let bytes = fs::read(dir.join(&entry.file)).map_err(|e| entry.load_error(e.to_string()))?;
    let expected = entry.numel() * dtype.size();
    if bytes.len() != expected {
        return Err(entry.load_error(format!("expected {expected} bytes, file has {}", bytes.len())));
    }
    Ok(bytes)
}

pub fn read_f32(dir: &Path, entry: &TensorEntry) -> Result<Vec<f32>> {
    let bytes = read_checked(dir, entry, DType::F32)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_f64(dir: &Path, entry: &TensorEntry) -> Result<Vec<f64>> {
    let bytes = read_checked(dir, entry, DType::F64)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
