//! The `mvol` volume file format.
//!
//! A volume is a pair of files: `<name>.mvol` holds the raw little-endian
//! payload and `<name>.mvol.json` a sidecar header:
//!
//! ```json
//! {"dims":[W,H,D],"spacing":[sx,sy,sz],"dtype":"f32","components":1,"order":"x-fastest"}
//! ```
//!
//! Scalar volumes are stored as `f32`, label volumes as `u8`. Displacement
//! fields use `components = 3` and concatenate three full scalar sub-volumes
//! in order (dx, dy, dz), each in voxel units.

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridDims, LabelVolume, ScalarVolume, Spacing};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvolHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub components: u8,
    pub order: String,
}

impl MvolHeader {
    fn validate(&self) -> Result<(GridDims, Spacing)> {
        if self.order != "x-fastest" {
            return Err(Error::Format(format!("unsupported order {:?}", self.order)));
        }
        if self.dtype != "f32" && self.dtype != "u8" {
            return Err(Error::Format(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.components != 1 && self.components != 3 {
            return Err(Error::Format(format!(
                "unsupported component count {}",
                self.components
            )));
        }
        let dims = GridDims::new(self.dims[0], self.dims[1], self.dims[2])?;
        let spacing = Spacing::new(self.spacing[0], self.spacing[1], self.spacing[2])?;
        Ok((dims, spacing))
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn write_pair(path: &Path, header: &MvolHeader, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, payload)?;
    fs::write(sidecar_path(path), serde_json::to_string(header)?)?;
    Ok(())
}

fn read_pair(path: &Path) -> Result<(MvolHeader, Vec<u8>)> {
    let header: MvolHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let payload = fs::read(path)?;
    Ok((header, payload))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn bytes_to_f64(payload: &[u8], expected: usize, what: &str) -> Result<Vec<f64>> {
    if payload.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{what}: payload has {} bytes, expected {}",
            payload.len(),
            expected * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_scalar_volume(path: &Path, vol: &ScalarVolume) -> Result<()> {
    let header = MvolHeader {
        dims: vol.dims.as_array(),
        spacing: vol.spacing.as_array(),
        dtype: "f32".into(),
        components: 1,
        order: "x-fastest".into(),
    };
    write_pair(path, &header, &f32_bytes(vol.data.iter().copied()))
}

pub fn read_scalar_volume(path: &Path) -> Result<ScalarVolume> {
    let (header, payload) = read_pair(path)?;
    let (dims, spacing) = header.validate()?;
    if header.dtype != "f32" || header.components != 1 {
        return Err(Error::Format(format!(
            "{}: expected scalar f32 volume",
            path.display()
        )));
    }
    ScalarVolume::new(dims, spacing, bytes_to_f64(&payload, dims.len(), "scalar volume")?)
}

pub fn write_label_volume(path: &Path, vol: &LabelVolume) -> Result<()> {
    let header = MvolHeader {
        dims: vol.dims.as_array(),
        spacing: vol.spacing.as_array(),
        dtype: "u8".into(),
        components: 1,
        order: "x-fastest".into(),
    };
    write_pair(path, &header, &vol.data)
}

pub fn read_label_volume(path: &Path) -> Result<LabelVolume> {
    let (header, payload) = read_pair(path)?;
    let (dims, spacing) = header.validate()?;
    if header.dtype != "u8" || header.components != 1 {
        return Err(Error::Format(format!(
            "{}: expected u8 label volume",
            path.display()
        )));
    }
    if payload.len() != dims.len() {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            payload.len(),
            dims.len()
        )));
    }
    LabelVolume::new(dims, spacing, payload)
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    let header = MvolHeader {
        dims: field.dims.as_array(),
        spacing: field.spacing.as_array(),
        dtype: "f32".into(),
        components: 3,
        order: "x-fastest".into(),
    };
    let mut payload = Vec::with_capacity(field.data.len() * 12);
    for c in 0..3 {
        payload.extend(f32_bytes(field.data.iter().map(|v| v[c])));
    }
    write_pair(path, &header, &payload)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let (header, payload) = read_pair(path)?;
    let (dims, spacing) = header.validate()?;
    if header.dtype != "f32" || header.components != 3 {
        return Err(Error::Format(format!(
            "{}: expected 3-component f32 field",
            path.display()
        )));
    }
    let n = dims.len();
    let flat = bytes_to_f64(&payload, n * 3, "field")?;
    let mut data = vec![[0.0; 3]; n];
    for c in 0..3 {
        for i in 0..n {
            data[i][c] = flat[c * n + i];
        }
    }
    DisplacementField::new(dims, spacing, data)
}
