//! Field files on disk: a raw little-endian `f32` array (`C x nlat x nlon`)
//! next to a JSON sidecar with grid, variables, units, time and the
//! normalization flag.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::field::{Field, Timestamp};
use crate::grid::Grid;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub grid: Grid,
    pub vars: Vec<String>,
    pub units: Vec<String>,
    pub time: Timestamp,
    pub normalized: bool,
    /// `[channels, nlat, nlon]`.
    pub shape: [usize; 3],
}

fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Data(format!("{}: `{}`: {}", path.display(), e.path(), e.inner())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `field` to `path` (conventionally `*.f32`) plus its sidecar.
pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * field.values.len());
    for v in &field.values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        grid: (*field.grid).clone(),
        vars: field.vars.clone(),
        units: field.units.clone(),
        time: field.time,
        normalized: field.normalized,
        shape: [field.nchan(), field.grid.nlat(), field.grid.nlon()],
    };
    write_json(&sidecar_path(path), &side)
}

/// Read a field; `grid` lets many files share one allocation.
pub fn read_field(path: &Path, grid: Option<&Arc<Grid>>) -> Result<Field> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 4 * side.shape.iter().product::<usize>();
    if bytes.len() != expected || side.shape[1..] != [side.grid.nlat(), side.grid.nlon()] {
        return Err(Error::Data(format!(
            "{}: {} bytes on disk, sidecar shape {:?} on a {:?} grid",
            path.display(),
            bytes.len(),
            side.shape,
            side.grid.shape()
        )));
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    let grid = match grid {
        Some(g) if **g == side.grid => g.clone(),
        _ => Arc::new(side.grid),
    };
    Field::new(grid, values, side.vars, side.units, side.time, side.normalized)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Write a sequence as `<dir>/<prefix>_<index>.f32`, returning file names
/// relative to `dir`.
pub fn write_sequence(dir: &Path, prefix: &str, seq: &[Field]) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    seq.iter()
        .enumerate()
        .map(|(i, f)| {
            let name = format!("{prefix}_{i:06}.f32");
            write_field(&dir.join(&name), f)?;
            Ok(name)
        })
        .collect()
}

pub fn read_sequence(dir: &Path, names: &[String]) -> Result<Vec<Field>> {
    let mut grid: Option<Arc<Grid>> = None;
    names
        .iter()
        .map(|n| {
            let f = read_field(&dir.join(n), grid.as_ref())?;
            grid.get_or_insert_with(|| f.grid.clone());
            Ok(f)
        })
        .collect()
}

/// Files of one pseudo climate model: training-period series for fitting
/// bias corrections and the test-period series to downscale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcmEntry {
    pub name: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// Hash of the data section of the run configuration.
    pub data_hash: String,
    pub vars: Vec<String>,
    /// Raw elevation (m) and land-sea mask.
    pub terrain: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub gcms: Vec<GcmEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if m.schema_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest schema version {} is not supported (expected {MANIFEST_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn gcm(&self, name: &str) -> Result<&GcmEntry> {
        self.gcms.iter().find(|g| g.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.gcms.iter().map(|g| g.name.as_str()).collect();
            Error::Data(format!("no climate model `{name}` in the dataset (have {known:?})"))
        })
    }
}
