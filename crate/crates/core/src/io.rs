//! On-disk formats. Volumes and projection stacks are raw little-endian
//! float32 arrays (`*.raw`) with a JSON sidecar of the same stem (`*.json`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, ScanGeometry};
use crate::phantom::{Convention, ProjectionSet, Volume};
use crate::real::Real;

pub const VOLUME_FORMAT_VERSION: u32 = 1;
pub const PROJECTION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub format_version: u32,
    /// `[nx, ny, nz]`.
    pub dims: [usize; 3],
    pub extent: Aabb,
    pub dtype: String,
    pub order: String,
    pub endianness: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSidecar {
    pub format_version: u32,
    /// `[views, rows, cols]`.
    pub shape: [usize; 3],
    pub dtype: String,
    pub order: String,
    pub endianness: String,
    pub geometry: ScanGeometry,
    pub convention: Convention,
    pub noise_fraction: f64,
    pub noise_seed: Option<u64>,
    pub attenuation_scale: f64,
    /// Unattenuated intensity; always 1.
    pub i0: f64,
}

/// `foo.raw` → `foo.json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

/// Writes through a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Parses JSON, naming the offending field on failure.
pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::format(path, format!("field `{field}`: {}", e.into_inner()))
    })
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        v.write_le(&mut out);
    }
    out
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {expected} float32 values, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(4).map(f32::read_le).collect())
}

fn check_layout(path: &Path, version: u32, want: u32, dtype: &str, order: &str, want_order: &str, endian: &str) -> Result<()> {
    if version != want {
        return Err(Error::format(path, format!("format_version {version} is not supported (expected {want})")));
    }
    if dtype != f32::DTYPE {
        return Err(Error::format(path, format!("field `dtype`: unsupported {dtype:?}")));
    }
    if order != want_order {
        return Err(Error::format(path, format!("field `order`: expected {want_order:?}, found {order:?}")));
    }
    if endian != "little" {
        return Err(Error::format(path, format!("field `endianness`: expected \"little\", found {endian:?}")));
    }
    Ok(())
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    volume.validate()?;
    let sidecar = VolumeSidecar {
        format_version: VOLUME_FORMAT_VERSION,
        dims: volume.dims(),
        extent: volume.extent,
        dtype: f32::DTYPE.into(),
        order: "x-fastest".into(),
        endianness: "little".into(),
    };
    write_atomic(path, &f32_bytes(volume.data.iter()))?;
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let s: VolumeSidecar = read_json(&side)?;
    check_layout(&side, s.format_version, VOLUME_FORMAT_VERSION, &s.dtype, &s.order, "x-fastest", &s.endianness)?;
    let [nx, ny, nz] = s.dims;
    let data = read_f32s(path, nx * ny * nz)?;
    let volume = Volume {
        data: Array3::from_shape_vec((nz, ny, nx), data).unwrap(),
        extent: s.extent,
    };
    volume.validate().map_err(|e| Error::format(&side, e.to_string()))?;
    Ok(volume)
}

pub fn write_projections(path: &Path, proj: &ProjectionSet) -> Result<()> {
    proj.validate()?;
    let (v, r, c) = proj.images.dim();
    let sidecar = ProjectionSidecar {
        format_version: PROJECTION_FORMAT_VERSION,
        shape: [v, r, c],
        dtype: f32::DTYPE.into(),
        order: "view-row-col".into(),
        endianness: "little".into(),
        geometry: proj.geometry.clone(),
        convention: proj.convention,
        noise_fraction: proj.noise_fraction,
        noise_seed: proj.noise_seed,
        attenuation_scale: proj.attenuation_scale,
        i0: 1.0,
    };
    write_atomic(path, &f32_bytes(proj.images.iter()))?;
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_projections(path: &Path) -> Result<ProjectionSet> {
    let side = sidecar_path(path);
    let s: ProjectionSidecar = read_json(&side)?;
    check_layout(&side, s.format_version, PROJECTION_FORMAT_VERSION, &s.dtype, &s.order, "view-row-col", &s.endianness)?;
    if s.i0 != 1.0 {
        return Err(Error::format(&side, "field `i0`: only 1.0 is supported"));
    }
    let [v, r, c] = s.shape;
    let data = read_f32s(path, v * r * c)?;
    let proj = ProjectionSet {
        images: Array3::from_shape_vec((v, r, c), data).unwrap(),
        geometry: s.geometry,
        convention: s.convention,
        noise_fraction: s.noise_fraction,
        noise_seed: s.noise_seed,
        attenuation_scale: s.attenuation_scale,
    };
    proj.validate().map_err(|e| Error::format(&side, e.to_string()))?;
    Ok(proj)
}
