//! PSNR and SSIM between volumes, whole-volume and per slice.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis as NdAxis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Volume;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Config(format!("unknown axis {s:?} (expected x, y or z)"))),
        }
    }
}

impl Axis {
    /// Axis of the `[z, y, x]` storage array that indexes slices.
    fn storage_axis(self) -> NdAxis {
        match self {
            Axis::X => NdAxis(2),
            Axis::Y => NdAxis(1),
            Axis::Z => NdAxis(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each volume rescaled to `[0, 1]` on its own before comparison.
    #[default]
    MinMax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    pub data_range: f64,
    pub normalization: Normalization,
    pub ssim: SsimParams,
    pub slice_axis: Axis,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            normalization: Normalization::MinMax,
            ssim: SsimParams::default(),
            slice_axis: Axis::Z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceCurves {
    pub axis: Axis,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl SliceCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice,psnr_db,ssim\n");
        for (i, (p, s)) in self.psnr_db.iter().zip(&self.ssim).enumerate() {
            writeln!(out, "{i},{p},{s}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub params: MetricParams,
    pub per_slice: SliceCurves,
}

impl MetricReport {
    pub fn summary(&self) -> String {
        format!("PSNR={:.2}dB SSIM={:.4}", self.psnr_db, self.ssim)
    }
}

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "volumes differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
}

fn mse<'a>(a: impl Iterator<Item = &'a f32>, b: impl Iterator<Item = &'a f32>) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&x, &y) in a.zip(b) {
        let d = x as f64 - y as f64;
        sum += d * d;
        n += 1;
    }
    sum / n as f64
}

/// `10·log₁₀(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(data_range > 0.0) {
        return Err(Error::Config("data_range must be positive".into()));
    }
    Ok(psnr_from_mse(mse(a.data.iter(), b.data.iter()), data_range))
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: the output shrinks by `window - 1` per axis.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let w = k.len();
    let (h, wd) = img.dim();
    let rows = Array2::from_shape_fn((h, wd + 1 - w), |(i, j)| (0..w).map(|t| k[t] * img[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - w, wd + 1 - w), |(i, j)| (0..w).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean SSIM of two 2D images over the valid region of a Gaussian window.
pub fn ssim_2d(a: ArrayView2<f32>, b: ArrayView2<f32>, data_range: f64, params: &SsimParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("slices differ in size: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < params.window || w < params.window {
        return Err(Error::Shape(format!(
            "slice {h}×{w} is smaller than the {0}×{0} SSIM window",
            params.window
        )));
    }
    let k = gaussian_kernel(params.window, params.sigma);
    let a = a.mapv(|v| v as f64);
    let b = b.mapv(|v| v as f64);
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let c1 = (params.k1 * data_range).powi(2);
    let c2 = (params.k2 * data_range).powi(2);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

/// Per-slice PSNR and SSIM along `axis`.
pub fn per_slice_curves(a: &Volume, b: &Volume, axis: Axis, data_range: f64, params: &SsimParams) -> Result<SliceCurves> {
    check_shapes(a, b)?;
    let ax = axis.storage_axis();
    let n = a.data.len_of(ax);
    let results: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sa = a.data.index_axis(ax, i);
            let sb = b.data.index_axis(ax, i);
            let p = psnr_from_mse(mse(sa.iter(), sb.iter()), data_range);
            Ok((p, ssim_2d(sa, sb, data_range, params)?))
        })
        .collect();
    let (mut psnr_db, mut ssim) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for r in results {
        let (p, s) = r?;
        psnr_db.push(p);
        ssim.push(s);
    }
    Ok(SliceCurves { axis, psnr_db, ssim })
}

/// Mean of the axial (z) slice SSIMs.
pub fn ssim(a: &Volume, b: &Volume, data_range: f64, params: &SsimParams) -> Result<f64> {
    let c = per_slice_curves(a, b, Axis::Z, data_range, params)?;
    Ok(c.ssim.iter().sum::<f64>() / c.ssim.len() as f64)
}

/// Full comparison of a reconstruction against ground truth.
pub fn evaluate(recon: &Volume, truth: &Volume, params: &MetricParams) -> Result<MetricReport> {
    check_shapes(recon, truth)?;
    let (a, b) = match params.normalization {
        Normalization::MinMax => (recon.normalized(), truth.normalized()),
        Normalization::None => (recon.clone(), truth.clone()),
    };
    Ok(MetricReport {
        psnr_db: psnr(&a, &b, params.data_range)?,
        ssim: ssim(&a, &b, params.data_range, &params.ssim)?,
        params: *params,
        per_slice: per_slice_curves(&a, &b, params.slice_axis, params.data_range, &params.ssim)?,
    })
}
