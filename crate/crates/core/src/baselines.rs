//! Classical reconstructions: FDK filtered backprojection and SART.
//!
//! Both read the same [`ProjectionSet`] the neural field trains on and return
//! volumes in normalised attenuation units (line integrals divided by the
//! set's `attenuation_scale`).

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array3, ArrayView2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;
use crate::phantom::{Convention, ProjectionSet, Volume};
use crate::raycast::{self, LastInterval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    RamLak,
    #[default]
    Hann,
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" => Ok(Self::RamLak),
            "hann" => Ok(Self::Hann),
            _ => Err(Error::Config(format!("unknown filter {s:?} (expected ram-lak or hann)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdkConfig {
    pub filter: FilterKind,
    /// The FFT length is `padding` times the detector width rounded up to a
    /// power of two.
    pub padding: usize,
}

impl Default for FdkConfig {
    fn default() -> Self {
        Self {
            filter: FilterKind::Hann,
            padding: 2,
        }
    }
}

impl FdkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.padding == 0 || !self.padding.is_power_of_two() {
            return Err(Error::Config(format!(
                "fdk padding must be a power of two, got {}",
                self.padding
            )));
        }
        Ok(())
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Config(format!("volume dims must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Ramp filter response for an FFT of length `n` over samples spaced `tau`,
/// from the band-limited spatial kernel so there is no DC offset.
fn ramp_response(n: usize, tau: f64, filter: FilterKind) -> Vec<f64> {
    let mut h: Vec<Complex<f64>> = (0..n)
        .map(|i| {
            let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            let v = if k == 0.0 {
                1.0 / (4.0 * tau * tau)
            } else if (k as i64) % 2 != 0 {
                -1.0 / (k * k * PI * PI * tau * tau)
            } else {
                0.0
            };
            Complex::new(v, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut h);
    h.iter()
        .enumerate()
        .map(|(i, c)| {
            let w = match filter {
                FilterKind::RamLak => 1.0,
                FilterKind::Hann => {
                    let omega = 2.0 * PI * i.min(n - i) as f64 / n as f64;
                    0.5 * (1.0 + omega.cos())
                }
            };
            c.re * w
        })
        .collect()
}

/// Cosine-weighted, ramp-filtered projections `[view, row, col]`, in the
/// coordinates of a virtual detector through the rotation axis.
fn filter_projections(proj: &ProjectionSet, config: &FdkConfig) -> Array3<f64> {
    let g = &proj.geometry;
    let (rows, cols) = (g.detector_rows, g.detector_cols);
    let n = config.padding * cols.next_power_of_two().max(2);
    let tau = g.pixel_pitch_u * g.dso / g.dsd;
    let response = ramp_response(n, tau, config.filter);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let line = proj.to_line_integrals();
    let scale = 1.0 / proj.attenuation_scale;
    let mut out = Array3::<f64>::zeros((g.num_views, rows, cols));
    out.outer_iter_mut()
        .into_par_iter()
        .zip(line.images.outer_iter().into_par_iter())
        .for_each(|(mut dst, src)| {
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            for r in 0..rows {
                buf.fill(Complex::new(0.0, 0.0));
                for c in 0..cols {
                    let (u, v) = g.pixel_offset(r, c);
                    let cosine = g.dsd / (g.dsd * g.dsd + u * u + v * v).sqrt();
                    buf[c].re = src[[r, c]] as f64 * scale * cosine;
                }
                fft.process(&mut buf);
                for (b, &h) in buf.iter_mut().zip(&response) {
                    *b *= h;
                }
                ifft.process(&mut buf);
                for c in 0..cols {
                    dst[[r, c]] = buf[c].re * tau / n as f64;
                }
            }
        });
    out
}

/// Bilinear lookup on one filtered view; zero off the detector.
fn detector_lookup(view: &ArrayView2<f64>, row: f64, col: f64) -> f64 {
    let (rows, cols) = view.dim();
    if !(row > -1.0 && col > -1.0 && row < rows as f64 && col < cols as f64) {
        return 0.0;
    }
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            view[[r as usize, c as usize]]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
        + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}

/// FDK before clamping and normalisation; linear in the line integrals.
pub fn fdk_unnormalized(proj: &ProjectionSet, dims: [usize; 3], config: &FdkConfig) -> Result<Volume> {
    config.validate()?;
    check_dims(dims)?;
    proj.validate()?;
    let g = &proj.geometry;
    if g.num_views < 2 {
        return Err(Error::Config("fdk needs at least 2 views".into()));
    }
    let filtered = filter_projections(proj, config);
    let angles = g.view_angles();
    let trig: Vec<(f64, f64)> = angles.iter().map(|a| a.sin_cos()).collect();
    let range = (g.angle_end - g.angle_start).abs();
    let weight = g.angular_step().abs() * PI / range;
    let mut vol = Volume::zeros(dims, g.volume_extent);
    let (cu, cv) = ((g.detector_cols as f64 - 1.0) / 2.0, (g.detector_rows as f64 - 1.0) / 2.0);
    let [nx, ny, _] = dims;
    let template = vol.clone();
    vol.data
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(z, mut slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = template.voxel_center([x, y, z]);
                    let mut acc = 0.0;
                    for (view, &(s, c)) in trig.iter().enumerate() {
                        let depth = g.dso - (p.x * c + p.y * s);
                        let mag = g.dsd / depth;
                        let u = (-p.x * s + p.y * c) * mag;
                        let v = p.z * mag;
                        let q = detector_lookup(
                            &filtered.index_axis(Axis(0), view),
                            v / g.pixel_pitch_v + cv,
                            u / g.pixel_pitch_u + cu,
                        );
                        let iso = g.dso / depth;
                        acc += iso * iso * q;
                    }
                    slice[[y, x]] = (acc * weight) as f32;
                }
            }
        });
    Ok(vol)
}

/// FDK reconstruction, clamped to `≥ 0` and min-max normalised.
pub fn fdk_reconstruct(proj: &ProjectionSet, dims: [usize; 3], config: &FdkConfig) -> Result<Volume> {
    let mut vol = fdk_unnormalized(proj, dims, config)?;
    vol.data.mapv_inplace(|v| v.max(0.0));
    Ok(vol.normalized())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewOrder {
    #[default]
    Sequential,
    /// Views in golden-ratio order so consecutive updates are far apart.
    Golden,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SartConfig {
    /// Full sweeps over all views.
    pub iterations: usize,
    pub relaxation: f64,
    pub order: ViewOrder,
    pub positivity: bool,
    /// Samples per ray for the projector; `None` means twice the largest
    /// volume dimension.
    pub samples_per_ray: Option<usize>,
}

impl Default for SartConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            relaxation: 1.0,
            order: ViewOrder::Sequential,
            positivity: true,
            samples_per_ray: None,
        }
    }
}

impl SartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("sart iterations must be at least 1".into()));
        }
        // 0 is accepted so the update can be switched off
        if !(0.0..2.0).contains(&self.relaxation) {
            return Err(Error::Config(format!(
                "sart relaxation must lie in [0, 2), got {}",
                self.relaxation
            )));
        }
        if self.samples_per_ray == Some(0) {
            return Err(Error::Config("sart samples_per_ray must be positive".into()));
        }
        Ok(())
    }

    fn view_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.order == ViewOrder::Golden {
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            order.sort_by(|&a, &b| (a as f64 * phi).fract().total_cmp(&(b as f64 * phi).fract()));
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SartOutcome {
    pub volume: Volume,
    /// `‖p − A x‖₂` in line-integral units, accumulated during each sweep.
    pub residuals: Vec<f64>,
}

/// Visits the projector weights `(voxel, a_ij)` of one ray, where `a_ij` is
/// the sample spacing times the trilinear weight.
fn for_each_weight(
    vol: &Volume,
    geom: &ScanGeometry,
    angle: f64,
    row: usize,
    col: usize,
    samples: usize,
    scratch: &mut (Vec<f64>, Vec<f64>),
    mut visit: impl FnMut(usize, f64),
) -> bool {
    let ray = geom.pixel_ray(angle, row, col);
    let Some(segment) = ray.segment else {
        return false;
    };
    let (t, delta) = scratch;
    raycast::stratified_into::<rand_chacha::ChaCha8Rng>(segment, samples, None, LastInterval::CloseToFar, t, delta);
    for (&ti, &d) in t.iter().zip(delta.iter()) {
        if let Some(corners) = vol.sample_weights(&ray.at(ti)) {
            for (idx, w) in corners {
                if w != 0.0 {
                    visit(idx, w * d);
                }
            }
        }
    }
    true
}

pub fn sart_reconstruct(proj: &ProjectionSet, dims: [usize; 3], config: &SartConfig) -> Result<SartOutcome> {
    check_dims(dims)?;
    sart_from(proj, Volume::zeros(dims, proj.geometry.volume_extent), config)
}

/// SART starting from `init`. Each view update is
/// `x_j += λ · Σ_i a_ij r_i / Σ_i a_ij` with `r_i = (p_i − a_i·x) / Σ_j a_ij`
/// over the view's rays, using the same midpoint integrator as the simulator.
pub fn sart_from(proj: &ProjectionSet, init: Volume, config: &SartConfig) -> Result<SartOutcome> {
    config.validate()?;
    proj.validate()?;
    init.validate()?;
    let g = &proj.geometry;
    if init.extent != g.volume_extent {
        return Err(Error::Geometry("initial volume extent differs from the scan's".into()));
    }
    let samples = config
        .samples_per_ray
        .unwrap_or(2 * init.dims().iter().max().copied().unwrap_or(1));
    let line = if proj.convention == Convention::LineIntegral {
        proj.clone()
    } else {
        proj.to_line_integrals()
    };
    let scale = proj.attenuation_scale;
    let angles = g.view_angles();
    let (rows, cols) = (g.detector_rows, g.detector_cols);
    let mut vol = init;
    let n_vox = vol.data.len();
    let mut num = vec![0f64; n_vox];
    let mut den = vec![0f64; n_vox];
    let mut residuals = Vec::with_capacity(config.iterations);
    let mut best = f64::INFINITY;
    let mut scratch = (Vec::new(), Vec::new());
    for sweep in 0..config.iterations {
        let mut sq = 0.0;
        for view in config.view_order(g.num_views) {
            let angle = angles[view];
            let target = line.images.index_axis(Axis(0), view);
            // per-ray normalised residual, or None for rays that miss
            let r: Vec<Option<f64>> = {
                let vol = &vol;
                let flat = vol.data.as_slice().expect("standard layout");
                (0..rows * cols)
                    .into_par_iter()
                    .map_init(
                        || (Vec::new(), Vec::new()),
                        |scratch, pix| {
                            let (row, col) = (pix / cols, pix % cols);
                            let (mut fp, mut len) = (0.0, 0.0);
                            let hit = for_each_weight(vol, g, angle, row, col, samples, scratch, |j, a| {
                                fp += a * flat[j] as f64;
                                len += a;
                            });
                            (hit && len > 0.0).then(|| (target[[row, col]] as f64 / scale - fp) / len)
                        },
                    )
                    .collect()
            };
            num.fill(0.0);
            den.fill(0.0);
            for (pix, ri) in r.iter().enumerate() {
                let Some(ri) = *ri else { continue };
                let (row, col) = (pix / cols, pix % cols);
                let mut len = 0.0;
                for_each_weight(&vol, g, angle, row, col, samples, &mut scratch, |j, a| {
                    num[j] += a * ri;
                    den[j] += a;
                    len += a;
                });
                sq += (ri * len * scale).powi(2);
            }
            let flat = vol.data.as_slice_mut().expect("standard layout");
            for ((x, &n), &d) in flat.iter_mut().zip(&num).zip(&den) {
                if d > 0.0 {
                    let mut v = *x as f64 + config.relaxation * n / d;
                    if config.positivity && v < 0.0 {
                        v = 0.0;
                    }
                    *x = v as f32;
                }
            }
        }
        let residual = sq.sqrt();
        if !residual.is_finite() || residual > 10.0 * best {
            return Err(Error::SartDiverged {
                sweep,
                residual,
                minimum: best,
            });
        }
        best = best.min(residual);
        residuals.push(residual);
    }
    Ok(SartOutcome { volume: vol, residuals })
}

/// Forward projection `A x` with the SART projector, in line-integral units.
pub fn sart_project(vol: &Volume, geom: &ScanGeometry, samples: usize, attenuation_scale: f64) -> Array3<f32> {
    let angles = geom.view_angles();
    let (rows, cols) = (geom.detector_rows, geom.detector_cols);
    let flat = vol.data.as_slice().expect("standard layout");
    let mut out = Array3::<f32>::zeros((geom.num_views, rows, cols));
    out.as_slice_mut()
        .unwrap()
        .par_iter_mut()
        .enumerate()
        .for_each_init(
            || (Vec::new(), Vec::new()),
            |scratch, (k, px)| {
                let (view, pix) = (k / (rows * cols), k % (rows * cols));
                let mut fp = 0.0;
                for_each_weight(vol, geom, angles[view], pix / cols, pix % cols, samples, scratch, |j, a| {
                    fp += a * flat[j] as f64;
                });
                *px = (fp * attenuation_scale) as f32;
            },
        );
    out
}
