//! Ground-truth volumes and simulated cone-beam scans.

use std::str::FromStr;

use ndarray::{Array3, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, ScanGeometry, Vec3};
use crate::raycast::{self, LastInterval};
use crate::rng;

/// Dense scalar grid. `data` is indexed `[z, y, x]`, so x varies fastest in
/// memory, matching the on-disk order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub extent: Aabb,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], extent: Aabb) -> Self {
        Self {
            data: Array3::zeros((dims[2], dims[1], dims[0])),
            extent,
        }
    }

    pub fn from_fn(dims: [usize; 3], extent: Aabb, f: impl Fn([usize; 3]) -> f32 + Sync) -> Self {
        let mut vol = Self::zeros(dims, extent);
        vol.data
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(z, mut plane)| {
                for ((y, x), v) in plane.indexed_iter_mut() {
                    *v = f([x, y, z]);
                }
            });
        vol
    }

    /// `[nx, ny, nz]`.
    pub fn dims(&self) -> [usize; 3] {
        let (nz, ny, nx) = self.data.dim();
        [nx, ny, nz]
    }

    pub fn spacing(&self) -> [f64; 3] {
        let d = self.dims();
        let s = self.extent.size();
        [s[0] / d[0] as f64, s[1] / d[1] as f64, s[2] / d[2] as f64]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[[z, y, x]]
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        let sp = self.spacing();
        Vec3::new(
            self.extent.min[0] + (idx[0] as f64 + 0.5) * sp[0],
            self.extent.min[1] + (idx[1] as f64 + 0.5) * sp[1],
            self.extent.min[2] + (idx[2] as f64 + 0.5) * sp[2],
        )
    }

    /// Trilinear lookup at a world point, clamping to the border voxels inside
    /// the extent and returning 0 outside it.
    pub fn sample(&self, p: &Vec3) -> f32 {
        let Some(corners) = self.sample_weights(p) else {
            return 0.0;
        };
        let flat = self.data.as_slice().expect("standard layout");
        let mut acc = 0f64;
        for (idx, w) in corners {
            if w != 0.0 {
                acc += w * flat[idx] as f64;
            }
        }
        acc as f32
    }

    /// The eight `(flat index, weight)` pairs behind [`Self::sample`], or
    /// `None` outside the extent. Flat indices are x-fastest.
    pub fn sample_weights(&self, p: &Vec3) -> Option<[(usize, f64); 8]> {
        if !self.extent.contains(p) {
            return None;
        }
        let dims = self.dims();
        let sp = self.spacing();
        let mut i0 = [0usize; 3];
        let mut f = [0f64; 3];
        for a in 0..3 {
            let n = dims[a];
            let c = ((p[a] - self.extent.min[a]) / sp[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (c.floor() as usize).min(n.saturating_sub(2));
            i0[a] = i;
            f[a] = c - i as f64;
        }
        let mut out = [(0usize, 0f64); 8];
        for (corner, slot) in out.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let up = (corner >> a) & 1;
                w *= if up == 1 { f[a] } else { 1.0 - f[a] };
                idx[a] = (i0[a] + up).min(dims[a] - 1);
            }
            *slot = (idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]), w);
        }
        Some(out)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Rescales to `[0, 1]`. A constant volume maps to all zeros.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.mapv(|v| (v - lo) / range)
        } else {
            Array3::zeros(self.data.raw_dim())
        };
        Volume {
            data,
            extent: self.extent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d < 2) {
            return Err(Error::Shape(format!("volume dims {:?} must be at least 2", self.dims())));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("volume contains non-finite values".into()));
        }
        Ok(())
    }

    /// Trilinear resampling onto another grid over the same extent.
    pub fn resampled(&self, dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, self.extent, |idx| self.sample(&out_center(&self.extent, dims, idx)))
    }
}

fn out_center(extent: &Aabb, dims: [usize; 3], idx: [usize; 3]) -> Vec3 {
    let s = extent.size();
    Vec3::new(
        extent.min[0] + (idx[0] as f64 + 0.5) * s[0] / dims[0] as f64,
        extent.min[1] + (idx[1] as f64 + 0.5) * s[1] / dims[1] as f64,
        extent.min[2] + (idx[2] as f64 + 0.5) * s[2] / dims[2] as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Convention {
    /// Normalised intensities `I/I₀ ∈ (0, 1]`.
    Intensity,
    /// Post-log projections `-ln(I/I₀) ≥ 0`.
    LineIntegral,
}

/// Stack of detector images `[view, row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub images: Array3<f32>,
    pub geometry: ScanGeometry,
    pub convention: Convention,
    pub noise_fraction: f64,
    pub noise_seed: Option<u64>,
    /// Line-integral units per mm for a normalised attenuation of 1.
    pub attenuation_scale: f64,
}

impl ProjectionSet {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        let expected = (g.num_views, g.detector_rows, g.detector_cols);
        if self.images.dim() != expected {
            return Err(Error::Shape(format!(
                "projection stack {:?} does not match geometry {:?}",
                self.images.dim(),
                expected
            )));
        }
        if !(self.attenuation_scale > 0.0 && self.attenuation_scale.is_finite()) {
            return Err(Error::Config("attenuation_scale must be positive".into()));
        }
        let ok = match self.convention {
            Convention::Intensity => self.images.iter().all(|&v| v > 0.0 && v <= 1.0),
            Convention::LineIntegral => self.images.iter().all(|&v| v >= 0.0 && v.is_finite()),
        };
        if !ok {
            return Err(Error::Shape(format!(
                "projection values out of range for {:?} convention",
                self.convention
            )));
        }
        Ok(())
    }

    pub fn to_line_integrals(&self) -> ProjectionSet {
        let mut out = self.clone();
        if self.convention == Convention::Intensity {
            out.images.mapv_inplace(|i| (-i.ln()).max(0.0));
            out.convention = Convention::LineIntegral;
        }
        out
    }

    pub fn to_intensities(&self) -> ProjectionSet {
        let mut out = self.clone();
        if self.convention == Convention::LineIntegral {
            out.images.mapv_inplace(|p| (-p).exp());
            out.convention = Convention::Intensity;
        }
        out
    }

    /// Keeps every `stride`-th view starting at view 0 (used by view sweeps).
    pub fn subsample_views(&self, keep: usize) -> Result<ProjectionSet> {
        let n = self.geometry.num_views;
        if keep == 0 || keep > n || n % keep != 0 {
            return Err(Error::Config(format!("cannot take {keep} evenly spaced views out of {n}")));
        }
        let stride = n / keep;
        let idx: Vec<usize> = (0..keep).map(|i| i * stride).collect();
        let mut out = self.clone();
        out.images = self.images.select(Axis(0), &idx);
        out.geometry.num_views = keep;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomKind {
    SheppLogan3d,
    NestedBoxes,
    /// Constant `value` inside a sphere of radius `radius_fraction` × the
    /// smallest half-extent. Boundary voxels hold their partial-volume fraction.
    UniformSphere { value: f32, radius_fraction: f64 },
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp_logan_3d" => Ok(Self::SheppLogan3d),
            "nested_boxes" => Ok(Self::NestedBoxes),
            "uniform_sphere" => Ok(Self::UniformSphere {
                value: 0.5,
                radius_fraction: 0.8,
            }),
            other => Err(Error::Config(format!("unknown phantom kind `{other}`"))),
        }
    }
}

/// Ten-ellipsoid 3D Shepp-Logan with the high-contrast ("modified") values:
/// `[A, a, b, c, x0, y0, z0, φ, θ, ψ]`, angles in degrees.
pub const SHEPP_LOGAN_3D: [[f64; 10]; 10] = [
    [1.0, 0.6900, 0.920, 0.810, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.780, 0.0, -0.0184, 0.0, 0.0, 0.0, 0.0],
    [-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0, 0.0, -18.0, 0.0, 10.0],
    [-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0, 0.0, 18.0, 0.0, 10.0],
    [0.1, 0.2100, 0.250, 0.410, 0.0, 0.35, -0.15, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, 0.1, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.046, 0.050, 0.0, -0.1, 0.25, 0.0, 0.0, 0.0],
    [0.1, 0.0460, 0.023, 0.050, -0.08, -0.605, 0.0, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.023, 0.020, 0.0, -0.606, 0.0, 0.0, 0.0, 0.0],
    [0.1, 0.0230, 0.046, 0.020, 0.06, -0.605, 0.0, 0.0, 0.0, 0.0],
];

struct Ellipsoid {
    amplitude: f64,
    inv_axes_sq: [f64; 3],
    center: [f64; 3],
    rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn from_row(e: &[f64; 10]) -> Self {
        let (phi, theta, psi) = (e[7].to_radians(), e[8].to_radians(), e[9].to_radians());
        let (sphi, cphi) = phi.sin_cos();
        let (stheta, ctheta) = theta.sin_cos();
        let (spsi, cpsi) = psi.sin_cos();
        let rotation = [
            [
                cpsi * cphi - ctheta * sphi * spsi,
                cpsi * sphi + ctheta * cphi * spsi,
                spsi * stheta,
            ],
            [
                -spsi * cphi - ctheta * sphi * cpsi,
                -spsi * sphi + ctheta * cphi * cpsi,
                cpsi * stheta,
            ],
            [stheta * sphi, -stheta * cphi, ctheta],
        ];
        Self {
            amplitude: e[0],
            inv_axes_sq: [1.0 / (e[1] * e[1]), 1.0 / (e[2] * e[2]), 1.0 / (e[3] * e[3])],
            center: [e[4], e[5], e[6]],
            rotation,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let mut q = 0.0;
        for r in 0..3 {
            let rotated: f64 = (0..3).map(|c| self.rotation[r][c] * p[c]).sum();
            let d = rotated - self.center[r];
            q += d * d * self.inv_axes_sq[r];
        }
        q <= 1.0
    }
}

/// Shepp-Logan value at `p ∈ [-1, 1]³` before rescaling.
pub fn shepp_logan_value(p: [f64; 3]) -> f64 {
    thread_local! {
        static ELLIPSOIDS: Vec<Ellipsoid> = SHEPP_LOGAN_3D.iter().map(Ellipsoid::from_row).collect();
    }
    ELLIPSOIDS.with(|es| es.iter().filter(|e| e.contains(p)).map(|e| e.amplitude).sum())
}

fn unit_coords(dims: [usize; 3], idx: [usize; 3]) -> [f64; 3] {
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = 2.0 * (idx[a] as f64 + 0.5) / dims[a] as f64 - 1.0;
    }
    p
}

/// Deterministic ground-truth volume over `extent`.
pub fn make_phantom(kind: PhantomKind, dims: [usize; 3], extent: Aabb) -> Result<Volume> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Config(format!("phantom dims {dims:?} must be at least 2")));
    }
    let vol = match kind {
        PhantomKind::SheppLogan3d => {
            if dims.iter().any(|&d| d < 16) {
                return Err(Error::Config(format!(
                    "shepp_logan_3d needs at least 16 voxels per axis, got {dims:?}"
                )));
            }
            let raw = Volume::from_fn(dims, extent, |idx| shepp_logan_value(unit_coords(dims, idx)) as f32);
            raw.normalized()
        }
        PhantomKind::NestedBoxes => Volume::from_fn(dims, extent, |idx| {
            let r = unit_coords(dims, idx).iter().fold(0f64, |m, v| m.max(v.abs()));
            if r <= 0.3 {
                1.0
            } else if r <= 0.6 {
                0.5
            } else {
                0.0
            }
        }),
        PhantomKind::UniformSphere {
            value,
            radius_fraction,
        } => {
            if !(0.0..=1.0).contains(&value) || !(radius_fraction > 0.0 && radius_fraction <= 1.0) {
                return Err(Error::Config("uniform_sphere needs value in [0,1] and radius in (0,1]".into()));
            }
            let half: Vec<f64> = extent.size().iter().map(|s| s / 2.0).collect();
            let radius = radius_fraction * half.iter().cloned().fold(f64::INFINITY, f64::min);
            let sp: Vec<f64> = (0..3).map(|a| extent.size()[a] / dims[a] as f64).collect();
            let voxel_diag = 0.5 * (sp[0] * sp[0] + sp[1] * sp[1] + sp[2] * sp[2]).sqrt();
            const SUB: usize = 6;
            Volume::from_fn(dims, extent, |idx| {
                let c: Vec<f64> = (0..3)
                    .map(|a| extent.min[a] + (idx[a] as f64 + 0.5) * sp[a])
                    .collect();
                let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                if r + voxel_diag <= radius {
                    return value;
                }
                if r - voxel_diag > radius {
                    return 0.0;
                }
                // partial-volume coverage by supersampling
                let mut inside = 0usize;
                for i in 0..SUB {
                    for j in 0..SUB {
                        for k in 0..SUB {
                            let o = [i, j, k];
                            let q: f64 = (0..3)
                                .map(|a| {
                                    let x = c[a] + ((o[a] as f64 + 0.5) / SUB as f64 - 0.5) * sp[a];
                                    x * x
                                })
                                .sum();
                            inside += (q.sqrt() <= radius) as usize;
                        }
                    }
                }
                value * inside as f32 / (SUB * SUB * SUB) as f32
            })
        }
    };
    Ok(vol)
}

/// Noise-free scan of `vol` in the intensity convention with `I₀ = 1`,
/// integrated with the midpoint rule along each pixel ray.
pub fn project_volume(
    vol: &Volume,
    geom: &ScanGeometry,
    samples_per_ray: usize,
    attenuation_scale: f64,
) -> Result<ProjectionSet> {
    geom.validate()?;
    let max_dim = *vol.dims().iter().max().unwrap();
    if samples_per_ray < max_dim {
        return Err(Error::Config(format!(
            "samples_per_ray ({samples_per_ray}) must be at least the largest volume dimension ({max_dim})"
        )));
    }
    if !(attenuation_scale > 0.0 && attenuation_scale.is_finite()) {
        return Err(Error::Config("attenuation_scale must be positive".into()));
    }
    let angles = geom.view_angles();
    let mut images = Array3::<f32>::zeros((geom.num_views, geom.detector_rows, geom.detector_cols));
    let cols = geom.detector_cols;
    images
        .as_slice_mut()
        .unwrap()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each_init(
            || (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
            |(t, delta, mu, dscaled), (line, out)| {
                let view = line / geom.detector_rows;
                let row = line % geom.detector_rows;
                for (col, px) in out.iter_mut().enumerate() {
                    let ray = geom.pixel_ray(angles[view], row, col);
                    let Some(segment) = ray.segment else {
                        *px = 1.0;
                        continue;
                    };
                    raycast::stratified_into::<rand_chacha::ChaCha8Rng>(
                        segment,
                        samples_per_ray,
                        None,
                        LastInterval::CloseToFar,
                        t,
                        delta,
                    );
                    mu.clear();
                    mu.extend(t.iter().map(|&ti| vol.sample(&ray.at(ti)) as f64));
                    dscaled.clear();
                    dscaled.extend(delta.iter().map(|d| d * attenuation_scale));
                    *px = raycast::synthesize_intensity(mu, dscaled, 1.0).0 as f32;
                }
            },
        );
    Ok(ProjectionSet {
        images,
        geometry: geom.clone(),
        convention: Convention::Intensity,
        noise_fraction: 0.0,
        noise_seed: None,
        attenuation_scale,
    })
}

/// Additive zero-mean Gaussian noise with `σ = fraction · mean(I)`, clamped
/// to `[1e-6, 1]`. Pixel `k` draws from its own stream so the result does not
/// depend on the thread count.
pub fn add_noise(proj: &ProjectionSet, fraction: f64, seed: u64) -> Result<ProjectionSet> {
    if !(fraction >= 0.0 && fraction.is_finite()) {
        return Err(Error::Config(format!("noise fraction must be >= 0, got {fraction}")));
    }
    if proj.convention != Convention::Intensity {
        return Err(Error::Unsupported("noise is applied to intensity projections".into()));
    }
    let mut out = proj.clone();
    out.noise_fraction = fraction;
    out.noise_seed = Some(seed);
    if fraction == 0.0 {
        return Ok(out);
    }
    let n = proj.images.len() as f64;
    let mean = proj.images.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sigma = fraction * mean;
    out.images
        .as_slice_mut()
        .unwrap()
        .par_iter_mut()
        .enumerate()
        .for_each(|(k, v)| {
            let z: f64 = StandardNormal.sample(&mut rng::stream(seed, rng::KEY_NOISE, k as u64));
            *v = ((*v as f64 + sigma * z).clamp(1e-6, 1.0)) as f32;
        });
    Ok(out)
}

/// Pointwise maximum, used by the monotonicity property.
pub fn pointwise_max(a: &Volume, b: &Volume) -> Volume {
    let mut out = a.clone();
    Zip::from(&mut out.data).and(&b.data).for_each(|o, &v| *o = o.max(v));
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    fn small_geometry(views: usize) -> ScanGeometry {
        ScanGeometry::desk(32.0, 32, views, 0.0, 2.0 * PI).unwrap()
    }

    #[test]
    fn sphere_center_and_corner() {
        let v = make_phantom(
            PhantomKind::UniformSphere { value: 0.5, radius_fraction: 0.8 },
            [32, 32, 32],
            Aabb::centered_cube(1.0),
        )
        .unwrap();
        assert_eq!(v.get(16, 16, 16), 0.5);
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(31, 31, 31), 0.0);
    }

    #[test]
    fn nested_boxes_three_levels() {
        let v = make_phantom(PhantomKind::NestedBoxes, [32, 32, 32], Aabb::centered_cube(1.0)).unwrap();
        let mut values: Vec<f32> = v.data.iter().copied().collect();
        values.sort_by(f32::total_cmp);
        values.dedup();
        assert_eq!(values, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn shepp_logan_plateaus() {
        let dims = [64, 64, 64];
        let v = make_phantom(PhantomKind::SheppLogan3d, dims, Aabb::centered_cube(1.0)).unwrap();
        // Oracle: the two outer ellipsoids are axis-aligned, so the skull
        // shell and background can be counted from their formulas directly.
        let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
        for &val in v.data.iter() {
            *hist.entry((val as f64 * 1000.0).round() as i64).or_default() += 1;
        }
        // background, brain, skull, and the +0.1 features
        for plateau in [0, 200, 1000, 300] {
            assert!(hist.get(&plateau).copied().unwrap_or(0) > 50, "missing plateau {plateau}: {hist:?}");
        }
        let allowed = [0, 100, 200, 300, 400, 800, 900, 1000, 1100];
        for key in hist.keys() {
            assert!(allowed.contains(key), "unexpected value {key}");
        }
        let inside_skull = |p: [f64; 3]| {
            (p[0] / 0.69).powi(2) + (p[1] / 0.92).powi(2) + (p[2] / 0.81).powi(2) <= 1.0
        };
        let inside_brain = |p: [f64; 3]| {
            (p[0] / 0.6624).powi(2) + ((p[1] + 0.0184) / 0.874).powi(2) + (p[2] / 0.78).powi(2) <= 1.0
        };
        let mut background = 0;
        let mut shell = 0;
        for z in 0..64 {
            for y in 0..64 {
                for x in 0..64 {
                    let p = unit_coords(dims, [x, y, z]);
                    background += !inside_skull(p) as usize;
                    shell += (inside_skull(p) && !inside_brain(p)) as usize;
                }
            }
        }
        assert!(hist.get(&0).copied().unwrap_or(0) >= background);
        assert_eq!(hist.get(&1000).copied().unwrap_or(0), shell);
        assert_relative_eq!(shepp_logan_value([0.0, 0.0, 0.0]), 0.2, epsilon = 1e-12);
        assert_relative_eq!(shepp_logan_value([0.22, 0.0, 0.0]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(shepp_logan_value([0.0, 0.35, -0.15]), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn shepp_logan_needs_sixteen_voxels() {
        assert!(make_phantom(PhantomKind::SheppLogan3d, [8, 16, 16], Aabb::centered_cube(1.0)).is_err());
        assert!("cube".parse::<PhantomKind>().is_err());
    }

    #[test]
    fn empty_volume_projects_to_one() {
        let g = small_geometry(4);
        let v = Volume::zeros([16, 16, 16], g.volume_extent);
        let p = project_volume(&v, &g, 16, 0.05).unwrap();
        assert!(p.images.iter().all(|&i| i == 1.0));
        assert!(project_volume(&v, &g, 8, 0.05).is_err());
    }

    #[test]
    fn sphere_chord_oracle() {
        let g = ScanGeometry::desk(64.0, 65, 3, 0.0, 2.0 * PI).unwrap();
        let v = make_phantom(
            PhantomKind::UniformSphere { value: 0.5, radius_fraction: 0.8 },
            [64, 64, 64],
            g.volume_extent,
        )
        .unwrap();
        let p = project_volume(&v, &g, 256, 0.05).unwrap();
        let chord: f64 = 2.0 * 0.8 * 64.0;
        let expected = (-0.5 * 0.05 * chord).exp();
        for view in 0..3 {
            let got = p.images[[view, 32, 32]] as f64;
            assert!(((got - expected) / expected).abs() < 0.01, "{got} vs {expected}");
        }
    }

    #[test]
    fn sample_count_convergence() {
        let g = ScanGeometry::desk(32.0, 33, 2, 0.0, PI).unwrap();
        let v = make_phantom(PhantomKind::SheppLogan3d, [32, 32, 32], g.volume_extent).unwrap();
        let a = project_volume(&v, &g, 128, 0.05).unwrap();
        let b = project_volume(&v, &g, 256, 0.05).unwrap();
        let (x, y) = (a.images[[0, 16, 16]], b.images[[0, 16, 16]]);
        assert!(((x - y) / y).abs() < 0.005);
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = small_geometry(3);
        let v = make_phantom(PhantomKind::NestedBoxes, [16, 16, 16], g.volume_extent).unwrap();
        let p = project_volume(&v, &g, 32, 0.05).unwrap();
        let q = add_noise(&p, 0.0, 11).unwrap();
        assert_eq!(p.images, q.images);
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let g = ScanGeometry::desk(32.0, 128, 8, 0.0, PI).unwrap();
        let mut p = ProjectionSet {
            images: Array3::from_elem((8, 128, 128), 0.5f32),
            geometry: g,
            convention: Convention::Intensity,
            noise_fraction: 0.0,
            noise_seed: None,
            attenuation_scale: 0.05,
        };
        p.validate().unwrap();
        let a = add_noise(&p, 0.03, 5).unwrap();
        let b = add_noise(&p, 0.03, 5).unwrap();
        assert_eq!(a.images, b.images);
        let n = a.images.len() as f64;
        let mean = a.images.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = a.images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ratio = var.sqrt() / 0.5;
        assert!((0.027..=0.033).contains(&ratio), "{ratio}");
        p.convention = Convention::LineIntegral;
        assert!(add_noise(&p, 0.03, 5).is_err());
    }

    #[test]
    fn view_subsampling() {
        let g = small_geometry(12);
        let v = make_phantom(PhantomKind::NestedBoxes, [16, 16, 16], g.volume_extent).unwrap();
        let p = project_volume(&v, &g, 32, 0.05).unwrap();
        let q = p.subsample_views(4).unwrap();
        assert_eq!(q.geometry.view_angles(), vec![0.0, PI / 2.0, PI, 3.0 * PI / 2.0]);
        assert_eq!(q.images.index_axis(Axis(0), 1), p.images.index_axis(Axis(0), 3));
        assert!(p.subsample_views(5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn projection_is_monotone(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut r = rand::rngs::StdRng::seed_from_u64(seed);
            let g = ScanGeometry::desk(8.0, 6, 2, r.random::<f64>(), 4.0).unwrap();
            let a = Volume::from_fn([4, 4, 4], g.volume_extent, |_| 0.0);
            let mut a = a;
            a.data.mapv_inplace(|_| r.random::<f32>());
            let mut bump = a.clone();
            bump.data.mapv_inplace(|_| r.random::<f32>());
            let b = pointwise_max(&a, &bump);
            let pa = project_volume(&a, &g, 8, 0.1).unwrap();
            let pb = project_volume(&b, &g, 8, 0.1).unwrap();
            for (x, y) in pa.images.iter().zip(pb.images.iter()) {
                prop_assert!(y <= x);
            }
            // miss rays stay exactly 1 regardless of contents
            prop_assert_eq!(pa.images[[0, 0, 0]], 1.0);
        }

        #[test]
        fn quarter_turn_consistency(start in 0.0f64..6.28) {
            // rotating the volume by 90° about z and the source by 90° gives the same scan
            let dims = [16, 16, 16];
            let g = ScanGeometry::desk(16.0, 12, 1, start, start + 1.0).unwrap();
            let v = make_phantom(PhantomKind::SheppLogan3d, dims, g.volume_extent).unwrap();
            // (x, y) → (-y, x): voxel (i, j) moves to (n-1-j, i)
            let turned = Volume::from_fn(dims, g.volume_extent, |[x, y, z]| v.get(y, dims[0] - 1 - x, z));
            let mut g2 = g.clone();
            g2.angle_start += PI / 2.0;
            g2.angle_end += PI / 2.0;
            let p1 = project_volume(&v, &g, 32, 0.05).unwrap();
            let p2 = project_volume(&turned, &g2, 32, 0.05).unwrap();
            let n = p1.images.len() as f64;
            let rms = (p1.images.iter().zip(p2.images.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(rms < 1e-3, "rms {}", rms);
        }
    }
}
