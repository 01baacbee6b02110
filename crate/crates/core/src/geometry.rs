//! Circular-orbit cone-beam scanner model.
//!
//! The source rotates about the world z-axis at distance `dso` from the origin;
//! a flat-panel detector faces it at distance `dsd` from the source. The angle
//! is the source azimuth: at angle `θ` the source sits at
//! `dso·(cos θ, sin θ, 0)` and the detector centre at `-(dsd - dso)·(cos θ, sin θ, 0)`.
//! Detector columns run along `(-sin θ, cos θ, 0)`, rows along `+z`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Axis-aligned box in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// Cube `[-half, half]³`.
    pub fn centered_cube(half: f64) -> Self {
        Self::new([-half; 3], [half; 3])
    }

    pub fn size(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Maps a world point into the unit cube spanned by this box, clamping
    /// round-off that lands just outside.
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.min[a]) / (self.max[a] - self.min[a]);
            out[a] = u.clamp(0.0, 1.0);
        }
        out
    }

    fn half_diagonal(&self) -> f64 {
        (0..3)
            .map(|a| self.min[a].abs().max(self.max[a].abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a])
    }
}

/// Parametric ray interval `[t_near, t_far]` inside the volume box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub t_near: f64,
    pub t_far: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }
}

/// A detector ray. `segment` is `None` when the ray misses the volume box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub segment: Option<Segment>,
}

impl Ray {
    pub fn is_hit(&self) -> bool {
        self.segment.is_some()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    /// Source to rotation axis (mm).
    pub dso: f64,
    /// Source to detector plane (mm).
    pub dsd: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// Column pitch (mm).
    pub pixel_pitch_u: f64,
    /// Row pitch (mm).
    pub pixel_pitch_v: f64,
    /// Radians.
    pub angle_start: f64,
    /// Radians, exclusive.
    pub angle_end: f64,
    pub num_views: usize,
    pub volume_extent: Aabb,
}

impl ScanGeometry {
    /// Desk-scale defaults: `dso = 1000`, `dsd = 1500`, square detector with
    /// the pitch chosen so the detector covers the volume's silhouette at every
    /// angle with a 10% margin.
    pub fn desk(
        half_extent: f64,
        detector: usize,
        num_views: usize,
        angle_start: f64,
        angle_end: f64,
    ) -> Result<Self> {
        let (dso, dsd) = (1000.0, 1500.0);
        let extent = Aabb::centered_cube(half_extent);
        let radial = half_extent * 2f64.sqrt();
        if radial >= dso {
            return Err(Error::Geometry(format!(
                "half extent {half_extent} does not fit inside the source orbit"
            )));
        }
        let u_half = dsd * radial / (dso * dso - radial * radial).sqrt();
        let v_half = dsd * half_extent / (dso - radial);
        let pitch = 1.1 * 2.0 * u_half.max(v_half) / detector as f64;
        let geom = Self {
            dso,
            dsd,
            detector_rows: detector,
            detector_cols: detector,
            pixel_pitch_u: pitch,
            pixel_pitch_v: pitch,
            angle_start,
            angle_end,
            num_views,
            volume_extent: extent,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Geometry(m));
        if !(self.dso > 0.0 && self.dso.is_finite()) {
            return fail(format!("dso must be positive, got {}", self.dso));
        }
        if !(self.dsd > self.dso && self.dsd.is_finite()) {
            return fail(format!("dsd ({}) must exceed dso ({})", self.dsd, self.dso));
        }
        if self.num_views == 0 {
            return fail("num_views must be at least 1".into());
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            return fail("detector dimensions must be at least 1".into());
        }
        if !(self.pixel_pitch_u > 0.0 && self.pixel_pitch_v > 0.0) {
            return fail("pixel pitches must be positive".into());
        }
        if !(self.angle_start.is_finite() && self.angle_end.is_finite()) {
            return fail("angles must be finite".into());
        }
        let e = &self.volume_extent;
        if !e.is_valid() {
            return fail("volume_extent must have max > min on every axis".into());
        }
        if (0..3).any(|a| (e.min[a] + e.max[a]).abs() > 1e-9 * (e.max[a] - e.min[a])) {
            return fail("volume_extent must be centred at the origin".into());
        }
        if e.half_diagonal() >= self.dso {
            return fail(format!(
                "volume_extent (half-diagonal {}) must lie inside the source orbit (dso {})",
                e.half_diagonal(),
                self.dso
            ));
        }
        Ok(())
    }

    /// `num_views` equally spaced angles over `[angle_start, angle_end)`.
    pub fn view_angles(&self) -> Vec<f64> {
        let step = (self.angle_end - self.angle_start) / self.num_views as f64;
        (0..self.num_views)
            .map(|i| self.angle_start + step * i as f64)
            .collect()
    }

    pub fn angular_step(&self) -> f64 {
        (self.angle_end - self.angle_start) / self.num_views as f64
    }

    pub fn source_position(&self, angle: f64) -> Vec3 {
        Vec3::new(self.dso * angle.cos(), self.dso * angle.sin(), 0.0)
    }

    /// Detector-plane offsets `(u, v)` in mm of pixel centre `(row, col)`
    /// relative to the detector centre.
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let u = (col as f64 - (self.detector_cols as f64 - 1.0) / 2.0) * self.pixel_pitch_u;
        let v = (row as f64 - (self.detector_rows as f64 - 1.0) / 2.0) * self.pixel_pitch_v;
        (u, v)
    }

    /// World-space ray from the source through the centre of pixel `(row, col)`.
    pub fn pixel_ray(&self, angle: f64, row: usize, col: usize) -> Ray {
        debug_assert!(row < self.detector_rows && col < self.detector_cols);
        let (s, c) = angle.sin_cos();
        let source = self.source_position(angle);
        let (u, v) = self.pixel_offset(row, col);
        let back = self.dsd - self.dso;
        let pixel = Vec3::new(-back * c - u * s, -back * s + u * c, v);
        let direction = (pixel - source).normalize();
        let segment = intersect_aabb(&source, &direction, &self.volume_extent);
        Ray {
            origin: source,
            direction,
            segment,
        }
    }

    pub fn pixels_per_view(&self) -> usize {
        self.detector_rows * self.detector_cols
    }

    /// Ray for a flat `[view][row][col]` pixel index.
    pub fn ray_for_index(&self, index: usize, angles: &[f64]) -> Ray {
        let per_view = self.pixels_per_view();
        let view = index / per_view;
        let rem = index % per_view;
        self.pixel_ray(angles[view], rem / self.detector_cols, rem % self.detector_cols)
    }
}

/// Slab test against `aabb`. Tangent hits (`t_near == t_far`) and boxes behind
/// the origin are misses. The returned `t_near` is clamped to `0` when the
/// origin is inside the box.
pub fn intersect_aabb(origin: &Vec3, direction: &Vec3, aabb: &Aabb) -> Option<Segment> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (origin[a], direction[a]);
        if d.abs() < 1e-15 {
            // Parallel to this slab pair.
            if o < aabb.min[a] || o > aabb.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (aabb.min[a] - o) * inv;
        let mut t1 = (aabb.max[a] - o) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    let t_near = t_near.max(0.0);
    (t_far > t_near).then_some(Segment { t_near, t_far })
}
