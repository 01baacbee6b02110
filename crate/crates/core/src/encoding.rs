//! Position encoders: the trainable multiresolution hash grid and the fixed
//! sinusoidal (frequency) encoder it is compared against.
//!
//! Both take points in the unit cube. The hash encoder keeps `L` grids of
//! increasing resolution; each grid stores an `F`-wide feature per vertex in a
//! table of at most `T` rows. Coarse grids that fit in `T` are indexed
//! directly, finer ones through a spatial hash, so distinct vertices may share
//! a row. A point's encoding is the trilinear blend of its 8 surrounding
//! vertex features on every level, concatenated.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashEncoderConfig {
    pub levels: usize,
    /// Rows per hashed table; a power of two.
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    #[serde(default = "default_primes")]
    pub primes: [u32; 3],
}

fn default_primes() -> [u32; 3] {
    DEFAULT_PRIMES
}

pub const DEFAULT_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

impl Default for HashEncoderConfig {
    /// 16 levels × 2 features, 2¹⁹ rows, coarsest grid 16, finest 128.
    fn default() -> Self {
        Self::for_resolution(64)
    }
}

impl HashEncoderConfig {
    /// Default configuration whose finest level is twice `resolution`.
    pub fn for_resolution(resolution: usize) -> Self {
        Self::with_finest(2 * resolution)
    }

    /// Default level count and table size, growth set so the finest level is
    /// `finest` (at least the base resolution).
    pub fn with_finest(finest: usize) -> Self {
        let levels = 16;
        let base = 16usize;
        let finest = finest.max(base) as f64;
        Self {
            levels,
            table_size: 1 << 19,
            features_per_level: 2,
            base_resolution: base,
            growth_factor: ((finest / base as f64).ln() / (levels - 1) as f64).exp(),
            primes: DEFAULT_PRIMES,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// `floor(N_min · b^l)` for every level.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| {
                // the epsilon keeps exact powers (e.g. 16 · 8) from rounding down
                (self.base_resolution as f64 * self.growth_factor.powi(l as i32) + 1e-9).floor() as usize
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::Config("hash encoder needs at least one level and feature".into()));
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 30 {
            return Err(Error::Config(format!(
                "hash table_size must be a power of two, got {}",
                self.table_size
            )));
        }
        if self.base_resolution == 0 {
            return Err(Error::Config("base_resolution must be positive".into()));
        }
        if !(self.growth_factor >= 1.0 && self.growth_factor.is_finite()) || (self.levels > 1 && self.growth_factor == 1.0)
        {
            return Err(Error::Config(format!(
                "growth_factor must be > 1, got {}",
                self.growth_factor
            )));
        }
        Ok(())
    }
}

/// `(⊕ cⱼπⱼ) mod T` with wrapping 32-bit products; `table_size` is a power of two.
#[inline]
pub fn spatial_hash(c: [u32; 3], primes: [u32; 3], table_size: usize) -> usize {
    let h = c[0].wrapping_mul(primes[0]) ^ c[1].wrapping_mul(primes[1]) ^ c[2].wrapping_mul(primes[2]);
    h as usize & (table_size - 1)
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    resolution: usize,
    dense: bool,
    rows: usize,
    /// Start of this level's rows in the flat parameter vector, in scalars.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoder<T> {
    config: HashEncoderConfig,
    levels: Vec<Level>,
    /// All level tables back to back, `rows × F` each.
    pub params: Vec<T>,
}

impl<T: Real> HashEncoder<T> {
    /// Tables initialised uniformly in `[-1e-4, 1e-4]`.
    pub fn new(config: HashEncoderConfig, seed: u64) -> Result<Self> {
        let mut enc = Self::zeroed(config)?;
        let mut rng = rng::stream(seed, rng::KEY_INIT, 0);
        for p in enc.params.iter_mut() {
            *p = T::of(rng.random_range(-1e-4..=1e-4));
        }
        Ok(enc)
    }

    pub fn zeroed(config: HashEncoderConfig) -> Result<Self> {
        config.validate()?;
        let f = config.features_per_level;
        let mut offset = 0;
        let levels = config
            .resolutions()
            .into_iter()
            .map(|resolution| {
                let vertices = (resolution + 1).pow(3);
                let dense = vertices <= config.table_size;
                let rows = if dense { vertices } else { config.table_size };
                let level = Level {
                    resolution,
                    dense,
                    rows,
                    offset,
                };
                offset += rows * f;
                level
            })
            .collect();
        Ok(Self {
            config,
            levels,
            params: vec![T::zero(); offset],
        })
    }

    pub fn config(&self) -> &HashEncoderConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.levels[level].resolution
    }

    pub fn level_is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    /// Scalar offset of `row` on `level` in [`Self::params`].
    pub fn row_offset(&self, level: usize, row: usize) -> usize {
        let l = &self.levels[level];
        l.offset + row * self.config.features_per_level
    }

    /// Table row of grid vertex `c` on `level`.
    pub fn corner_index(&self, level: usize, c: [u32; 3]) -> usize {
        let l = &self.levels[level];
        if l.dense {
            let side = l.resolution + 1;
            c[0] as usize + side * (c[1] as usize + side * c[2] as usize)
        } else {
            spatial_hash(c, self.config.primes, self.config.table_size)
        }
    }

    /// Table rows and trilinear weights of the 8 corners of `p`'s cell on
    /// `level`. Corner `c` offsets the cell origin by bit 0 of `c` in x,
    /// bit 1 in y and bit 2 in z.
    #[inline(always)]
    fn corners(&self, level: usize, p: [T; 3]) -> ([usize; 8], [T; 8]) {
        let l = &self.levels[level];
        let res = T::of(l.resolution as f64);
        let mut base = [0u32; 3];
        let mut w = [[T::zero(); 2]; 3];
        for a in 0..3 {
            let x = p[a].max(T::zero()).min(T::one()) * res;
            let i = x.to_index().min(l.resolution - 1);
            base[a] = i as u32;
            let frac = x - T::of(i as f64);
            w[a] = [T::one() - frac, frac];
        }
        let mut rows = [0usize; 8];
        if l.dense {
            let side = l.resolution + 1;
            let origin = base[0] as usize + side * (base[1] as usize + side * base[2] as usize);
            let plane = side * side;
            for (c, r) in rows.iter_mut().enumerate() {
                *r = origin + (c & 1) + ((c >> 1) & 1) * side + (c >> 2) * plane;
            }
        } else {
            let pr = self.config.primes;
            let h = |a: usize| [base[a].wrapping_mul(pr[a]), (base[a] + 1).wrapping_mul(pr[a])];
            let (hx, hy, hz) = (h(0), h(1), h(2));
            let mask = self.config.table_size - 1;
            for (c, r) in rows.iter_mut().enumerate() {
                *r = (hx[c & 1] ^ hy[(c >> 1) & 1] ^ hz[c >> 2]) as usize & mask;
            }
        }
        let mut weights = [T::zero(); 8];
        for (c, wt) in weights.iter_mut().enumerate() {
            *wt = w[0][c & 1] * w[1][(c >> 1) & 1] * w[2][c >> 2];
        }
        (rows, weights)
    }

    /// Encodes one point into `out` (length `L·F`).
    pub fn encode(&self, p: [T; 3], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.output_dim());
        let pos = ndarray::arr2(&[p]);
        let view = ArrayViewMut2::from_shape((1, out.len()), out).expect("output shape");
        self.encode_batch(pos.view(), view);
    }

    /// Row-wise [`Self::encode`] of an `S × 3` position matrix into `S × L·F`.
    /// Runs level by level so each table stays in cache across the batch.
    pub fn encode_batch(&self, positions: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
        let f = self.config.features_per_level;
        let width = self.output_dim();
        let positions = positions.as_standard_layout();
        let pos = positions.as_slice().expect("standard layout");
        let out = out.as_slice_mut().expect("contiguous output");
        out.fill(T::zero());
        for (level, l) in self.levels.iter().enumerate() {
            let table = &self.params[l.offset..l.offset + l.rows * f];
            for (p, o) in pos.chunks_exact(3).zip(out.chunks_exact_mut(width)) {
                let (rows, weights) = self.corners(level, [p[0], p[1], p[2]]);
                if f == 2 {
                    let (mut a, mut b) = (T::zero(), T::zero());
                    for c in 0..8 {
                        let r = rows[c] * 2;
                        a += weights[c] * table[r];
                        b += weights[c] * table[r + 1];
                    }
                    o[level * 2] = a;
                    o[level * 2 + 1] = b;
                    continue;
                }
                let dst = &mut o[level * f..(level + 1) * f];
                for c in 0..8 {
                    let src = &table[rows[c] * f..(rows[c] + 1) * f];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += weights[c] * v;
                    }
                }
            }
        }
    }

    /// Accumulates `∂L/∂Θ` into `grads` (same layout as [`Self::params`]).
    ///
    /// Each touched row receives its slice of `d_features` times its
    /// interpolation weight. Levels are processed in parallel, samples within
    /// a level in order, so the result is independent of the thread count.
    pub fn backward_batch(&self, positions: ArrayView2<T>, d_features: ArrayView2<T>, grads: &mut [T]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let f = self.config.features_per_level;
        let width = self.output_dim();
        let positions = positions.as_standard_layout();
        let pos = positions.as_slice().expect("standard layout");
        let d_features = d_features.as_standard_layout();
        let up_all = d_features.as_slice().expect("standard layout");
        let mut slices: Vec<&mut [T]> = Vec::with_capacity(self.levels.len());
        let mut rest = grads;
        for l in &self.levels {
            let (head, tail) = rest.split_at_mut(l.rows * f);
            slices.push(head);
            rest = tail;
        }
        slices.into_par_iter().enumerate().for_each(|(level, table)| {
            for (p, g) in pos.chunks_exact(3).zip(up_all.chunks_exact(width)) {
                let up = &g[level * f..(level + 1) * f];
                if up.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let (rows, weights) = self.corners(level, [p[0], p[1], p[2]]);
                if f == 2 {
                    for c in 0..8 {
                        let r = rows[c] * 2;
                        table[r] += weights[c] * up[0];
                        table[r + 1] += weights[c] * up[1];
                    }
                    continue;
                }
                for c in 0..8 {
                    for (dst, &u) in table[rows[c] * f..(rows[c] + 1) * f].iter_mut().zip(up) {
                        *dst += weights[c] * u;
                    }
                }
            }
        });
    }

    pub fn backward(&self, p: [T; 3], upstream: &[T], grads: &mut [T]) {
        let pos = ndarray::arr2(&[p]);
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("upstream shape");
        self.backward_batch(pos.view(), up, grads);
    }
}

/// `[sin(2ᵏπp), cos(2ᵏπp)]` for `k < bands`, grouped per axis: the block for
/// axis `a` starts at `2·bands·a` and alternates sin/cos by increasing `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyEncoder {
    pub bands: usize,
}

impl FrequencyEncoder {
    pub fn output_dim(&self) -> usize {
        6 * self.bands
    }

    pub fn encode<T: Real>(&self, p: [T; 3], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.output_dim());
        let pi = T::of(std::f64::consts::PI);
        for a in 0..3 {
            let mut freq = pi;
            for k in 0..self.bands {
                let (s, c) = (freq * p[a]).sin_cos();
                out[2 * (a * self.bands + k)] = s;
                out[2 * (a * self.bands + k) + 1] = c;
                freq = freq + freq;
            }
        }
    }
}

/// Encoder choice with the trainable parameters it owns.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder<T> {
    Hash(HashEncoder<T>),
    Frequency(FrequencyEncoder),
}

impl<T: Real> Encoder<T> {
    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Hash(h) => h.output_dim(),
            Encoder::Frequency(f) => f.output_dim(),
        }
    }

    pub fn params(&self) -> &[T] {
        match self {
            Encoder::Hash(h) => &h.params,
            Encoder::Frequency(_) => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        match self {
            Encoder::Hash(h) => &mut h.params,
            Encoder::Frequency(_) => &mut [],
        }
    }

    pub fn encode_batch(&self, positions: ArrayView2<T>, mut out: ArrayViewMut2<T>) {
        match self {
            Encoder::Hash(h) => h.encode_batch(positions, out),
            Encoder::Frequency(f) => {
                for (p, mut o) in positions.rows().into_iter().zip(out.rows_mut()) {
                    f.encode([p[0], p[1], p[2]], o.as_slice_mut().expect("contiguous output rows"));
                }
            }
        }
    }

    pub fn backward_batch(&self, positions: ArrayView2<T>, d_features: ArrayView2<T>, grads: &mut [T]) {
        if let Encoder::Hash(h) = self {
            h.backward_batch(positions, d_features, grads);
        }
    }
}
