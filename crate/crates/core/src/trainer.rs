//! Self-supervised fitting of the attenuation field to measured projections,
//! and export of the fitted field to a voxel grid.
//!
//! Each step draws a batch of detector rays that hit the volume, samples them,
//! renders their intensities through the field and minimises the summed
//! squared difference to the measured intensities with Adam.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{Encoder, FrequencyEncoder, HashEncoder, HashEncoderConfig};
use crate::error::{Error, Result};
use crate::field::{Mlp, MlpConfig};
use crate::geometry::{Aabb, Ray, ScanGeometry, Vec3};
use crate::metrics;
use crate::phantom::{ProjectionSet, Volume};
use crate::raycast::{stratified_into, synthesize_backward_into, synthesize_intensity, LastInterval};
use crate::real::Real;
use crate::rng;

/// Rays per unit of parallel work. Fixed so results do not depend on the
/// number of threads.
const CHUNK_RAYS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Hash(HashEncoderConfig),
    Frequency(FrequencyEncoder),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Hash(HashEncoderConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Geometric interpolation from `lr_start` to `lr_end`.
    #[default]
    Exponential,
    /// `lr_start` for the first half of the run, `lr_end` afterwards.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub samples_per_ray: usize,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub jitter: bool,
    pub encoder: EncoderConfig,
    pub mlp: MlpConfig,
    pub last_interval: LastInterval,
    /// PSNR against ground truth every this many steps (0: final step only).
    pub eval_every: usize,
    /// Fraction of hit rays held out of training and scored at eval steps.
    pub holdout_fraction: f64,
    /// Reduce gradients in a fixed order so runs are bitwise reproducible.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_rays: 2048,
            samples_per_ray: 96,
            iterations: 3000,
            lr_start: 1e-3,
            lr_end: 1e-4,
            lr_schedule: LrSchedule::Exponential,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            jitter: true,
            encoder: EncoderConfig::default(),
            mlp: MlpConfig::default(),
            last_interval: LastInterval::CloseToFar,
            eval_every: 100,
            holdout_fraction: 0.0,
            strict: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_rays == 0 {
            return fail("batch_rays must be at least 1");
        }
        if self.samples_per_ray < 2 {
            return fail("samples_per_ray must be at least 2");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return fail("learning rates must satisfy lr_start >= lr_end > 0");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if !(0.0..=0.5).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must lie in [0, 0.5]");
        }
        match &self.encoder {
            EncoderConfig::Hash(h) => h.validate()?,
            EncoderConfig::Frequency(f) if f.bands == 0 => return fail("frequency bands must be at least 1"),
            EncoderConfig::Frequency(_) => {}
        }
        self.mlp.validate()
    }
}

/// Learning rate for step `iter` (0-based).
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    let (a, b) = (config.lr_start, config.lr_end);
    if config.iterations <= 1 {
        return a;
    }
    let last = config.iterations - 1;
    match config.lr_schedule {
        LrSchedule::Exponential if iter >= last => b,
        LrSchedule::Exponential => a * (b / a).powf(iter as f64 / last as f64),
        LrSchedule::Step if iter < config.iterations / 2 => a,
        LrSchedule::Step => b,
    }
}

/// Encoder tables plus network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel<T> {
    pub encoder: Encoder<T>,
    pub mlp: Mlp<T>,
    /// World box mapped onto the encoder's unit cube.
    pub extent: Aabb,
}

impl<T: Real> FieldModel<T> {
    pub fn new(encoder: &EncoderConfig, mlp: MlpConfig, extent: Aabb, seed: u64) -> Result<Self> {
        let encoder = match encoder {
            EncoderConfig::Hash(c) => Encoder::Hash(HashEncoder::new(c.clone(), seed)?),
            EncoderConfig::Frequency(f) => Encoder::Frequency(*f),
        };
        let mlp = Mlp::init(mlp, encoder.output_dim(), seed)?;
        Ok(Self { encoder, mlp, extent })
    }

    /// Model with all parameters zero.
    pub fn zeroed(encoder: &EncoderConfig, mlp: MlpConfig, extent: Aabb) -> Result<Self> {
        let encoder = match encoder {
            EncoderConfig::Hash(c) => Encoder::Hash(HashEncoder::zeroed(c.clone())?),
            EncoderConfig::Frequency(f) => Encoder::Frequency(*f),
        };
        let mlp = Mlp::zeroed(mlp, encoder.output_dim())?;
        Ok(Self { encoder, mlp, extent })
    }

    pub fn num_params(&self) -> usize {
        self.encoder.params().len() + self.mlp.params.len()
    }

    /// `μ` at an `S × 3` matrix of unit-cube positions.
    pub fn query(&self, positions: ArrayView2<T>) -> Result<Array1<T>> {
        let mut features = Array2::zeros((positions.nrows(), self.encoder.output_dim()));
        self.encoder.encode_batch(positions, features.view_mut());
        Ok(self.mlp.forward_batch(features.view())?.mu)
    }
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub encoder: Vec<T>,
    pub mlp: Vec<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(model: &FieldModel<T>) -> Self {
        Self {
            encoder: vec![T::zero(); model.encoder.params().len()],
            mlp: vec![T::zero(); model.mlp.params.len()],
        }
    }

    pub fn zero(&mut self) {
        self.encoder.par_iter_mut().for_each(|g| *g = T::zero());
        self.mlp.fill(T::zero());
    }
}

/// Samples of a batch of rays, ready for the field.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<T> {
    /// `rays·N × 3` unit-cube positions.
    pub positions: Array2<T>,
    /// Sample spacing already multiplied by the attenuation scale.
    pub delta: Vec<T>,
    /// Measured intensities `I/I₀`.
    pub targets: Vec<T>,
    /// Caller-side ray identifiers, reported on numerical failure.
    pub ray_ids: Vec<usize>,
    pub samples_per_ray: usize,
}

/// A detector ray with its measured intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRay {
    pub ray: Ray,
    pub target: f64,
    /// Caller-side identifier (flat pixel index during training).
    pub id: usize,
    /// Pass over the ray pool this draw belongs to; keys the jitter stream.
    pub epoch: u64,
}

impl<T: Real> SampleBatch<T> {
    /// Stratified samples along `rays`, which must all hit `extent`. With
    /// `jitter_seed` each ray draws from its own `(epoch, id)` stream,
    /// otherwise bin midpoints are used.
    pub fn from_rays(
        rays: &[TargetRay],
        extent: &Aabb,
        n: usize,
        last: LastInterval,
        attenuation_scale: f64,
        jitter_seed: Option<u64>,
    ) -> Result<Self> {
        if let Some(r) = rays.iter().find(|r| r.ray.segment.is_none()) {
            return Err(Error::Geometry(format!("ray {} misses the volume", r.id)));
        }
        let mut positions = vec![T::zero(); rays.len() * n * 3];
        let mut delta = vec![T::zero(); rays.len() * n];
        positions
            .par_chunks_mut(n * 3)
            .zip(delta.par_chunks_mut(n))
            .zip(rays.par_iter())
            .for_each(|((pos, del), tr)| {
                let (mut t, mut d) = (Vec::with_capacity(n), Vec::with_capacity(n));
                let segment = tr.ray.segment.unwrap();
                match jitter_seed {
                    Some(seed) => {
                        let mut r = rng::stream(seed, rng::KEY_JITTER.wrapping_add(tr.epoch), tr.id as u64);
                        stratified_into(segment, n, Some(&mut r), last, &mut t, &mut d);
                    }
                    None => stratified_into::<rand_chacha::ChaCha8Rng>(segment, n, None, last, &mut t, &mut d),
                }
                for i in 0..n {
                    let p = extent.normalize(&tr.ray.at(t[i]));
                    for a in 0..3 {
                        pos[3 * i + a] = T::of(p[a]);
                    }
                    del[i] = T::of(d[i] * attenuation_scale);
                }
            });
        Ok(Self {
            positions: Array2::from_shape_vec((rays.len() * n, 3), positions).unwrap(),
            delta,
            targets: rays.iter().map(|r| T::of(r.target)).collect(),
            ray_ids: rays.iter().map(|r| r.id).collect(),
            samples_per_ray: n,
        })
    }

    pub fn num_rays(&self) -> usize {
        self.targets.len()
    }
}

fn chunk_loss<T: Real>(
    model: &FieldModel<T>,
    batch: &SampleBatch<T>,
    chunk: usize,
    d_features: Option<&mut [T]>,
) -> Result<(f64, Vec<T>)> {
    let n = batch.samples_per_ray;
    let r0 = chunk * CHUNK_RAYS;
    let r1 = (r0 + CHUNK_RAYS).min(batch.num_rays());
    let positions = batch.positions.slice(ndarray::s![r0 * n..r1 * n, ..]);
    let mut features = Array2::zeros((positions.nrows(), model.encoder.output_dim()));
    model.encoder.encode_batch(positions, features.view_mut());
    let cache = model.mlp.forward_batch(features.view())?;
    let mu = cache.mu.as_slice().unwrap();
    let mut loss = 0.0;
    let mut d_mu = Array1::zeros(mu.len());
    for r in r0..r1 {
        let k = (r - r0) * n;
        let delta = &batch.delta[r * n..(r + 1) * n];
        let (intensity, sc) = synthesize_intensity(&mu[k..k + n], delta, T::one());
        let residual = intensity - batch.targets[r];
        let sq = residual.to_f64().unwrap().powi(2);
        if !sq.is_finite() {
            return Err(Error::NonFinite {
                iteration: 0,
                ray: batch.ray_ids[r],
            });
        }
        loss += sq;
        let d = d_mu.as_slice_mut().unwrap();
        synthesize_backward_into(&sc, residual + residual, delta, &mut d[k..k + n]);
    }
    let mut mlp_grads = Vec::new();
    if let Some(df) = d_features {
        mlp_grads = vec![T::zero(); model.mlp.params.len()];
        let view = ArrayViewMut2::from_shape((positions.nrows(), model.encoder.output_dim()), df).unwrap();
        model.mlp.backward_batch(&cache, d_mu.view(), &mut mlp_grads, view);
    }
    Ok((loss, mlp_grads))
}

/// Per-ray rendered intensities and the summed squared error, without
/// gradients.
pub fn batch_loss<T: Real>(model: &FieldModel<T>, batch: &SampleBatch<T>) -> Result<f64> {
    let chunks = batch.num_rays().div_ceil(CHUNK_RAYS);
    let parts: Result<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk_loss(model, batch, c, None).map(|r| r.0))
        .collect();
    Ok(parts?.iter().sum())
}

/// Summed squared intensity error over the batch. Gradients are added into
/// `grads`. With `strict` the per-chunk network gradients are summed in chunk
/// order; otherwise in whatever order the thread pool produces them.
pub fn loss_and_grads<T: Real>(
    model: &FieldModel<T>,
    batch: &SampleBatch<T>,
    grads: &mut ModelGrads<T>,
    strict: bool,
) -> Result<f64> {
    let n = batch.samples_per_ray;
    let width = model.encoder.output_dim();
    let mut d_features = vec![T::zero(); batch.num_rays() * n * width];
    let parts = d_features
        .par_chunks_mut(CHUNK_RAYS * n * width)
        .enumerate()
        .map(|(c, df)| chunk_loss(model, batch, c, Some(df)));
    let add = |mut a: (f64, Vec<T>), b: (f64, Vec<T>)| {
        a.0 += b.0;
        if a.1.is_empty() {
            return b;
        }
        for (x, y) in a.1.iter_mut().zip(&b.1) {
            *x += *y;
        }
        a
    };
    let (loss, mlp_grads) = if strict {
        let parts: Vec<(f64, Vec<T>)> = parts.collect::<Result<_>>()?;
        parts.into_iter().fold((0.0, Vec::new()), add)
    } else {
        parts.try_reduce(|| (0.0, Vec::new()), |a, b| Ok(add(a, b)))?
    };
    for (g, d) in grads.mlp.iter_mut().zip(&mlp_grads) {
        *g += *d;
    }
    let d_features = ArrayView2::from_shape((batch.num_rays() * n, width), &d_features).unwrap();
    model
        .encoder
        .backward_batch(batch.positions.view(), d_features, &mut grads.encoder);
    Ok(loss)
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamMoments<T> {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// Adam over both parameter groups with one shared schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub encoder: AdamMoments<T>,
    pub mlp: AdamMoments<T>,
}

fn adam_update<T: Real>(params: &mut [T], grads: &[T], mom: &mut AdamMoments<T>, lr: f64, cfg: &TrainConfig, step: u64) {
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let c1 = T::of(1.0 - cfg.adam_beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.adam_beta2.powi(step as i32));
    let (lr, eps) = (T::of(lr), T::of(cfg.adam_eps));
    const CHUNK: usize = 1 << 15;
    params
        .par_chunks_mut(CHUNK)
        .zip(grads.par_chunks(CHUNK))
        .zip(mom.m.par_chunks_mut(CHUNK))
        .zip(mom.v.par_chunks_mut(CHUNK))
        .for_each(|(((p, g), m), v)| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
}

impl<T: Real> Adam<T> {
    pub fn new(model: &FieldModel<T>) -> Self {
        Self {
            step: 0,
            encoder: AdamMoments::zeros(model.encoder.params().len()),
            mlp: AdamMoments::zeros(model.mlp.params.len()),
        }
    }

    pub fn apply(&mut self, model: &mut FieldModel<T>, grads: &ModelGrads<T>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        adam_update(model.encoder.params_mut(), &grads.encoder, &mut self.encoder, lr, cfg, self.step);
        adam_update(&mut model.mlp.params, &grads.mlp, &mut self.mlp, lr, cfg, self.step);
    }
}

/// Evaluates the field at the voxel centres of a `dims` grid over `extent`.
pub fn extract_volume<T: Real>(model: &FieldModel<T>, dims: [usize; 3], extent: Aabb) -> Result<Volume> {
    let [nx, ny, nz] = dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
    }
    let size = extent.size();
    let centre = |i: usize, a: usize, n: usize| extent.min[a] + (i as f64 + 0.5) * size[a] / n as f64;
    let mut data = vec![0f32; nx * ny * nz];
    data.par_chunks_mut(nx * ny).enumerate().try_for_each(|(z, slice)| {
        let positions = Array2::from_shape_fn((nx * ny, 3), |(k, a)| {
            let p = Vec3::new(centre(k % nx, 0, nx), centre(k / nx, 1, ny), centre(z, 2, nz));
            T::of(model.extent.normalize(&p)[a])
        });
        let mu = model.query(positions.view())?;
        for (d, m) in slice.iter_mut().zip(mu.iter()) {
            *d = m.to_f32().unwrap();
        }
        Ok::<_, Error>(())
    })?;
    Ok(Volume {
        data: Array3::from_shape_vec((nz, ny, nx), data).unwrap(),
        extent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Steps completed.
    pub iter: usize,
    /// Summed squared error of this step's batch.
    pub loss: f64,
    pub lr: f64,
    /// Against ground truth, both sides min-max normalised.
    pub psnr: Option<f64>,
    /// Mean squared error per held-out ray.
    pub holdout_loss: Option<f64>,
    pub wall_ms: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("iter,loss,lr,psnr,wall_ms,holdout_loss\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.3},{}",
            r.iter,
            r.loss,
            r.lr,
            opt(r.psnr),
            r.wall_ms,
            opt(r.holdout_loss)
        )
        .unwrap();
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Indices of detector pixels whose rays hit the volume.
pub fn hit_pixels(geom: &ScanGeometry) -> Vec<usize> {
    let angles = geom.view_angles();
    (0..geom.num_views * geom.pixels_per_view())
        .into_par_iter()
        .filter(|&i| geom.ray_for_index(i, &angles).is_hit())
        .collect()
}

struct RayPool {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl RayPool {
    fn new(ids: Vec<usize>, seed: u64) -> Self {
        let mut pool = Self {
            order: ids,
            cursor: 0,
            epoch: 0,
            seed,
        };
        pool.shuffle();
        pool
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut rng::stream(self.seed, rng::KEY_SHUFFLE, self.epoch));
    }

    /// Next `n` rays as `(epoch, id)`, without replacement within an epoch.
    fn next(&mut self, n: usize) -> Vec<(u64, usize)> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.shuffle();
            }
            out.push((self.epoch, self.order[self.cursor]));
            self.cursor += 1;
        }
        out
    }
}

/// Fits a field to `proj`. `truth`, when given, is used only for the PSNR
/// column of the trace.
pub fn train(proj: &ProjectionSet, config: &TrainConfig, truth: Option<&Volume>) -> Result<TrainOutcome> {
    train_with(proj, config, truth, |_| {})
}

/// [`train`] with a callback invoked on every trace row.
pub fn train_with(
    proj: &ProjectionSet,
    config: &TrainConfig,
    truth: Option<&Volume>,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    proj.validate()?;
    let proj = proj.to_intensities();
    let geom = &proj.geometry;
    let angles = geom.view_angles();
    let images = proj.images.as_slice().expect("contiguous projections");
    let extent = geom.volume_extent;

    let mut hits = hit_pixels(geom);
    if hits.is_empty() {
        return Err(Error::Geometry("no detector ray intersects the volume".into()));
    }
    let mut holdout = Vec::new();
    if config.holdout_fraction > 0.0 {
        hits.shuffle(&mut rng::stream(config.seed, rng::KEY_HOLDOUT, 0));
        let k = ((hits.len() as f64 * config.holdout_fraction).ceil() as usize).min(hits.len() - 1);
        holdout = hits.drain(..k).collect();
        holdout.truncate(4096);
        holdout.sort_unstable();
    }
    let holdout_batch = if holdout.is_empty() {
        None
    } else {
        let rays: Vec<_> = holdout
            .iter()
            .map(|&i| TargetRay {
                ray: geom.ray_for_index(i, &angles),
                target: images[i] as f64,
                id: i,
                epoch: 0,
            })
            .collect();
        Some(SampleBatch::<f32>::from_rays(
            &rays,
            &extent,
            config.samples_per_ray,
            config.last_interval,
            proj.attenuation_scale,
            None,
        )?)
    };

    let mut model = FieldModel::<f32>::new(&config.encoder, config.mlp, extent, config.seed)?;
    let mut adam = Adam::new(&model);
    let mut grads = ModelGrads::zeros(&model);
    let mut pool = RayPool::new(hits, config.seed);
    let mut trace = Vec::with_capacity(config.iterations);
    let start = Instant::now();

    for it in 0..config.iterations {
        let picks = pool.next(config.batch_rays);
        let rays: Vec<_> = picks
            .par_iter()
            .map(|&(epoch, i)| TargetRay {
                ray: geom.ray_for_index(i, &angles),
                target: images[i] as f64,
                id: i,
                epoch,
            })
            .collect();
        let batch = SampleBatch::<f32>::from_rays(
            &rays,
            &extent,
            config.samples_per_ray,
            config.last_interval,
            proj.attenuation_scale,
            config.jitter.then_some(config.seed),
        )?;
        grads.zero();
        let loss = loss_and_grads(&model, &batch, &mut grads, config.strict).map_err(|e| match e {
            Error::NonFinite { ray, .. } => Error::NonFinite { iteration: it, ray },
            e => e,
        })?;
        if loss > 1e6 {
            return Err(Error::Diverged { iteration: it, loss });
        }
        let lr = lr_at(it, config);
        adam.apply(&mut model, &grads, lr, config);

        let done = it + 1;
        let eval = done == config.iterations || (config.eval_every > 0 && done % config.eval_every == 0);
        let mut row = TraceRow {
            iter: done,
            loss,
            lr,
            psnr: None,
            holdout_loss: None,
            wall_ms: 0.0,
        };
        if eval {
            if let Some(t) = truth {
                let v = extract_volume(&model, t.dims(), t.extent)?;
                row.psnr = Some(metrics::psnr(&v.normalized(), &t.normalized(), 1.0)?);
            }
            if let Some(hb) = &holdout_batch {
                row.holdout_loss = Some(batch_loss(&model, hb)? / hb.num_rays() as f64);
            }
        }
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        on_row(&row);
        trace.push(row);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            iteration: config.iterations,
            geometry_hash: geometry_hash(geom),
            attenuation_scale: proj.attenuation_scale,
            model,
            optimizer: adam,
        },
        trace,
    })
}

/// SHA-256 of the geometry's JSON form, hex encoded.
pub fn geometry_hash(geom: &ScanGeometry) -> String {
    let json = serde_json::to_vec(geom).expect("geometry serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NAFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    dtype: String,
    iteration: usize,
    adam_step: u64,
    geometry_hash: String,
    attenuation_scale: f64,
    extent: Aabb,
    config: TrainConfig,
    /// `(name, element count)` of the arrays that follow, in order.
    arrays: Vec<(String, usize)>,
}

/// Trained model plus everything needed to resume or audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub geometry_hash: String,
    pub attenuation_scale: f64,
    pub model: FieldModel<f32>,
    pub optimizer: Adam<f32>,
}

impl Checkpoint {
    fn arrays(&self) -> [(&'static str, &[f32]); 6] {
        [
            ("encoder", self.model.encoder.params()),
            ("mlp", &self.model.mlp.params),
            ("adam_m_encoder", &self.optimizer.encoder.m),
            ("adam_v_encoder", &self.optimizer.encoder.v),
            ("adam_m_mlp", &self.optimizer.mlp.m),
            ("adam_v_mlp", &self.optimizer.mlp.v),
        ]
    }

    /// `magic | version u32 | header length u64 | JSON header | f32 arrays`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            dtype: f32::DTYPE.into(),
            iteration: self.iteration,
            adam_step: self.optimizer.step,
            geometry_hash: self.geometry_hash.clone(),
            attenuation_scale: self.attenuation_scale,
            extent: self.model.extent,
            config: self.config.clone(),
            arrays: self.arrays().iter().map(|(n, a)| (n.to_string(), a.len())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in self.arrays() {
            for v in a {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let de = &mut serde_json::Deserializer::from_slice(body);
        let header: CheckpointHeader =
            serde_path_to_error::deserialize(de).map_err(|e| bad(format!("header field {}: {}", e.path(), e.inner())))?;
        if header.format_version != CHECKPOINT_VERSION || header.dtype != f32::DTYPE {
            return Err(bad(format!(
                "unsupported header (version {}, dtype {})",
                header.format_version, header.dtype
            )));
        }
        let mut model = FieldModel::<f32>::zeroed(&header.config.encoder, header.config.mlp, header.extent)?;
        let mut optimizer = Adam::new(&model);
        optimizer.step = header.adam_step;
        let mut offset = 20 + hlen;
        {
            let targets: [(&str, &mut [f32]); 6] = [
                ("encoder", model.encoder.params_mut()),
                ("mlp", &mut model.mlp.params),
                ("adam_m_encoder", &mut optimizer.encoder.m),
                ("adam_v_encoder", &mut optimizer.encoder.v),
                ("adam_m_mlp", &mut optimizer.mlp.m),
                ("adam_v_mlp", &mut optimizer.mlp.v),
            ];
            if header.arrays.len() != targets.len() {
                return Err(bad(format!("expected {} arrays, header lists {}", targets.len(), header.arrays.len())));
            }
            for ((name, dst), (hname, hlen)) in targets.into_iter().zip(&header.arrays) {
                if name != hname || dst.len() != *hlen {
                    return Err(bad(format!(
                        "array {hname} has {hlen} values; the configured model needs {name} with {}",
                        dst.len()
                    )));
                }
                let end = offset + 4 * hlen;
                let raw = bytes.get(offset..end).ok_or_else(|| bad(format!("truncated array {name}")))?;
                for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                    *d = f32::read_le(c);
                }
                offset = end;
            }
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            geometry_hash: header.geometry_hash,
            attenuation_scale: header.attenuation_scale,
            model,
            optimizer,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
