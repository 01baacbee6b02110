//! The attenuation network: a small fully connected net mapping encoded
//! positions to `μ ∈ (0, 1)`.
//!
//! With the default configuration it has four layers, `in → 32 → 32 → 32 → 1`,
//! ReLU between hidden layers, a sigmoid on the output, and the raw encoder
//! output concatenated onto the input of the second layer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_width: usize,
    /// ReLU layers before the sigmoid output layer.
    pub hidden_layers: usize,
    /// Hidden layer whose input gets the network input appended.
    pub skip_layer: Option<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            hidden_layers: 3,
            skip_layer: Some(1),
        }
    }
}

impl MlpConfig {
    /// 6-layer, 256-wide variant used with the frequency encoder.
    pub fn wide() -> Self {
        Self {
            hidden_width: 256,
            hidden_layers: 5,
            skip_layer: Some(3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        if let Some(k) = self.skip_layer {
            if k == 0 || k >= self.hidden_layers {
                return Err(Error::Config(format!(
                    "skip_layer {k} must name a hidden layer after the first (1..{})",
                    self.hidden_layers
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

/// Network weights. Each layer's weight is stored `[fan_in × fan_out]`
/// row-major, followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    config: MlpConfig,
    input_width: usize,
    layers: Vec<LayerShape>,
    pub params: Vec<T>,
}

/// Saved activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    features: Array2<T>,
    /// Post-ReLU output of every hidden layer.
    acts: Vec<Array2<T>>,
    pub mu: Array1<T>,
}

/// Sigmoid clamped to `[ε, 1-ε]` so the output never reaches 0 or 1 in
/// finite precision.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    let s = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    // comparisons rather than max/min so NaN propagates
    if s < T::epsilon() {
        T::epsilon()
    } else if s > T::one() - T::epsilon() {
        T::one() - T::epsilon()
    } else {
        s
    }
}

/// `out[r] += x[r] · w` for row-major `x` (`rows × k`), `w` (`k × n`) and
/// `out` (`rows × n`).
fn gemm_acc<T: Real>(x: &[T], k: usize, w: &[T], n: usize, out: &mut [T]) {
    if n == 32 {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports the enabled feature set.
            unsafe { gemm_fixed_avx2::<T, 32>(x, k, w, out) };
            return;
        }
        return gemm_fixed::<T, 32>(x, k, w, out);
    }
    if n == 1 {
        for (xr, o) in x.chunks_exact(k).zip(out.iter_mut()) {
            *o = xr.iter().zip(w).fold(*o, |a, (&xv, &wv)| a + xv * wv);
        }
        return;
    }
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&xv, wr) in xr.iter().zip(w.chunks_exact(n)) {
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
}

// A row of `N` accumulators stays in registers across the `k` loop. Same
// operation order as the generic path, so results are identical.
#[inline(always)]
fn gemm_fixed<T: Real, const N: usize>(x: &[T], k: usize, w: &[T], out: &mut [T]) {
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(N)) {
        let mut acc: [T; N] = (&*or).try_into().unwrap();
        for (&xv, wr) in xr.iter().zip(w.chunks_exact(N)) {
            let wr: &[T; N] = wr.try_into().unwrap();
            for j in 0..N {
                acc[j] += xv * wr[j];
            }
        }
        or.copy_from_slice(&acc);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_fixed_avx2<T: Real, const N: usize>(x: &[T], k: usize, w: &[T], out: &mut [T]) {
    gemm_fixed::<T, N>(x, k, w, out)
}

/// `g += xᵀ · d` for `x` (`rows × k`), `d` (`rows × n`), `g` (`k × n`),
/// accumulated over rows in order.
fn outer_acc<T: Real>(x: &[T], k: usize, d: &[T], n: usize, g: &mut [T]) {
    if n == 32 {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports the enabled feature set.
            unsafe { outer_fixed_avx2::<T, 32>(x, k, d, g) };
            return;
        }
        return outer_fixed::<T, 32>(x, k, d, g);
    }
    for (xr, dr) in x.chunks_exact(k).zip(d.chunks_exact(n)) {
        for (&xv, gr) in xr.iter().zip(g.chunks_exact_mut(n)) {
            for (gv, &dv) in gr.iter_mut().zip(dr) {
                *gv += xv * dv;
            }
        }
    }
}

#[inline(always)]
fn outer_fixed<T: Real, const N: usize>(x: &[T], k: usize, d: &[T], g: &mut [T]) {
    // blocks of rows keep `d` in L1 while each row of `g` sits in registers
    const BLOCK: usize = 64;
    for (xb, db) in x.chunks(k * BLOCK).zip(d.chunks(N * BLOCK)) {
        for (kk, gr) in g.chunks_exact_mut(N).enumerate() {
            let mut acc: [T; N] = (&*gr).try_into().unwrap();
            for (xr, dr) in xb.chunks_exact(k).zip(db.chunks_exact(N)) {
                let xv = xr[kk];
                let dr: &[T; N] = dr.try_into().unwrap();
                for j in 0..N {
                    acc[j] += xv * dr[j];
                }
            }
            gr.copy_from_slice(&acc);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn outer_fixed_avx2<T: Real, const N: usize>(x: &[T], k: usize, d: &[T], g: &mut [T]) {
    outer_fixed::<T, N>(x, k, d, g)
}

fn transpose<T: Real>(w: &[T], k: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); k * n];
    for i in 0..k {
        for j in 0..n {
            t[j * k + i] = w[i * n + j];
        }
    }
    t
}

impl<T: Real> Mlp<T> {
    pub fn zeroed(config: MlpConfig, input_width: usize) -> Result<Self> {
        config.validate()?;
        if input_width == 0 {
            return Err(Error::Config("network input width must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |fan_in: usize, fan_out: usize| {
            layers.push(LayerShape {
                fan_in,
                fan_out,
                weight: offset,
                bias: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        };
        let mut width = input_width;
        for l in 0..config.hidden_layers {
            let extra = if config.skip_layer == Some(l) { input_width } else { 0 };
            push(width + extra, config.hidden_width);
            width = config.hidden_width;
        }
        push(width, 1);
        Ok(Self {
            config,
            input_width,
            layers,
            params: vec![T::zero(); offset],
        })
    }

    /// Kaiming-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn init(config: MlpConfig, input_width: usize, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeroed(config, input_width)?;
        let mut rng = rng::stream(seed, rng::KEY_INIT, 1);
        for layer in mlp.layers.clone() {
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut mlp.params[layer.weight..layer.bias] {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn config(&self) -> MlpConfig {
        self.config
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layers[l].fan_in, self.layers[l].fan_out)
    }

    /// Scalar ranges of layer `l`'s weight and bias in [`Self::params`].
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.layers[l];
        (s.weight..s.bias, s.bias..s.bias + s.fan_out)
    }

    /// Forward pass over an `S × input_width` feature matrix.
    pub fn forward_batch(&self, features: ArrayView2<T>) -> Result<MlpCache<T>> {
        self.forward_inner(features, |_| {})
    }

    /// Hidden-layer pre-activations for `features`, all layers concatenated.
    /// Their signs fix which linear piece of the ReLU network is active.
    pub fn hidden_preactivations(&self, features: ArrayView2<T>) -> Result<Vec<T>> {
        let mut out = Vec::new();
        self.forward_inner(features, |z| out.extend_from_slice(z))?;
        Ok(out)
    }

    fn forward_inner(&self, features: ArrayView2<T>, mut on_pre: impl FnMut(&[T])) -> Result<MlpCache<T>> {
        if features.ncols() != self.input_width {
            return Err(Error::Shape(format!(
                "network expects {} input features, got {}",
                self.input_width,
                features.ncols()
            )));
        }
        let n = features.nrows();
        let features = features.as_standard_layout().into_owned();
        let x0 = features.as_slice().unwrap();
        let hidden = self.config.hidden_width;
        let last = self.layers.len() - 1;
        let mut acts: Vec<Array2<T>> = Vec::with_capacity(last);
        let mut logits = Array1::zeros(0);
        for l in 0..=last {
            let shape = self.layers[l];
            let fan_out = shape.fan_out;
            let w = &self.params[shape.weight..shape.bias];
            let bias = &self.params[shape.bias..shape.bias + fan_out];
            let mut z = Array2::<T>::zeros((n, fan_out));
            let out = z.as_slice_mut().unwrap();
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
            if l == 0 {
                gemm_acc(x0, self.input_width, w, fan_out, out);
            } else {
                let input = acts[l - 1].as_slice().unwrap();
                gemm_acc(input, hidden, &w[..hidden * fan_out], fan_out, out);
                if self.config.skip_layer == Some(l) {
                    // the skip input's weights are the rows after the hidden ones
                    gemm_acc(x0, self.input_width, &w[hidden * fan_out..], fan_out, out);
                }
            }
            if l < last {
                on_pre(out);
                for v in out.iter_mut() {
                    *v = if *v < T::zero() { T::zero() } else { *v };
                }
                acts.push(z);
            } else {
                logits = z.index_axis_move(Axis(1), 0);
            }
        }
        let mu = logits.mapv(sigmoid);
        Ok(MlpCache { features, acts, mu })
    }

    /// Reverse pass. Adds parameter gradients into `grads` (layout of
    /// [`Self::params`]) and writes `∂L/∂features` into `d_features`.
    /// ReLU's subgradient at 0 is 0.
    pub fn backward_batch(
        &self,
        cache: &MlpCache<T>,
        d_mu: ArrayView1<T>,
        grads: &mut [T],
        mut d_features: ArrayViewMut2<T>,
    ) {
        let hidden = self.config.hidden_width;
        let input_width = self.input_width;
        let last = self.layers.len() - 1;
        let x0 = cache.features.as_slice().unwrap();
        let mut dz: Vec<T> = ndarray::Zip::from(&d_mu)
            .and(&cache.mu)
            .map_collect(|&d, &m| d * m * (T::one() - m))
            .into_raw_vec_and_offset()
            .0;
        let df = d_features.as_slice_mut().expect("contiguous feature gradient");
        df.fill(T::zero());
        for l in (0..=last).rev() {
            let shape = self.layers[l];
            let n = shape.fan_out;
            let w = &self.params[shape.weight..shape.bias];
            let skip = self.config.skip_layer == Some(l);
            let (wg, bg) = grads[shape.weight..shape.bias + n].split_at_mut(shape.fan_in * n);
            for row in dz.chunks_exact(n) {
                for (g, &d) in bg.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 {
                outer_acc(x0, input_width, &dz, n, wg);
                gemm_acc(&dz, n, &transpose(w, input_width, n), input_width, df);
                break;
            }
            let input = cache.acts[l - 1].as_slice().unwrap();
            outer_acc(input, hidden, &dz, n, &mut wg[..hidden * n]);
            if skip {
                outer_acc(x0, input_width, &dz, n, &mut wg[hidden * n..]);
                gemm_acc(&dz, n, &transpose(&w[hidden * n..], input_width, n), input_width, df);
            }
            let mut da = vec![T::zero(); input.len()];
            gemm_acc(&dz, n, &transpose(&w[..hidden * n], hidden, n), hidden, &mut da);
            for (d, &x) in da.iter_mut().zip(input) {
                *d = if x > T::zero() { *d } else { T::zero() };
            }
            dz = da;
        }
    }

    /// Single-point forward pass.
    pub fn forward(&self, features: &[T]) -> Result<(T, MlpCache<T>)> {
        let view = ArrayView2::from_shape((1, features.len()), features).unwrap();
        let cache = self.forward_batch(view)?;
        Ok((cache.mu[0], cache))
    }

    /// Single-point reverse pass: `(∂L/∂params, ∂L/∂features)`.
    pub fn backward(&self, cache: &MlpCache<T>, d_mu: T) -> (Vec<T>, Vec<T>) {
        let mut grads = vec![T::zero(); self.params.len()];
        let mut d_in = Array2::<T>::zeros((1, self.input_width));
        let d = Array1::from_elem(1, d_mu);
        self.backward_batch(cache, d.view(), &mut grads, d_in.view_mut());
        (grads, d_in.into_raw_vec_and_offset().0)
    }
}
