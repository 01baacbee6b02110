//! Stratified sampling along rays and the Beer's-law attenuation compositor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Ray, Segment, Vec3};
use crate::real::Real;

/// How the spacing of the last sample on a ray is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LastInterval {
    /// `δ_N = t_far - t_N`.
    #[default]
    CloseToFar,
    /// `δ_N = 0`: the last sample contributes nothing.
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRay {
    pub t: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub delta: Vec<f64>,
}

/// Fills `t` and `delta` with `n` stratified samples over `segment`.
///
/// Bin `i` is `[t_near + iΔ, t_near + (i+1)Δ]`. With `rng` the sample is
/// uniform in its bin, otherwise it is the bin midpoint. `δ_i` is the distance
/// to the next sample; the last one follows `last`.
pub fn stratified_into<R: Rng + ?Sized>(
    segment: Segment,
    n: usize,
    rng: Option<&mut R>,
    last: LastInterval,
    t: &mut Vec<f64>,
    delta: &mut Vec<f64>,
) {
    debug_assert!(n >= 1);
    t.clear();
    delta.clear();
    let bin = segment.length() / n as f64;
    match rng {
        Some(rng) => {
            for i in 0..n {
                let u: f64 = rng.random();
                let lo = segment.t_near + bin * i as f64;
                // keep the sample strictly inside [lo, lo + bin]
                t.push((lo + u * bin).min(segment.t_near + bin * (i + 1) as f64));
            }
        }
        None => t.extend((0..n).map(|i| segment.t_near + bin * (i as f64 + 0.5))),
    }
    for i in 0..n - 1 {
        delta.push(t[i + 1] - t[i]);
    }
    delta.push(match last {
        LastInterval::CloseToFar => (segment.t_far - t[n - 1]).max(0.0),
        LastInterval::Drop => 0.0,
    });
}

/// Stratified samples along a hit ray. Panics if the ray misses.
pub fn stratified_sample<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    rng: Option<&mut R>,
    last: LastInterval,
) -> SampledRay {
    let segment = ray.segment.expect("stratified_sample needs a hit ray");
    let (mut t, mut delta) = (Vec::with_capacity(n), Vec::with_capacity(n));
    stratified_into(segment, n, rng, last, &mut t, &mut delta);
    let positions = t.iter().map(|&ti| ray.at(ti)).collect();
    SampledRay { t, positions, delta }
}

/// Saved forward state of [`synthesize_intensity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCache<T> {
    pub optical_depth: T,
    pub intensity: T,
}

/// `I = I₀ exp(-Σ μᵢ δᵢ)`. The sum is accumulated in 64-bit.
pub fn synthesize_intensity<T: Real>(mu: &[T], delta: &[T], i0: T) -> (T, SynthCache<T>) {
    debug_assert_eq!(mu.len(), delta.len());
    let depth: f64 = mu
        .iter()
        .zip(delta)
        .map(|(m, d)| m.to_f64().unwrap() * d.to_f64().unwrap())
        .sum();
    let intensity = i0 * T::of((-depth).exp());
    (
        intensity,
        SynthCache {
            optical_depth: T::of(depth),
            intensity,
        },
    )
}

/// `∂L/∂μᵢ = ∂L/∂I · (-δᵢ · I)`, written into `out`.
pub fn synthesize_backward_into<T: Real>(cache: &SynthCache<T>, dl_di: T, delta: &[T], out: &mut [T]) {
    let scale = -dl_di * cache.intensity;
    for (o, &d) in out.iter_mut().zip(delta) {
        *o = scale * d;
    }
}

pub fn synthesize_backward<T: Real>(cache: &SynthCache<T>, dl_di: T, delta: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); delta.len()];
    synthesize_backward_into(cache, dl_di, delta, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    use super::*;
    use crate::rng;

    fn seg(a: f64, b: f64) -> Segment {
        Segment { t_near: a, t_far: b }
    }

    #[test]
    fn midpoints() {
        let (mut t, mut d) = (vec![], vec![]);
        stratified_into::<StdRng>(seg(0.0, 4.0), 4, None, LastInterval::CloseToFar, &mut t, &mut d);
        assert_eq!(t, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(d, vec![1.0, 1.0, 1.0, 0.5]);
        stratified_into::<StdRng>(seg(0.0, 4.0), 4, None, LastInterval::Drop, &mut t, &mut d);
        assert_eq!(d, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn jitter_occupies_every_bin() {
        let mut r = rng::stream(3, 0, 9);
        let (mut t, mut d) = (vec![], vec![]);
        stratified_into(seg(1.0, 7.0), 192, Some(&mut r), LastInterval::CloseToFar, &mut t, &mut d);
        let bin = 6.0 / 192.0;
        for (i, &ti) in t.iter().enumerate() {
            assert!(ti >= 1.0 + bin * i as f64 && ti <= 1.0 + bin * (i + 1) as f64);
        }
        assert!(d.iter().all(|&x| x >= 0.0));
        // 192 samples for a 128³ target exceeds the grid size
        assert!(t.len() > 128);
    }

    #[test]
    fn sampled_positions_follow_the_ray() {
        let ray = Ray {
            origin: Vec3::new(-2.0, 0.0, 0.0),
            direction: Vec3::new(1.0, 0.0, 0.0),
            segment: Some(seg(1.0, 3.0)),
        };
        let s = stratified_sample::<StdRng>(&ray, 4, None, LastInterval::CloseToFar);
        assert_relative_eq!(s.positions[0].x, -0.75);
        for i in 0..3 {
            assert_relative_eq!((s.positions[i + 1] - s.positions[i]).norm(), s.delta[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_attenuation_is_identity() {
        let (i, _) = synthesize_intensity(&[0.0f32; 10], &[1.0; 10], 1.0);
        assert_eq!(i, 1.0);
    }

    #[test]
    fn uniform_attenuation_one_over_e() {
        let (i, _) = synthesize_intensity(&[0.01f64; 100], &[1.0; 100], 2.0);
        assert_relative_eq!(i, 2.0 * (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn backward_examples() {
        let delta = [0.5f64; 6];
        let (_, cache) = synthesize_intensity(&[0.2; 6], &delta, 1.0);
        assert!(synthesize_backward(&cache, 0.0, &delta).iter().all(|&g| g == 0.0));
        let g = synthesize_backward(&cache, 1.0, &delta);
        assert!(g.windows(2).all(|w| w[0] == w[1]));
        assert_relative_eq!(g[0], -0.5 * (-0.6f64).exp(), epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_log_domain_oracle(seed in any::<u64>(), n in 1usize..300) {
            let mut r = StdRng::seed_from_u64(seed);
            let mu: Vec<f32> = (0..n).map(|_| r.random::<f32>()).collect();
            let delta: Vec<f32> = (0..n).map(|_| r.random::<f32>() * 0.05).collect();
            let (i, _) = synthesize_intensity(&mu, &delta, 1.0f32);
            let depth: f64 = mu.iter().zip(&delta).map(|(&m, &d)| m as f64 * d as f64).sum();
            let oracle = (-depth).exp();
            prop_assert!(((i as f64 - oracle) / oracle).abs() < 1e-6);
        }

        #[test]
        fn intensity_bounded_and_permutation_invariant(seed in any::<u64>(), n in 1usize..64) {
            let mut r = StdRng::seed_from_u64(seed);
            let mu: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { r.random() } else { 0.0 }).collect();
            let delta: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0).collect();
            let (i, c) = synthesize_intensity(&mu, &delta, 1.0);
            prop_assert!(i > 0.0 && i <= 1.0);
            prop_assert_eq!(i == 1.0, c.optical_depth == 0.0);
            let mut pairs: Vec<(f64, f64)> = mu.iter().copied().zip(delta.iter().copied()).collect();
            pairs.reverse();
            pairs.rotate_left(n / 3);
            let (m2, d2): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (i2, _) = synthesize_intensity(&m2, &d2, 1.0);
            prop_assert!((i - i2).abs() <= 1e-12 * i.max(1e-300));
        }

        #[test]
        fn backward_matches_finite_differences(seed in any::<u64>(), n in 2usize..40) {
            let mut r = StdRng::seed_from_u64(seed);
            let mu: Vec<f64> = (0..n).map(|_| r.random()).collect();
            let delta: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 0.2).collect();
            let target = 0.3;
            let loss = |m: &[f64]| {
                let (i, _) = synthesize_intensity(m, &delta, 1.0);
                (i - target).powi(2)
            };
            let (i, cache) = synthesize_intensity(&mu, &delta, 1.0);
            let g = synthesize_backward(&cache, 2.0 * (i - target), &delta);
            let h = 1e-6;
            for k in 0..n {
                let mut p = mu.clone();
                let mut q = mu.clone();
                p[k] += h;
                q[k] -= h;
                let fd = (loss(&p) - loss(&q)) / (2.0 * h);
                let scale = fd.abs().max(g[k].abs()).max(1e-10);
                prop_assert!((fd - g[k]).abs() / scale < 1e-4, "k={} fd={} g={}", k, fd, g[k]);
            }
        }

        #[test]
        fn refinement_is_first_order(c in 0.2f64..1.0, a in 0.5f64..2.0) {
            // smooth field μ(t) = c·(1 + 0.5 sin(a t)) on t ∈ [0, 4]
            let field = |t: f64| c * (1.0 + 0.5 * (a * t).sin());
            let exact_depth = c * (4.0 + 0.5 * (1.0 - (4.0 * a).cos()) / a);
            let exact = (-exact_depth).exp();
            let err = |n: usize| {
                let (mut t, mut d) = (vec![], vec![]);
                stratified_into::<StdRng>(seg(0.0, 4.0), n, None, LastInterval::CloseToFar, &mut t, &mut d);
                let mu: Vec<f64> = t.iter().map(|&x| field(x)).collect();
                (synthesize_intensity(&mu, &d, 1.0).0 - exact).abs()
            };
            let ratio = err(64) / err(128);
            prop_assert!((1.5..=3.0).contains(&ratio), "ratio {}", ratio);
        }
    }
}
