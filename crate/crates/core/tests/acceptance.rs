//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per check and exits non-zero if any check fails.
//!
//! The desk reconstruction (64³ Shepp-Logan, 50 views over 180°, 3% noise) is
//! trained once in strict mode and shared by the reconstruction, ablation,
//! view-sweep and determinism checks.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use naf_core::baselines::{fdk_unnormalized, FdkConfig};
use naf_core::config::ExperimentConfig;
use naf_core::encoding::{HashEncoderConfig, DEFAULT_PRIMES};
use naf_core::experiment::{reconstruct_in_memory, simulate_in_memory, Method, Reconstruction};
use naf_core::field::MlpConfig;
use naf_core::geometry::{intersect_aabb, Aabb, ScanGeometry, Segment, Vec3};
use naf_core::metrics::{evaluate, psnr, ssim, MetricParams, SsimParams, PSNR_CAP_DB};
use naf_core::phantom::{make_phantom, project_volume, PhantomKind, Volume};
use naf_core::raycast::{stratified_into, stratified_sample, synthesize_backward, synthesize_intensity, LastInterval};
use naf_core::trainer::{batch_loss, loss_and_grads, EncoderConfig, FieldModel, ModelGrads, SampleBatch, TargetRay, TraceRow};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use ndarray::Array2;
use rand::{Rng, SeedableRng};

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: &str, what: &str, pass: bool, detail: String) {
        println!("{} criterion {id}: {what} ({detail})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

// ---- 1: end-to-end gradients --------------------------------------------

fn micro_model(seed: u64) -> FieldModel<f64> {
    let enc = EncoderConfig::Hash(HashEncoderConfig {
        levels: 4,
        table_size: 1 << 10,
        features_per_level: 2,
        base_resolution: 4,
        growth_factor: 2.0,
        primes: DEFAULT_PRIMES,
    });
    let mut m = FieldModel::<f64>::new(&enc, MlpConfig::default(), Aabb::centered_cube(1.0), seed).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in m.encoder.params_mut() {
        *p = r.random_range(-1.0..1.0);
    }
    m
}

fn micro_batch(m: &FieldModel<f64>) -> SampleBatch<f64> {
    let g = ScanGeometry::desk(1.0, 5, 2, 0.0, PI).unwrap();
    let a = g.view_angles();
    let rays = [
        TargetRay { ray: g.pixel_ray(a[0], 2, 2), target: 0.2, id: 0, epoch: 0 },
        TargetRay { ray: g.pixel_ray(a[1], 1, 3), target: 0.7, id: 1, epoch: 0 },
    ];
    SampleBatch::from_rays(&rays, &m.extent, 8, LastInterval::CloseToFar, 0.5, Some(3)).unwrap()
}

/// Signs of every hidden pre-activation over the batch.
fn relu_pattern(m: &FieldModel<f64>, b: &SampleBatch<f64>) -> (Vec<bool>, f64) {
    let mut f = Array2::zeros((b.positions.nrows(), m.encoder.output_dim()));
    m.encoder.encode_batch(b.positions.view(), f.view_mut());
    let z = m.mlp.hidden_preactivations(f.view()).unwrap();
    let margin = z.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    (z.iter().map(|v| *v > 0.0).collect(), margin)
}

/// Worst relative error between central differences and the analytic
/// gradient, compared relative to the larger of the two magnitudes floored at
/// 1e-6 of the group's largest gradient. `None` when a perturbation moves the
/// network onto another linear piece, where central differences are invalid.
fn worst_fd(grads: &[f64], h: f64, mut eval: impl FnMut(usize, f64) -> Option<f64>) -> Option<f64> {
    let gmax = grads.iter().fold(0f64, |m, g| m.max(g.abs()));
    let mut worst = 0f64;
    for (i, &an) in grads.iter().enumerate() {
        let fd = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
        let scale = fd.abs().max(an.abs()).max(1e-6 * gmax);
        worst = worst.max((fd - an).abs() / scale);
    }
    Some(worst)
}

/// FD check of one micro-instance: `(mlp, hash, mu)` errors, or `None` if a
/// stencil point crosses a ReLU kink.
fn fd_instance(m: &FieldModel<f64>, h: f64) -> Option<(f64, f64, f64)> {
    let b = micro_batch(m);
    let (pattern, margin) = relu_pattern(m, &b);
    if margin < h {
        return None;
    }
    let mut g = ModelGrads::zeros(m);
    loss_and_grads(m, &b, &mut g, true).unwrap();
    let loss_at = |mm: &FieldModel<f64>| (relu_pattern(mm, &b).0 == pattern).then(|| batch_loss(mm, &b).unwrap());
    let mlp = worst_fd(&g.mlp, h, |i, d| {
        let mut mm = m.clone();
        mm.mlp.params[i] += d;
        loss_at(&mm)
    })?;
    // includes table entries no sample reads, whose gradient must be zero
    let hash = worst_fd(&g.encoder, h, |i, d| {
        let mut mm = m.clone();
        mm.encoder.params_mut()[i] += d;
        loss_at(&mm)
    })?;
    // μ path: the compositor's gradient per sample
    let mu = m.query(b.positions.view()).unwrap();
    let n = b.samples_per_ray;
    let mut mu_err = 0f64;
    for r in 0..2 {
        let delta = &b.delta[r * n..(r + 1) * n];
        let mu_r = mu.as_slice().unwrap()[r * n..(r + 1) * n].to_vec();
        let (i, cache) = synthesize_intensity(&mu_r, delta, 1.0);
        let an = synthesize_backward(&cache, 2.0 * (i - b.targets[r]), delta);
        let e = worst_fd(&an, h, |k, d| {
            let mut v = mu_r.clone();
            v[k] += d;
            Some((synthesize_intensity(&v, delta, 1.0).0 - b.targets[r]).powi(2))
        })?;
        mu_err = mu_err.max(e);
    }
    Some((mlp, hash, mu_err))
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let h = 1e-3;
    // first seed whose stencil stays on one linear piece of the network
    let found = (0..64u64).find_map(|seed| fd_instance(&micro_model(seed), h).map(|e| (seed, e)));
    let t = start.elapsed();
    let (pass, detail) = match found {
        Some((seed, (mlp, hash, mu))) => (
            mlp < 1e-5 && hash < 1e-5 && mu < 1e-5 && t < Duration::from_secs(10),
            format!("instance seed {seed}: mlp {mlp:.1e}, hash {hash:.1e}, mu {mu:.1e}, {}", secs(t)),
        ),
        None => (false, "no kink-free instance in 64 seeds".into()),
    };
    rep.check("1", "finite differences, h=1e-3, f64, 2 rays x 8 samples, rel err < 1e-5, < 10 s", pass, detail);
}

// ---- 2: projector fidelity -----------------------------------------------

fn criterion_2(rep: &mut Report) {
    let start = Instant::now();
    let (radius, mu) = (40.0, 0.02);
    let centre = Vec3::zeros();
    let g = ScanGeometry::desk(64.0, 64, 8, 0.0, PI).unwrap();
    let mut worst = 0f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for (k, angle) in g.view_angles().into_iter().enumerate() {
        for (row, col) in [(32, 32), (20, 40), (45, 28), (32, 12)] {
            let ray = g.pixel_ray(angle, row, col);
            // exact chord of the sphere
            let oc = ray.origin - centre;
            let bq = oc.dot(&ray.direction);
            let disc = bq * bq - (oc.dot(&oc) - radius * radius);
            if disc <= 0.0 {
                continue;
            }
            let chord = 2.0 * disc.sqrt();
            let s = if k % 2 == 0 {
                stratified_sample(&ray, 256, Some(&mut rng), LastInterval::CloseToFar)
            } else {
                stratified_sample::<rand_chacha::ChaCha8Rng>(&ray, 256, None, LastInterval::CloseToFar)
            };
            let field: Vec<f64> = s.positions.iter().map(|p| if (p - centre).norm() <= radius { mu } else { 0.0 }).collect();
            let i = synthesize_intensity(&field, &s.delta, 1.0).0;
            let exact = (-mu * chord).exp();
            worst = worst.max((i - exact).abs() / exact);
        }
    }
    let t = start.elapsed();
    rep.check(
        "2",
        "uniform sphere intensity vs exp(-mu*chord) at 256 samples within 1%, < 1 s",
        worst < 0.01 && t < Duration::from_secs(1),
        format!("worst rel err {:.3}%, {}", worst * 100.0, secs(t)),
    );
}

// ---- 3, 4, 5, 7: desk benchmark ------------------------------------------

struct Desk {
    cfg: ExperimentConfig,
    naf: Reconstruction,
    naf_time: Duration,
}

fn run(method: Method, cfg: &ExperimentConfig) -> (Reconstruction, Duration) {
    let sim = simulate_in_memory(cfg).unwrap();
    let start = Instant::now();
    let rec = reconstruct_in_memory(method, &sim.noisy, cfg, Some(&sim.truth), |row: &TraceRow| {
        if let Some(p) = row.psnr {
            eprintln!("  [{} v{}] iter {:>5}  psnr {p:.2} dB", method.name(), cfg.geometry.num_views, row.iter);
        }
    })
    .unwrap();
    (rec, start.elapsed())
}

fn metrics_of(rec: &Reconstruction) -> (f64, f64) {
    let r = rec.metadata.report.as_ref().unwrap();
    (r.psnr_db, r.ssim)
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.train.strict = true;
    cfg.train.eval_every = (cfg.train.iterations / 20).max(1);
    cfg
}

fn criterion_3(rep: &mut Report) -> Desk {
    let cfg = desk_config();
    let (naf, naf_time) = run(Method::Naf, &cfg);
    let (fdk, _) = run(Method::Fdk, &cfg);
    let (sart, sart_time) = run(Method::Sart, &cfg);
    let (n, f, s) = (metrics_of(&naf), metrics_of(&fdk), metrics_of(&sart));
    println!(
        "      desk: NAF {:.2} dB / {:.4}, FDK {:.2} dB / {:.4}, SART {:.2} dB / {:.4} ({})",
        n.0,
        n.1,
        f.0,
        f.1,
        s.0,
        s.1,
        secs(sart_time)
    );
    rep.check("3a", "NAF PSNR >= 28 dB", n.0 >= 28.0, format!("{:.2} dB", n.0));
    rep.check("3b", "NAF PSNR >= FDK + 3 dB", n.0 >= f.0 + 3.0, format!("margin {:+.2} dB", n.0 - f.0));
    rep.check("3c", "NAF PSNR >= SART - 0.5 dB", n.0 >= s.0 - 0.5, format!("margin {:+.2} dB", n.0 - s.0));
    rep.check("3d", "NAF SSIM > FDK SSIM", n.1 > f.1, format!("{:.4} vs {:.4}", n.1, f.1));
    // The budget is 20 minutes on 8 cores; scale it to the cores available.
    let threads = rayon::current_num_threads();
    let budget = Duration::from_secs_f64(20.0 * 60.0 * 8.0 / threads.min(8) as f64);
    rep.check(
        "3e",
        "NAF runtime <= 20 min on 8 cores",
        naf_time <= budget,
        format!("{} on {threads} thread(s), budget {}", secs(naf_time), secs(budget)),
    );
    Desk { cfg, naf, naf_time }
}

fn criterion_4(rep: &mut Report, desk: &Desk) {
    let (freq, t) = run(Method::NafFrequency, &desk.cfg);
    let trace = |r: &Reconstruction| -> Vec<(usize, f64)> {
        r.metadata.trace.iter().filter_map(|row| row.psnr.map(|p| (row.iter, p))).collect()
    };
    let (hash_tr, freq_tr) = (trace(&desk.naf), trace(&freq));
    let hash_final = hash_tr.last().unwrap().1;
    let freq_final = freq_tr.last().unwrap().1;
    println!("      hash trace: {hash_tr:?}");
    println!("      frequency trace: {freq_tr:?} ({})", secs(t));
    rep.check(
        "4a",
        "hash PSNR > frequency PSNR at equal iterations",
        hash_final > freq_final,
        format!("{hash_final:.2} vs {freq_final:.2} dB"),
    );
    let iters = desk.cfg.train.iterations;
    let reached = hash_tr.iter().find(|(_, p)| *p >= freq_final).map(|(i, _)| *i);
    let pass = reached.is_some_and(|i| i as f64 <= 0.6 * iters as f64);
    rep.check(
        "4b",
        "hash reaches frequency's final PSNR within 60% of the iterations",
        pass,
        match reached {
            Some(i) => format!("at iteration {i} of {iters} ({:.0}%)", 100.0 * i as f64 / iters as f64),
            None => "never".into(),
        },
    );
}

fn criterion_5(rep: &mut Report, desk: &Desk) {
    let mut rows = Vec::new();
    for views in [10, 25] {
        let mut cfg = desk.cfg.clone();
        cfg.geometry.num_views = views;
        cfg.train.eval_every = 0;
        rows.push((views, metrics_of(&run(Method::Naf, &cfg).0).0));
    }
    rows.push((50, metrics_of(&desk.naf).0));
    let pass = rows.windows(2).all(|w| w[1].1 >= w[0].1 - 0.5);
    let detail = rows.iter().map(|(v, p)| format!("{v} views {p:.2} dB")).collect::<Vec<_>>().join(", ");
    rep.check("5", "NAF PSNR non-decreasing over 10/25/50 views within 0.5 dB", pass, detail);
}

fn criterion_7(rep: &mut Report, desk: &Desk) {
    let (again, t) = run(Method::Naf, &desk.cfg);
    let a = desk.naf.checkpoint.as_ref().unwrap().to_bytes();
    let b = again.checkpoint.as_ref().unwrap().to_bytes();
    let same_ck = a == b;
    let same_vol = desk.naf.volume.data.iter().map(|v| v.to_bits()).eq(again.volume.data.iter().map(|v| v.to_bits()));
    rep.check(
        "7",
        "two strict desk runs give bitwise-identical checkpoints and volumes",
        same_ck && same_vol,
        format!("checkpoint {} bytes equal: {same_ck}, volume equal: {same_vol}, runs {} / {}", a.len(), secs(desk.naf_time), secs(t)),
    );
}

// ---- 6: metrics ------------------------------------------------------------

fn criterion_6(rep: &mut Report) {
    let e = Aabb::centered_cube(1.0);
    let truth = make_phantom(PhantomKind::SheppLogan3d, [32, 32, 32], e).unwrap();
    let same = evaluate(&truth, &truth, &MetricParams::default()).unwrap();
    rep.check(
        "6a",
        "identical volumes give the PSNR cap and SSIM 1.0 exactly",
        same.psnr_db == PSNR_CAP_DB && same.ssim == 1.0,
        format!("{} dB, SSIM {}", same.psnr_db, same.ssim),
    );
    let shifted = Volume {
        data: truth.data.mapv(|v| v + 0.1),
        extent: e,
    };
    let p = psnr(&shifted, &truth, 1.0).unwrap();
    rep.check("6b", "offset 0.1 on range 1.0 gives 20.00 +/- 0.01 dB", (p - 20.0).abs() <= 0.01, format!("{p:.4} dB"));
}

// ---- 8: property suites ----------------------------------------------------

fn property(rep: &mut Report, id: &str, what: &str, test: impl Fn(&mut TestRunner) -> Result<(), String>) {
    let mut runner = TestRunner::new_with_rng(
        RunnerConfig { cases: 100, failure_persistence: None, ..RunnerConfig::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let out = test(&mut runner);
    rep.check(id, what, out.is_ok(), out.err().unwrap_or_else(|| "100 cases".into()));
}

fn criterion_8(rep: &mut Report) {
    let coord = -60.0f64..60.0;
    property(rep, "8a", "ray/box segments start and end on the box", |r| {
        let b = Aabb::centered_cube(10.0);
        r.run(&((coord.clone(), coord.clone(), coord.clone()), (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)), |((x, y, z), (dx, dy, dz))| {
            let o = Vec3::new(x, y, z);
            let d = Vec3::new(dx, dy, dz);
            prop_assume!(d.norm() > 1e-3);
            let d = d.normalize();
            if let Some(Segment { t_near, t_far }) = intersect_aabb(&o, &d, &b) {
                prop_assert!(t_far > t_near && t_near >= 0.0);
                for t in [t_near, t_far] {
                    let p = o + d * t;
                    let inside = (0..3).all(|a| p[a].abs() <= 10.0 + 1e-9);
                    let inside_origin = (0..3).all(|a| o[a].abs() <= 10.0);
                    let on_face = (0..3).any(|a| (p[a].abs() - 10.0).abs() < 1e-9);
                    prop_assert!(inside && (on_face || (t == t_near && inside_origin)));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    });
    property(rep, "8b", "stratified samples are ordered, binned and tile the segment", |r| {
        r.run(&(0.0f64..50.0, 0.1f64..100.0, 2usize..300, any::<u64>()), |(t0, len, n, seed)| {
            let seg = Segment { t_near: t0, t_far: t0 + len };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (mut t, mut d) = (Vec::new(), Vec::new());
            stratified_into(seg, n, Some(&mut rng), LastInterval::CloseToFar, &mut t, &mut d);
            let bin = len / n as f64;
            for i in 0..n {
                prop_assert!(t[i] >= t0 + bin * i as f64 - 1e-9 && t[i] <= t0 + bin * (i + 1) as f64 + 1e-9);
            }
            prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
            let covered: f64 = d.iter().sum::<f64>() + (t[0] - t0);
            prop_assert!((covered - len).abs() < 1e-9 * len.max(1.0));
            Ok(())
        })
        .map_err(|e| e.to_string())
    });
    property(rep, "8c", "PSNR is symmetric and SSIM of a volume with itself is 1", |r| {
        r.run(&(any::<u64>(), 0.0f32..0.5), |(seed, amp)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f32> = (0..16 * 16 * 4).map(|_| rng.random()).collect();
            let a = Volume::from_fn([16, 16, 4], Aabb::centered_cube(1.0), |[x, y, z]| vals[x + 16 * (y + 16 * z)]);
            let b = Volume::from_fn([16, 16, 4], Aabb::centered_cube(1.0), |[x, y, z]| (vals[x + 16 * (y + 16 * z)] + amp).min(2.0));
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let s = SsimParams { window: 7, ..SsimParams::default() };
            prop_assert_eq!(ssim(&a, &a, 1.0, &s).unwrap(), 1.0);
            Ok(())
        })
        .map_err(|e| e.to_string())
    });
    let g = ScanGeometry::desk(16.0, 8, 4, 0.0, PI).unwrap();
    let sphere = make_phantom(PhantomKind::UniformSphere { value: 0.8, radius_fraction: 0.6 }, [8, 8, 8], g.volume_extent).unwrap();
    let p = project_volume(&sphere, &g, 16, 0.05).unwrap().to_line_integrals();
    property(rep, "8d", "FDK is linear in the projections before normalisation", |r| {
        r.run(&(0.05f64..8.0), |a| {
            let mut q = p.clone();
            q.images.mapv_inplace(|v| (v as f64 * a) as f32);
            let cfg = FdkConfig::default();
            let x = fdk_unnormalized(&p, [6, 6, 6], &cfg).unwrap();
            let y = fdk_unnormalized(&q, [6, 6, 6], &cfg).unwrap();
            let scale = x.data.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
            for (u, v) in x.data.iter().zip(y.data.iter()) {
                prop_assert!((a * *u as f64 - *v as f64).abs() <= 1e-5 * a * scale);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    });
    println!("      (each module's unit suite carries further property tests at 100+ cases)");
}

fn main() -> ExitCode {
    // Optional criterion numbers select a subset; harness flags such as
    // `--quiet` from `cargo test` are ignored.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wants = |c: &str| only.is_empty() || only.iter().any(|o| o == c);
    let mut rep = Report { failures: 0 };
    let start = Instant::now();
    if wants("1") {
        criterion_1(&mut rep);
    }
    if wants("2") {
        criterion_2(&mut rep);
    }
    if wants("6") {
        criterion_6(&mut rep);
    }
    if wants("8") {
        criterion_8(&mut rep);
    }
    if ["3", "4", "5", "7"].iter().any(|c| wants(c)) {
        let desk = criterion_3(&mut rep);
        if wants("4") {
            criterion_4(&mut rep, &desk);
        }
        if wants("5") {
            criterion_5(&mut rep, &desk);
        }
        if wants("7") {
            criterion_7(&mut rep, &desk);
        }
    }
    println!("acceptance: {} failure(s) in {}", rep.failures, secs(start.elapsed()));
    if rep.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
