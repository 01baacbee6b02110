//! End-to-end pipelines behind the command-line tool: simulate a scan,
//! reconstruct it, score the result, sweep view counts, export slices.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fdk_reconstruct, sart_reconstruct};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{self, PROJECTION_FORMAT_VERSION, VOLUME_FORMAT_VERSION};
use crate::metrics::{self, Axis, MetricReport};
use crate::phantom::{add_noise, make_phantom, project_volume, ProjectionSet, Volume};
use crate::trainer::{self, trace_csv, TraceRow, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naf,
    NafFrequency,
    Fdk,
    Sart,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naf, Method::NafFrequency, Method::Fdk, Method::Sart];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naf => "naf",
            Method::NafFrequency => "naf-frequency",
            Method::Fdk => "fdk",
            Method::Sart => "sart",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected naf, naf-frequency, fdk or sart)")))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

fn records(dir: &Path, names: &[&str]) -> Result<Vec<FileRecord>> {
    names
        .iter()
        .map(|n| {
            Ok(FileRecord {
                path: (*n).to_owned(),
                sha256: sha256_file(&dir.join(n))?,
            })
        })
        .collect()
}

/// Written next to every artifact; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub noise_seed: u64,
    pub strict: bool,
    pub volume_format_version: u32,
    pub projection_format_version: u32,
    pub checkpoint_format_version: u32,
    /// The full configuration as TOML.
    pub config: String,
    pub files: Vec<FileRecord>,
}

impl Manifest {
    fn new(command: &str, cfg: &ExperimentConfig, files: Vec<FileRecord>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            seed: cfg.seed,
            noise_seed: cfg.noise_seed(),
            strict: cfg.train.strict,
            volume_format_version: VOLUME_FORMAT_VERSION,
            projection_format_version: PROJECTION_FORMAT_VERSION,
            checkpoint_format_version: CHECKPOINT_VERSION,
            config: cfg.to_toml(),
            files,
        }
    }
}

pub struct Simulation {
    pub truth: Volume,
    pub clean: ProjectionSet,
    pub noisy: ProjectionSet,
}

/// Phantom, noise-free scan and noisy scan for `cfg`, in memory.
pub fn simulate_in_memory(cfg: &ExperimentConfig) -> Result<Simulation> {
    cfg.validate()?;
    let p = &cfg.phantom;
    let truth = make_phantom(p.kind, p.dims, cfg.geometry.volume_extent)?;
    let clean = project_volume(&truth, &cfg.geometry, p.projector_samples, p.attenuation_scale)?;
    let noisy = if cfg.noise.fraction == 0.0 {
        clean.clone()
    } else {
        add_noise(&clean, cfg.noise.fraction, cfg.noise_seed())?
    };
    Ok(Simulation { truth, clean, noisy })
}

pub const TRUTH_FILE: &str = "truth.raw";
pub const CLEAN_FILE: &str = "projections_clean.raw";
pub const NOISY_FILE: &str = "projections.raw";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the phantom, both scans and a manifest into `dir`.
pub fn simulate(cfg: &ExperimentConfig, dir: &Path) -> Result<Simulation> {
    let sim = simulate_in_memory(cfg)?;
    create_dir(dir)?;
    io::write_volume(&dir.join(TRUTH_FILE), &sim.truth)?;
    io::write_projections(&dir.join(CLEAN_FILE), &sim.clean)?;
    io::write_projections(&dir.join(NOISY_FILE), &sim.noisy)?;
    let files = records(
        dir,
        &[
            TRUTH_FILE,
            "truth.json",
            CLEAN_FILE,
            "projections_clean.json",
            NOISY_FILE,
            "projections.json",
        ],
    )?;
    io::write_json(&dir.join(MANIFEST_FILE), &Manifest::new("simulate", cfg, files))?;
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub method: Method,
    pub wall_ms: f64,
    pub dims: [usize; 3],
    pub manifest: Manifest,
    /// Training trace for neural methods.
    pub trace: Vec<TraceRow>,
    /// Residual norm per sweep for SART.
    pub sart_residuals: Vec<f64>,
    /// Against the optional ground truth.
    pub report: Option<MetricReport>,
}

pub struct Reconstruction {
    pub volume: Volume,
    pub checkpoint: Option<trainer::Checkpoint>,
    pub metadata: RunMetadata,
}

/// Rejects projections whose scan geometry differs from the configuration's.
pub fn check_geometry(proj: &ProjectionSet, cfg: &ExperimentConfig) -> Result<()> {
    if proj.geometry != cfg.geometry {
        return Err(Error::Geometry(
            "projection sidecar geometry differs from the configured geometry".into(),
        ));
    }
    Ok(())
}

/// Runs `method` in memory. `truth`, when given, is scored at the end and at
/// NAF eval steps.
pub fn reconstruct_in_memory(
    method: Method,
    proj: &ProjectionSet,
    cfg: &ExperimentConfig,
    truth: Option<&Volume>,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<Reconstruction> {
    cfg.validate()?;
    check_geometry(proj, cfg)?;
    let dims = cfg.phantom.dims;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut sart_residuals = Vec::new();
    let mut checkpoint = None;
    let volume = match method {
        Method::Naf | Method::NafFrequency => {
            let tc = if method == Method::Naf {
                cfg.train_config()
            } else {
                cfg.frequency_train_config()
            };
            let out = trainer::train_with(proj, &tc, truth, &mut on_row)?;
            trace = out.trace;
            let vol = trainer::extract_volume(&out.checkpoint.model, dims, proj.geometry.volume_extent)?;
            checkpoint = Some(out.checkpoint);
            vol
        }
        Method::Fdk => fdk_reconstruct(proj, dims, &cfg.fdk)?,
        Method::Sart => {
            let out = sart_reconstruct(proj, dims, &cfg.sart)?;
            sart_residuals = out.residuals;
            out.volume
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let report = truth.map(|t| metrics::evaluate(&volume, t, &cfg.metrics)).transpose()?;
    Ok(Reconstruction {
        volume,
        checkpoint,
        metadata: RunMetadata {
            method,
            wall_ms,
            dims,
            manifest: Manifest::new(&format!("reconstruct --method {}", method.name()), cfg, Vec::new()),
            trace,
            sart_residuals,
            report,
        },
    })
}

pub const RECON_FILE: &str = "recon.raw";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METADATA_FILE: &str = "run.json";
pub const TRACE_FILE: &str = "trace.csv";

/// [`reconstruct_in_memory`] plus the volume, checkpoint, trace and
/// metadata files in `dir`.
pub fn reconstruct(
    method: Method,
    proj: &ProjectionSet,
    cfg: &ExperimentConfig,
    truth: Option<&Volume>,
    dir: &Path,
    on_row: impl FnMut(&TraceRow),
) -> Result<Reconstruction> {
    create_dir(dir)?;
    let mut rec = reconstruct_in_memory(method, proj, cfg, truth, on_row)?;
    io::write_volume(&dir.join(RECON_FILE), &rec.volume)?;
    let mut names = vec![RECON_FILE, "recon.json"];
    if let Some(ck) = &rec.checkpoint {
        ck.save(&dir.join(CHECKPOINT_FILE))?;
        io::write_atomic(&dir.join(TRACE_FILE), trace_csv(&rec.metadata.trace).as_bytes())?;
        names.extend([CHECKPOINT_FILE, TRACE_FILE]);
    }
    rec.metadata.manifest.files = records(dir, &names)?;
    io::write_json(&dir.join(METADATA_FILE), &rec.metadata)?;
    Ok(rec)
}

/// Scores `recon` against `truth`. With `resample`, a size mismatch is
/// resolved by trilinearly resampling the reconstruction onto the truth grid.
pub fn evaluate(recon: &Volume, truth: &Volume, params: &metrics::MetricParams, resample: bool) -> Result<MetricReport> {
    if recon.dims() != truth.dims() {
        if !resample {
            return Err(Error::Shape(format!(
                "reconstruction is {:?} but ground truth is {:?} (pass --resample to resample)",
                recon.dims(),
                truth.dims()
            )));
        }
        return metrics::evaluate(&recon.resampled(truth.dims()), truth, params);
    }
    metrics::evaluate(recon, truth, params)
}

pub const REPORT_FILE: &str = "report.json";
pub const SLICES_FILE: &str = "slices.csv";

/// Writes the report JSON and the per-slice CSV into `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    io::write_json(&dir.join(REPORT_FILE), report)?;
    io::write_atomic(&dir.join(SLICES_FILE), report.per_slice.to_csv().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub views: usize,
    pub method: Method,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from("views,method,psnr,ssim,wall_ms,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        let err = if err.is_empty() { err } else { format!("\"{err}\"") };
        writeln!(
            out,
            "{},{},{},{},{:.1},{}",
            r.views,
            r.method.name(),
            opt(r.psnr),
            opt(r.ssim),
            r.wall_ms,
            err
        )
        .unwrap();
    }
    out
}

fn sweep_cell(method: Method, views: usize, sim: &Result<Simulation>, cfg: &ExperimentConfig, dir: Option<&Path>) -> SweepRow {
    let start = Instant::now();
    let result = sim.as_ref().map_err(|e| e.to_string()).and_then(|sim| {
        let run = match dir {
            Some(d) => {
                let cell = d.join(format!("v{views}_{}", method.name()));
                reconstruct(method, &sim.noisy, cfg, Some(&sim.truth), &cell, |_| {})
            }
            None => reconstruct_in_memory(method, &sim.noisy, cfg, Some(&sim.truth), |_| {}),
        };
        run.map_err(|e| e.to_string())
    });
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match result {
        Ok(rec) => {
            let report = rec.metadata.report.expect("truth was supplied");
            SweepRow {
                views,
                method,
                psnr: Some(report.psnr_db),
                ssim: Some(report.ssim),
                wall_ms,
                error: None,
            }
        }
        Err(error) => SweepRow {
            views,
            method,
            psnr: None,
            ssim: None,
            wall_ms,
            error: Some(error),
        },
    }
}

/// Simulates, reconstructs and scores every `(views, method)` cell. A failing
/// cell becomes an error row and the sweep carries on. With `dir`, each cell
/// writes into `dir/v{views}_{method}` and the table into `dir/sweep.csv`.
///
/// With `parallel` the cells of one view count run concurrently; rows keep
/// their sequential order and `on_row` fires once the batch is done.
pub fn sweep_views(
    cfg: &ExperimentConfig,
    view_counts: &[usize],
    methods: &[Method],
    dir: Option<&Path>,
    parallel: bool,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if view_counts.is_empty() || methods.is_empty() {
        return Err(Error::Config("sweep needs at least one view count and one method".into()));
    }
    let mut rows = Vec::new();
    for &views in view_counts {
        let mut cell_cfg = cfg.clone();
        cell_cfg.geometry.num_views = views;
        let sim = simulate_in_memory(&cell_cfg);
        if parallel {
            let batch: Vec<SweepRow> = methods
                .par_iter()
                .map(|&m| sweep_cell(m, views, &sim, &cell_cfg, dir))
                .collect();
            for row in batch {
                on_row(&row);
                rows.push(row);
            }
        } else {
            for &m in methods {
                let row = sweep_cell(m, views, &sim, &cell_cfg, dir);
                on_row(&row);
                rows.push(row);
            }
        }
    }
    if let Some(d) = dir {
        create_dir(d)?;
        io::write_atomic(&d.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// 8-bit slices along `axis`, windowed by the volume's global min and max.
/// A constant volume maps to mid-gray.
pub fn slice_images(vol: &Volume, axis: Axis) -> Vec<(usize, usize, Vec<u8>)> {
    let (lo, hi) = vol.min_max();
    let to_byte = |v: f32| -> u8 {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    };
    let [nx, ny, nz] = vol.dims();
    let (count, w, h) = match axis {
        Axis::X => (nx, ny, nz),
        Axis::Y => (ny, nx, nz),
        Axis::Z => (nz, nx, ny),
    };
    (0..count)
        .map(|k| {
            let mut px = Vec::with_capacity(w * h);
            for r in 0..h {
                for c in 0..w {
                    let v = match axis {
                        Axis::X => vol.get(k, c, r),
                        Axis::Y => vol.get(c, k, r),
                        Axis::Z => vol.get(c, r, k),
                    };
                    px.push(to_byte(v));
                }
            }
            (w, h, px)
        })
        .collect()
}

/// Writes one binary PGM per slice as `slice_{axis}_{index}.pgm`, indices
/// zero-padded to a common width.
pub fn export_slices(vol: &Volume, axis: Axis, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let images = slice_images(vol, axis);
    let digits = images.len().saturating_sub(1).to_string().len().max(3);
    let tag = match axis {
        Axis::X => "x",
        Axis::Y => "y",
        Axis::Z => "z",
    };
    images
        .into_iter()
        .enumerate()
        .map(|(k, (w, h, px))| {
            let path = dir.join(format!("slice_{tag}_{k:0digits$}.pgm"));
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&px);
            io::write_atomic(&path, &bytes)?;
            Ok(path)
        })
        .collect()
}

/// Header fields and pixels of a binary PGM.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::format(path, "not a binary 8-bit PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || parse(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if px.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, ScanGeometry};
    use crate::phantom::PhantomKind;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.geometry = ScanGeometry::desk(8.0, 12, 6, 0.0, std::f64::consts::PI).unwrap();
        cfg.phantom.kind = PhantomKind::UniformSphere {
            value: 0.5,
            radius_fraction: 0.7,
        };
        cfg.phantom.dims = [8, 8, 8];
        cfg.phantom.projector_samples = 16;
        cfg.phantom.attenuation_scale = 0.1;
        cfg.train.iterations = 3;
        cfg.train.batch_rays = 32;
        cfg.train.samples_per_ray = 8;
        cfg.train.encoder = crate::trainer::EncoderConfig::Hash(crate::encoding::HashEncoderConfig {
            levels: 2,
            table_size: 1 << 8,
            features_per_level: 2,
            base_resolution: 4,
            growth_factor: 2.0,
            primes: crate::encoding::DEFAULT_PRIMES,
        });
        cfg.sart.iterations = 2;
        cfg.metrics.ssim.window = 5;
        cfg
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("asd-pocs".parse::<Method>().unwrap_err().is_validation());
    }

    #[test]
    fn zero_noise_scans_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.noise.fraction = 0.0;
        simulate(&cfg, dir.path()).unwrap();
        for ext in ["raw", "json"] {
            let a = fs::read(dir.path().join(format!("projections_clean.{ext}"))).unwrap();
            let b = fs::read(dir.path().join(format!("projections.{ext}"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn simulate_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        simulate(&tiny(), a.path()).unwrap();
        simulate(&tiny(), b.path()).unwrap();
        for name in [TRUTH_FILE, CLEAN_FILE, NOISY_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn fdk_writes_no_checkpoint_and_naf_does() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let sim = simulate_in_memory(&cfg).unwrap();
        let fdk = dir.path().join("fdk");
        reconstruct(Method::Fdk, &sim.noisy, &cfg, None, &fdk, |_| {}).unwrap();
        assert!(fdk.join(RECON_FILE).exists() && !fdk.join(CHECKPOINT_FILE).exists());
        let naf = dir.path().join("naf");
        let rec = reconstruct(Method::Naf, &sim.noisy, &cfg, Some(&sim.truth), &naf, |_| {}).unwrap();
        assert!(naf.join(CHECKPOINT_FILE).exists() && naf.join(TRACE_FILE).exists());
        assert_eq!(rec.metadata.trace.len(), 3);
        let meta: RunMetadata = io::read_json(&naf.join(METADATA_FILE)).unwrap();
        assert_eq!(meta.method, Method::Naf);
        assert!(meta.report.is_some());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let cfg = tiny();
        let sim = simulate_in_memory(&cfg).unwrap();
        let mut other = cfg.clone();
        other.geometry.dso += 1.0;
        let e = reconstruct_in_memory(Method::Fdk, &sim.noisy, &other, None, |_| {})
            .err()
            .unwrap();
        assert!(e.is_validation());
    }

    #[test]
    fn sweep_has_one_row_per_cell_and_keeps_going_after_failures() {
        let mut cfg = tiny();
        cfg.train.iterations = 1;
        // a single view makes FDK fail while the others still run
        let rows = sweep_views(&cfg, &[1, 2], &[Method::Fdk, Method::Sart], None, false, |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].error.is_some() && rows[0].psnr.is_none());
        assert!(rows[1..].iter().all(|r| r.error.is_none() && r.psnr.is_some()));
        assert!(rows.iter().all(|r| r.wall_ms > 0.0));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("views,method,psnr,ssim,wall_ms,error\n"));
        let par = sweep_views(&cfg, &[1, 2], &[Method::Fdk, Method::Sart], None, true, |_| {}).unwrap();
        for (a, b) in rows.iter().zip(&par) {
            assert_eq!((a.views, a.method, a.psnr, &a.error), (b.views, b.method, b.psnr, &b.error));
        }
    }

    #[test]
    fn slices_of_a_constant_volume_are_mid_gray() {
        let v = Volume::from_fn([4, 5, 6], Aabb::centered_cube(1.0), |_| 0.3);
        let dir = tempfile::tempdir().unwrap();
        let files = export_slices(&v, Axis::Z, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let (w, h, px) = read_pgm(&files[0]).unwrap();
        assert_eq!((w, h), (4, 5));
        assert!(px.iter().all(|&p| p == 128));
        assert!(files[5].ends_with("slice_z_005.pgm"));
    }

    #[test]
    fn ramp_slices_preserve_order() {
        let v = Volume::from_fn([16, 3, 2], Aabb::centered_cube(1.0), |[x, y, z]| (x + 16 * y + 48 * z) as f32);
        let dir = tempfile::tempdir().unwrap();
        let files = export_slices(&v, Axis::Z, dir.path()).unwrap();
        let mut all = Vec::new();
        for f in files {
            all.extend(read_pgm(&f).unwrap().2);
        }
        assert!(all.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((all[0], *all.last().unwrap()), (0, 255));
    }
}
