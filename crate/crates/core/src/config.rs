//! Experiment configuration: one TOML file with a section per stage.
//!
//! Scan geometry, phantom and noise have no defaults; every physics field
//! must be spelled out. Training, baseline and metric sections may be omitted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FdkConfig, SartConfig};
use crate::encoding::{FrequencyEncoder, HashEncoderConfig};
use crate::error::{Error, Result};
use crate::field::MlpConfig;
use crate::geometry::ScanGeometry;
use crate::metrics::MetricParams;
use crate::phantom::PhantomKind;
use crate::trainer::{EncoderConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPhantomSection", into = "RawPhantomSection")]
pub struct PhantomSection {
    pub kind: PhantomKind,
    /// `[nx, ny, nz]`.
    pub dims: [usize; 3],
    /// Line-integral units per mm for a normalised attenuation of 1.
    pub attenuation_scale: f64,
    /// Midpoint samples per ray when simulating projections.
    pub projector_samples: usize,
}

/// On-disk form of `[phantom]`: the shape parameters sit next to `kind`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhantomSection {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius_fraction: Option<f64>,
    dims: [usize; 3],
    attenuation_scale: f64,
    projector_samples: usize,
}

impl TryFrom<RawPhantomSection> for PhantomSection {
    type Error = String;

    fn try_from(r: RawPhantomSection) -> std::result::Result<Self, String> {
        let kind = match (r.kind.as_str(), r.value, r.radius_fraction) {
            ("uniform_sphere", Some(value), Some(radius_fraction)) => PhantomKind::UniformSphere { value, radius_fraction },
            ("uniform_sphere", _, _) => return Err("uniform_sphere needs `value` and `radius_fraction`".into()),
            (_, None, None) => r.kind.parse().map_err(|e: Error| e.to_string())?,
            (k, _, _) => return Err(format!("`value` and `radius_fraction` only apply to uniform_sphere, not {k}")),
        };
        Ok(Self {
            kind,
            dims: r.dims,
            attenuation_scale: r.attenuation_scale,
            projector_samples: r.projector_samples,
        })
    }
}

impl From<PhantomSection> for RawPhantomSection {
    fn from(p: PhantomSection) -> Self {
        let (kind, value, radius_fraction) = match p.kind {
            PhantomKind::SheppLogan3d => ("shepp_logan_3d", None, None),
            PhantomKind::NestedBoxes => ("nested_boxes", None, None),
            PhantomKind::UniformSphere { value, radius_fraction } => ("uniform_sphere", Some(value), Some(radius_fraction)),
        };
        Self {
            kind: kind.to_owned(),
            value,
            radius_fraction,
            dims: p.dims,
            attenuation_scale: p.attenuation_scale,
            projector_samples: p.projector_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Gaussian σ as a fraction of the mean clean intensity.
    pub fraction: f64,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Settings for the frequency-encoded ablation (`naf-frequency`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencySection {
    pub bands: usize,
    /// Network for the ablation; `None` keeps the `[train]` network.
    pub mlp: Option<MlpConfig>,
}

impl Default for FrequencySection {
    fn default() -> Self {
        Self { bands: 10, mlp: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for noise and training.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub geometry: ScanGeometry,
    pub phantom: PhantomSection,
    pub noise: NoiseSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub frequency: FrequencySection,
    #[serde(default)]
    pub fdk: FdkConfig,
    #[serde(default)]
    pub sart: SartConfig,
    #[serde(default)]
    pub metrics: MetricParams,
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry the file name and the line and
    /// column of the offending key.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string().trim_end().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let p = &self.phantom;
        if p.dims.contains(&0) {
            return Err(Error::Config("phantom.dims must be positive".into()));
        }
        if !(p.attenuation_scale > 0.0 && p.attenuation_scale.is_finite()) {
            return Err(Error::Config("phantom.attenuation_scale must be positive".into()));
        }
        let max_dim = p.dims.iter().copied().max().unwrap_or(0);
        if p.projector_samples < max_dim {
            return Err(Error::Config(format!(
                "phantom.projector_samples ({}) must be at least the largest dimension ({max_dim})",
                p.projector_samples
            )));
        }
        if !(0.0..1.0).contains(&self.noise.fraction) {
            return Err(Error::Config("noise.fraction must lie in [0, 1)".into()));
        }
        if self.frequency.bands == 0 {
            return Err(Error::Config("frequency.bands must be at least 1".into()));
        }
        if let Some(m) = self.frequency.mlp {
            m.validate()?;
        }
        self.train_config().validate()?;
        self.fdk.validate()?;
        self.sart.validate()?;
        if !(self.metrics.data_range > 0.0) {
            return Err(Error::Config("metrics.data_range must be positive".into()));
        }
        Ok(())
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise.seed.unwrap_or(self.seed)
    }

    /// `[train]` with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Training configuration for the frequency-encoded ablation.
    pub fn frequency_train_config(&self) -> TrainConfig {
        let mut cfg = self.train_config();
        cfg.encoder = EncoderConfig::Frequency(FrequencyEncoder {
            bands: self.frequency.bands,
        });
        if let Some(m) = self.frequency.mlp {
            cfg.mlp = m;
        }
        cfg
    }

    /// The desk benchmark: 64³ Shepp-Logan, 50 views over 180°, 3% noise.
    pub fn desk() -> Self {
        let geometry = ScanGeometry::desk(64.0, 128, 50, 0.0, std::f64::consts::PI).expect("valid desk geometry");
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            geometry,
            phantom: PhantomSection {
                kind: PhantomKind::SheppLogan3d,
                dims: [64, 64, 64],
                attenuation_scale: 0.05,
                projector_samples: 128,
            },
            noise: NoiseSection {
                fraction: 0.03,
                seed: None,
            },
            // finest level at the grid resolution: finer levels fit the 3% noise
            train: TrainConfig {
                encoder: EncoderConfig::Hash(HashEncoderConfig::with_finest(64)),
                ..TrainConfig::default()
            },
            frequency: FrequencySection::default(),
            fdk: FdkConfig::default(),
            sart: SartConfig::default(),
            metrics: MetricParams::default(),
        }
    }
}
