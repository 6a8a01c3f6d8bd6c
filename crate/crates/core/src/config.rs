//! Declarative run configuration (TOML) with centralized defaults.
//!
//! Relative paths are resolved against the working directory. The resolved
//! configuration (defaults and overrides applied) is written verbatim to
//! `config.resolved` in the run directory and can be fed back in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{AgeBins, AgeBounds, IngestLimits};
use crate::model::{AttentionHeadSpec, BackboneSpec, NetworkSpec};
use crate::phantom::PhantomSpec;
use crate::preprocess::AugmentationPolicy;
use crate::training::{derive_seed, NadamConfig, PlateauConfig, TrainRunConfig};

pub const ENV_OUTPUT_ROOT: &str = "ANTEVERSION_OUTPUT_ROOT";
pub const ENV_DEVICE: &str = "ANTEVERSION_DEVICE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("unsupported device `{0}` (only `cpu` is available)")]
    Device(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub metadata: PathBuf,
    pub image_root: PathBuf,
    pub limits: IngestLimits,
    /// Interior age-group edges for stats and reports.
    pub age_bins: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            metadata: PathBuf::from("phantom_out/metadata.csv"),
            image_root: PathBuf::from("phantom_out/images"),
            limits: IngestLimits::default(),
            age_bins: vec![45.0, 65.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Square network input side; must be divisible by 2^(backbone blocks).
    pub side: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { side: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainRunConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub stratify_by_gender: bool,
    /// Seed of the fold partition; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_seed: Option<u64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            stratify_by_gender: true,
            fold_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationConfig {
    /// Ages are min-max scaled with these bounds (clamped to [0, 1]).
    pub age_bounds: [f64; 2],
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        let b = AgeBounds::default();
        Self {
            age_bounds: [b.lo(), b.hi()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub histogram_bin_deg: f64,
    pub plots: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            histogram_bin_deg: 2.0,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_name: String,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneSpec,
    pub head: AttentionHeadSpec,
    pub augment: AugmentationPolicy,
    pub training: TrainingSection,
    pub optimizer: NadamConfig,
    pub schedule: PlateauConfig,
    pub cv: CvConfig,
    pub normalization: NormalizationConfig,
    pub report: ReportConfig,
    /// Used by the `phantom` subcommand when given a config.
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_name: "run".into(),
            output_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            backbone: BackboneSpec::default(),
            head: AttentionHeadSpec::default(),
            augment: AugmentationPolicy::default(),
            training: TrainingSection::default(),
            optimizer: NadamConfig::default(),
            schedule: PlateauConfig::default(),
            cv: CvConfig::default(),
            normalization: NormalizationConfig::default(),
            report: ReportConfig::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Applies the environment overrides (output root, device).
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(root) = var(ENV_OUTPUT_ROOT).filter(|s| !s.is_empty()) {
            self.output_root = PathBuf::from(root);
        }
        if let Some(device) = var(ENV_DEVICE).filter(|s| !s.is_empty()) {
            if !device.eq_ignore_ascii_case("cpu") {
                return Err(ConfigError::Device(device));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name == ".." {
            return Err(ConfigError::Invalid(format!("run_name `{}` must be a plain directory name", self.run_name)));
        }
        self.network_spec().validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.age_bounds()?;
        self.age_bins()?;
        if !(self.report.histogram_bin_deg > 0.0) {
            return Err(ConfigError::Invalid("report.histogram_bin_deg must be positive".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_name)
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_side: self.preprocess.side,
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            init_seed: derive_seed(self.seed, &[10]),
        }
    }

    pub fn train_config(&self) -> TrainRunConfig {
        TrainRunConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            seed: derive_seed(self.seed, &[20]),
            augment: self.augment.clone(),
            optimizer: self.optimizer,
            schedule: self.schedule,
        }
    }

    pub fn fold_seed(&self) -> u64 {
        self.cv.fold_seed.unwrap_or(self.seed)
    }

    pub fn age_bounds(&self) -> Result<AgeBounds, ConfigError> {
        let [lo, hi] = self.normalization.age_bounds;
        AgeBounds::new(lo, hi).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn age_bins(&self) -> Result<AgeBins, ConfigError> {
        AgeBins::new(self.data.age_bins.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// The canonical TOML text of this configuration.
    pub fn resolved_text(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Hex SHA-256 of [`Self::resolved_text`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.resolved_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
