//! Run configuration.
//!
//! A single JSON file drives every command; all fields have defaults, so an
//! empty object `{}` is a valid config with the standard settings (margin 1,
//! regularizer weight 1, four learnable abnormal prompts, region weight 1.5,
//! learning rate 2e-3, 15x15 native grid, 4x aggregation resolution, logit
//! scale 100). Flags override the file; secrets come only from the
//! environment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::TrainConfig;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Synthetic,
    FeatureImport,
}

/// Test-suite shape for the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub normal_images: usize,
    pub anomalous_images: usize,
    /// Perturbation magnitude as a multiple of `noise_sigma * sqrt(d)`.
    pub perturbation_multiple: f64,
    pub anomaly_patches: usize,
    pub patch_size: usize,
    pub eval_seeds: Vec<u64>,
    /// Pool pixels across the category for pixel AUROC (the alternative
    /// averages per-image AUROCs).
    pub pooled_pixels: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            normal_images: 20,
            anomalous_images: 20,
            perturbation_multiple: 3.0,
            anomaly_patches: 1,
            patch_size: 3,
            eval_seeds: vec![0],
            pooled_pixels: true,
        }
    }
}

/// Endpoint settings for live caption generation. The API key is read from
/// `FGAD_API_KEY`, never from this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSettings {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub temperature: f64,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderSpec,
    pub native_h: usize,
    pub native_w: usize,
    /// Resolution multiplier used during region aggregation only.
    pub highres_factor: usize,
    /// Number of normal reference images (k-shot).
    pub shots: usize,
    /// Pre-normalization strength of region signal in synthetic scenes.
    pub feature_gain: f64,
    pub qf_learning_rate: f64,
    pub qf_epochs: usize,
    pub anomaly_words: Vec<String>,
    pub mode: RunMode,
    /// Caption fixture category (synthetic mode).
    pub fixture: Option<String>,
    /// Extra caption documents loaded from this directory.
    pub fixtures_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub bundle_dir: PathBuf,
    /// Token-grid files used as shots in feature-import mode.
    pub feature_files: Vec<PathBuf>,
    pub endpoint: Option<EndpointSettings>,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            encoder: EncoderSpec::default(),
            native_h: 15,
            native_w: 15,
            highres_factor: 4,
            shots: 4,
            feature_gain: 3.0,
            qf_learning_rate: 0.05,
            qf_epochs: 300,
            anomaly_words: default_anomaly_words(),
            mode: RunMode::Synthetic,
            fixture: None,
            fixtures_dir: None,
            cache_dir: None,
            bundle_dir: PathBuf::from("bundles"),
            feature_files: Vec::new(),
            endpoint: None,
            suite: SuiteConfig::default(),
        }
    }
}

pub fn default_anomaly_words() -> Vec<String> {
    ["damaged", "broken", "with defect", "with flaw", "abnormal"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!(
            "cannot read config {}: {e}",
            path.display()
        )))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        if self.native_h == 0 || self.native_w == 0 {
            return Err(Error::Config("native grid must be nonempty".into()));
        }
        if self.highres_factor == 0 {
            return Err(Error::Config("highres_factor must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.anomaly_words.is_empty() {
            return Err(Error::Config("anomaly_words must be nonempty".into()));
        }
        if self.mode == RunMode::FeatureImport && self.feature_files.is_empty() {
            return Err(Error::Config(
                "feature-import mode needs at least one feature file".into(),
            ));
        }
        Ok(())
    }

    /// Route all randomness through one seed (the `--seed` flag).
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.encoder.seed = seed;
        self.suite.eval_seeds = vec![seed];
    }
}
