//! TOML run configuration shared by all pipeline stages.

use crate::buildings::BuildingParams;
use crate::features::AblationFlags;
use crate::imagery::RetryPolicy;
use crate::models::{MlpHyperParams, RIDGE_GRID};
use crate::semantics::{HttpProviderConfig, DEFAULT_ROLE};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub isolines: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buildings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lod2: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub census: Option<PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_cache_dir() -> PathBuf {
    "cache".into()
}

fn default_output_dir() -> PathBuf {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageryConfig {
    /// `http(s)://…/{z}/{x}/{y}…` or `synthetic://<seed>/{z}/{x}/{y}`.
    pub tile_template: String,
    pub user_agent: String,
    pub timeout_s: u64,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
}

impl Default for ImageryConfig {
    fn default() -> Self {
        Self {
            tile_template: "https://tile.openstreetmap.org/{z}/{x}/{y}.png".into(),
            user_agent: concat!("heatprompt/", env!("CARGO_PKG_VERSION")).into(),
            timeout_s: 30,
            retry_attempts: 3,
            retry_base_delay_ms: 250,
        }
    }
}

impl ImageryConfig {
    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts.max(1),
            base_delay_ms: self.retry_base_delay_ms,
            jitter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CaptionerConfig {
    /// Offline captioner driven by in-mask color statistics.
    ImageStats,
    Http(HttpProviderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderConfig {
    /// Signed feature hashing of caption words into 512 buckets.
    Hashing,
    Http(HttpProviderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticsConfig {
    #[serde(default = "default_role")]
    pub role: String,
    #[serde(default = "default_captioner")]
    pub captioner: CaptionerConfig,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderConfig,
}

fn default_role() -> String {
    DEFAULT_ROLE.into()
}

fn default_captioner() -> CaptionerConfig {
    CaptionerConfig::ImageStats
}

fn default_embedder() -> EmbedderConfig {
    EmbedderConfig::Hashing
}

impl Default for SemanticsConfig {
    fn default() -> Self {
        Self {
            role: default_role(),
            captioner: default_captioner(),
            embedder: default_embedder(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Ridge,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Ridge => "ridge",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub folds: usize,
    pub models: Vec<ModelKind>,
    pub ridge_grid: Vec<f64>,
    /// Feature variants; the first is the base for paired comparisons.
    pub ablations: Vec<AblationFlags>,
    pub mlp: MlpHyperParams,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            models: vec![ModelKind::Linear, ModelKind::Ridge, ModelKind::Mlp],
            ridge_grid: RIDGE_GRID.to_vec(),
            ablations: vec![
                AblationFlags {
                    semantic: false,
                    composition: true,
                },
                AblationFlags::default(),
            ],
            mlp: MlpHyperParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Failure share of a stage above which the run exits with code 2.
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub imagery: ImageryConfig,
    #[serde(default)]
    pub semantics: SemanticsConfig,
    #[serde(default)]
    pub buildings: BuildingParams,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn default_parallelism() -> usize {
    8
}

fn default_failure_threshold() -> f64 {
    0.2
}

impl RunConfig {
    pub fn new(paths: PathsConfig) -> Self {
        Self {
            seed: 0,
            parallelism: default_parallelism(),
            failure_threshold: default_failure_threshold(),
            paths,
            imagery: ImageryConfig::default(),
            semantics: SemanticsConfig::default(),
            buildings: BuildingParams::default(),
            training: TrainingConfig::default(),
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.isolines);
        fix(&mut paths.cache_dir);
        fix(&mut paths.output_dir);
        for p in [&mut paths.buildings, &mut paths.lod2, &mut paths.census].into_iter().flatten() {
            fix(p);
        }
    }

    /// Checks settings and that every configured input file exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.paths;
        let inputs = std::iter::once(("isolines", Some(&p.isolines))).chain([
            ("buildings", p.buildings.as_ref()),
            ("lod2", p.lod2.as_ref()),
            ("census", p.census.as_ref()),
        ]);
        for (name, path) in inputs {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(ConfigError::Invalid(format!(
                        "paths.{name} = {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(ConfigError::Invalid("failure_threshold must lie in [0, 1]".into()));
        }
        let t = &self.training;
        if t.folds < 2 {
            return Err(ConfigError::Invalid("training.folds must be >= 2".into()));
        }
        if t.models.is_empty() || t.ablations.is_empty() {
            return Err(ConfigError::Invalid("training needs at least one model and one ablation".into()));
        }
        if t.ridge_grid.is_empty() || t.ridge_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(ConfigError::Invalid("training.ridge_grid must hold non-negative values".into()));
        }
        if self.buildings.floor_height_m <= 0.0 {
            return Err(ConfigError::Invalid("buildings.floor_height_m must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config.
    pub fn hash(&self) -> String {
        crate::hashing::sha256_hex(self.to_toml().as_bytes())
    }
}
