//! Run configuration, read from a TOML file.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/diabetes"
//!
//! [data]
//! csv = "diabetes.csv"
//! schema = "diabetes.schema.json"
//! test_fraction = 0.2
//!
//! [model]
//! architecture = "mlp"
//! hidden = [50, 50]
//!
//! [refiner]
//! kind = "stub"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::anchor::AnchorConfig;
use crate::discovery::{DiscoveryConfig, RefinerFailurePolicy};
use crate::mixture::{DbgdConfig, SgdConfig};
use crate::models::Architecture;
use crate::refiner::LlmClientConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Lr,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub csv: PathBuf,
    pub schema: PathBuf,
    /// Separate test file; when absent `csv` is split.
    #[serde(default)]
    pub test_csv: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_hidden() -> Vec<usize> {
    vec![50, 50]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Gate architecture; defaults to that of the black box.
    #[serde(default)]
    pub gate_architecture: Option<ArchitectureKind>,
    #[serde(default)]
    pub gate_hidden: Option<Vec<usize>>,
}

fn build_architecture(kind: ArchitectureKind, hidden: &[usize]) -> Result<Architecture, ConfigError> {
    match kind {
        ArchitectureKind::Lr => Ok(Architecture::Lr),
        ArchitectureKind::Mlp if hidden.is_empty() || hidden.contains(&0) => {
            Err(ConfigError::Invalid("mlp hidden sizes must be non-empty and positive".into()))
        }
        ArchitectureKind::Mlp => Ok(Architecture::mlp(hidden)),
    }
}

impl ModelConfig {
    pub fn f_architecture(&self) -> Result<Architecture, ConfigError> {
        build_architecture(self.architecture, &self.hidden)
    }

    pub fn g_architecture(&self) -> Result<Architecture, ConfigError> {
        let kind = self.gate_architecture.unwrap_or(self.architecture);
        let hidden = self.gate_hidden.as_deref().unwrap_or(&self.hidden);
        build_architecture(kind, hidden)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub iterations: usize,
    pub b_exploit: usize,
    pub b_explore: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        let d = DiscoveryConfig::default();
        Self {
            iterations: d.iterations,
            b_exploit: d.b_exploit,
            b_explore: d.b_explore,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    Stub,
    Remote,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub kind: RefinerKind,
    /// Keep going with unrefined rules when the remote refiner fails.
    pub fallback: bool,
    pub remote: LlmClientConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub init: SgdConfig,
    #[serde(default)]
    pub dbgd: DbgdConfig,
    #[serde(default)]
    pub anchor: AnchorConfig,
    #[serde(default)]
    pub discovery: LoopConfig,
    #[serde(default)]
    pub refiner: RefinerConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.data.csv = resolve(base_dir, &cfg.data.csv);
        cfg.data.schema = resolve(base_dir, &cfg.data.schema);
        cfg.data.test_csv = cfg.data.test_csv.map(|p| resolve(base_dir, &p));
        cfg.output_dir = resolve(base_dir, &cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let cfg = Self::from_toml_str(&text, base)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.test_csv.is_none() && !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        self.model.f_architecture()?;
        self.model.g_architecture()?;
        self.discovery_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.refiner.kind == RefinerKind::Remote {
            self.refiner
                .remote
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let mut paths = vec![("data csv", &self.data.csv), ("schema", &self.data.schema)];
        if let Some(t) = &self.data.test_csv {
            paths.push(("test csv", t));
        }
        for (what, p) in paths {
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    what,
                    path: p.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn discovery_config(&self) -> DiscoveryConfig {
        let on_refiner_failure = match (self.refiner.kind, self.refiner.fallback) {
            (RefinerKind::Remote, false) => RefinerFailurePolicy::Abort,
            _ => RefinerFailurePolicy::Degrade,
        };
        DiscoveryConfig {
            iterations: self.discovery.iterations,
            b_exploit: self.discovery.b_exploit,
            b_explore: self.discovery.b_explore,
            seed: self.seed,
            init: self.init,
            dbgd: self.dbgd,
            anchor: AnchorConfig {
                seed: self.seed,
                ..self.anchor
            },
            on_refiner_failure,
        }
    }
}
