//! On-disk layout of a trained model: one directory with fixed file names.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::data::{DataError, Encoder, FeatureSchema, Standardizer};
use crate::discovery::{metrics_from_csv, metrics_to_csv, IterationMetrics, RunState};
use crate::mixture::{BaselineSnapshot, MixtureModel};
use crate::models::DiffClassifier;
use crate::refiner::{transcripts_to_json, RefinementTranscript};
use crate::rules::{ruleset_from_json, ruleset_to_json, RuleError};

pub const SCHEMA_FILE: &str = "schema.json";
pub const F_FILE: &str = "f.json";
pub const G_FILE: &str = "g.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const RULESET_FILE: &str = "ruleset.json";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRANSCRIPT_FILE: &str = "transcript.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("ruleset.json: {0}")]
    Rules(#[from] RuleError),
    #[error("schema.json: {0}")]
    Schema(#[from] DataError),
    #[error("inconsistent bundle: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: MixtureModel,
    pub baseline: BaselineSnapshot,
    pub metrics: Vec<IterationMetrics>,
    pub transcripts: Vec<RefinementTranscript>,
}

impl ModelBundle {
    pub fn from_state(state: &RunState) -> Self {
        Self {
            model: state.model.clone(),
            baseline: state.baseline.clone(),
            metrics: state.metrics.clone(),
            transcripts: state.transcripts.clone(),
        }
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.model.encoder.schema
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), BundleError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| BundleError::Io { path, source })
}

fn read(dir: &Path, name: &str) -> Result<String, BundleError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|source| BundleError::Io { path, source })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("bundle types serialize");
    s.push('\n');
    s
}

fn from_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T, BundleError> {
    let text = read(dir, name)?;
    serde_json::from_str(&text).map_err(|source| BundleError::Json {
        path: dir.join(name),
        source,
    })
}

pub fn save(bundle: &ModelBundle, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let m = &bundle.model;
    let schema = &m.encoder.schema;
    write(dir, SCHEMA_FILE, &to_json(schema.as_ref()))?;
    write(dir, F_FILE, &to_json(&m.f))?;
    write(dir, G_FILE, &to_json(&m.g))?;
    write(dir, BASELINE_FILE, &to_json(&bundle.baseline))?;
    let mut rules = ruleset_to_json(&m.rules, schema);
    rules.push('\n');
    write(dir, RULESET_FILE, &rules)?;
    write(dir, STANDARDIZER_FILE, &to_json(&m.encoder.standardizer))?;
    write(dir, METRICS_FILE, &metrics_to_csv(&bundle.metrics))?;
    let mut transcripts = transcripts_to_json(&bundle.transcripts);
    transcripts.push('\n');
    write(dir, TRANSCRIPT_FILE, &transcripts)?;
    Ok(())
}

/// Everything needed at prediction time; metrics and transcripts are
/// optional extras and load as empty when missing.
pub fn load(dir: impl AsRef<Path>) -> Result<ModelBundle, BundleError> {
    let dir = dir.as_ref();
    let schema = FeatureSchema::from_json_str(&read(dir, SCHEMA_FILE)?)?;
    let schema = Arc::new(schema);
    let f: DiffClassifier = from_json(dir, F_FILE)?;
    let g: DiffClassifier = from_json(dir, G_FILE)?;
    let baseline: BaselineSnapshot = from_json(dir, BASELINE_FILE)?;
    let standardizer: Standardizer = from_json(dir, STANDARDIZER_FILE)?;
    let rules = ruleset_from_json(&read(dir, RULESET_FILE)?, &schema)?;
    let encoder = Encoder::new(schema.clone(), standardizer);
    if f.input_dim != encoder.dim() || g.input_dim != encoder.dim() || g.output_dim != 2 {
        return Err(BundleError::Inconsistent(format!(
            "model dimensions ({} -> {}, {} -> {}) do not fit the schema (input {})",
            f.input_dim,
            f.output_dim,
            g.input_dim,
            g.output_dim,
            encoder.dim()
        )));
    }
    if f.output_dim != schema.n_classes() {
        return Err(BundleError::Inconsistent("f output size differs from class count".into()));
    }
    let metrics = match fs::read_to_string(dir.join(METRICS_FILE)) {
        Ok(text) => metrics_from_csv(&text).map_err(|source| BundleError::Csv {
            path: dir.join(METRICS_FILE),
            source,
        })?,
        Err(_) => Vec::new(),
    };
    let transcripts = if dir.join(TRANSCRIPT_FILE).exists() {
        from_json(dir, TRANSCRIPT_FILE)?
    } else {
        Vec::new()
    };
    Ok(ModelBundle {
        model: MixtureModel::new(f, g, rules, encoder),
        baseline,
        metrics,
        transcripts,
    })
}

pub fn read_metrics_csv(dir: impl AsRef<Path>) -> Result<String, BundleError> {
    read(dir.as_ref(), METRICS_FILE)
}
