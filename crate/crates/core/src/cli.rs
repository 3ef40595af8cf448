//! The `more` command line.
//!
//! Exit codes: 0 success, 1 any other failure (I/O, data, bundle), 2 bad
//! config or arguments, 3 training diverged, 4 refinement unavailable with
//! the remote refiner and no fallback.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::bundle::{self, ModelBundle};
use crate::config::{ConfigError, RefinerKind, RunConfig};
use crate::data::{load_csv, split, FeatureSchema};
use crate::discovery::{evaluate, run, DiscoveryError};
use crate::mixture::TrainError;
use crate::models::{argmax, ModelError};
use crate::refiner::{RefinerClient, RemoteClient, StubRefiner};
use crate::rules::instance_from_json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_REFINER: i32 = 4;

pub const FALLBACK_DISCLAIMER: &str = "No rule serves this instance. The prediction comes from the black-box \
model and may not follow any of the rule explanations; treat it as lower fidelity.";

#[derive(Debug, Parser)]
#[command(name = "more", version, about = "Grey-box tabular classifier with a rule expert")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a bundle to the configured output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a bundle on a labelled CSV file.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One-hot the gate before mixing.
        #[arg(long)]
        hard_gate: bool,
    },
    /// Explain the prediction for one instance (JSON object or path to one).
    Explain {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        instance: String,
    },
    /// Print the per-iteration metrics CSV of a bundle.
    Report {
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    RefinerUnavailable(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::RefinerUnavailable(_) => EXIT_REFINER,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

impl From<DiscoveryError> for CliError {
    fn from(e: DiscoveryError) -> Self {
        match e {
            DiscoveryError::Train(TrainError::Divergence(_) | TrainError::Model(ModelError::Divergence)) => {
                CliError::Divergence(e.to_string())
            }
            DiscoveryError::Refiner(_) => CliError::RefinerUnavailable(e.to_string()),
            DiscoveryError::Config(_) => CliError::Config(ConfigError::Invalid(e.to_string())),
            other => CliError::Other(other.to_string()),
        }
    }
}

pub fn cmd_train(config_path: &Path) -> Result<String, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let schema = Arc::new(FeatureSchema::from_json_file(&cfg.data.schema).map_err(other)?);
    let data = load_csv(&cfg.data.csv, schema.clone()).map_err(other)?;
    let (train, test) = match &cfg.data.test_csv {
        Some(path) => (data, load_csv(path, schema.clone()).map_err(other)?),
        None => split(&data, cfg.data.test_fraction, cfg.seed).map_err(other)?,
    };
    let client: Option<Box<dyn RefinerClient>> = match cfg.refiner.kind {
        RefinerKind::None => None,
        RefinerKind::Stub => Some(Box::new(StubRefiner)),
        RefinerKind::Remote => Some(Box::new(
            RemoteClient::new(cfg.refiner.remote.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        )),
    };
    let f_arch = cfg.model.f_architecture()?;
    let g_arch = cfg.model.g_architecture()?;
    let state = run(&train, &test, &f_arch, &g_arch, &cfg.discovery_config(), client.as_deref())?;
    let bundle = ModelBundle::from_state(&state);
    bundle::save(&bundle, &cfg.output_dir).map_err(other)?;
    let last = state.metrics.last().expect("metrics has the initialization row");
    Ok(format!(
        "iteration={} train_loss={} test_loss={} test_acc={} rule_acc={} coverage={} usage={} n_rules={} bundle={}\n",
        last.iteration,
        last.train_loss,
        last.test_loss,
        last.test_acc,
        last.rule_acc,
        last.coverage,
        last.usage,
        last.n_rules,
        cfg.output_dir.display()
    ))
}

pub fn cmd_eval(bundle_dir: &Path, data_path: &Path, hard_gate: bool) -> Result<String, CliError> {
    let mut b = bundle::load(bundle_dir).map_err(other)?;
    b.model.hard_gate = hard_gate;
    let data = load_csv(data_path, b.schema().clone()).map_err(other)?;
    let r = evaluate(&b.model, &data);
    Ok(format!(
        "n {}\nloss {}\naccuracy {}\ncoverage {}\nusage {}\nrule_acc {}\nn_rules {}\nattributed_to_rules {}\nattributed_to_f {}\n",
        r.n,
        r.loss,
        r.accuracy,
        r.coverage,
        r.usage,
        r.rule_acc,
        r.n_rules,
        r.attributed_to_rules,
        r.n - r.attributed_to_rules
    ))
}

fn read_instance(arg: &str) -> Result<BTreeMap<String, serde_json::Value>, CliError> {
    let text = if Path::new(arg).is_file() {
        std::fs::read_to_string(arg).map_err(other)?
    } else {
        arg.to_string()
    };
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("malformed instance JSON: {e}")))
}

pub fn cmd_explain(bundle_dir: &Path, instance: &str) -> Result<String, CliError> {
    let b = bundle::load(bundle_dir).map_err(other)?;
    let schema = b.schema().clone();
    let values = read_instance(instance)?;
    let x = instance_from_json(&values, &schema).map_err(|e| CliError::Other(format!("malformed instance: {e}")))?;
    let out = b.model.explain_raw(&x);
    let class = argmax(&out.probs);
    let mut text = format!(
        "prediction: {} (p={:.4})\ngate: g1={:.4} g2={:.4}\n",
        schema.classes[class], out.probs[class], out.gate[0], out.gate[1]
    );
    match out.rule_id.filter(|_| out.uses_rule()) {
        Some(id) => {
            let rule = b.model.rules.get(id).expect("selected rule exists");
            text += &format!("source: rule {id}\nrule: {}\n", rule.canonical_text(&schema));
            if rule.context.is_empty() {
                text += "context: (none stored)\n";
            } else {
                text += &format!("context: {}\n", rule.context);
            }
        }
        None => {
            text += "source: black-box model\n";
            if let Some(id) = out.rule_id {
                text += &format!("covering rule {id} not used by the gate\n");
            }
            text += &format!("note: {FALLBACK_DISCLAIMER}\n");
        }
    }
    Ok(text)
}

pub fn cmd_report(bundle_dir: &Path) -> Result<String, CliError> {
    bundle::read_metrics_csv(bundle_dir).map_err(other)
}

pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            bundle,
            data,
            hard_gate,
        } => cmd_eval(&bundle, &data, hard_gate),
        Command::Explain { bundle, instance } => cmd_explain(&bundle, &instance),
        Command::Report { bundle } => cmd_report(&bundle),
    }
}

/// Runs the parsed command, prints its output, and returns the exit code.
pub fn main_with(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
