#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use more_core::data::{load_csv, split, Dataset, FeatureSchema};
use more_core::discovery::{run, DiscoveryConfig, RunState};
use more_core::models::Architecture;
use more_core::refiner::RefinerClient;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn diabetes() -> Dataset {
    let dir = data_dir();
    let schema = Arc::new(FeatureSchema::from_json_file(dir.join("diabetes.schema.json")).unwrap());
    load_csv(dir.join("diabetes.csv"), schema).unwrap()
}

pub fn mlp() -> Architecture {
    Architecture::mlp(&[50, 50])
}

/// Three-iteration discovery run on an 80/20 split drawn with `seed`.
pub fn run_diabetes(arch: &Architecture, seed: u64, refiner: Option<&dyn RefinerClient>) -> (RunState, Dataset, Dataset) {
    let (train, test) = split(&diabetes(), 0.2, seed).unwrap();
    let cfg = DiscoveryConfig {
        seed,
        iterations: 3,
        ..DiscoveryConfig::default()
    };
    let state = run(&train, &test, arch, arch, &cfg, refiner).unwrap();
    (state, train, test)
}

/// Writes a run config into `dir` pointing at the shipped diabetes files and
/// returns its path. The bundle goes to `dir/out`.
pub fn write_config(dir: &Path, architecture: &str, refiner: &str, seed: u64, iterations: usize) -> PathBuf {
    let data = data_dir();
    let text = format!(
        "seed = {seed}\noutput_dir = \"out\"\n\n[data]\ncsv = {:?}\nschema = {:?}\n\n[model]\narchitecture = \"{architecture}\"\n\n\
         [discovery]\niterations = {iterations}\n\n[refiner]\nkind = \"{refiner}\"\n",
        data.join("diabetes.csv"),
        data.join("diabetes.schema.json"),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
