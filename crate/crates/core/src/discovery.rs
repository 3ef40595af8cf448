//! Iterative rule discovery.
//!
//! After unconstrained training of `f`, every iteration picks instances the
//! gate does not hand to the rule expert, explains them with anchors, merges
//! the new rules, optionally refines the whole set, and retrains `g` and `f`
//! under the loss constraint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{find_anchor, make_bins, AnchorConfig, AnchorError, EncodedModel};
use crate::data::{Dataset, Encoder};
use crate::exec::{self, derive_seed};
use crate::mixture::{
    dbgd_epoch, init_train, BaselineSnapshot, DbgdConfig, DbgdStepTrace, MixtureModel, SgdConfig, TrainError,
    TrainingView,
};
use crate::models::{argmax, ce_loss, predictive_entropy, Architecture, DiffClassifier};
use crate::refiner::{refine, RefinementTranscript, RefinerClient, RefinerError};
use crate::rules::{coverage, rule_accuracy, usage, RuleSet};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Refiner(RefinerError),
    #[error("invalid discovery config: {0}")]
    Config(String),
    #[error("train and test data use different schemas")]
    SchemaMismatch,
}

/// What to do when the refiner cannot be reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerFailurePolicy {
    /// Keep the unrefined rules and record the error in the transcript.
    #[default]
    Degrade,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub iterations: usize,
    pub b_exploit: usize,
    pub b_explore: usize,
    pub seed: u64,
    pub init: SgdConfig,
    pub dbgd: DbgdConfig,
    pub anchor: AnchorConfig,
    pub on_refiner_failure: RefinerFailurePolicy,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            b_exploit: 4,
            b_explore: 4,
            seed: 0,
            init: SgdConfig::default(),
            dbgd: DbgdConfig::default(),
            anchor: AnchorConfig::default(),
            on_refiner_failure: RefinerFailurePolicy::Degrade,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if self.b_exploit + self.b_explore == 0 {
            return Err(DiscoveryError::Config("b_exploit + b_explore must be >= 1".into()));
        }
        if self.init.batch_size == 0 {
            return Err(DiscoveryError::Config("init batch_size must be >= 1".into()));
        }
        self.dbgd.validate()?;
        self.anchor.validate()?;
        Ok(())
    }
}

/// One row of the per-iteration trace. Row 0 is the state after
/// initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub rule_acc: f64,
    pub coverage: f64,
    pub usage: f64,
    pub n_rules: usize,
}

pub const METRICS_HEADER: &str = "iteration,train_loss,test_loss,test_acc,rule_acc,coverage,usage,n_rules";

pub fn metrics_to_csv(rows: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration, r.train_loss, r.test_loss, r.test_acc, r.rule_acc, r.coverage, r.usage, r.n_rules
        );
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<IterationMetrics>, csv::Error> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader.deserialize().collect()
}

/// Scores of a mixture on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub coverage: f64,
    pub usage: f64,
    /// Accuracy of the rule expert where it fires; NaN when it never does.
    pub rule_acc: f64,
    pub n_rules: usize,
    /// Instances whose prediction is attributed to a rule (covering rule and
    /// g² > 0.5).
    pub attributed_to_rules: usize,
    pub n: usize,
}

pub fn evaluate(m: &MixtureModel, data: &Dataset) -> EvalReport {
    let per = exec::map_range(data.len(), |i| {
        let out = m.explain_raw(&data.rows[i]);
        let y = data.labels[i];
        (ce_loss(&out.probs, y), argmax(&out.probs) == y, out.uses_rule())
    });
    let n = data.len() as f64;
    EvalReport {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: per.iter().filter(|p| p.1).count() as f64 / n,
        coverage: coverage(&m.rules, data, &m.encoder),
        usage: usage(&m.g, data, &m.encoder),
        rule_acc: rule_accuracy(&m.rules, data, &m.encoder),
        n_rules: m.rules.n_active(),
        attributed_to_rules: per.iter().filter(|p| p.2).count(),
        n: data.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub model: MixtureModel,
    pub baseline: BaselineSnapshot,
    pub metrics: Vec<IterationMetrics>,
    pub transcripts: Vec<RefinementTranscript>,
    pub traces: Vec<DbgdStepTrace>,
    pub completed: usize,
}

impl RunState {
    pub fn record_metrics(&mut self, train: &Dataset, test: &Dataset) {
        let view = TrainingView::new(train, &self.model.encoder, &self.model.rules);
        let train_loss = crate::mixture::mixture_loss(&self.model, &view);
        let r = evaluate(&self.model, test);
        self.metrics.push(IterationMetrics {
            iteration: self.completed,
            train_loss,
            test_loss: r.loss,
            test_acc: r.accuracy,
            rule_acc: r.rule_acc,
            coverage: r.coverage,
            usage: r.usage,
            n_rules: r.n_rules,
        });
    }
}

/// Indices of training instances to explain next.
///
/// Eligible are instances the rule expert cannot serve or the gate keeps at
/// `f` (g² ≤ 0.5). The `b_exploit` lowest-entropy ones under `f` are taken
/// first, then the `b_explore` highest-entropy ones not already taken. Ties
/// go to the lower index.
pub fn select_candidates(m: &MixtureModel, view: &TrainingView, b_exploit: usize, b_explore: usize) -> Vec<usize> {
    let scored = exec::map_range(view.len(), |i| {
        let x = &view.encoded[i];
        let eligible = view.rule_class[i].is_none() || m.g.probs(x)[1] <= 0.5;
        eligible.then(|| (i, predictive_entropy(&m.f.probs(x))))
    });
    let mut eligible: Vec<(usize, f64)> = scored.into_iter().flatten().collect();
    eligible.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = eligible.iter().take(b_exploit).map(|e| e.0).collect();
    eligible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let explore: Vec<usize> = eligible
        .iter()
        .map(|e| e.0)
        .filter(|i| !picked.contains(i))
        .take(b_explore)
        .collect();
    picked.extend(explore);
    picked
}

/// Gate with random hidden layers and a zero output layer, so g = (0.5, 0.5)
/// everywhere before training.
pub fn neutral_gate(architecture: &Architecture, input_dim: usize, seed: u64) -> Result<DiffClassifier, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = DiffClassifier::new(architecture.clone(), input_dim, 2, &mut rng)?;
    if let Some(last) = g.layers.last_mut() {
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    Ok(g)
}

/// Builds `f` and `g`, trains `f` without constraints and records row 0.
pub fn initialize(
    train: &Dataset,
    test: &Dataset,
    f_arch: &Architecture,
    g_arch: &Architecture,
    cfg: &DiscoveryConfig,
) -> Result<RunState, DiscoveryError> {
    cfg.validate()?;
    if train.schema != test.schema {
        return Err(DiscoveryError::SchemaMismatch);
    }
    let encoder = Encoder::fit(train);
    let dim = encoder.dim();
    let n_classes = train.schema.n_classes();
    let mut f = DiffClassifier::new(
        f_arch.clone(),
        dim,
        n_classes,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0])),
    )
    .map_err(TrainError::from)?;
    let g = neutral_gate(g_arch, dim, derive_seed(cfg.seed, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let baseline = init_train(&mut f, train, &encoder, &cfg.init, &mut rng)?;
    let mut state = RunState {
        model: MixtureModel::new(f, g, RuleSet::new(), encoder),
        baseline,
        metrics: Vec::new(),
        transcripts: Vec::new(),
        traces: Vec::new(),
        completed: 0,
    };
    state.record_metrics(train, test);
    Ok(state)
}

/// One discovery iteration; appends one metrics row.
pub fn discovery_iteration(
    state: &mut RunState,
    train: &Dataset,
    test: &Dataset,
    cfg: &DiscoveryConfig,
    refiner: Option<&dyn RefinerClient>,
) -> Result<(), DiscoveryError> {
    let iteration = state.completed + 1;
    let schema = train.schema.clone();
    let view = TrainingView::new(train, &state.model.encoder, &state.model.rules);
    let candidates = select_candidates(&state.model, &view, cfg.b_exploit, cfg.b_explore);
    drop(view);

    if candidates.is_empty() {
        log::info!("iteration {iteration}: no eligible instances left");
    } else {
        let bins = make_bins(train, cfg.anchor.n_bins);
        let black_box = EncodedModel {
            model: &state.model.f,
            encoder: &state.model.encoder,
        };
        for &idx in &candidates {
            let acfg = AnchorConfig {
                seed: derive_seed(cfg.seed, &[4, iteration as u64, idx as u64]),
                ..cfg.anchor
            };
            match find_anchor(&train.rows[idx], &black_box, train, &bins, &acfg) {
                Ok(anchor) => {
                    state.model.rules.push(anchor.into_rule(iteration));
                }
                Err(AnchorError::NoPredicates) => log::warn!("no anchor for training row {idx}"),
                Err(e) => return Err(e.into()),
            }
        }
        state.model.rules.dedup(&schema);

        if let Some(client) = refiner {
            match refine(&state.model.rules, &schema, client) {
                Ok((rules, mut transcript)) => {
                    state.model.rules = rules;
                    transcript.iteration = iteration;
                    state.transcripts.push(transcript);
                }
                Err(failure) => {
                    let mut transcript = failure.transcript;
                    transcript.iteration = iteration;
                    state.transcripts.push(transcript);
                    match cfg.on_refiner_failure {
                        RefinerFailurePolicy::Abort => return Err(DiscoveryError::Refiner(failure.error)),
                        RefinerFailurePolicy::Degrade => {
                            log::warn!("iteration {iteration}: {}; keeping unrefined rules", failure.error)
                        }
                    }
                }
            }
            state.model.rules.dedup(&schema);
        }
    }

    let view = TrainingView::new(train, &state.model.encoder, &state.model.rules);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, iteration as u64]));
    let baseline = state.baseline.clone();
    for epoch in 0..cfg.dbgd.epochs {
        let traces = dbgd_epoch(&mut state.model, &view, &baseline, &cfg.dbgd, epoch, &mut rng)?;
        state.traces.extend(traces);
    }
    drop(view);
    state.completed = iteration;
    state.record_metrics(train, test);
    Ok(())
}

/// Initialization followed by `cfg.iterations` discovery iterations.
pub fn run(
    train: &Dataset,
    test: &Dataset,
    f_arch: &Architecture,
    g_arch: &Architecture,
    cfg: &DiscoveryConfig,
    refiner: Option<&dyn RefinerClient>,
) -> Result<RunState, DiscoveryError> {
    let mut state = initialize(train, test, f_arch, g_arch, cfg)?;
    for _ in 0..cfg.iterations {
        discovery_iteration(&mut state, train, test, cfg, refiner)?;
    }
    Ok(state)
}
