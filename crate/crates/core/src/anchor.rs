//! Local rule surrogates of a black-box classifier.
//!
//! A rule is grown greedily from per-feature bin predicates around an
//! instance `x`. Each candidate set is scored by Monte-Carlo precision: the
//! share of perturbed instances (constrained features resampled inside their
//! predicate, free features from the training marginal) that the black box
//! labels like `x`. All candidates in one growth step share the same random
//! stream, so their precision estimates are directly comparable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Encoder, FeatureKind, FeatureSchema};
use crate::exec;
use crate::models::DiffClassifier;
use crate::rules::{Condition, Origin, Predicate, Rule};

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("predicate on feature {feature} is satisfied by no training value")]
    EmptySupport { feature: usize },
    #[error("invalid anchor config: {0}")]
    Config(String),
    #[error("no candidate predicate could be added")]
    NoPredicates,
}

/// Anything that assigns a class to a raw instance.
pub trait BlackBox: Sync {
    fn label(&self, x: &[f64]) -> usize;
}

impl<F> BlackBox for F
where
    F: Fn(&[f64]) -> usize + Sync,
{
    fn label(&self, x: &[f64]) -> usize {
        self(x)
    }
}

/// A trained model together with the encoder that feeds it raw instances.
pub struct EncodedModel<'a> {
    pub model: &'a DiffClassifier,
    pub encoder: &'a Encoder,
}

impl BlackBox for EncodedModel<'_> {
    fn label(&self, x: &[f64]) -> usize {
        self.model.predict_class(&self.encoder.encode_unchecked(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Precision threshold.
    pub tau: f64,
    pub n_samples: usize,
    /// Upper bound on rule length; 0 means the number of features.
    pub max_predicates: usize,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            tau: 0.90,
            n_samples: 2000,
            max_predicates: 0,
            n_bins: 4,
            seed: 0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(AnchorError::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.n_samples < 100 {
            return Err(AnchorError::Config(format!("n_samples must be >= 100, got {}", self.n_samples)));
        }
        if self.n_bins < 2 {
            return Err(AnchorError::Config(format!("n_bins must be >= 2, got {}", self.n_bins)));
        }
        Ok(())
    }
}

/// Rounds to `digits` significant digits.
pub fn round_sig(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", digits.saturating_sub(1), v).parse().unwrap_or(v)
}

/// Per numeric feature, strictly increasing cut points; categoricals have none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub cuts: Vec<Vec<f64>>,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quantile cut points rounded to 4 significant digits. Cuts that leave the
/// same training values on each side as the previous cut, or that put every
/// value on one side, are dropped.
pub fn make_bins(train: &Dataset, n_bins: usize) -> BinTable {
    let cuts = train
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            if spec.kind != FeatureKind::Numeric {
                return Vec::new();
            }
            let mut sorted: Vec<f64> = train.column(j).collect();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let mut cuts: Vec<f64> = Vec::new();
            let mut last_count = 0;
            for k in 1..n_bins {
                let cut = round_sig(quantile(&sorted, k as f64 / n_bins as f64), 4);
                let below = sorted.partition_point(|&v| v <= cut);
                if below == 0 || below == n || below == last_count {
                    continue;
                }
                if cuts.last().is_some_and(|&prev| prev >= cut) {
                    continue;
                }
                cuts.push(cut);
                last_count = below;
            }
            cuts
        })
        .collect();
    BinTable { cuts }
}

/// One predicate per feature, each satisfied by `x`: the numeric bin holding
/// `x` or equality for categoricals. Numeric features without cuts yield no
/// predicate.
pub fn candidate_predicates(x: &[f64], bins: &BinTable, schema: &FeatureSchema) -> Vec<Predicate> {
    schema
        .features
        .iter()
        .enumerate()
        .filter_map(|(j, spec)| match spec.kind {
            FeatureKind::Categorical => Some(Predicate::new(j, Condition::Eq(x[j] as usize))),
            FeatureKind::Numeric => {
                let cuts = &bins.cuts[j];
                if cuts.is_empty() {
                    return None;
                }
                let bin = cuts.partition_point(|&c| c < x[j]);
                let condition = if bin == 0 {
                    Condition::Le(cuts[0])
                } else if bin == cuts.len() {
                    Condition::Gt(cuts[bin - 1])
                } else {
                    Condition::Range(cuts[bin - 1], cuts[bin])
                };
                Some(Predicate::new(j, condition))
            }
        })
        .collect()
}

/// Per-feature training marginals, the sampling base for perturbations.
pub struct PerturbationSpace {
    columns: Vec<Vec<f64>>,
}

impl PerturbationSpace {
    pub fn new(train: &Dataset) -> Self {
        let columns = (0..train.schema.n_features()).map(|j| train.column(j).collect()).collect();
        Self { columns }
    }

    /// Training values of the predicate's feature that satisfy it.
    pub fn support(&self, p: &Predicate) -> Result<Vec<f64>, AnchorError> {
        let values: Vec<f64> = self.columns[p.feature]
            .iter()
            .copied()
            .filter(|&v| p.condition.holds(v))
            .collect();
        if values.is_empty() {
            return Err(AnchorError::EmptySupport { feature: p.feature });
        }
        Ok(values)
    }

    /// Sampling pools per feature: the predicate support for constrained
    /// features, the full column otherwise.
    fn pools<'a>(&'a self, fixed: &[(&Predicate, &'a [f64])]) -> Vec<&'a [f64]> {
        let mut pools: Vec<&[f64]> = self.columns.iter().map(Vec::as_slice).collect();
        for (p, support) in fixed {
            pools[p.feature] = support;
        }
        pools
    }

    /// Draws `n` instances. One uniform variate per (sample, feature) in a
    /// fixed order, so different constraint sets consume identical streams.
    fn sample<R: Rng>(&self, pools: &[&[f64]], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                pools
                    .iter()
                    .map(|pool| {
                        let u: f64 = rng.gen();
                        pool[((u * pool.len() as f64) as usize).min(pool.len() - 1)]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Perturbations of `x` that respect `fixed`.
pub fn perturb<R: Rng>(
    x: &[f64],
    fixed: &[Predicate],
    train: &Dataset,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, AnchorError> {
    debug_assert!(fixed.iter().all(|p| p.holds(x)));
    let space = PerturbationSpace::new(train);
    let supports = fixed.iter().map(|p| space.support(p)).collect::<Result<Vec<_>, _>>()?;
    let fixed: Vec<(&Predicate, &[f64])> = fixed.iter().zip(supports.iter().map(Vec::as_slice)).collect();
    Ok(space.sample(&space.pools(&fixed), n, rng))
}

fn agreement<F: BlackBox + ?Sized>(samples: &[Vec<f64>], target: usize, f: &F) -> f64 {
    let hits = exec::map_slice(samples, |z| usize::from(f.label(z) == target));
    hits.iter().sum::<usize>() as f64 / samples.len() as f64
}

/// Share of `cfg.n_samples` perturbations (respecting `pred_set`) that the
/// black box labels like `x`.
pub fn precision<F: BlackBox + ?Sized, R: Rng>(
    pred_set: &[Predicate],
    x: &[f64],
    f: &F,
    cfg: &AnchorConfig,
    train: &Dataset,
    rng: &mut R,
) -> Result<f64, AnchorError> {
    let samples = perturb(x, pred_set, train, cfg.n_samples, rng)?;
    Ok(agreement(&samples, f.label(x), f))
}

/// Result of an anchor search.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// In the order they were added.
    pub predicates: Vec<Predicate>,
    pub precision: f64,
    pub class_index: usize,
    pub instance: Vec<f64>,
}

impl Anchor {
    pub fn meets(&self, tau: f64) -> bool {
        self.precision >= tau
    }

    pub fn into_rule(self, iteration: usize) -> Rule {
        let mut rule = Rule::new(self.predicates, self.class_index, self.instance);
        rule.precision = self.precision;
        rule.origin = Origin {
            iteration,
            llm_adapted: false,
        };
        rule
    }
}

/// Greedy anchor search around `x`.
///
/// Starting from the empty set, each step adds the candidate predicate with
/// the highest precision (ties to the lower feature index) until precision
/// reaches `tau`, candidates run out, or the length cap is hit. Candidates
/// with empty training support are skipped. A rule below `tau` is still
/// returned with its estimated precision.
pub fn find_anchor<F: BlackBox + ?Sized>(
    x: &[f64],
    f: &F,
    train: &Dataset,
    bins: &BinTable,
    cfg: &AnchorConfig,
) -> Result<Anchor, AnchorError> {
    cfg.validate()?;
    let schema = &train.schema;
    let target = f.label(x);
    let space = PerturbationSpace::new(train);
    let candidates: Vec<(Predicate, Vec<f64>)> = candidate_predicates(x, bins, schema)
        .into_iter()
        .filter_map(|p| space.support(&p).ok().map(|s| (p, s)))
        .collect();
    let max_len = match cfg.max_predicates {
        0 => schema.n_features(),
        m => m,
    };

    let mut chosen: Vec<usize> = Vec::new();
    let mut best_precision = f64::NAN;
    for step in 0..max_len {
        let remaining: Vec<usize> = (0..candidates.len()).filter(|c| !chosen.contains(c)).collect();
        if remaining.is_empty() {
            break;
        }
        let step_seed = exec::derive_seed(cfg.seed, &[step as u64]);
        let scores = exec::map_slice(&remaining, |&c| {
            let fixed: Vec<(&Predicate, &[f64])> = chosen
                .iter()
                .chain(std::iter::once(&c))
                .map(|&k| (&candidates[k].0, candidates[k].1.as_slice()))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
            let samples = space.sample(&space.pools(&fixed), cfg.n_samples, &mut rng);
            agreement(&samples, target, f)
        });
        let (pick, score) = remaining
            .iter()
            .zip(&scores)
            .fold(None, |best: Option<(usize, f64)>, (&c, &s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((c, s)),
            })
            .expect("remaining is non-empty");
        chosen.push(pick);
        best_precision = score;
        if score >= cfg.tau {
            break;
        }
    }
    if chosen.is_empty() {
        return Err(AnchorError::NoPredicates);
    }
    Ok(Anchor {
        predicates: chosen.iter().map(|&k| candidates[k].0).collect(),
        precision: best_precision,
        class_index: target,
        instance: x.to_vec(),
    })
}
