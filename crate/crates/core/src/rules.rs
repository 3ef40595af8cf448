//! Predicates, rules and the rule expert.
//!
//! Predicates test raw feature values. The expert fires the covering active
//! rule whose stored anchor is nearest to the query (ties to the lower id) or
//! abstains with an all-zero vector.
//!
//! Text grammar, one rule per line:
//!
//! ```text
//! IF <feature> <op> <value> [AND <feature> <op> <value> ...] THEN <class>
//! ```
//!
//! with `<=`, `>`, `in (a, b]` for numeric features and `==` for categorical
//! ones. `<=` is inclusive and `in (a, b]` is left-open, right-closed.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Encoder, FeatureKind, FeatureSchema, Standardizer};
use crate::exec;
use crate::models::DiffClassifier;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Le(f64),
    Gt(f64),
    /// `lo < x <= hi`
    Range(f64, f64),
    /// Category index.
    Eq(usize),
}

impl Condition {
    fn rank(&self) -> u8 {
        match self {
            Condition::Le(_) => 0,
            Condition::Gt(_) => 1,
            Condition::Range(..) => 2,
            Condition::Eq(_) => 3,
        }
    }

    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Condition::Le(t) => v <= t,
            Condition::Gt(t) => v > t,
            Condition::Range(lo, hi) => lo < v && v <= hi,
            Condition::Eq(c) => v == c as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predicate {
    pub feature: usize,
    pub condition: Condition,
}

impl Predicate {
    pub fn new(feature: usize, condition: Condition) -> Self {
        Self { feature, condition }
    }

    pub fn holds(&self, x: &[f64]) -> bool {
        self.condition.holds(x[self.feature])
    }

    pub fn text(&self, schema: &FeatureSchema) -> String {
        let spec = &schema.features[self.feature];
        match self.condition {
            Condition::Le(t) => format!("{} <= {}", spec.name, t),
            Condition::Gt(t) => format!("{} > {}", spec.name, t),
            Condition::Range(lo, hi) => format!("{} in ({}, {}]", spec.name, lo, hi),
            Condition::Eq(c) => format!("{} == {}", spec.name, spec.categories[c]),
        }
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), RuleError> {
        let spec = schema
            .features
            .get(self.feature)
            .ok_or_else(|| RuleError::Invalid(format!("feature index {} out of range", self.feature)))?;
        match (spec.kind, self.condition) {
            (FeatureKind::Numeric, Condition::Le(t) | Condition::Gt(t)) if t.is_finite() => Ok(()),
            (FeatureKind::Numeric, Condition::Range(lo, hi)) if lo.is_finite() && hi.is_finite() && lo < hi => {
                Ok(())
            }
            (FeatureKind::Categorical, Condition::Eq(c)) if c < spec.categories.len() => Ok(()),
            _ => Err(RuleError::Invalid(format!(
                "predicate {:?} does not fit feature `{}`",
                self.condition, spec.name
            ))),
        }
    }

    /// Sort key: feature name, then operator, then thresholds.
    fn canonical_key(&self, schema: &FeatureSchema) -> (String, u8, u64, u64) {
        let name = schema.features[self.feature].name.clone();
        let (a, b) = match self.condition {
            Condition::Le(t) | Condition::Gt(t) => (t.to_bits(), 0),
            Condition::Range(lo, hi) => (lo.to_bits(), hi.to_bits()),
            Condition::Eq(c) => (c as u64, 0),
        };
        (name, self.condition.rank(), a, b)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("malformed rule: {0}")]
    Malformed(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("unknown operator `{op}` for feature `{feature}`")]
    UnknownOperator { feature: String, op: String },
    #[error("unknown category `{value}` for feature `{feature}`")]
    UnknownCategory { feature: String, value: String },
    #[error("malformed number `{0}`")]
    MalformedNumber(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("invalid rule: {0}")]
    Invalid(String),
    #[error("json error: {0}")]
    Json(String),
}

/// Where a rule came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Origin {
    pub iteration: usize,
    pub llm_adapted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: usize,
    pub predicates: Vec<Predicate>,
    pub class_index: usize,
    /// Raw instance the rule was generated from.
    pub anchor: Vec<f64>,
    pub precision: f64,
    pub context: String,
    pub origin: Origin,
    pub active: bool,
}

impl Rule {
    pub fn new(predicates: Vec<Predicate>, class_index: usize, anchor: Vec<f64>) -> Self {
        Self {
            id: 0,
            predicates,
            class_index,
            anchor,
            precision: 1.0,
            context: String::new(),
            origin: Origin::default(),
            active: true,
        }
    }

    pub fn covers(&self, x: &[f64]) -> bool {
        self.predicates.iter().all(|p| p.holds(x))
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), RuleError> {
        if self.predicates.is_empty() {
            return Err(RuleError::Invalid(format!("rule {} has no predicates", self.id)));
        }
        if self.class_index >= schema.n_classes() {
            return Err(RuleError::Invalid(format!("rule {} has class {} out of range", self.id, self.class_index)));
        }
        for p in &self.predicates {
            p.validate(schema)?;
        }
        schema
            .check_instance(&self.anchor)
            .map_err(|e| RuleError::Invalid(format!("rule {} anchor: {e}", self.id)))
    }

    pub fn canonical_text(&self, schema: &FeatureSchema) -> String {
        canonical_text(&self.predicates, self.class_index, schema)
    }

    /// Order-insensitive identity of the predicate set.
    pub fn predicate_key(&self, schema: &FeatureSchema) -> Vec<(String, u8, u64, u64)> {
        let mut key: Vec<_> = self.predicates.iter().map(|p| p.canonical_key(schema)).collect();
        key.sort();
        key.dedup();
        key
    }
}

pub fn covers(rule: &Rule, x: &[f64]) -> bool {
    rule.covers(x)
}

pub fn canonical_text(predicates: &[Predicate], class_index: usize, schema: &FeatureSchema) -> String {
    let body: Vec<String> = predicates.iter().map(|p| p.text(schema)).collect();
    format!("IF {} THEN {}", body.join(" AND "), schema.classes[class_index])
}

/// Predicates and class recovered from rule text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRule {
    pub predicates: Vec<Predicate>,
    pub class_index: usize,
}

pub fn parse_rule(text: &str, schema: &FeatureSchema) -> Result<ParsedRule, RuleError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    match words.first() {
        Some(w) if w.eq_ignore_ascii_case("IF") => {}
        _ => return Err(RuleError::Malformed("rule must start with IF".into())),
    }
    let then = words
        .iter()
        .rposition(|w| w.eq_ignore_ascii_case("THEN"))
        .ok_or_else(|| RuleError::Malformed("missing THEN".into()))?;
    let label = words[then + 1..].join(" ");
    if label.is_empty() {
        return Err(RuleError::Malformed("missing class after THEN".into()));
    }
    let class_index = schema.class_index(&label).ok_or(RuleError::UnknownClass(label))?;

    let body = &words[1..then];
    if body.is_empty() {
        return Err(RuleError::Malformed("rule has no predicates".into()));
    }
    let predicates = body
        .split(|w| w.eq_ignore_ascii_case("AND"))
        .map(|chunk| parse_predicate(chunk, schema))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ParsedRule {
        predicates,
        class_index,
    })
}

fn parse_number(s: &str) -> Result<f64, RuleError> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(RuleError::MalformedNumber(s.trim().to_string())),
    }
}

fn parse_predicate(words: &[&str], schema: &FeatureSchema) -> Result<Predicate, RuleError> {
    if words.len() < 3 {
        return Err(RuleError::Malformed(format!("incomplete predicate `{}`", words.join(" "))));
    }
    let name = words[0];
    let feature = schema
        .feature_index(name)
        .ok_or_else(|| RuleError::UnknownFeature(name.to_string()))?;
    let spec = &schema.features[feature];
    let op = words[1];
    let value = words[2..].join(" ");
    let bad_op = || RuleError::UnknownOperator {
        feature: name.to_string(),
        op: op.to_string(),
    };
    let condition = match spec.kind {
        FeatureKind::Numeric => match op {
            "<=" => Condition::Le(parse_number(&value)?),
            ">" => Condition::Gt(parse_number(&value)?),
            op if op.eq_ignore_ascii_case("in") => {
                let inner = value
                    .strip_prefix('(')
                    .and_then(|v| v.strip_suffix(']'))
                    .ok_or_else(|| RuleError::Malformed(format!("range `{value}` must look like (a, b]")))?;
                let (lo, hi) = inner
                    .split_once(',')
                    .ok_or_else(|| RuleError::Malformed(format!("range `{value}` needs two bounds")))?;
                let (lo, hi) = (parse_number(lo)?, parse_number(hi)?);
                if lo >= hi {
                    return Err(RuleError::Invalid(format!("empty range ({lo}, {hi}] on `{name}`")));
                }
                Condition::Range(lo, hi)
            }
            _ => return Err(bad_op()),
        },
        FeatureKind::Categorical => match op {
            "==" => {
                let idx = spec.category_index(&value).ok_or_else(|| RuleError::UnknownCategory {
                    feature: name.to_string(),
                    value: value.clone(),
                })?;
                Condition::Eq(idx)
            }
            _ => return Err(bad_op()),
        },
    };
    Ok(Predicate::new(feature, condition))
}

/// Euclidean distance over standardized numeric features plus the number of
/// differing categorical features.
pub fn anchor_distance(x: &[f64], u: &[f64], schema: &FeatureSchema, standardizer: &Standardizer) -> f64 {
    let mut sq = 0.0;
    let mut hamming = 0.0;
    for (j, spec) in schema.features.iter().enumerate() {
        match spec.kind {
            FeatureKind::Numeric => {
                let d = standardizer.scale(j, x[j]) - standardizer.scale(j, u[j]);
                sq += d * d;
            }
            FeatureKind::Categorical => {
                if x[j] != u[j] {
                    hamming += 1.0;
                }
            }
        }
    }
    sq.sqrt() + hamming
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub next_id: usize,
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a rule under a fresh id and returns the id.
    pub fn push(&mut self, mut rule: Rule) -> usize {
        rule.id = self.next_id;
        self.next_id += 1;
        self.rules.push(rule);
        self.next_id - 1
    }

    pub fn active(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.active)
    }

    pub fn n_active(&self) -> usize {
        self.active().count()
    }

    pub fn get(&self, id: usize) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Rule> {
        self.rules.iter_mut().find(|r| r.id == id)
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), RuleError> {
        let mut ids = HashSet::new();
        for rule in &self.rules {
            if !ids.insert(rule.id) || rule.id >= self.next_id {
                return Err(RuleError::Invalid(format!("duplicate or stale id {}", rule.id)));
            }
            rule.validate(schema)?;
        }
        Ok(())
    }

    /// The rule that serves `x`: nearest-anchor covering active rule, ties to
    /// the lower id.
    pub fn select<'a>(&'a self, x: &[f64], schema: &FeatureSchema, standardizer: &Standardizer) -> Option<&'a Rule> {
        let mut best: Option<(&Rule, f64)> = None;
        for rule in self.active().filter(|r| r.covers(x)) {
            let d = anchor_distance(x, &rule.anchor, schema, standardizer);
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && b.id < rule.id) => Some((b, bd)),
                _ => Some((rule, d)),
            };
        }
        best.map(|(r, _)| r)
    }

    pub fn predict_class(&self, x: &[f64], schema: &FeatureSchema, standardizer: &Standardizer) -> Option<usize> {
        self.select(x, schema, standardizer).map(|r| r.class_index)
    }

    /// Deactivates active rules whose predicate set duplicates that of a
    /// lower-id active rule. Returns the number deactivated.
    pub fn dedup(&mut self, schema: &FeatureSchema) -> usize {
        let mut order: Vec<usize> = (0..self.rules.len()).collect();
        order.sort_by_key(|&i| self.rules[i].id);
        let mut seen = HashSet::new();
        let mut removed = 0;
        for i in order {
            let rule = &mut self.rules[i];
            if !rule.active {
                continue;
            }
            if !seen.insert(rule.predicate_key(schema)) {
                rule.active = false;
                removed += 1;
            }
        }
        removed
    }
}

/// One-hot class vector of the serving rule, or all zeros when abstaining.
pub fn rule_predict(rs: &RuleSet, x: &[f64], encoder: &Encoder) -> Vec<f64> {
    let mut out = vec![0.0; encoder.schema.n_classes()];
    if let Some(c) = rs.predict_class(x, &encoder.schema, &encoder.standardizer) {
        out[c] = 1.0;
    }
    out
}

pub fn dedup(mut rs: RuleSet, schema: &FeatureSchema) -> RuleSet {
    rs.dedup(schema);
    rs
}

/// Fraction of instances on which the rule expert does not abstain.
pub fn coverage(rs: &RuleSet, data: &Dataset, encoder: &Encoder) -> f64 {
    let hits = exec::map_slice(&data.rows, |x| {
        usize::from(rs.predict_class(x, &encoder.schema, &encoder.standardizer).is_some())
    });
    hits.iter().sum::<usize>() as f64 / data.len() as f64
}

/// Fraction of instances the gate routes to the rule expert (g² > 0.5).
pub fn usage(gate: &DiffClassifier, data: &Dataset, encoder: &Encoder) -> f64 {
    let hits = exec::map_slice(&data.rows, |x| usize::from(gate.probs(&encoder.encode_unchecked(x))[1] > 0.5));
    hits.iter().sum::<usize>() as f64 / data.len() as f64
}

/// Accuracy of the rule expert on the instances it covers; NaN when it covers
/// nothing.
pub fn rule_accuracy(rs: &RuleSet, data: &Dataset, encoder: &Encoder) -> f64 {
    let outcomes = exec::map_range(data.len(), |i| {
        rs.predict_class(&data.rows[i], &encoder.schema, &encoder.standardizer)
            .map(|c| c == data.labels[i])
    });
    let covered: Vec<bool> = outcomes.into_iter().flatten().collect();
    if covered.is_empty() {
        return f64::NAN;
    }
    covered.iter().filter(|&&ok| ok).count() as f64 / covered.len() as f64
}

/// On-disk form of a rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub id: usize,
    pub text: String,
    pub class: String,
    pub anchor: BTreeMap<String, serde_json::Value>,
    pub precision: f64,
    pub context: String,
    pub iteration: usize,
    pub llm_adapted: bool,
    pub active: bool,
}

impl RuleRecord {
    pub fn from_rule(rule: &Rule, schema: &FeatureSchema) -> Self {
        let anchor = schema
            .features
            .iter()
            .zip(&rule.anchor)
            .map(|(spec, &v)| {
                let value = match spec.kind {
                    FeatureKind::Numeric => serde_json::Value::from(v),
                    FeatureKind::Categorical => serde_json::Value::from(spec.categories[v as usize].clone()),
                };
                (spec.name.clone(), value)
            })
            .collect();
        Self {
            id: rule.id,
            text: rule.canonical_text(schema),
            class: schema.classes[rule.class_index].clone(),
            anchor,
            precision: rule.precision,
            context: rule.context.clone(),
            iteration: rule.origin.iteration,
            llm_adapted: rule.origin.llm_adapted,
            active: rule.active,
        }
    }

    pub fn to_rule(&self, schema: &FeatureSchema) -> Result<Rule, RuleError> {
        let parsed = parse_rule(&self.text, schema)?;
        if schema.classes[parsed.class_index] != self.class {
            return Err(RuleError::Invalid(format!(
                "rule {}: class `{}` disagrees with text `{}`",
                self.id, self.class, self.text
            )));
        }
        let anchor = instance_from_json(&self.anchor, schema)?;
        let rule = Rule {
            id: self.id,
            predicates: parsed.predicates,
            class_index: parsed.class_index,
            anchor,
            precision: self.precision,
            context: self.context.clone(),
            origin: Origin {
                iteration: self.iteration,
                llm_adapted: self.llm_adapted,
            },
            active: self.active,
        };
        rule.validate(schema)?;
        Ok(rule)
    }
}

/// Reads a raw instance from a JSON object keyed by feature name.
pub fn instance_from_json(
    values: &BTreeMap<String, serde_json::Value>,
    schema: &FeatureSchema,
) -> Result<Vec<f64>, RuleError> {
    schema
        .features
        .iter()
        .map(|spec| {
            let v = values
                .get(&spec.name)
                .ok_or_else(|| RuleError::Json(format!("missing feature `{}`", spec.name)))?;
            match spec.kind {
                FeatureKind::Numeric => v
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| RuleError::MalformedNumber(v.to_string())),
                FeatureKind::Categorical => {
                    let s = v.as_str().ok_or_else(|| RuleError::UnknownCategory {
                        feature: spec.name.clone(),
                        value: v.to_string(),
                    })?;
                    spec.category_index(s)
                        .map(|i| i as f64)
                        .ok_or_else(|| RuleError::UnknownCategory {
                            feature: spec.name.clone(),
                            value: s.to_string(),
                        })
                }
            }
        })
        .collect()
}

pub fn ruleset_to_json(rs: &RuleSet, schema: &FeatureSchema) -> String {
    let records: Vec<RuleRecord> = rs.rules.iter().map(|r| RuleRecord::from_rule(r, schema)).collect();
    serde_json::to_string_pretty(&records).expect("rule records serialize")
}

pub fn ruleset_from_json(text: &str, schema: &FeatureSchema) -> Result<RuleSet, RuleError> {
    let records: Vec<RuleRecord> = serde_json::from_str(text).map_err(|e| RuleError::Json(e.to_string()))?;
    let rules = records
        .iter()
        .map(|r| r.to_rule(schema))
        .collect::<Result<Vec<_>, _>>()?;
    let next_id = rules.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let rs = RuleSet { rules, next_id };
    rs.validate(schema)?;
    Ok(rs)
}
