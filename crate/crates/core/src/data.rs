//! Tabular data: feature schema, CSV ingestion, standardization, stratified
//! splits and model-input encoding.
//!
//! Raw instances are stored as `Vec<f64>` in schema order. Numeric slots hold
//! the value itself; categorical slots hold the category index (an exact
//! small integer). Rules evaluate on raw instances, models consume the
//! encoded vectors produced by [`Encoder`].

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema mismatch: column `{0}` missing from header")]
    MissingColumn(String),
    #[error("schema mismatch: header column {position} is `{found}`, expected `{expected}`")]
    HeaderMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: feature `{feature}` has unparseable numeric value `{value}`")]
    BadNumber {
        line: usize,
        feature: String,
        value: String,
    },
    #[error("line {line}: feature `{feature}` has missing value")]
    MissingValue { line: usize, feature: String },
    #[error("line {line}: unknown category `{value}` for feature `{feature}`")]
    UnknownCategory {
        line: usize,
        feature: String,
        value: String,
    },
    #[error("line {line}: unknown class label `{value}`")]
    UnknownClass { line: usize, value: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    RowLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("category index {index} out of range for feature `{feature}`")]
    CategoryOutOfRange { feature: String, index: f64 },
    #[error("instance has {found} values, schema has {expected} features")]
    Dimension { expected: usize, found: usize },
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("cannot stratify: class `{0}` has fewer than 2 instances")]
    Stratification(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
            categories: Vec::new(),
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.kind == FeatureKind::Numeric
    }

    pub fn category_index(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }
}

/// Feature names, kinds and vocabularies plus the ordered class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub target_name: String,
    pub classes: Vec<String>,
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        target_name: &str,
        classes: &[&str],
    ) -> Result<Self, DataError> {
        let schema = Self {
            features,
            target_name: target_name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for spec in &self.features {
            if spec.name.is_empty() || spec.name.chars().any(char::is_whitespace) {
                return Err(DataError::Schema(format!(
                    "feature name `{}` must be non-empty and contain no whitespace",
                    spec.name
                )));
            }
            if !seen.insert(spec.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate feature `{}`", spec.name)));
            }
            match spec.kind {
                FeatureKind::Categorical => {
                    if spec.categories.len() < 2 {
                        return Err(DataError::Schema(format!(
                            "categorical feature `{}` needs at least 2 categories",
                            spec.name
                        )));
                    }
                    let unique: HashSet<_> = spec.categories.iter().collect();
                    if unique.len() != spec.categories.len() {
                        return Err(DataError::Schema(format!(
                            "categorical feature `{}` has duplicate categories",
                            spec.name
                        )));
                    }
                }
                FeatureKind::Numeric => {
                    if !spec.categories.is_empty() {
                        return Err(DataError::Schema(format!(
                            "numeric feature `{}` must not list categories",
                            spec.name
                        )));
                    }
                }
            }
        }
        if self.classes.len() < 2 {
            return Err(DataError::Schema("at least 2 classes are required".into()));
        }
        let unique: HashSet<_> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(DataError::Schema("duplicate class labels".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Length of an encoded instance: one slot per numeric feature plus one
    /// per category.
    pub fn encoded_len(&self) -> usize {
        self.features
            .iter()
            .map(|f| if f.is_numeric() { 1 } else { f.categories.len() })
            .sum()
    }

    /// Checks that a raw instance has the right width and valid category
    /// indices.
    pub fn check_instance(&self, x: &[f64]) -> Result<(), DataError> {
        if x.len() != self.n_features() {
            return Err(DataError::Dimension {
                expected: self.n_features(),
                found: x.len(),
            });
        }
        for (spec, &v) in self.features.iter().zip(x) {
            match spec.kind {
                FeatureKind::Numeric if !v.is_finite() => {
                    return Err(DataError::Schema(format!(
                        "feature `{}` has non-finite value",
                        spec.name
                    )))
                }
                FeatureKind::Categorical
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= spec.categories.len() =>
                {
                    return Err(DataError::CategoryOutOfRange {
                        feature: spec.name.clone(),
                        index: v,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Renders a raw value as text: the number for numerics, the category
    /// label for categoricals.
    pub fn format_value(&self, feature: usize, value: f64) -> String {
        let spec = &self.features[feature];
        match spec.kind {
            FeatureKind::Numeric => format!("{value}"),
            FeatureKind::Categorical => spec.categories[value as usize].clone(),
        }
    }
}

/// N labelled raw instances sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Arc<FeatureSchema>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        schema: Arc<FeatureSchema>,
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        if rows.len() != labels.len() {
            return Err(DataError::Schema(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for row in &rows {
            schema.check_instance(row)?;
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= schema.n_classes()) {
            return Err(DataError::Schema(format!("label index {bad} out of range")));
        }
        Ok(Self {
            schema,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: Arc::clone(&self.schema),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn column(&self, feature: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[feature])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.n_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Reads a CSV whose header is the schema's feature names in order followed
/// by the target column.
pub fn load_csv(path: impl AsRef<Path>, schema: Arc<FeatureSchema>) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: Arc<FeatureSchema>) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = schema
        .features
        .iter()
        .map(|f| f.name.as_str())
        .chain(std::iter::once(schema.target_name.as_str()))
        .collect();
    for name in &expected {
        if !header.iter().any(|h| h == name) {
            return Err(DataError::MissingColumn(name.to_string()));
        }
    }
    for (position, (found, expected)) in header.iter().zip(&expected).enumerate() {
        if found != expected {
            return Err(DataError::HeaderMismatch {
                position,
                expected: expected.to_string(),
                found: found.clone(),
            });
        }
    }
    if header.len() != expected.len() {
        return Err(DataError::Schema(format!(
            "header has {} columns, schema expects {}",
            header.len(),
            expected.len()
        )));
    }

    let d = schema.n_features();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != d + 1 {
            return Err(DataError::RowLength {
                line,
                expected: d + 1,
                found: record.len(),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (spec, field) in schema.features.iter().zip(record.iter()) {
            if field.is_empty() || field == "?" {
                return Err(DataError::MissingValue {
                    line,
                    feature: spec.name.clone(),
                });
            }
            let value = match spec.kind {
                FeatureKind::Numeric => match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(DataError::BadNumber {
                            line,
                            feature: spec.name.clone(),
                            value: field.to_string(),
                        })
                    }
                },
                FeatureKind::Categorical => match spec.category_index(field) {
                    Some(idx) => idx as f64,
                    None => {
                        return Err(DataError::UnknownCategory {
                            line,
                            feature: spec.name.clone(),
                            value: field.to_string(),
                        })
                    }
                },
            };
            row.push(value);
        }
        let target = &record[d];
        let label = schema.class_index(target).ok_or_else(|| DataError::UnknownClass {
            line,
            value: target.to_string(),
        })?;
        rows.push(row);
        labels.push(label);
    }
    Dataset::new(schema, rows, labels)
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(data, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<(), DataError> {
    let schema = &data.schema;
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&schema.target_name);
    wtr.write_record(&header)?;
    for (row, &y) in data.rows.iter().zip(&data.labels) {
        let mut fields: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| schema.format_value(j, v))
            .collect();
        fields.push(schema.classes[y].clone());
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// Training-set mean and population standard deviation per numeric feature.
/// Categorical slots hold `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub stats: Vec<Option<ColumnStats>>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len() as f64;
        let stats = train
            .schema
            .features
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                if !spec.is_numeric() {
                    return None;
                }
                let mean = train.column(j).sum::<f64>() / n;
                let var = train.column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                Some(ColumnStats {
                    mean,
                    std: if std > 0.0 { std } else { 1.0 },
                })
            })
            .collect();
        Self { stats }
    }

    /// Standardized value of numeric feature `j`; categorical slots pass through.
    pub fn scale(&self, j: usize, v: f64) -> f64 {
        match self.stats[j] {
            Some(s) => (v - s.mean) / s.std,
            None => v,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.stats.iter().all(Option::is_none)
    }
}

pub fn fit_standardizer(train: &Dataset) -> Standardizer {
    Standardizer::fit(train)
}

/// Schema plus standardizer: turns raw instances into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub schema: Arc<FeatureSchema>,
    pub standardizer: Standardizer,
}

impl Encoder {
    pub fn new(schema: Arc<FeatureSchema>, standardizer: Standardizer) -> Self {
        Self {
            schema,
            standardizer,
        }
    }

    pub fn fit(train: &Dataset) -> Self {
        Self::new(Arc::clone(&train.schema), Standardizer::fit(train))
    }

    pub fn dim(&self) -> usize {
        self.schema.encoded_len()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, DataError> {
        self.schema.check_instance(x)?;
        let mut out = Vec::with_capacity(self.dim());
        self.encode_into(x, &mut out);
        Ok(out)
    }

    /// Encodes without validation. `x` must already conform to the schema.
    pub fn encode_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (j, (spec, &v)) in self.schema.features.iter().zip(x).enumerate() {
            match spec.kind {
                FeatureKind::Numeric => out.push(self.standardizer.scale(j, v)),
                FeatureKind::Categorical => {
                    let hot = v as usize;
                    out.extend((0..spec.categories.len()).map(|k| if k == hot { 1.0 } else { 0.0 }));
                }
            }
        }
    }

    pub fn encode_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.encode_into(x, &mut out);
        out
    }

    pub fn encode_dataset(&self, data: &Dataset) -> Vec<Vec<f64>> {
        data.rows.iter().map(|r| self.encode_unchecked(r)).collect()
    }
}

pub fn encode(x: &[f64], standardizer: &Standardizer, schema: &Arc<FeatureSchema>) -> Result<Vec<f64>, DataError> {
    Encoder::new(Arc::clone(schema), standardizer.clone()).encode(x)
}

/// Stratified split into (train, test) index lists, both sorted ascending.
///
/// The test set receives `round(fraction * N)` instances, apportioned across
/// classes by largest remainder so each class keeps its ratio within one
/// instance.
pub fn split_indices(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidFraction(test_fraction));
    }
    let counts = data.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && n < 2 {
            return Err(DataError::Stratification(data.schema.classes[c].clone()));
        }
    }
    let n = data.len();
    let total_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let quotas: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * total_test as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total_test - alloc.iter().sum::<usize>();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[c] + 1 < counts[c] {
            alloc[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n - total_test);
    let mut test = Vec::with_capacity(total_test);
    for (c, &k) in alloc.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| data.labels[i] == c).collect();
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(data, test_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}
