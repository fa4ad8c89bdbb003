//! German Credit ingestion, standardisation and synthetic instances.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::LogisticClassifier;
use crate::scm::{FeatureMeta, FeatureVector, LatentVector, NodeSpec, ScmSpec};

/// Where the four features and the label live in the raw records, and how
/// categorical codes are encoded. Column indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    /// Expected number of whitespace-separated fields per record.
    pub n_fields: usize,
    pub gender_col: usize,
    pub age_col: usize,
    pub amount_col: usize,
    pub duration_col: usize,
    pub label_col: usize,
    /// Raw code → 0/1 encoding of the gender feature.
    pub gender_encoding: BTreeMap<String, u8>,
    /// Names of gender encodings 0 and 1.
    pub gender_names: [String; 2],
    /// Raw label → class name; the names must appear in `class_labels`.
    pub label_encoding: BTreeMap<String, String>,
    /// Class names in class-index order.
    pub class_labels: [String; 2],
}

impl ColumnMapping {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_existing(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.columns();
        for (k, &c) in cols.iter().enumerate() {
            if c >= self.n_fields {
                return Err(Error::InvalidConfig(format!(
                    "column {c} beyond the {} fields of a record",
                    self.n_fields
                )));
            }
            if cols[..k].contains(&c) {
                return Err(Error::InvalidConfig(format!("column {c} mapped twice")));
            }
        }
        if self.gender_encoding.values().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("gender encoding must be 0 or 1".into()));
        }
        if let Some(name) = self
            .label_encoding
            .values()
            .find(|n| !self.class_labels.contains(n))
        {
            return Err(Error::InvalidConfig(format!("label {name:?} is not a class label")));
        }
        Ok(())
    }

    fn columns(&self) -> [usize; 5] {
        [
            self.gender_col,
            self.age_col,
            self.amount_col,
            self.duration_col,
            self.label_col,
        ]
    }

    fn class_of(&self, raw: &str) -> Result<usize> {
        let name = self
            .label_encoding
            .get(raw)
            .ok_or_else(|| Error::UnknownCategory(raw.to_string()))?;
        Ok(self.class_labels.iter().position(|l| l == name).expect("validated"))
    }
}

fn read_existing(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Feature names in storage order.
pub const FEATURES: [&str; 4] = ["gender", "age", "amount", "duration"];

/// The four-feature view of the data with encoded labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    /// Raw values in the order of `names`; gender holds its 0/1 encoding.
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_labels: [String; 2],
    pub gender_names: [String; 2],
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Seeded random split; the first part holds `round(fraction · n)` rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidConfig("split fraction must lie in [0, 1]".into()));
        }
        let mut idx: Vec<usize> = (0..self.n_rows()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (fraction * self.n_rows() as f64).round() as usize;
        let take = |ids: &[usize]| Dataset {
            rows: ids.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        };
        Ok((take(&idx[..cut]), take(&idx[cut..])))
    }
}

/// Parses UCI `german.data` records from a reader.
pub fn parse_german_credit(reader: impl BufRead, mapping: &ColumnMapping) -> Result<Dataset> {
    mapping.validate()?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != mapping.n_fields {
            return Err(Error::MalformedRow {
                index,
                reason: format!("expected {} fields, found {}", mapping.n_fields, fields.len()),
            });
        }
        let number = |col: usize| -> Result<f64> {
            fields[col]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    index,
                    reason: format!("field {col} is not a number: {:?}", fields[col]),
                })
        };
        let gender = *mapping
            .gender_encoding
            .get(fields[mapping.gender_col])
            .ok_or_else(|| Error::UnknownCategory(fields[mapping.gender_col].to_string()))?;
        rows.push(vec![
            f64::from(gender),
            number(mapping.age_col)?,
            number(mapping.amount_col)?,
            number(mapping.duration_col)?,
        ]);
        labels.push(mapping.class_of(fields[mapping.label_col])?);
    }
    if rows.is_empty() {
        return Err(Error::MalformedRow {
            index: 0,
            reason: "no records".into(),
        });
    }
    Ok(Dataset {
        names: FEATURES.iter().map(|s| s.to_string()).collect(),
        rows,
        labels,
        class_labels: mapping.class_labels.clone(),
        gender_names: mapping.gender_names.clone(),
    })
}

pub fn load_german_credit(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<Dataset> {
    let text = read_existing(path.as_ref())?;
    parse_german_credit(text.as_bytes(), mapping)
}

/// Sample standard deviation with denominator `n − 1`.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    /// Gender is frozen, categorical and has σ = 1.
    pub meta: Vec<FeatureMeta>,
    pub means: Vec<f64>,
    /// `(x − mean)/σ` for the numeric features; gender keeps its encoding.
    pub design: Vec<Vec<f64>>,
}

pub fn standardize(ds: &Dataset) -> Result<Standardized> {
    let mut meta = Vec::with_capacity(ds.names.len());
    let mut means = Vec::with_capacity(ds.names.len());
    for (index, name) in ds.names.iter().enumerate() {
        let col: Vec<f64> = ds.rows.iter().map(|r| r[index]).collect();
        let categorical = name == "gender";
        let sigma = if categorical {
            1.0
        } else {
            let s = sample_std(&col);
            if !(s > 0.0) {
                return Err(Error::ConstantColumn(name.clone()));
            }
            s
        };
        means.push(if categorical { 0.0 } else { mean(&col) });
        meta.push(FeatureMeta {
            name: name.clone(),
            index,
            sigma,
            mutable: !categorical,
            categorical,
        });
    }
    let design = ds
        .rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&meta)
                .zip(&means)
                .map(|((v, m), mu)| (v - mu) / m.sigma)
                .collect()
        })
        .collect();
    Ok(Standardized { meta, means, design })
}

pub fn write_design_csv<W: io::Write>(std: &Standardized, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std.meta.iter().map(|m| m.name.as_str()))?;
    for row in &std.design {
        w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// A random linear SCM together with a sampler for its observations.
#[derive(Debug, Clone)]
pub struct SyntheticScm {
    pub spec: ScmSpec,
}

impl SyntheticScm {
    /// Draws `u ~ N(0, diag(noise_sigma²))` and returns `(u, F(u))`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (LatentVector, FeatureVector) {
        let u = LatentVector(
            self.spec
                .nodes()
                .iter()
                .map(|n| Normal::new(0.0, n.noise_sigma).expect("positive sigma").sample(rng))
                .collect(),
        );
        let x = self.spec.reduced_form(&u).expect("matching length");
        (u, x)
    }
}

/// Random DAG over a shuffled order with edge probability `density`.
///
/// Weights are uniform on `[−1, 1]` with `|w| ≥ 0.05`, noise σ uniform on
/// `[0.5, 2]`, intercepts uniform on `[−1, 1]`. Each feature's σ is the
/// standard deviation implied by the model. All features are mutable.
pub fn synth_scm_generate(seed: u64, n_nodes: usize, density: f64) -> Result<SyntheticScm> {
    if !(2..=5).contains(&n_nodes) {
        return Err(Error::InvalidConfig(format!("n_nodes must lie in 2..=5, got {n_nodes}")));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidConfig("density must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(&mut rng);
    let mut nodes: Vec<NodeSpec> = (0..n_nodes)
        .map(|i| NodeSpec::source(format!("x{i}"), 1.0))
        .collect();
    for (pos, &child) in order.iter().enumerate() {
        let mut parents: Vec<usize> = Vec::new();
        let mut weights = Vec::new();
        for &p in &order[..pos] {
            if rng.random::<f64>() < density {
                parents.push(p);
                weights.push(loop {
                    let w: f64 = rng.random_range(-1.0..=1.0);
                    if w.abs() >= 0.05 {
                        break w;
                    }
                });
            }
        }
        let node = &mut nodes[child];
        node.parents = parents;
        node.weights = weights;
        node.intercept = rng.random_range(-1.0..=1.0);
        node.noise_sigma = rng.random_range(0.5..=2.0);
    }
    let provisional = ScmSpec::new(nodes.clone())?;
    let jac = provisional.reduced_form_jacobian();
    for (i, node) in nodes.iter_mut().enumerate() {
        let var: f64 = (0..n_nodes)
            .map(|j| (jac[i][j] * provisional.node(j).noise_sigma).powi(2))
            .sum();
        node.sigma = var.sqrt();
    }
    Ok(SyntheticScm {
        spec: ScmSpec::new(nodes)?,
    })
}

/// A convex explanation problem for the property suites: linear model,
/// linear classifier, factual in class 1 and target class 0.
#[derive(Debug, Clone)]
pub struct DeskInstance {
    pub spec: ScmSpec,
    pub classifier: LogisticClassifier,
    pub x_factual: FeatureVector,
    pub target: usize,
}

/// Classifier weights are `ω_i / σ_i` with `|ω_i|` uniform on `[0.3, 1]`
/// and random sign; the bias puts the factual score between 0.3 and 1
/// above the threshold.
pub fn desk_instance(seed: u64, n_nodes: usize, density: f64) -> Result<DeskInstance> {
    let scm = synth_scm_generate(seed, n_nodes, density)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d35c);
    let (_, x) = scm.draw(&mut rng);
    let weights: Vec<f64> = scm
        .spec
        .nodes()
        .iter()
        .map(|n| {
            let mag: f64 = rng.random_range(0.3..=1.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * mag / n.sigma
        })
        .collect();
    let margin: f64 = rng.random_range(0.3..=1.0);
    let raw: f64 = weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum();
    let classifier = LogisticClassifier::new(weights, margin - raw);
    Ok(DeskInstance {
        spec: scm.spec,
        classifier,
        x_factual: x,
        target: 0,
    })
}
