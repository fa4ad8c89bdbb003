//! The fitted model bundle: structural model plus classifier, stored as one
//! JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mean, sample_std, standardize, Dataset};
use crate::error::{Error, Result};
use crate::learners::{
    fit_linear_ols_with, fit_logistic, LinearModel, LogisticClassifier, LogisticConfig, OlsConfig,
};
use crate::scm::{NodeSpec, ScmSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    #[serde(flatten)]
    pub scm: ScmSpec,
    pub classifier: LogisticClassifier,
    /// Display names of the encoded values of categorical features.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, Vec<String>>,
}

impl ModelBundle {
    pub fn new(scm: ScmSpec, classifier: LogisticClassifier) -> Result<Self> {
        if classifier.dim() != scm.len() {
            return Err(Error::DimensionMismatch {
                expected: scm.len(),
                got: classifier.dim(),
            });
        }
        classifier.validate()?;
        Ok(Self {
            scm,
            classifier,
            categories: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text)?;
        Self::new(b.scm, b.classifier).map(|fresh| Self {
            categories: b.categories,
            ..fresh
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    /// Human-readable value of feature `i`.
    pub fn format_value(&self, i: usize, value: f64) -> String {
        let node = self.scm.node(i);
        if node.categorical {
            if let Some(names) = self.categories.get(&node.name) {
                let k = value.round();
                if k >= 0.0 && (k as usize) < names.len() && (value - k).abs() < 1e-9 {
                    return names[k as usize].clone();
                }
            }
            return format!("{value}");
        }
        format!("{value:.2}")
    }

    /// Parses a categorical name or a number for feature `i`.
    pub fn parse_value(&self, i: usize, text: &str) -> Result<f64> {
        let node = self.scm.node(i);
        if let Some(k) = self
            .categories
            .get(&node.name)
            .and_then(|names| names.iter().position(|n| n == text))
        {
            return Ok(k as f64);
        }
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::UnknownCategory(format!("{}={text}", node.name)))
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitConfig {
    pub logistic: LogisticConfig,
    pub ols: OlsConfig,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub bundle: ModelBundle,
    pub amount_model: LinearModel,
    pub duration_model: LinearModel,
    pub logistic_iterations: usize,
    pub logistic_converged: bool,
    pub separable: bool,
    pub train_accuracy: f64,
    /// Share of the most frequent class, the accuracy floor.
    pub majority_rate: f64,
}

fn residual_std(model: &LinearModel, rows: &[Vec<f64>], y: &[f64]) -> f64 {
    let dof = rows.len().saturating_sub(model.weights.len() + 1).max(1);
    let ss: f64 = rows
        .iter()
        .zip(y)
        .map(|(r, t)| (t - model.predict(r)).powi(2))
        .sum();
    (ss / dof as f64).sqrt()
}

/// Fits the loan model: gender and age are sources, amount depends on both,
/// duration on amount, and the classifier reads all four features.
///
/// Source nodes take the column mean as intercept so their noise is
/// centred; every noise scale is the residual standard deviation.
pub fn fit_german(ds: &Dataset, cfg: &FitConfig) -> Result<FitReport> {
    let std = standardize(ds)?;
    let col = |j: usize| -> Vec<f64> { ds.rows.iter().map(|r| r[j]).collect() };
    let (gender, age, amount, duration) = (col(0), col(1), col(2), col(3));

    let amount_rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| vec![r[0], r[1]]).collect();
    let amount_model = fit_linear_ols_with(&amount_rows, &amount, &cfg.ols)?;
    let duration_rows: Vec<Vec<f64>> = ds.rows.iter().map(|r| vec![r[2]]).collect();
    let duration_model = fit_linear_ols_with(&duration_rows, &duration, &cfg.ols)?;

    let sigma = |j: usize| std.meta[j].sigma;
    let mut g = NodeSpec::source("gender", sigma(0))
        .frozen()
        .categorical()
        .with_noise_sigma(sample_std(&gender).max(f64::MIN_POSITIVE));
    g.intercept = mean(&gender);
    let mut a = NodeSpec::source("age", sigma(1));
    a.intercept = mean(&age);
    let m = NodeSpec::linear(
        "amount",
        vec![0, 1],
        amount_model.weights.clone(),
        amount_model.intercept,
        sigma(2),
    )
    .with_noise_sigma(residual_std(&amount_model, &amount_rows, &amount));
    let d = NodeSpec::linear(
        "duration",
        vec![2],
        duration_model.weights.clone(),
        duration_model.intercept,
        sigma(3),
    )
    .with_noise_sigma(residual_std(&duration_model, &duration_rows, &duration));
    let scm = ScmSpec::new(vec![g, a, m, d])?;

    let logistic_cfg = LogisticConfig {
        labels: ds.class_labels.clone(),
        ..cfg.logistic.clone()
    };
    let fit = fit_logistic(&ds.rows, &ds.labels, &logistic_cfg)?;
    let correct = ds
        .rows
        .iter()
        .zip(&ds.labels)
        .filter(|(r, &l)| fit.classifier.class_of_score(fit.classifier.score(r).expect("dim")) == l)
        .count();
    let ones = ds.labels.iter().filter(|&&l| l == 1).count();
    let n = ds.n_rows() as f64;

    let mut bundle = ModelBundle::new(scm, fit.classifier)?;
    bundle
        .categories
        .insert("gender".into(), ds.gender_names.to_vec());
    Ok(FitReport {
        bundle,
        amount_model,
        duration_model,
        logistic_iterations: fit.iterations,
        logistic_converged: fit.converged,
        separable: fit.separable,
        train_accuracy: correct as f64 / n,
        majority_rate: ones.max(ds.n_rows() - ones) as f64 / n,
    })
}
