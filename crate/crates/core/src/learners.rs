//! Fitting the structural mechanisms (ordinary least squares) and the
//! binary logistic classifier being explained.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::FeatureVector;

/// Affine model `y = weights · x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + self.intercept
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlsConfig {
    /// Ridge added on the correlation scale when the design is rank
    /// deficient. `None` turns rank deficiency into an error.
    pub ridge: Option<f64>,
}

impl Default for OlsConfig {
    fn default() -> Self {
        Self { ridge: Some(1e-8) }
    }
}

fn check_design(rows: &[Vec<f64>], n_targets: usize) -> Result<usize> {
    let p = rows.first().map_or(0, Vec::len);
    if rows.len() != n_targets {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            got: n_targets,
        });
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: bad.len(),
        });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("design matrix contains non-finite values".into()));
    }
    Ok(p)
}

fn column_means(rows: &[Vec<f64>], p: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Ordinary least squares with an automatic intercept column.
pub fn fit_linear_ols(rows: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    fit_linear_ols_with(rows, y, &OlsConfig::default())
}

/// Normal-equations least squares on centred columns. The intercept is
/// recovered from the means, so `rows` must not contain a ones column (one
/// is harmless but rank deficient).
pub fn fit_linear_ols_with(rows: &[Vec<f64>], y: &[f64], cfg: &OlsConfig) -> Result<LinearModel> {
    let p = check_design(rows, y.len())?;
    if rows.len() < p + 1 {
        return Err(Error::InvalidConfig(format!(
            "{} rows cannot identify {} coefficients",
            rows.len(),
            p + 1
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("target contains non-finite values".into()));
    }
    let n = rows.len();
    let means = column_means(rows, p);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    if p == 0 {
        return Ok(LinearModel {
            weights: Vec::new(),
            intercept: y_mean,
        });
    }

    let centred = DMatrix::from_fn(n, p, |i, j| rows[i][j] - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let gram = centred.transpose() * &centred;
    let rhs = centred.transpose() * yc;

    // Work on the correlation scale so the rank test is unit free.
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let d = gram[(j, j)].sqrt();
            if d > 0.0 { d } else { 1.0 }
        })
        .collect();
    let corr = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (scale[i] * scale[j]));
    let rhs_scaled = DVector::from_fn(p, |i, _| rhs[i] / scale[i]);

    let eig = SymmetricEigen::new(corr.clone()).eigenvalues;
    let max_eig = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let deficient = max_eig <= 0.0 || min_eig <= 1e-12 * max_eig;

    let system = if deficient {
        let ridge = cfg.ridge.ok_or(Error::SingularDesign)?;
        corr + DMatrix::identity(p, p) * ridge
    } else {
        corr
    };
    let beta = system
        .cholesky()
        .ok_or(Error::SingularDesign)?
        .solve(&rhs_scaled);
    let weights: Vec<f64> = (0..p).map(|j| beta[j] / scale[j]).collect();
    let intercept = y_mean - weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearModel { weights, intercept })
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Binary logistic classifier over raw feature values.
///
/// Class 1 is predicted when `sigmoid(score) ≥ threshold`, so a probability
/// exactly at the threshold goes to class 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    /// Display names for class 0 and class 1.
    pub labels: [String; 2],
}

impl LogisticClassifier {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            weights,
            bias,
            threshold: 0.5,
            labels: ["0".to_string(), "1".to_string()],
        }
    }

    pub fn with_labels(mut self, class0: impl Into<String>, class1: impl Into<String>) -> Self {
        self.labels = [class0.into(), class1.into()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("classifier has non-finite coefficients".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Linear score `w · x + b`. Binary categorical features enter through
    /// their 0/1 encoding, so the encoded input is the feature vector itself.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    /// Score value at which the decision flips.
    pub fn score_threshold(&self) -> f64 {
        logit(self.threshold)
    }

    pub fn class_probability(&self, x: &FeatureVector) -> Result<f64> {
        Ok(sigmoid(self.score(x)?))
    }

    pub fn classify(&self, x: &FeatureVector) -> Result<usize> {
        Ok(self.class_of_score(self.score(x)?))
    }

    pub fn class_of_score(&self, score: f64) -> usize {
        usize::from(score >= self.score_threshold())
    }

    pub fn label(&self, class: usize) -> &str {
        &self.labels[class.min(1)]
    }

    /// Resolves a class given either as an index or by its label.
    pub fn parse_class(&self, s: &str) -> Option<usize> {
        match s {
            "0" => Some(0),
            "1" => Some(1),
            _ => self.labels.iter().position(|l| l == s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticConfig {
    /// L2 penalty on the standardised weights (the intercept is not
    /// penalised), added to the mean negative log-likelihood.
    pub l2: f64,
    pub max_iter: usize,
    pub tol_grad: f64,
    pub threshold: f64,
    pub labels: [String; 2],
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 500,
            tol_grad: 1e-6,
            threshold: 0.5,
            labels: ["0".to_string(), "1".to_string()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub classifier: LogisticClassifier,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the fitted classifier labels every training example
    /// correctly, i.e. the data are linearly separable (this includes the
    /// single-class case). The returned fit is the regularised optimum.
    pub separable: bool,
    /// Objective after every accepted step, starting from the initial point.
    pub loss_history: Vec<f64>,
}

struct LogisticObjective<'a> {
    z: &'a DMatrix<f64>,
    y: &'a [f64],
    l2: f64,
}

impl LogisticObjective<'_> {
    /// Parameters are `[w_1..w_p, b]` on the standardised design.
    fn loss(&self, theta: &DVector<f64>) -> f64 {
        let (n, p) = self.z.shape();
        let mut total = 0.0;
        for i in 0..n {
            let s = (0..p).map(|j| self.z[(i, j)] * theta[j]).sum::<f64>() + theta[p];
            total += softplus(s) - self.y[i] * s;
        }
        let reg: f64 = (0..p).map(|j| theta[j] * theta[j]).sum();
        total / n as f64 + 0.5 * self.l2 * reg
    }

    fn gradient_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, p) = self.z.shape();
        let mut grad = DVector::zeros(p + 1);
        let mut hess = DMatrix::zeros(p + 1, p + 1);
        let mut row = vec![0.0; p + 1];
        for i in 0..n {
            for j in 0..p {
                row[j] = self.z[(i, j)];
            }
            row[p] = 1.0;
            let s = (0..=p).map(|j| row[j] * theta[j]).sum::<f64>();
            let prob = sigmoid(s);
            let r = prob - self.y[i];
            let c = prob * (1.0 - prob);
            for a in 0..=p {
                grad[a] += r * row[a];
                for b in 0..=a {
                    hess[(a, b)] += c * row[a] * row[b];
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        grad *= inv_n;
        hess *= inv_n;
        for a in 0..=p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        for j in 0..p {
            grad[j] += self.l2 * theta[j];
            hess[(j, j)] += self.l2;
        }
        (grad, hess)
    }
}

/// Maximum-likelihood logistic regression by damped Newton steps with an
/// Armijo backtracking line search.
///
/// Features are standardised internally for conditioning and the
/// coefficients are mapped back to raw units. The procedure is fully
/// deterministic.
pub fn fit_logistic(rows: &[Vec<f64>], labels: &[usize], cfg: &LogisticConfig) -> Result<LogisticFit> {
    let p = check_design(rows, labels.len())?;
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no training examples".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidConfig(format!("label {bad} is not binary")));
    }
    if !(cfg.l2 >= 0.0) {
        return Err(Error::InvalidConfig("l2 penalty must be non-negative".into()));
    }
    let n = rows.len();
    let means = column_means(rows, p);
    let sds: Vec<f64> = (0..p)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>()
                / (n.max(2) - 1) as f64;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let z = DMatrix::from_fn(n, p, |i, j| (rows[i][j] - means[j]) / sds[j]);
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let objective = LogisticObjective { z: &z, y: &y, l2: cfg.l2 };

    let mut theta = DVector::zeros(p + 1);
    let mut loss = objective.loss(&theta);
    let mut history = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let (grad, hess) = objective.gradient_hessian(&theta);
        if grad.norm() < cfg.tol_grad {
            converged = true;
            break;
        }
        iterations += 1;
        // With no penalty the Hessian can be singular; fall back to a
        // lightly damped system.
        let direction = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => match (hess + DMatrix::identity(p + 1, p + 1) * 1e-8).cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => -grad.clone(),
            },
        };
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta + &direction * step;
            let cand_loss = objective.loss(&candidate);
            if cand_loss <= loss + 1e-4 * step * slope {
                theta = candidate;
                loss = cand_loss;
                history.push(loss);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No decrease representable in floating point: we are at the
            // optimum to machine precision.
            converged = grad.norm() < cfg.tol_grad.sqrt();
            break;
        }
    }

    let weights: Vec<f64> = (0..p).map(|j| theta[j] / sds[j]).collect();
    let bias = theta[p] - (0..p).map(|j| theta[j] * means[j] / sds[j]).sum::<f64>();
    let classifier = LogisticClassifier {
        weights,
        bias,
        threshold: cfg.threshold,
        labels: cfg.labels.clone(),
    };
    classifier.validate()?;
    let separable = rows.iter().zip(labels).all(|(r, &l)| {
        classifier
            .classify(&FeatureVector(r.clone()))
            .map(|c| c == l)
            .unwrap_or(false)
    });
    Ok(LogisticFit {
        classifier,
        iterations,
        converged,
        separable,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn noiseless_linear_data_is_recovered() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, ((i * 7) % 5) as f64 - 2.0])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| 1.5 * r[0] - 0.25 * r[1] + 3.0).collect();
        let m = fit_linear_ols(&rows, &y).unwrap();
        assert!((m.weights[0] - 1.5).abs() < 1e-8);
        assert!((m.weights[1] + 0.25).abs() < 1e-8);
        assert!((m.intercept - 3.0).abs() < 1e-8);
    }

    #[test]
    fn intercept_only_fit_is_the_mean() {
        let rows = vec![Vec::new(); 4];
        let y = [1.0, 2.0, 3.0, 6.0];
        let m = fit_linear_ols(&rows, &y).unwrap();
        assert!((m.intercept - 3.0).abs() < 1e-15);
    }

    #[test]
    fn ones_column_falls_back_to_ridge_and_predicts_the_mean() {
        let rows = vec![vec![1.0]; 4];
        let y = [1.0, 2.0, 3.0, 6.0];
        let m = fit_linear_ols(&rows, &y).unwrap();
        assert!((m.predict(&[1.0]) - 3.0).abs() < 1e-9);
        assert!(matches!(
            fit_linear_ols_with(&rows, &y, &OlsConfig { ridge: None }),
            Err(Error::SingularDesign)
        ));
    }

    #[test]
    fn collinear_columns_are_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(
            fit_linear_ols_with(&rows, &y, &OlsConfig { ridge: None }),
            Err(Error::SingularDesign)
        ));
        let m = fit_linear_ols(&rows, &y).unwrap();
        for (r, t) in rows.iter().zip(&y) {
            assert!((m.predict(r) - t).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_rows() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(fit_linear_ols(&rows, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn residuals_are_orthogonal_to_the_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(0.0..100.0)])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 0.7 * r[0] + 0.01 * r[1] + rng.random_range(-1.0..1.0))
            .collect();
        let m = fit_linear_ols_with(&rows, &y, &OlsConfig { ridge: None }).unwrap();
        let resid: Vec<f64> = rows.iter().zip(&y).map(|(r, t)| t - m.predict(r)).collect();
        let n = rows.len() as f64;
        assert!(resid.iter().sum::<f64>().abs() < 1e-6 * n);
        for j in 0..2 {
            let dot: f64 = rows.iter().zip(&resid).map(|(r, e)| r[j] * e).sum();
            assert!(dot.abs() < 1e-6 * n, "column {j}: {dot}");
        }
    }

    #[test]
    fn monte_carlo_structural_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| vec![noise.sample(&mut rng), noise.sample(&mut rng)])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 0.5 * r[0] + 0.3 * r[1] + noise.sample(&mut rng))
            .collect();
        let m = fit_linear_ols(&rows, &y).unwrap();
        assert!((m.weights[0] - 0.5).abs() < 0.1);
        assert!((m.weights[1] - 0.3).abs() < 0.1);
    }

    #[test]
    fn symmetric_split_puts_the_boundary_at_zero() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in 1..=10 {
            let v = 0.5 + 0.1 * k as f64;
            rows.push(vec![v]);
            labels.push(1);
            rows.push(vec![-v]);
            labels.push(0);
        }
        let cfg = LogisticConfig { l2: 1e-2, ..Default::default() };
        let fit = fit_logistic(&rows, &labels, &cfg).unwrap();
        assert!(fit.separable);
        let h = &fit.classifier;
        let boundary = (h.score_threshold() - h.bias) / h.weights[0];
        assert!(boundary.abs() < 0.1, "boundary at {boundary}");
    }

    #[test]
    fn single_class_is_flagged_and_bias_follows_the_prior() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let labels = vec![1; 10];
        let fit = fit_logistic(&rows, &labels, &LogisticConfig::default()).unwrap();
        assert!(fit.separable);
        assert!(fit.classifier.bias > 3.0);
        for r in &rows {
            assert_eq!(fit.classifier.classify(&FeatureVector(r.clone())).unwrap(), 1);
        }
    }

    #[test]
    fn loss_never_increases_and_gradient_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(0.0..1000.0)])
            .collect();
        let labels: Vec<usize> = rows
            .iter()
            .map(|r| {
                let p = sigmoid(0.8 * r[0] - 0.002 * r[1] + 0.5);
                usize::from(rng.random::<f64>() < p)
            })
            .collect();
        let fit = fit_logistic(&rows, &labels, &LogisticConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(!fit.separable);
        assert!(fit.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.classifier.weights[0] > 0.0 && fit.classifier.weights[1] < 0.0);
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        assert!(fit_logistic(&[vec![1.0]], &[2], &LogisticConfig::default()).is_err());
    }

    #[test]
    fn tie_goes_to_class_one() {
        let h = LogisticClassifier::new(vec![0.0, 0.0], 0.0);
        let x = FeatureVector::from([3.0, -1.0]);
        assert_eq!(h.class_probability(&x).unwrap(), 0.5);
        assert_eq!(h.classify(&x).unwrap(), 1);
    }

    #[test]
    fn classify_checks_dimension() {
        let h = LogisticClassifier::new(vec![1.0, 2.0], 0.0);
        assert!(matches!(
            h.classify(&FeatureVector::from([1.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn probability_limits_and_slope() {
        let h = LogisticClassifier::new(vec![1.0], 0.0);
        assert_eq!(h.class_probability(&FeatureVector::from([0.0])).unwrap(), 0.5);
        let mut last = 0.5;
        for k in 1..40 {
            let p = h.class_probability(&FeatureVector::from([k as f64])).unwrap();
            assert!(p >= last);
            last = p;
        }
        assert!(last > 1.0 - 1e-15);
        let eps = 1e-6;
        let slope = (sigmoid(eps) - sigmoid(-eps)) / (2.0 * eps);
        assert!((slope - 0.25).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn threshold_is_validated() {
        let mut h = LogisticClassifier::new(vec![1.0], 0.0);
        h.threshold = 1.0;
        assert!(h.validate().is_err());
    }

    #[test]
    fn labels_parse_by_name() {
        let h = LogisticClassifier::new(vec![1.0], 0.0).with_labels("low-risk", "high-risk");
        assert_eq!(h.parse_class("low-risk"), Some(0));
        assert_eq!(h.parse_class("1"), Some(1));
        assert_eq!(h.parse_class("medium"), None);
    }
}
