//! The penalised counterfactual objective, its solver and grid oracles.
//!
//! The class constraint enters as a cross-entropy penalty with weight β.
//! Because the score is affine in the decision variables, the penalised
//! minimiser overshoots the decision boundary by roughly `log β` in score
//! units; the outer loop therefore escalates β until the constraint holds
//! and then searches `log β` for the multiplier that puts the minimiser on
//! the boundary, where it satisfies the optimality conditions of the
//! constrained problem.
//!
//! The inner problem is solved with accelerated proximal gradient steps.
//! Smoothed ℓ1 terms on directly controlled coordinates are handled by their
//! exact proximal map, so the small smoothing parameter does not dictate the
//! step size.

use std::io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{logit, sigmoid, softplus, LogisticClassifier};
use crate::metrics::{LatentScale, Metrics};
use crate::scm::{FeatureVector, InterventionSet, LatentVector, ScmSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Weight of the noise distance.
    pub lambda: f64,
    pub beta_init: f64,
    pub beta_growth: f64,
    pub beta_max: f64,
    pub step_init: f64,
    /// Iteration cap for each inner solve.
    pub max_iters: usize,
    /// Stop when the proximal gradient mapping is smaller than this.
    pub tol_grad: f64,
    pub l1_smoothing_mu: f64,
    /// Extra probability margin demanded beyond the threshold.
    pub margin: f64,
    /// Additional seeded random starts; 0 starts only at the factual.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            beta_init: 1.0,
            beta_growth: 2.0,
            beta_max: (1u64 << 20) as f64,
            step_init: 0.1,
            max_iters: 2000,
            tol_grad: 1e-8,
            l1_smoothing_mu: 1e-6,
            margin: 0.0,
            restarts: 0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.beta_init > 0.0 && self.beta_max >= self.beta_init && self.beta_max.is_finite()) {
            return bad("need 0 < beta_init <= beta_max < inf");
        }
        if !(self.beta_growth > 1.0 && self.beta_growth.is_finite()) {
            return bad("beta_growth must exceed 1");
        }
        if !(self.step_init > 0.0 && self.step_init.is_finite()) {
            return bad("step_init must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.tol_grad > 0.0) {
            return bad("tol_grad must be positive");
        }
        if !(self.l1_smoothing_mu > 0.0 && self.l1_smoothing_mu.is_finite()) {
            return bad("l1_smoothing_mu must be positive");
        }
        if !(self.margin >= 0.0 && self.margin < 0.5) {
            return bad("margin must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// Weights of the two distance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub dx: f64,
    pub du: f64,
}

impl TermWeights {
    pub fn brace(lambda: f64) -> Self {
        Self { dx: 1.0, du: lambda }
    }

    pub fn wachter() -> Self {
        Self { dx: 1.0, du: 0.0 }
    }

    /// Noise distance only; the feature term is exactly absent.
    pub fn dbe() -> Self {
        Self { dx: 0.0, du: 1.0 }
    }

    fn scale(&self) -> f64 {
        self.dx.max(self.du)
    }

    pub fn combine(&self, d_x: f64, d_u: f64) -> f64 {
        let mut v = 0.0;
        if self.dx != 0.0 {
            v += self.dx * d_x;
        }
        if self.du != 0.0 {
            v += self.du * d_u;
        }
        v
    }
}

/// One explanation problem: model, classifier, factual point and target.
#[derive(Debug, Clone)]
pub struct Objective {
    pub spec: ScmSpec,
    pub classifier: LogisticClassifier,
    pub x_factual: FeatureVector,
    pub u_factual: LatentVector,
    pub target: usize,
    pub frozen: Vec<usize>,
    pub metrics: Metrics,
}

impl Objective {
    pub fn new(
        spec: ScmSpec,
        classifier: LogisticClassifier,
        x_factual: FeatureVector,
        target: usize,
    ) -> Result<Self> {
        if target > 1 {
            return Err(Error::InvalidConfig(format!("target class {target} is not binary")));
        }
        if classifier.dim() != spec.len() {
            return Err(Error::DimensionMismatch {
                expected: spec.len(),
                got: classifier.dim(),
            });
        }
        classifier.validate()?;
        if !x_factual.is_finite() {
            return Err(Error::InvalidConfig("factual point has non-finite entries".into()));
        }
        let u_factual = spec.abduct(&x_factual)?;
        Ok(Self {
            frozen: spec.frozen(),
            metrics: Metrics::for_spec(&spec, LatentScale::FeatureSigma),
            spec,
            classifier,
            x_factual,
            u_factual,
            target,
        })
    }

    pub fn with_latent_scale(mut self, scale: LatentScale) -> Self {
        self.metrics = Metrics::for_spec(&self.spec, scale);
        self
    }

    pub fn factual_class(&self) -> usize {
        self.classifier
            .classify(&self.x_factual)
            .expect("dimension checked on construction")
    }

    /// Exact (unsmoothed) `(d_X, d_U)` of a candidate against the factual.
    pub fn distances(&self, x_cf: &[f64], u_cf: &[f64]) -> Result<(f64, f64)> {
        Ok((
            self.metrics.d_x(&self.x_factual, x_cf)?,
            self.metrics.d_u(&self.u_factual, u_cf)?,
        ))
    }
}

/// Score-space view of the class constraint.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    t: f64,
    target: usize,
}

impl Constraint {
    fn new(classifier: &LogisticClassifier, target: usize, margin: f64) -> Result<Self> {
        let p = if target == 1 {
            classifier.threshold + margin
        } else {
            classifier.threshold - margin
        };
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "margin {margin} pushes the threshold outside (0, 1)"
            )));
        }
        let t = if margin == 0.0 {
            classifier.score_threshold()
        } else {
            logit(p)
        };
        Ok(Self { t, target })
    }

    /// Signed distance to the boundary, positive on the target side.
    fn slack(&self, s: f64) -> f64 {
        if self.target == 1 {
            s - self.t
        } else {
            self.t - s
        }
    }

    /// Ties at the threshold belong to class 1.
    fn feasible(&self, s: f64) -> bool {
        let m = self.slack(s);
        if self.target == 1 {
            m >= 0.0
        } else {
            m > 0.0
        }
    }

    /// Cross-entropy towards the target and its derivative in the score.
    fn ce(&self, s: f64) -> (f64, f64) {
        if self.target == 1 {
            (softplus(self.t - s), -sigmoid(self.t - s))
        } else {
            (softplus(s - self.t), sigmoid(s - self.t))
        }
    }
}

/// Huber smoothing of `|v|` and its derivative.
fn huber(v: f64, mu: f64) -> (f64, f64) {
    if v.abs() <= mu {
        (0.5 * v * v / mu, v / mu)
    } else {
        (v.abs() - 0.5 * mu, v.signum())
    }
}

/// `argmin_z w·huber(z) + (z − v)² / 2t`.
fn huber_prox(v: f64, t: f64, w: f64, mu: f64) -> f64 {
    let tw = t * w;
    if v.abs() <= mu + tw {
        v * mu / (mu + tw)
    } else {
        v - tw * v.signum()
    }
}

/// The smoothed objective `d_X + λ·d_U + β·CE` as a function of the noise,
/// with its gradient.
///
/// `d_X` is Huber-smoothed with `cfg.l1_smoothing_mu` and `d_U` is replaced
/// by `√(‖·‖² + μ²) − μ`, so the function is differentiable everywhere.
pub fn penalty_objective(
    obj: &Objective,
    u_cf: &LatentVector,
    beta: f64,
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    let n = obj.spec.len();
    let mu = cfg.l1_smoothing_mu;
    let x = obj.spec.reduced_form(u_cf)?;
    let constraint = Constraint::new(&obj.classifier, obj.target, cfg.margin)?;
    let m = &obj.metrics;

    let mut value = 0.0;
    let mut grad_x = vec![0.0; n];
    let mut grad_u = vec![0.0; n];
    for i in (0..n).filter(|&i| m.is_active(i)) {
        let (h, dh) = huber((x[i] - obj.x_factual[i]) / m.x_scale(i), mu);
        value += h;
        grad_x[i] += dh / m.x_scale(i);
    }
    if cfg.lambda != 0.0 {
        let d: Vec<f64> = (0..n)
            .map(|i| {
                if m.is_active(i) {
                    (u_cf[i] - obj.u_factual[i]) / m.u_scale(i)
                } else {
                    0.0
                }
            })
            .collect();
        let r = (d.iter().map(|v| v * v).sum::<f64>() + mu * mu).sqrt();
        value += cfg.lambda * (r - mu);
        for i in 0..n {
            grad_u[i] += cfg.lambda * d[i] / (r * m.u_scale(i));
        }
    }
    let (c, dc) = constraint.ce(obj.classifier.score(&x)?);
    value += beta * c;
    for (g, w) in grad_x.iter_mut().zip(&obj.classifier.weights) {
        *g += beta * dc * w;
    }
    let jac = obj.spec.reduced_form_jacobian();
    for j in 0..n {
        grad_u[j] += (0..n).map(|i| jac[i][j] * grad_x[i]).sum::<f64>();
    }
    Ok((value, grad_u))
}

/// Decision variables of a solve: normalised moves `z_j = Δv_j / σ_j` of
/// the controlled nodes, with both `x` and `u` affine in `z`.
#[derive(Debug, Clone)]
pub(crate) struct Space {
    controlled: Vec<usize>,
    /// `Some(A)` when the controlled values are hard interventions.
    intervention: Option<Vec<usize>>,
    gx: Vec<Vec<f64>>,
    gu: Vec<Vec<f64>>,
}

impl Space {
    fn with_columns(obj: &Objective, controlled: Vec<usize>, intervention: Option<Vec<usize>>, gx: Vec<Vec<f64>>) -> Self {
        // Abduction is linear: u_i = x_i − Σ w x_p − b, applied column-wise.
        let gu = (0..obj.spec.len())
            .map(|i| {
                let node = obj.spec.node(i);
                (0..controlled.len())
                    .map(|j| {
                        gx[i][j]
                            - node
                                .parents
                                .iter()
                                .zip(&node.weights)
                                .map(|(&p, &w)| w * gx[p][j])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        Self {
            controlled,
            intervention,
            gx,
            gu,
        }
    }

    /// Every mutable feature moves freely; frozen features stay put and the
    /// noise follows by abduction.
    pub(crate) fn mutable(obj: &Objective) -> Self {
        let controlled = obj.spec.mutable_indices();
        let n = obj.spec.len();
        let gx = (0..n)
            .map(|i| {
                controlled
                    .iter()
                    .map(|&c| if c == i { obj.metrics.x_scale(i) } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::with_columns(obj, controlled, None, gx)
    }

    /// Hard intervention on `subset`; other features follow their
    /// mechanisms with the factual noise.
    pub(crate) fn intervention(obj: &Objective, subset: &[usize]) -> Result<Self> {
        let n = obj.spec.len();
        for &a in subset {
            if a >= n {
                return Err(Error::IndexOutOfRange { index: a, n });
            }
        }
        let mut gx = vec![vec![0.0; subset.len()]; n];
        for (j, &a) in subset.iter().enumerate() {
            for &i in obj.spec.topological_order() {
                gx[i][j] = if i == a {
                    obj.metrics.x_scale(a)
                } else if subset.contains(&i) {
                    0.0
                } else {
                    let node = obj.spec.node(i);
                    node.parents
                        .iter()
                        .zip(&node.weights)
                        .map(|(&p, &w)| w * gx[p][j])
                        .sum()
                };
            }
        }
        Ok(Self::with_columns(obj, subset.to_vec(), Some(subset.to_vec()), gx))
    }

    fn dim(&self) -> usize {
        self.controlled.len()
    }

    /// The candidate point for `z`, built with the model operations so the
    /// reported values satisfy their defining identities exactly.
    fn materialize(&self, obj: &Objective, z: &[f64]) -> Result<Candidate> {
        match &self.intervention {
            None => {
                let mut x = obj.x_factual.clone();
                for (j, &c) in self.controlled.iter().enumerate() {
                    x.0[c] = obj.x_factual[c] + obj.metrics.x_scale(c) * z[j];
                }
                let u = obj.spec.abduct(&x)?;
                Ok(Candidate { x, u, intervention: None })
            }
            Some(subset) => {
                let a = InterventionSet::new(
                    subset
                        .iter()
                        .enumerate()
                        .map(|(j, &c)| (c, obj.x_factual[c] + obj.metrics.x_scale(c) * z[j])),
                )?;
                let x = obj.spec.icf_three_step(&obj.x_factual, &a)?;
                let u = obj.spec.abduct(&x)?;
                Ok(Candidate {
                    x,
                    u,
                    intervention: Some(a),
                })
            }
        }
    }
}

struct Candidate {
    x: FeatureVector,
    u: LatentVector,
    intervention: Option<InterventionSet>,
}

/// The penalised problem at a fixed β in the coordinates of a [`Space`].
struct Penalized<'a> {
    space: &'a Space,
    obj: &'a Objective,
    constraint: Constraint,
    w_dx: f64,
    w_du: f64,
    beta: f64,
    mu: f64,
    /// Non-frozen, non-controlled features that still move with `z`.
    huber_rows: Vec<usize>,
    du_rows: Vec<usize>,
    score_grad: Vec<f64>,
    score0: f64,
    /// Coordinates held at zero are excluded from the search.
    free: Vec<bool>,
}

impl<'a> Penalized<'a> {
    fn new(obj: &'a Objective, space: &'a Space, terms: TermWeights, constraint: Constraint, mu: f64) -> Self {
        let n = obj.spec.len();
        let scale = terms.scale();
        let m = &obj.metrics;
        let huber_rows = (0..n)
            .filter(|&i| m.is_active(i) && !space.controlled.contains(&i))
            .filter(|&i| space.gx[i].iter().any(|&g| g != 0.0))
            .collect();
        let du_rows = (0..n)
            .filter(|&i| m.is_active(i) && space.gu[i].iter().any(|&g| g != 0.0))
            .collect();
        let score_grad = (0..space.dim())
            .map(|j| {
                (0..n)
                    .map(|i| obj.classifier.weights[i] * space.gx[i][j])
                    .sum()
            })
            .collect();
        let score0 = obj.classifier.score(&obj.x_factual).expect("dimension checked");
        Self {
            space,
            obj,
            constraint,
            w_dx: terms.dx / scale,
            w_du: terms.du / scale,
            beta: 0.0,
            mu,
            huber_rows,
            du_rows,
            score_grad,
            score0,
            free: vec![true; space.dim()],
        }
    }

    fn score(&self, z: &[f64]) -> f64 {
        self.score0 + self.score_grad.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Smooth part and its gradient.
    fn smooth(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let m = &self.obj.metrics;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        if self.w_dx != 0.0 {
            for &i in &self.huber_rows {
                let row = &self.space.gx[i];
                let v = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / m.x_scale(i);
                let (h, dh) = huber(v, self.mu);
                value += self.w_dx * h;
                for (g, r) in grad.iter_mut().zip(row) {
                    *g += self.w_dx * dh * r / m.x_scale(i);
                }
            }
        }
        if self.w_du != 0.0 {
            let mut q = 0.0;
            let d: Vec<f64> = self
                .du_rows
                .iter()
                .map(|&i| {
                    let v = self.space.gu[i].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / m.u_scale(i);
                    q += v * v;
                    v
                })
                .collect();
            let r = (q + self.mu * self.mu).sqrt();
            value += self.w_du * (r - self.mu);
            for (k, &i) in self.du_rows.iter().enumerate() {
                let c = self.w_du * d[k] / (r * m.u_scale(i));
                for (g, row) in grad.iter_mut().zip(&self.space.gu[i]) {
                    *g += c * row;
                }
            }
        }
        let (c, dc) = self.constraint.ce(self.score(z));
        value += self.beta * c;
        for (g, a) in grad.iter_mut().zip(&self.score_grad) {
            *g += self.beta * dc * a;
        }
        value
    }

    fn nonsmooth(&self, z: &[f64]) -> f64 {
        if self.w_dx == 0.0 {
            return 0.0;
        }
        self.w_dx * z.iter().map(|&v| huber(v, self.mu).0).sum::<f64>()
    }

    fn prox(&self, v: &[f64], t: f64, out: &mut [f64]) {
        for ((o, &vi), &free) in out.iter_mut().zip(v).zip(&self.free) {
            *o = if !free {
                0.0
            } else if self.w_dx == 0.0 {
                vi
            } else {
                huber_prox(vi, t, self.w_dx, self.mu)
            };
        }
    }

    /// Accelerated proximal gradient with backtracking and adaptive restart.
    fn minimize(&self, z0: &[f64], cfg: &SolverConfig) -> InnerRun {
        let m = z0.len();
        let mut z = z0.to_vec();
        let mut y = z.clone();
        let mut grad = vec![0.0; m];
        let mut step = vec![0.0; m];
        let mut z_new = vec![0.0; m];
        let mut scratch = vec![0.0; m];
        let mut t = cfg.step_init;
        let mut theta: f64 = 1.0;
        let mut f_prev = self.smooth(&z, &mut scratch) + self.nonsmooth(&z);
        let mut converged = false;
        let mut iters = 0;
        while iters < cfg.max_iters {
            iters += 1;
            let gy = self.smooth(&y, &mut grad);
            let mut gz;
            loop {
                for k in 0..m {
                    step[k] = y[k] - t * grad[k];
                }
                self.prox(&step, t, &mut z_new);
                gz = self.smooth(&z_new, &mut scratch);
                let mut lin = 0.0;
                let mut sq = 0.0;
                for k in 0..m {
                    let d = z_new[k] - y[k];
                    lin += grad[k] * d;
                    sq += d * d;
                }
                if gz <= gy + lin + sq / (2.0 * t) + 1e-13 * (1.0 + gy.abs()) || t < 1e-18 {
                    break;
                }
                t *= 0.5;
            }
            let mapping = z_new
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / t;
            let f_new = gz + self.nonsmooth(&z_new);
            if f_new > f_prev && theta > 1.0 {
                // Momentum overshot: restart from the last accepted point.
                theta = 1.0;
                y.copy_from_slice(&z);
                continue;
            }
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let momentum = (theta - 1.0) / theta_next;
            for k in 0..m {
                y[k] = z_new[k] + momentum * (z_new[k] - z[k]);
            }
            z.copy_from_slice(&z_new);
            theta = theta_next;
            f_prev = f_new.min(f_prev);
            if mapping < cfg.tol_grad {
                converged = true;
                break;
            }
            t *= 1.5;
        }
        InnerRun { z, iters, converged }
    }
}

struct InnerRun {
    z: Vec<f64>,
    iters: usize,
    converged: bool,
}

/// One row of the solver trace, recorded after every inner solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Cumulative inner iterations.
    pub iter: usize,
    pub beta: f64,
    /// Exact weighted distance at the inner solution.
    pub objective: f64,
    pub d_x: f64,
    pub d_u: f64,
    pub constraint_satisfied: bool,
}

pub fn write_trace_csv<W: io::Write>(trace: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub u_cf: LatentVector,
    pub x_cf: FeatureVector,
    pub d_x: f64,
    pub d_u: f64,
    /// Exact weighted objective at the returned point.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Penalty weight at which the returned point was found.
    pub beta: f64,
    pub intervention: Option<InterventionSet>,
    pub trace: Vec<TraceRow>,
}

struct Visit {
    beta: f64,
    z: Vec<f64>,
    slack: f64,
    feasible: bool,
    converged: bool,
    cand: Candidate,
    d_x: f64,
    d_u: f64,
    objective: f64,
}

struct Outer<'a> {
    obj: &'a Objective,
    space: &'a Space,
    terms: TermWeights,
    cfg: &'a SolverConfig,
    problem: Penalized<'a>,
    iterations: usize,
    trace: Vec<TraceRow>,
    best: Option<Visit>,
}

/// Width of the slack window accepted as "on the boundary".
const BOUNDARY_HI: f64 = 1e-9;
const BOUNDARY_LO: f64 = 1e-11;

impl<'a> Outer<'a> {
    fn visit(&mut self, beta: f64, z0: &[f64]) -> Result<Visit> {
        self.problem.beta = beta * 1.0;
        let run = self.problem.minimize(z0, self.cfg);
        self.iterations += run.iters;
        let cand = self.space.materialize(self.obj, &run.z)?;
        let s = self.obj.classifier.score(&cand.x)?;
        let (d_x, d_u) = self.obj.distances(&cand.x, &cand.u)?;
        let objective = self.terms.combine(d_x, d_u);
        let feasible = self.problem.constraint.feasible(s);
        self.trace.push(TraceRow {
            iter: self.iterations,
            beta,
            objective,
            d_x,
            d_u,
            constraint_satisfied: feasible,
        });
        let visit = Visit {
            beta,
            z: run.z,
            slack: self.problem.constraint.slack(s),
            feasible,
            converged: run.converged,
            cand,
            d_x,
            d_u,
            objective,
        };
        if feasible && self.best.as_ref().is_none_or(|b| objective < b.objective) {
            self.best = Some(Visit {
                z: visit.z.clone(),
                cand: Candidate {
                    x: visit.cand.x.clone(),
                    u: visit.cand.u.clone(),
                    intervention: visit.cand.intervention.clone(),
                },
                ..visit
            });
        }
        Ok(visit)
    }

    fn on_boundary(&self, v: &Visit) -> bool {
        let tol = 1.0 + self.problem.constraint.t.abs();
        v.feasible && v.slack <= BOUNDARY_HI * tol
    }

    /// Escalate β until feasible, then search `log β` for the boundary.
    fn run(&mut self, z_init: &[f64]) -> Result<bool> {
        let cfg = self.cfg;
        let mut beta = cfg.beta_init;
        let mut lo: Option<Visit> = None;
        let mut hi = loop {
            let start = lo.as_ref().map_or(z_init.to_vec(), |v| v.z.clone());
            let v = self.visit(beta, &start)?;
            if v.feasible {
                break v;
            }
            if beta >= cfg.beta_max {
                return Ok(false);
            }
            lo = Some(v);
            beta = (beta * cfg.beta_growth).min(cfg.beta_max);
        };
        if self.on_boundary(&hi) {
            return Ok(true);
        }
        if lo.is_none() {
            // Feasible from the first β: walk down to bracket the boundary.
            let floor = cfg.beta_init * 1e-12;
            while lo.is_none() && hi.beta > floor {
                let v = self.visit(hi.beta / cfg.beta_growth, &hi.z.clone())?;
                if v.feasible {
                    hi = v;
                    if self.on_boundary(&hi) {
                        return Ok(true);
                    }
                } else {
                    lo = Some(v);
                }
            }
        }
        let Some(mut lo) = lo else {
            return Ok(true);
        };
        let target = 0.5 * (BOUNDARY_HI + BOUNDARY_LO) * (1.0 + self.problem.constraint.t.abs());
        let g = |v: &Visit| v.slack - target;
        let (mut g_lo, mut g_hi) = (g(&lo), g(&hi));
        let mut side = 0i8;
        for k in 0..100 {
            let (l_lo, l_hi) = (lo.beta.ln(), hi.beta.ln());
            if l_hi - l_lo < 1e-13 * (1.0 + l_hi.abs()) {
                break;
            }
            let mut l = (l_lo * g_hi - l_hi * g_lo) / (g_hi - g_lo);
            // Fall back to bisection when false position stalls at an end.
            let w = l_hi - l_lo;
            if !l.is_finite() || k % 4 == 3 || l <= l_lo + 1e-3 * w || l >= l_hi - 1e-3 * w {
                l = 0.5 * (l_lo + l_hi);
            }
            let start = hi.z.clone();
            let v = self.visit(l.exp(), &start)?;
            if v.feasible {
                if self.on_boundary(&v) {
                    return Ok(true);
                }
                g_hi = g(&v);
                hi = v;
                if side == 1 {
                    g_lo *= 0.5;
                }
                side = 1;
            } else {
                g_lo = g(&v);
                lo = v;
                if side == -1 {
                    g_hi *= 0.5;
                }
                side = -1;
            }
        }
        Ok(true)
    }
}

fn factual_output(obj: &Objective, space: &Space, terms: TermWeights) -> Result<SolveOutput> {
    let cand = space.materialize(obj, &vec![0.0; space.dim()])?;
    let (d_x, d_u) = obj.distances(&cand.x, &cand.u)?;
    Ok(SolveOutput {
        objective: terms.combine(d_x, d_u),
        trace: vec![TraceRow {
            iter: 0,
            beta: 0.0,
            objective: terms.combine(d_x, d_u),
            d_x,
            d_u,
            constraint_satisfied: true,
        }],
        u_cf: cand.u,
        x_cf: cand.x,
        d_x,
        d_u,
        converged: true,
        iterations: 0,
        beta: 0.0,
        intervention: cand.intervention,
    })
}

pub(crate) fn solve_in(obj: &Objective, space: &Space, terms: TermWeights, cfg: &SolverConfig) -> Result<SolveOutput> {
    cfg.validate()?;
    if !(terms.dx >= 0.0 && terms.du >= 0.0 && terms.scale() > 0.0 && terms.scale().is_finite()) {
        return Err(Error::InvalidConfig("distance weights must be non-negative and not both zero".into()));
    }
    let constraint = Constraint::new(&obj.classifier, obj.target, cfg.margin)?;
    if constraint.feasible(obj.classifier.score(&obj.x_factual)?) {
        return factual_output(obj, space, terms);
    }
    if space.dim() == 0 {
        return Err(Error::Infeasible {
            target: obj.target,
            reason: "no coordinate may change".into(),
        });
    }
    let mut outer = Outer {
        obj,
        space,
        terms,
        cfg,
        problem: Penalized::new(obj, space, terms, constraint, cfg.l1_smoothing_mu),
        iterations: 0,
        trace: Vec::new(),
        best: None,
    };
    let mut starts = vec![vec![0.0; space.dim()]];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        starts.push((0..space.dim()).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    for start in &starts {
        outer.run(start)?;
    }
    // Huber smoothing leaves coordinates that should be exactly zero at
    // |z| ≤ μ and biases the others. Re-solving on the support removes both
    // effects; the exact objective decides which point is kept.
    if let Some(best) = &outer.best {
        let free: Vec<bool> = best.z.iter().map(|v| v.abs() > cfg.l1_smoothing_mu).collect();
        if terms.dx > 0.0 && free.iter().any(|&f| f) && free.iter().any(|&f| !f) {
            let start: Vec<f64> = best.z.iter().zip(&free).map(|(&v, &f)| if f { v } else { 0.0 }).collect();
            outer.problem.free = free;
            outer.run(&start)?;
        }
    }
    let Outer {
        best, iterations, trace, ..
    } = outer;
    let best = best.ok_or_else(|| Error::Infeasible {
        target: obj.target,
        reason: format!("class constraint still violated at beta = {}", cfg.beta_max),
    })?;
    Ok(SolveOutput {
        u_cf: best.cand.u,
        x_cf: best.cand.x,
        d_x: best.d_x,
        d_u: best.d_u,
        objective: best.objective,
        converged: best.converged,
        iterations,
        beta: best.beta,
        intervention: best.cand.intervention,
        trace,
    })
}

/// Minimises `d_X + λ·d_U` (λ from `cfg`) over causally consistent points
/// with frozen features held at their factual values.
pub fn penalty_solve(obj: &Objective, cfg: &SolverConfig) -> Result<SolveOutput> {
    solve_weighted(obj, TermWeights::brace(cfg.lambda), cfg)
}

/// As [`penalty_solve`] with arbitrary distance weights.
pub fn solve_weighted(obj: &Objective, terms: TermWeights, cfg: &SolverConfig) -> Result<SolveOutput> {
    solve_in(obj, &Space::mutable(obj), terms, cfg)
}

/// Minimises `d_X` over hard interventions on `subset`.
pub fn solve_intervention(obj: &Objective, subset: &[usize], cfg: &SolverConfig) -> Result<SolveOutput> {
    solve_in(obj, &Space::intervention(obj, subset)?, TermWeights::wachter(), cfg)
}

/// Regular grid over the mutable noise coordinates, in units of the noise
/// scale and centred on the factual noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width of the box in normalised units.
    pub half_width: f64,
    pub resolution: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            half_width: 5.0,
            resolution: 0.01,
        }
    }
}

impl GridSpec {
    /// Normalised offsets along one axis.
    ///
    /// When `1/resolution` is an integer the offsets are computed as
    /// `k / (1/resolution)`, so a coarser grid is an exact subset of a finer
    /// one with the same half-width.
    pub fn offsets(&self) -> Result<Vec<f64>> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidConfig("grid resolution must be positive".into()));
        }
        if !(self.half_width >= 0.0 && self.half_width.is_finite()) {
            return Err(Error::InvalidConfig("grid half-width must be finite and non-negative".into()));
        }
        let k_max = (self.half_width / self.resolution + 1e-9).floor() as i64;
        if k_max > 1_000_000 {
            return Err(Error::InvalidConfig("grid has too many points".into()));
        }
        let per_unit = 1.0 / self.resolution;
        let exact = (per_unit - per_unit.round()).abs() < 1e-9 * per_unit;
        Ok((-k_max..=k_max)
            .map(|k| {
                if exact {
                    k as f64 / per_unit.round()
                } else {
                    k as f64 * self.resolution
                }
            })
            .collect())
    }
}

/// Grid of noise vectors: `u = center` except on `dims`, where
/// `u_d = center_d + offset · scale_d`.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub dims: Vec<usize>,
    center: Vec<f64>,
    scales: Vec<f64>,
    offsets: Vec<f64>,
}

impl LatentGrid {
    pub fn new(center: &LatentVector, dims: Vec<usize>, scales: Vec<f64>, spec: &GridSpec) -> Result<Self> {
        if dims.len() != scales.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: scales.len(),
            });
        }
        Ok(Self {
            dims,
            center: center.0.clone(),
            scales,
            offsets: spec.offsets()?,
        })
    }

    /// Grid over the mutable coordinates of an objective.
    pub fn for_objective(obj: &Objective, spec: &GridSpec, max_dims: usize) -> Result<Self> {
        let dims = obj.spec.mutable_indices();
        if dims.len() > max_dims {
            return Err(Error::InvalidConfig(format!(
                "grid search supports at most {max_dims} mutable dimensions, got {}",
                dims.len()
            )));
        }
        let scales = dims.iter().map(|&d| obj.metrics.u_scale(d)).collect();
        Self::new(&obj.u_factual, dims, scales, spec)
    }

    pub fn len(&self) -> usize {
        self.offsets.len().pow(self.dims.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visits every point in lexicographic order of the axis indices, the
    /// first dimension varying slowest.
    pub fn for_each(&self, mut f: impl FnMut(&LatentVector)) {
        let mut u = LatentVector(self.center.clone());
        let mut idx = vec![0usize; self.dims.len()];
        let k = self.offsets.len();
        if k == 0 {
            return;
        }
        loop {
            for (j, &d) in self.dims.iter().enumerate() {
                u.0[d] = self.center[d] + self.offsets[idx[j]] * self.scales[j];
            }
            f(&u);
            let mut axis = self.dims.len();
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < k {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }
}

/// Exhaustive minimiser of the exact weighted objective over the feasible
/// points of a grid in noise space. At most three mutable dimensions.
pub fn grid_oracle(obj: &Objective, terms: TermWeights, grid: &GridSpec) -> Result<(LatentVector, f64)> {
    let lattice = LatentGrid::for_objective(obj, grid, 3)?;
    let mut best: Option<(LatentVector, f64)> = None;
    let mut failure = None;
    lattice.for_each(|u| {
        if failure.is_some() {
            return;
        }
        let step = (|| -> Result<()> {
            let x = obj.spec.reduced_form(u)?;
            if obj.classifier.classify(&x)? != obj.target {
                return Ok(());
            }
            let (d_x, d_u) = obj.distances(&x, u)?;
            let value = terms.combine(d_x, d_u);
            if best.as_ref().is_none_or(|(_, b)| value < *b) {
                best = Some((u.clone(), value));
            }
            Ok(())
        })();
        if let Err(e) = step {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    best.ok_or(Error::EmptyFeasibleSet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::NodeSpec;

    /// Two sources and a classifier `x0 + 2·x1 − 3`; the factual sits at the
    /// origin in class 0.
    fn plane() -> Objective {
        let spec = ScmSpec::new(vec![NodeSpec::source("a", 1.0), NodeSpec::source("b", 1.0)]).unwrap();
        let h = LogisticClassifier::new(vec![1.0, 2.0], -3.0);
        Objective::new(spec, h, FeatureVector::from([0.0, 0.0]), 1).unwrap()
    }

    /// a → b with weight 0.8; the classifier reads only b.
    fn chain() -> Objective {
        let spec = ScmSpec::new(vec![
            NodeSpec::source("a", 1.5),
            NodeSpec::linear("b", vec![0], vec![0.8], 0.2, 1.0),
        ])
        .unwrap();
        let h = LogisticClassifier::new(vec![0.0, 1.0], -2.0);
        Objective::new(spec, h, FeatureVector::from([0.5, 0.6]), 1).unwrap()
    }

    #[test]
    fn huber_prox_is_the_minimiser() {
        for &(v, t, w) in &[(0.3, 0.1, 1.0), (-2.0, 0.5, 0.7), (1e-7, 0.2, 1.0), (0.0, 1.0, 1.0)] {
            let mu = 1e-6;
            let p = huber_prox(v, t, w, mu);
            let f = |z: f64| w * huber(z, mu).0 + (z - v).powi(2) / (2.0 * t);
            for d in [1e-4, 1e-7, -1e-4, -1e-7] {
                assert!(f(p) <= f(p + d) + 1e-15, "v={v} t={t} w={w}");
            }
        }
    }

    #[test]
    fn factual_in_target_is_returned_unchanged() {
        let mut obj = plane();
        obj.target = 0;
        let out = penalty_solve(&obj, &SolverConfig::default()).unwrap();
        assert_eq!(out.x_cf, obj.x_factual);
        assert_eq!((out.d_x, out.d_u), (0.0, 0.0));
        assert!(out.converged);
    }

    #[test]
    fn value_at_factual_is_the_cross_entropy() {
        let mut obj = plane();
        obj.target = 0;
        let cfg = SolverConfig::default().with_lambda(0.7);
        let (v, _) = penalty_objective(&obj, &obj.u_factual, 3.0, &cfg).unwrap();
        let p0 = 1.0 - obj.classifier.class_probability(&obj.x_factual).unwrap();
        assert!((v - 3.0 * -p0.ln()).abs() < 1e-12);
    }

    #[test]
    fn wachter_projects_onto_the_best_axis() {
        // ℓ1 moves only the coordinate with the largest weight: b to 1.5.
        let obj = plane();
        let out = solve_weighted(&obj, TermWeights::wachter(), &SolverConfig::default()).unwrap();
        assert!((out.d_x - 1.5).abs() < 1e-6, "{}", out.d_x);
        assert!(out.x_cf[0].abs() < 1e-5);
        assert_eq!(obj.classifier.classify(&out.x_cf).unwrap(), 1);
    }

    #[test]
    fn dbe_moves_along_the_normal() {
        // Minimum ℓ2 distance to the line a + 2b = 3 is 3/√5.
        let obj = plane();
        let out = solve_weighted(&obj, TermWeights::dbe(), &SolverConfig::default()).unwrap();
        assert!((out.d_u - 3.0 / 5f64.sqrt()).abs() < 1e-6, "{}", out.d_u);
        assert!((out.x_cf[1] - 2.0 * out.x_cf[0]).abs() < 1e-5);
    }

    #[test]
    fn classifier_without_mutable_support_is_infeasible() {
        let spec = ScmSpec::new(vec![
            NodeSpec::source("g", 1.0).frozen(),
            NodeSpec::source("a", 1.0),
        ])
        .unwrap();
        let h = LogisticClassifier::new(vec![1.0, 0.0], -3.0);
        let obj = Objective::new(spec, h, FeatureVector::from([0.0, 0.0]), 1).unwrap();
        assert!(matches!(
            penalty_solve(&obj, &SolverConfig::default()),
            Err(Error::Infeasible { target: 1, .. })
        ));
    }

    #[test]
    fn frozen_feature_is_bit_equal() {
        let spec = ScmSpec::new(vec![
            NodeSpec::source("g", 1.0).frozen().categorical(),
            NodeSpec::linear("a", vec![0], vec![0.3], 1.1, 2.0),
            NodeSpec::linear("b", vec![0, 1], vec![-0.4, 0.5], 0.0, 1.0),
        ])
        .unwrap();
        let h = LogisticClassifier::new(vec![1.0, 0.2, 0.9], -4.0);
        let x = FeatureVector::from([1.0, 1.7, 0.3]);
        let obj = Objective::new(spec.clone(), h, x.clone(), 1).unwrap();
        let out = penalty_solve(&obj, &SolverConfig::default().with_lambda(1.0)).unwrap();
        assert_eq!(out.x_cf[0].to_bits(), x[0].to_bits());
        let back = spec.reduced_form(&out.u_cf).unwrap();
        for i in 0..3 {
            assert!((back[i] - out.x_cf[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn solution_sits_on_the_boundary() {
        let obj = chain();
        let out = penalty_solve(&obj, &SolverConfig::default().with_lambda(0.5)).unwrap();
        let s = obj.classifier.score(&out.x_cf).unwrap();
        assert!(s >= 0.0 && s < 1e-8, "{s}");
    }

    #[test]
    fn intervention_on_the_parent_propagates() {
        let obj = chain();
        // Only a may be set; b follows with slope 0.8. Need b ≥ 2.
        let out = solve_intervention(&obj, &[0], &SolverConfig::default()).unwrap();
        let needed = (2.0 - 0.6) / 0.8;
        assert!((out.x_cf[0] - 0.5 - needed).abs() < 1e-6);
        let a = out.intervention.unwrap();
        assert_eq!(a.indices().collect::<Vec<_>>(), vec![0]);
        let d = needed / 1.5 + 1.4;
        assert!((out.d_x - d).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obj = chain();
        let cfg = SolverConfig::default().with_lambda(0.8);
        let u = LatentVector::from([0.9, -0.3]);
        let (_, g) = penalty_objective(&obj, &u, 4.0, &cfg).unwrap();
        for j in 0..2 {
            let h = 1e-6;
            let mut up = u.clone();
            up.0[j] += h;
            let mut dn = u.clone();
            dn.0[j] -= h;
            let fd = (penalty_objective(&obj, &up, 4.0, &cfg).unwrap().0
                - penalty_objective(&obj, &dn, 4.0, &cfg).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn grid_offsets_nest() {
        let coarse = GridSpec { half_width: 1.0, resolution: 0.1 }.offsets().unwrap();
        let fine = GridSpec { half_width: 1.0, resolution: 0.01 }.offsets().unwrap();
        assert_eq!(coarse.len(), 21);
        assert_eq!(fine.len(), 201);
        for c in coarse {
            assert!(fine.contains(&c), "{c}");
        }
    }

    #[test]
    fn single_point_grid_at_the_factual() {
        let mut obj = plane();
        obj.target = 0;
        let grid = GridSpec { half_width: 0.0, resolution: 0.01 };
        let (u, v) = grid_oracle(&obj, TermWeights::brace(1.0), &grid).unwrap();
        assert_eq!(u, obj.u_factual);
        assert_eq!(v, 0.0);
        obj.target = 1;
        assert!(matches!(
            grid_oracle(&obj, TermWeights::brace(1.0), &grid),
            Err(Error::EmptyFeasibleSet)
        ));
    }

    #[test]
    fn grid_brackets_the_continuous_solution() {
        let obj = plane();
        let cfg = SolverConfig::default().with_lambda(0.5);
        let out = penalty_solve(&obj, &cfg).unwrap();
        let (_, v) = grid_oracle(&obj, TermWeights::brace(0.5), &GridSpec::default()).unwrap();
        assert!(v >= out.objective - 1e-9 && v <= out.objective + 0.02, "{v} vs {}", out.objective);
    }

    #[test]
    fn trace_csv_has_a_header() {
        let out = penalty_solve(&plane(), &SolverConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&out.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,beta,objective,d_x,d_u,constraint_satisfied"));
        assert_eq!(text.lines().count(), out.trace.len() + 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::default();
        cfg.beta_growth = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = SolverConfig::default().with_lambda(-1.0);
        assert!(cfg.validate().is_err());
    }
}
