//! Explanation methods behind one interface.
//!
//! | method  | search space                         | objective        |
//! |---------|--------------------------------------|------------------|
//! | wachter | mutable features, no propagation     | `d_X`            |
//! | car     | hard interventions on a subset `A`   | `d_X`            |
//! | dbe     | noise, frozen features held          | `d_U`            |
//! | brace   | noise, frozen features held          | `d_X + λ·d_U`    |
//!
//! Wachter and BRACE at λ = 0 share one parameterisation, so their distance
//! values coincide by construction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::LogisticClassifier;
use crate::metrics::LatentScale;
use crate::scm::{FeatureVector, InterventionSet, LatentVector, ScmSpec};
use crate::solver::{solve_in, Objective, SolveOutput, SolverConfig, Space, TermWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wachter,
    Car,
    Dbe,
    Brace,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Wachter, Method::Car, Method::Dbe, Method::Brace];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wachter => "wachter",
            Method::Car => "car",
            Method::Dbe => "dbe",
            Method::Brace => "brace",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualQuery {
    pub x_factual: FeatureVector,
    pub target: usize,
    pub lambda: f64,
    pub method: Method,
    pub solver: SolverConfig,
}

impl CounterfactualQuery {
    pub fn new(x_factual: impl Into<FeatureVector>, target: usize, method: Method) -> Self {
        Self {
            x_factual: x_factual.into(),
            target,
            lambda: 0.0,
            method,
            solver: SolverConfig::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub method: Method,
    /// Set for BRACE only.
    pub lambda: Option<f64>,
    pub x_factual: FeatureVector,
    pub x_cf: FeatureVector,
    /// For wachter this is the abduced noise, reported for diagnostics.
    pub u_cf: LatentVector,
    pub d_x: f64,
    pub d_u: f64,
    pub converged: bool,
    /// Winning intervention, CAR only.
    pub intervention: Option<InterventionSet>,
    pub iterations: usize,
}

impl CounterfactualResult {
    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Features whose value moved by more than `fraction · σ`.
    pub fn changed_features(&self, spec: &ScmSpec, fraction: f64) -> Vec<usize> {
        (0..spec.len())
            .filter(|&i| (self.x_cf[i] - self.x_factual[i]).abs() > fraction * spec.node(i).sigma)
            .collect()
    }
}

/// Subsets beyond this many mutable features are not enumerated.
pub const CAR_MAX_MUTABLE: usize = 12;

/// Tolerance under which two subsets count as equally cheap.
const CAR_TIE_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct Explainer {
    pub spec: ScmSpec,
    pub classifier: LogisticClassifier,
    pub latent_scale: LatentScale,
}

impl Explainer {
    pub fn new(spec: ScmSpec, classifier: LogisticClassifier) -> Result<Self> {
        if classifier.dim() != spec.len() {
            return Err(Error::DimensionMismatch {
                expected: spec.len(),
                got: classifier.dim(),
            });
        }
        classifier.validate()?;
        Ok(Self {
            spec,
            classifier,
            latent_scale: LatentScale::FeatureSigma,
        })
    }

    pub fn with_latent_scale(mut self, scale: LatentScale) -> Self {
        self.latent_scale = scale;
        self
    }

    pub fn objective(&self, x_factual: &FeatureVector, target: usize) -> Result<Objective> {
        Ok(Objective::new(self.spec.clone(), self.classifier.clone(), x_factual.clone(), target)?
            .with_latent_scale(self.latent_scale))
    }

    fn result(&self, q: &CounterfactualQuery, method: Method, lambda: Option<f64>, out: SolveOutput) -> CounterfactualResult {
        CounterfactualResult {
            method,
            lambda,
            x_factual: q.x_factual.clone(),
            x_cf: out.x_cf,
            u_cf: out.u_cf,
            d_x: out.d_x,
            d_u: out.d_u,
            converged: out.converged,
            intervention: out.intervention,
            iterations: out.iterations,
        }
    }

    pub fn explain(&self, q: &CounterfactualQuery) -> Result<CounterfactualResult> {
        match q.method {
            Method::Wachter => self.explain_wachter(q),
            Method::Car => self.explain_car(q),
            Method::Dbe => self.explain_dbe(q),
            Method::Brace => self.explain_brace(q),
        }
    }

    /// Minimum `d_X` over the mutable features with no causal propagation.
    pub fn explain_wachter(&self, q: &CounterfactualQuery) -> Result<CounterfactualResult> {
        let obj = self.objective(&q.x_factual, q.target)?;
        let out = solve_in(&obj, &Space::mutable(&obj), TermWeights::wachter(), &q.solver)?;
        Ok(self.result(q, Method::Wachter, None, out))
    }

    pub fn explain_brace(&self, q: &CounterfactualQuery) -> Result<CounterfactualResult> {
        let obj = self.objective(&q.x_factual, q.target)?;
        let out = solve_in(&obj, &Space::mutable(&obj), TermWeights::brace(q.lambda), &q.solver)?;
        Ok(self.result(q, Method::Brace, Some(q.lambda), out))
    }

    pub fn explain_dbe(&self, q: &CounterfactualQuery) -> Result<CounterfactualResult> {
        let obj = self.objective(&q.x_factual, q.target)?;
        let out = solve_in(&obj, &Space::mutable(&obj), TermWeights::dbe(), &q.solver)?;
        Ok(self.result(q, Method::Dbe, None, out))
    }

    /// Best hard intervention on one fixed subset of features.
    pub fn car_subset(&self, q: &CounterfactualQuery, subset: &[usize]) -> Result<CounterfactualResult> {
        let obj = self.objective(&q.x_factual, q.target)?;
        if let Some(&i) = subset.iter().find(|&&i| i < self.spec.len() && !self.spec.node(i).mutable) {
            return Err(Error::InvalidConfig(format!(
                "feature {} is frozen and cannot be intervened on",
                self.spec.node(i).name
            )));
        }
        let out = solve_in(&obj, &Space::intervention(&obj, subset)?, TermWeights::wachter(), &q.solver)?;
        let mut r = self.result(q, Method::Car, None, out);
        // The reported noise is the re-mapped noise of the intervention.
        if let Some(a) = &r.intervention {
            r.u_cf = self.spec.icf_noise_map(&q.x_factual, a)?;
        }
        Ok(r)
    }

    /// Enumerates every subset of mutable features by size, then
    /// lexicographically, keeping the first strictly cheaper feasible one.
    pub fn explain_car(&self, q: &CounterfactualQuery) -> Result<CounterfactualResult> {
        let mutable = self.spec.mutable_indices();
        if mutable.len() > CAR_MAX_MUTABLE {
            return Err(Error::SubsetBudgetExceeded {
                n_mutable: mutable.len(),
                max: CAR_MAX_MUTABLE,
            });
        }
        let mut best: Option<CounterfactualResult> = None;
        let mut iterations = 0;
        for subset in subsets_by_size(&mutable) {
            match self.car_subset(q, &subset) {
                Ok(r) => {
                    iterations += r.iterations;
                    let better = best
                        .as_ref()
                        .is_none_or(|b| r.d_x < b.d_x - CAR_TIE_TOL * (1.0 + b.d_x));
                    if better {
                        best = Some(r);
                    }
                }
                Err(Error::Infeasible { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let mut best = best.ok_or_else(|| Error::Infeasible {
            target: q.target,
            reason: "no intervention subset reaches the target class".into(),
        })?;
        best.iterations = iterations;
        Ok(best)
    }

    /// One BRACE solve per λ. Infeasible points are recorded and skipped;
    /// monotonicity violations are flagged on the later point.
    pub fn lambda_sweep(&self, q: &CounterfactualQuery, lambdas: &[f64]) -> Result<Sweep> {
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig("lambdas must be finite and non-negative".into()));
        }
        if lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("lambdas must be strictly increasing".into()));
        }
        let mut sweep = Sweep::default();
        for &lambda in lambdas {
            match self.explain_brace(&q.clone().with_lambda(lambda)) {
                Ok(r) => sweep.points.push(ParetoPoint {
                    lambda,
                    d_x: r.d_x,
                    d_u: r.d_u,
                    x_cf: r.x_cf,
                    violation: false,
                }),
                Err(Error::Infeasible { reason, .. }) => sweep.failures.push((lambda, reason)),
                Err(e) => return Err(e),
            }
        }
        for k in 1..sweep.points.len() {
            let (prev, cur) = (&sweep.points[k - 1], &sweep.points[k]);
            let bad = cur.d_x < prev.d_x - PARETO_TOL || cur.d_u > prev.d_u + PARETO_TOL;
            sweep.points[k].violation = bad;
        }
        Ok(sweep)
    }

    /// Compares CAR with BRACE at the λ whose noise distance matches CAR's.
    pub fn match_alpha(&self, q: &CounterfactualQuery) -> Result<MatchReport> {
        self.match_alpha_with(q, self.explain_car(q)?)
    }

    /// As [`Explainer::match_alpha`], against a given intervention result
    /// such as the best intervention on one fixed subset.
    pub fn match_alpha_with(&self, q: &CounterfactualQuery, car: CounterfactualResult) -> Result<MatchReport> {
        let alpha = car.d_u;
        let tol = 1e-4 * (1.0 + alpha);
        let tight = 1e-9 * (1.0 + alpha);
        let mut evaluations = 0usize;
        let mut brace_at = |lambda: f64| {
            evaluations += 1;
            self.explain_brace(&q.clone().with_lambda(lambda))
        };

        let finish = |brace: CounterfactualResult, lambda_star: Option<f64>, fallback: Option<MatchFallback>, evaluations: usize| {
            let dominance = brace.d_x <= car.d_x + DOMINANCE_TOL;
            MatchReport {
                alpha,
                lambda_star,
                dominance,
                bracket_failure: fallback.is_some(),
                fallback,
                evaluations,
                brace,
                car: car.clone(),
            }
        };

        let r0 = brace_at(0.0)?;
        let f0 = r0.d_u - alpha;
        if f0.abs() <= tol {
            return Ok(finish(r0, Some(0.0), None, evaluations));
        }
        if f0 < 0.0 {
            // d_u(λ) ≤ d_u(0) < α for every λ, so no λ attains α. Search the
            // constraint set directly along the arc of the d_U = α sphere
            // joining the CAR point to the radial image of the λ = 0 point.
            let brace = self.arc_search(q, &car, &r0)?;
            return Ok(finish(brace, None, Some(MatchFallback::ConstraintArc), evaluations));
        }

        let (mut lo, mut r_lo) = (0.0, r0);
        let mut hi = 1.0;
        let mut r_hi = brace_at(hi)?;
        while r_hi.d_u - alpha > tol {
            if hi > 1e12 {
                return Ok(finish(r_hi, Some(hi), Some(MatchFallback::Unbounded), evaluations));
            }
            lo = hi;
            r_lo = r_hi;
            hi *= 2.0;
            r_hi = brace_at(hi)?;
        }
        if (r_hi.d_u - alpha).abs() <= tight {
            return Ok(finish(r_hi, Some(hi), None, evaluations));
        }
        for _ in 0..200 {
            if hi - lo <= 1e-13 * hi.max(1e-300) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let r = brace_at(mid)?;
            let f = r.d_u - alpha;
            if f.abs() <= tight {
                return Ok(finish(r, Some(mid), None, evaluations));
            }
            if f > 0.0 {
                lo = mid;
                r_lo = r;
            } else {
                hi = mid;
                r_hi = r;
            }
        }
        let (f_lo, f_hi) = (r_lo.d_u - alpha, r_hi.d_u - alpha);
        if f_lo.abs().min(f_hi.abs()) <= tol {
            let pick = if f_lo.abs() <= f_hi.abs() { (lo, r_lo) } else { (hi, r_hi) };
            return Ok(finish(pick.1, Some(pick.0), None, evaluations));
        }
        // d_u jumps across the bracket: both ends minimise the same scalarised
        // problem, and so does every convex combination of them.
        let obj = self.objective(&q.x_factual, q.target)?;
        let mix = |theta: f64| -> Result<(LatentVector, FeatureVector, f64)> {
            let u = LatentVector(
                r_lo.u_cf
                    .iter()
                    .zip(r_hi.u_cf.iter())
                    .map(|(a, b)| theta * a + (1.0 - theta) * b)
                    .collect(),
            );
            let mut x = self.spec.reduced_form(&u)?;
            for &i in &obj.frozen {
                x.0[i] = q.x_factual[i];
            }
            let d_u = obj.metrics.d_u(&obj.u_factual, &u)?;
            Ok((u, x, d_u))
        };
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mix(mid)?.2 > alpha {
                b = mid;
            } else {
                a = mid;
            }
        }
        let (u, x, d_u) = mix(0.5 * (a + b))?;
        let feasible = self.classifier.classify(&x)? == q.target;
        let mut brace = if feasible { r_hi.clone() } else { r_lo.clone() };
        if feasible {
            brace.d_x = obj.metrics.d_x(&q.x_factual, &x)?;
            brace.d_u = d_u;
            brace.x_cf = x;
            brace.u_cf = u;
        }
        Ok(finish(brace, None, Some(MatchFallback::Interpolated), evaluations))
    }

    /// Feasible point of least `d_X` on the arc of `{d_U = α}` from the CAR
    /// noise to the radial projection of `inner`, which has `d_U < α`. The
    /// CAR end is always a candidate, so the result never loses to it.
    fn arc_search(
        &self,
        q: &CounterfactualQuery,
        car: &CounterfactualResult,
        inner: &CounterfactualResult,
    ) -> Result<CounterfactualResult> {
        const STEPS: usize = 2000;
        let obj = self.objective(&q.x_factual, q.target)?;
        let u0 = &obj.u_factual;
        let alpha = car.d_u;
        let offset = |u: &LatentVector| -> Vec<f64> { u.iter().zip(u0.iter()).map(|(a, b)| a - b).collect() };
        let zero = vec![0.0; u0.len()];
        let radius = |v: &[f64]| obj.metrics.d_u(&zero, v);
        let c = offset(&car.u_cf);
        let mut a = offset(&inner.u_cf);
        let ra = radius(&a)?;
        if ra > 0.0 {
            a.iter_mut().for_each(|v| *v *= alpha / ra);
        }
        let mut best = car.clone();
        best.method = Method::Brace;
        best.intervention = None;
        best.lambda = None;
        for k in 1..=STEPS {
            let theta = k as f64 / STEPS as f64;
            let mut v: Vec<f64> = c.iter().zip(&a).map(|(ci, ai)| (1.0 - theta) * ci + theta * ai).collect();
            let r = radius(&v)?;
            if r == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x *= alpha / r);
            let u = LatentVector(u0.iter().zip(&v).map(|(b, d)| b + d).collect());
            let x = self.spec.reduced_form(&u)?;
            if obj.frozen.iter().any(|&i| x[i] != q.x_factual[i]) || self.classifier.classify(&x)? != q.target {
                continue;
            }
            let (d_x, d_u) = obj.distances(&x, &u)?;
            if d_x < best.d_x {
                best.d_x = d_x;
                best.d_u = d_u;
                best.x_cf = x;
                best.u_cf = u;
            }
        }
        Ok(best)
    }
}

/// Slack allowed before a sweep point counts as non-monotone.
pub const PARETO_TOL: f64 = 1e-6;

/// Slack in the dominance comparison `brace.d_x ≤ car.d_x`.
pub const DOMINANCE_TOL: f64 = 1e-6;

fn subsets_by_size(items: &[usize]) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut all: Vec<Vec<usize>> = (1u32..(1u32 << n))
        .map(|mask| (0..n).filter(|k| mask >> k & 1 == 1).map(|k| items[k]).collect())
        .collect();
    all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub d_x: f64,
    pub d_u: f64,
    pub x_cf: FeatureVector,
    /// Set when this point breaks monotonicity against its predecessor.
    pub violation: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sweep {
    pub points: Vec<ParetoPoint>,
    /// λ values with no feasible solution and the reason.
    pub failures: Vec<(f64, String)>,
}

impl Sweep {
    pub fn violations(&self) -> usize {
        self.points.iter().filter(|p| p.violation).count()
    }
}

#[derive(Debug, Clone)]
pub struct MatchReport {
    /// Noise distance of the CAR solution.
    pub alpha: f64,
    pub car: CounterfactualResult,
    pub brace: CounterfactualResult,
    /// `None` when no λ attains α and the point came from a fallback.
    pub lambda_star: Option<f64>,
    pub dominance: bool,
    /// Set when bisection could not hit α and a fallback was used.
    pub bracket_failure: bool,
    pub fallback: Option<MatchFallback>,
    pub evaluations: usize,
}

/// How `match_alpha` produced its point when bisection on λ could not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchFallback {
    /// The λ = 0 point is already inside the α sphere; the sphere was
    /// searched directly.
    ConstraintArc,
    /// `d_u` jumps across the final bracket; its two ends were interpolated.
    Interpolated,
    /// `d_u` stayed above α for every λ tried.
    Unbounded,
}

/// One perturbed-mechanism re-solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTrial {
    pub trial: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub result: Option<CounterfactualResult>,
    /// Set when the perturbed problem had no solution.
    pub error: Option<String>,
}

/// Re-solves `q` under `trials` independent Gaussian perturbations of the
/// weights and intercept of `node`'s mechanism. Each trial draws its noise
/// in order (weights, then intercept) from one ChaCha stream seeded by `seed`.
pub fn sensitivity_trials(
    explainer: &Explainer,
    q: &CounterfactualQuery,
    node: usize,
    noise_sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<SensitivityTrial>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    if node >= explainer.spec.len() {
        return Err(Error::IndexOutOfRange {
            index: node,
            n: explainer.spec.len(),
        });
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let bad_sigma = || Error::InvalidConfig(format!("noise sigma must be finite and non-negative, got {noise_sigma}"));
    if !(noise_sigma >= 0.0) {
        return Err(bad_sigma());
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|_| bad_sigma())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = explainer.spec.node(node).clone();
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let weights: Vec<f64> = base.weights.iter().map(|w| w + noise.sample(&mut rng)).collect();
        let intercept = base.intercept + noise.sample(&mut rng);
        let perturbed = Explainer {
            spec: explainer.spec.with_mechanism(node, weights.clone(), intercept)?,
            ..explainer.clone()
        };
        let (result, error) = match perturbed.explain(q) {
            Ok(r) => (Some(r), None),
            Err(e @ Error::Infeasible { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        out.push(SensitivityTrial {
            trial,
            weights,
            intercept,
            result,
            error,
        });
    }
    Ok(out)
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Aligned text table, one row per labelled point. `fmt` renders feature
/// `i` of a row; `extra` appends named columns.
pub fn render_table(
    headers: &[String],
    rows: &[(String, Vec<String>)],
) -> String {
    let mut widths: Vec<usize> = std::iter::once(rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0))
        .chain(headers.iter().map(|h| h.chars().count()))
        .collect();
    widths[0] = widths[0].max("method".len());
    for (_, cells) in rows {
        for (k, c) in cells.iter().enumerate() {
            widths[k + 1] = widths[k + 1].max(c.chars().count());
        }
    }
    let line = |label: &str, cells: &[String]| {
        let mut s = format!("{label:<w$}", w = widths[0]);
        for (k, c) in cells.iter().enumerate() {
            s.push_str(&format!("  {c:>w$}", w = widths[k + 1]));
        }
        s.push('\n');
        s
    };
    let mut out = line("method", headers);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * headers.len()));
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&line(label, cells));
    }
    out
}
