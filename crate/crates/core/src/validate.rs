//! Self-contained property suites over seeded synthetic instances.
//!
//! Every suite draws its instances from one ChaCha stream derived from the
//! configured seed, so a report is reproducible from `(seed, config)`.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backtrack::BacktrackKernel;
use crate::data::{desk_instance, synth_scm_generate, DeskInstance};
use crate::error::Result;
use crate::methods::{CounterfactualQuery, Explainer, Method, DOMINANCE_TOL};
use crate::scm::{InterventionSet, LatentVector};
use crate::solver::{grid_oracle, penalty_objective, GridSpec, Objective, SolverConfig, TermWeights};

/// Deliberate defects used to check that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Reflects the re-mapped noise through the factual noise.
    SignFlipNoiseMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateConfig {
    pub seed: u64,
    /// Random models for the roundtrip and equivalence suites.
    pub scm_instances: usize,
    /// Convex instances for the reduction and dominance suites.
    pub desk_instances: usize,
    /// Two-dimensional instances for the MAP grid suite.
    pub grid_instances: usize,
    pub grid: GridSpec,
    pub gradient_points: usize,
    pub mutation: Option<Mutation>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scm_instances: 100,
            desk_instances: 20,
            grid_instances: 6,
            grid: GridSpec::default(),
            gradient_points: 50,
            mutation: None,
        }
    }
}

pub const ROUNDTRIP_TOL: f64 = 1e-12;
pub const EQUIVALENCE_TOL: f64 = 1e-9;
pub const LAMBDA_ZERO_TOL: f64 = 1e-4;
pub const LAMBDA_INF_TOL: f64 = 1e-3;
pub const LAMBDA_INF: f64 = 1e6;
pub const GRADIENT_RTOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    /// Largest error seen, in the suite's own units.
    pub worst: f64,
    #[serde(serialize_with = "secs")]
    pub elapsed: Duration,
    /// Descriptions of the first few failures.
    pub failures: Vec<String>,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            failed: 0,
            worst: 0.0,
            elapsed: Duration::ZERO,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.failures.len() < 5 {
                self.failures.push(what());
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0 && self.passed > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::ok)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{:<5} {:<14} {:>4} passed {:>3} failed  worst {:.3e}  {:.2}s",
                if s.ok() { "PASS" } else { "FAIL" },
                s.name,
                s.passed,
                s.failed,
                s.worst,
                s.elapsed.as_secs_f64()
            )?;
            for msg in &s.failures {
                writeln!(f, "      {msg}")?;
            }
        }
        let failed = self.suites.iter().filter(|s| !s.ok()).count();
        write!(f, "{} of {} suites passed", self.suites.len() - failed, self.suites.len())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn timed(name: &'static str, body: impl FnOnce(&mut SuiteReport) -> Result<()>) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut report = SuiteReport::new(name);
    body(&mut report)?;
    report.elapsed = start.elapsed();
    Ok(report)
}

/// A random model, an observation and a non-empty intervention on it.
struct ScmCase {
    spec: crate::scm::ScmSpec,
    u: LatentVector,
    x: crate::scm::FeatureVector,
    action: InterventionSet,
}

fn scm_cases(seed: u64, count: usize) -> Result<Vec<ScmCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=5);
            let density = rng.random_range(0.2..0.9);
            let scm = synth_scm_generate(rng.random(), n, density)?;
            let (u, x) = scm.draw(&mut rng);
            let mut entries = Vec::new();
            while entries.is_empty() {
                for i in 0..n {
                    if rng.random_bool(0.4) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        entries.push((i, x[i] + z * scm.spec.node(i).sigma));
                    }
                }
            }
            Ok(ScmCase {
                spec: scm.spec,
                u,
                x,
                action: InterventionSet::new(entries)?,
            })
        })
        .collect()
}

fn desk_cases(seed: u64, count: usize, sizes: std::ops::RangeInclusive<usize>) -> Result<Vec<DeskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(sizes.clone());
            desk_instance(rng.random(), n, rng.random_range(0.3..0.8))
        })
        .collect()
}

fn explainer(d: &DeskInstance) -> Result<Explainer> {
    Explainer::new(d.spec.clone(), d.classifier.clone())
}

fn query(d: &DeskInstance, method: Method) -> CounterfactualQuery {
    CounterfactualQuery::new(d.x_factual.clone(), d.target, method)
}

/// `F(F⁻¹(x)) = x` and `F⁻¹(F(u)) = u`.
pub fn suite_roundtrip(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("roundtrip", |r| {
        for (k, c) in scm_cases(cfg.seed, cfg.scm_instances)?.iter().enumerate() {
            let e1 = max_abs_diff(&c.spec.reduced_form(&c.spec.abduct(&c.x)?)?, &c.x);
            let e2 = max_abs_diff(&c.spec.abduct(&c.spec.reduced_form(&c.u)?)?, &c.u);
            let err = e1.max(e2);
            r.record(err <= ROUNDTRIP_TOL, err, || format!("instance {k}: error {err:.3e}"));
        }
        Ok(())
    })
}

/// The re-mapped noise reproduces the interventional counterfactual.
pub fn suite_equivalence(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("equivalence", |r| {
        for (k, c) in scm_cases(cfg.seed, cfg.scm_instances)?.iter().enumerate() {
            let mut u = c.spec.icf_noise_map(&c.x, &c.action)?;
            if cfg.mutation == Some(Mutation::SignFlipNoiseMap) {
                let u0 = c.spec.abduct(&c.x)?;
                for (v, base) in u.0.iter_mut().zip(u0.iter()) {
                    *v = base - (*v - base);
                }
            }
            let err = max_abs_diff(&c.spec.reduced_form(&u)?, &c.spec.icf_three_step(&c.x, &c.action)?);
            r.record(err <= EQUIVALENCE_TOL, err, || format!("instance {k}: error {err:.3e}"));
        }
        Ok(())
    })
}

/// BRACE at λ = 0 has the Wachter optimum value.
pub fn suite_lambda_zero(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("lambda-zero", |r| {
        for (k, d) in desk_cases(cfg.seed ^ 1, cfg.desk_instances, 2..=5)?.iter().enumerate() {
            let e = explainer(d)?;
            let w = e.explain_wachter(&query(d, Method::Wachter))?;
            let b = e.explain_brace(&query(d, Method::Brace).with_lambda(0.0))?;
            let err = (w.d_x - b.d_x).abs();
            r.record(err <= LAMBDA_ZERO_TOL, err, || {
                format!("instance {k}: wachter {} brace {}", w.d_x, b.d_x)
            });
        }
        Ok(())
    })
}

/// BRACE at a huge λ has the DBE optimum noise distance.
pub fn suite_lambda_infinity(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("lambda-inf", |r| {
        for (k, d) in desk_cases(cfg.seed ^ 1, cfg.desk_instances, 2..=5)?.iter().enumerate() {
            let e = explainer(d)?;
            let dbe = e.explain_dbe(&query(d, Method::Dbe))?;
            let b = e.explain_brace(&query(d, Method::Brace).with_lambda(LAMBDA_INF))?;
            let err = (dbe.d_u - b.d_u).abs();
            r.record(err <= LAMBDA_INF_TOL, err, || {
                format!("instance {k}: dbe {} brace {}", dbe.d_u, b.d_u)
            });
        }
        Ok(())
    })
}

/// Outcome of the MAP comparison on one two-dimensional instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MapCheck {
    pub lambda: f64,
    /// Grid argmax of the density equals the grid minimiser of the objective.
    pub grid_equal: bool,
    /// Largest per-axis distance, in grid cells, from the continuous solve
    /// to the grid argmax.
    pub cells: f64,
    /// Objective at the grid optimum and at the continuous solve.
    pub grid_value: f64,
    pub solve_value: f64,
    /// Lipschitz bound on the objective change over one cell in every axis.
    pub cell_bound: f64,
}

impl MapCheck {
    /// The continuous value is no worse than the grid's, and the grid's
    /// exceeds it by at most one cell's worth of objective.
    pub fn values_consistent(&self) -> bool {
        let slack = 1e-9 * (1.0 + self.grid_value.abs());
        self.solve_value <= self.grid_value + slack && self.grid_value - self.solve_value <= self.cell_bound + slack
    }
}

/// Compares the density argmax, the objective grid minimiser and the
/// continuous solve on one instance.
pub fn map_check(d: &DeskInstance, lambda: f64, grid: &GridSpec) -> Result<MapCheck> {
    let mut obj = Objective::new(d.spec.clone(), d.classifier.clone(), d.x_factual.clone(), d.target)?;
    // Both searches measure against F(u); pin the factual to it bitwise.
    obj.x_factual = obj.spec.reduced_form(&obj.u_factual)?;
    let (u_min, v) = grid_oracle(&obj, TermWeights::brace(lambda), grid)?;
    let kernel = BacktrackKernel::new(d.spec.clone(), lambda)?;
    let (u_max, lp) = kernel.map_argmax_grid(&obj.u_factual, d.target, &d.classifier, grid)?;
    let solved = explainer(d)?.explain_brace(&query(d, Method::Brace).with_lambda(lambda))?;
    let cells = obj
        .spec
        .mutable_indices()
        .into_iter()
        .map(|i| (solved.u_cf[i] - u_max[i]).abs() / (obj.metrics.u_scale(i) * grid.resolution))
        .fold(0.0, f64::max);
    // Some corner of the cell holding the boundary optimum is feasible, so
    // the grid optimum is within one cell of it in every normalised axis.
    let dims = obj.spec.mutable_indices();
    let jac = obj.spec.reduced_form_jacobian();
    let m = &obj.metrics;
    let lip_x: f64 = (0..obj.spec.len())
        .filter(|&i| m.is_active(i))
        .map(|i| dims.iter().map(|&j| jac[i][j].abs() * m.u_scale(j)).sum::<f64>() / m.x_scale(i))
        .sum();
    let lip_u = lambda * (dims.len() as f64).sqrt();
    Ok(MapCheck {
        lambda,
        grid_equal: u_min == u_max && -lp == v,
        cells,
        grid_value: v,
        solve_value: solved.d_x + lambda * solved.d_u,
        cell_bound: grid.resolution * (lip_x + lip_u),
    })
}

/// λ values cycled through by the MAP suite.
pub const MAP_LAMBDAS: [f64; 3] = [0.5, 1.0, 2.0];

/// Density argmax against the objective grid minimiser, exactly, and
/// against the continuous solve in objective value.
pub fn suite_map_grid(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("map-grid", |r| {
        for (k, d) in desk_cases(cfg.seed ^ 2, cfg.grid_instances, 2..=2)?.iter().enumerate() {
            let lambda = MAP_LAMBDAS[k % MAP_LAMBDAS.len()];
            let m = map_check(d, lambda, &cfg.grid)?;
            let ok = m.grid_equal && m.values_consistent();
            r.record(ok, m.grid_value - m.solve_value, || {
                format!(
                    "instance {k} (λ = {lambda}): grids agree {}, grid value {} solve value {} bound {}",
                    m.grid_equal, m.grid_value, m.solve_value, m.cell_bound
                )
            });
        }
        Ok(())
    })
}

/// BRACE at the matched noise distance is no farther in feature space than
/// the best intervention.
pub fn suite_dominance(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("dominance", |r| {
        for (k, d) in desk_cases(cfg.seed ^ 3, cfg.desk_instances, 2..=5)?.iter().enumerate() {
            let e = explainer(d)?;
            let q = query(d, Method::Brace);
            // The best intervention plus every single-node one: the latter
            // usually sit inside the λ = 0 noise distance.
            let mut reports = vec![("best".to_string(), e.match_alpha(&q)?)];
            for i in d.spec.mutable_indices() {
                if let Ok(car) = e.car_subset(&q, &[i]) {
                    reports.push((format!("node {i}"), e.match_alpha_with(&q, car)?));
                }
            }
            for (label, m) in reports {
                let gap = (m.brace.d_u - m.alpha).abs();
                let ok = m.dominance && gap <= 1e-4 * (1.0 + m.alpha);
                let excess = m.brace.d_x - m.car.d_x;
                r.record(ok, excess.max(0.0), || {
                    format!(
                        "instance {k} ({label}): car d_x {} brace d_x {} (tol {DOMINANCE_TOL}), |d_u - alpha| {gap:.3e}",
                        m.car.d_x, m.brace.d_x
                    )
                });
            }
        }
        Ok(())
    })
}

/// Relative max-norm error of the analytic gradient against central
/// differences at one point.
pub fn gradient_error(obj: &Objective, u: &LatentVector, beta: f64, cfg: &SolverConfig) -> Result<f64> {
    let (_, g) = penalty_objective(obj, u, beta, cfg)?;
    let mut worst: f64 = 0.0;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    for j in 0..u.len() {
        let h = 1e-6 * obj.metrics.u_scale(j).max(1e-3);
        let mut up = u.clone();
        up.0[j] += h;
        let mut dn = u.clone();
        dn.0[j] -= h;
        let fd = (penalty_objective(obj, &up, beta, cfg)?.0 - penalty_objective(obj, &dn, beta, cfg)?.0) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / scale);
    }
    Ok(worst)
}

pub fn suite_gradient(cfg: &ValidateConfig) -> Result<SuiteReport> {
    timed("gradient", |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 4);
        for k in 0..cfg.gradient_points {
            let n = rng.random_range(2..=5);
            let d = desk_instance(rng.random(), n, 0.5)?;
            let obj = Objective::new(d.spec, d.classifier, d.x_factual, d.target)?;
            let u = LatentVector(
                (0..n)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        obj.u_factual[i] + z * obj.metrics.u_scale(i)
                    })
                    .collect(),
            );
            let solver = SolverConfig::default().with_lambda(rng.random_range(0.0..3.0));
            let beta = 10f64.powf(rng.random_range(-1.0..2.0));
            let err = gradient_error(&obj, &u, beta, &solver)?;
            r.record(err < GRADIENT_RTOL, err, || format!("point {k}: relative error {err:.3e}"));
        }
        Ok(())
    })
}

pub fn run_validation(cfg: &ValidateConfig) -> Result<ValidationReport> {
    Ok(ValidationReport {
        seed: cfg.seed,
        suites: vec![
            suite_roundtrip(cfg)?,
            suite_equivalence(cfg)?,
            suite_lambda_zero(cfg)?,
            suite_lambda_infinity(cfg)?,
            suite_map_grid(cfg)?,
            suite_dominance(cfg)?,
            suite_gradient(cfg)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ValidateConfig {
        ValidateConfig {
            scm_instances: 20,
            desk_instances: 3,
            grid_instances: 1,
            grid: GridSpec {
                half_width: 5.0,
                resolution: 0.05,
            },
            gradient_points: 10,
            ..Default::default()
        }
    }

    #[test]
    fn scm_suites_pass() {
        assert!(suite_roundtrip(&small()).unwrap().ok());
        assert!(suite_equivalence(&small()).unwrap().ok());
    }

    #[test]
    fn sign_flip_mutation_is_caught() {
        let cfg = ValidateConfig {
            mutation: Some(Mutation::SignFlipNoiseMap),
            ..small()
        };
        let r = suite_equivalence(&cfg).unwrap();
        assert_eq!(r.passed, 0);
        assert_eq!(r.failed, cfg.scm_instances);
        // Other suites do not consult the mutation.
        assert!(suite_roundtrip(&cfg).unwrap().ok());
    }

    #[test]
    fn gradient_suite_passes() {
        let r = suite_gradient(&small()).unwrap();
        assert!(r.ok(), "{r:?}");
    }

    #[test]
    fn report_renders_one_line_per_suite() {
        let cfg = small();
        let report = ValidationReport {
            seed: 0,
            suites: vec![suite_roundtrip(&cfg).unwrap(), suite_gradient(&cfg).unwrap()],
        };
        let text = report.to_string();
        assert!(text.lines().next().unwrap().starts_with("PASS  roundtrip"));
        assert!(text.ends_with("2 of 2 suites passed"));
    }

    #[test]
    fn an_empty_suite_is_not_a_pass() {
        assert!(!SuiteReport::new("x").ok());
    }
}
