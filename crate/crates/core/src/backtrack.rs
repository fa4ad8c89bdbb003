//! Unnormalised backtracking density over counterfactual noise and its grid
//! MAP estimate.
//!
//! ```text
//! log p(u_cf | u) = −d_X(F(u), F(u_cf)) − λ·d_U(u, u_cf) + const
//! ```
//!
//! Maximising this over the target region is the same problem as the
//! weighted minimisation in [`crate::solver`], so on a shared grid the two
//! searches visit the same points and must return the same one.

use std::io;

use crate::error::{Error, Result};
use crate::learners::LogisticClassifier;
use crate::metrics::{LatentScale, Metrics};
use crate::scm::{LatentVector, ScmSpec};
use crate::solver::{GridSpec, LatentGrid};

#[derive(Debug, Clone)]
pub struct BacktrackKernel {
    pub spec: ScmSpec,
    pub lambda: f64,
    pub metrics: Metrics,
}

impl BacktrackKernel {
    pub fn new(spec: ScmSpec, lambda: f64) -> Result<Self> {
        Self::with_latent_scale(spec, lambda, LatentScale::FeatureSigma)
    }

    pub fn with_latent_scale(spec: ScmSpec, lambda: f64, scale: LatentScale) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Self {
            metrics: Metrics::for_spec(&spec, scale),
            spec,
            lambda,
        })
    }

    fn check(&self, v: &LatentVector) -> Result<()> {
        if v.len() != self.spec.len() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.len(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Log-density up to its normalising constant; 0 at `u_cf = u`.
    pub fn log_pb_unnormalized(&self, u: &LatentVector, u_cf: &LatentVector) -> Result<f64> {
        self.check(u)?;
        self.check(u_cf)?;
        let x = self.spec.reduced_form(u)?;
        self.log_pb_from(&x, u, u_cf)
    }

    fn log_pb_from(&self, x: &[f64], u: &LatentVector, u_cf: &LatentVector) -> Result<f64> {
        let x_cf = self.spec.reduced_form(u_cf)?;
        let d_x = self.metrics.d_x(x, &x_cf)?;
        let d_u = self.metrics.d_u(u, u_cf)?;
        // Same association as the weighted solver objective, so grid
        // comparisons agree bit for bit.
        let mut v = d_x;
        if self.lambda != 0.0 {
            v += self.lambda * d_u;
        }
        Ok(-v)
    }

    /// Grid over the mutable noise coordinates centred on `u`.
    pub fn grid(&self, u: &LatentVector, grid: &GridSpec) -> Result<LatentGrid> {
        self.check(u)?;
        let dims = self.spec.mutable_indices();
        if dims.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "MAP grid supports at most 2 mutable dimensions, got {}",
                dims.len()
            )));
        }
        let scales = dims.iter().map(|&d| self.metrics.u_scale(d)).collect();
        LatentGrid::new(u, dims, scales, grid)
    }

    /// Maximiser of the log-density over the grid points whose feature
    /// vector lands in `target`. The first maximiser in visiting order wins.
    pub fn map_argmax_grid(
        &self,
        u: &LatentVector,
        target: usize,
        classifier: &LogisticClassifier,
        grid: &GridSpec,
    ) -> Result<(LatentVector, f64)> {
        let x = self.spec.reduced_form(u)?;
        let mut best: Option<(LatentVector, f64)> = None;
        let mut failure = None;
        self.grid(u, grid)?.for_each(|u_cf| {
            if failure.is_some() {
                return;
            }
            let step = (|| -> Result<()> {
                if classifier.classify(&self.spec.reduced_form(u_cf)?)? != target {
                    return Ok(());
                }
                let lp = self.log_pb_from(&x, u, u_cf)?;
                if best.as_ref().is_none_or(|(_, b)| lp > *b) {
                    best = Some((u_cf.clone(), lp));
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

    /// Writes `u1,u2,logp,feasible` for every grid point, `u1`/`u2` being the
    /// first two mutable noise coordinates.
    pub fn write_density_csv<W: io::Write>(
        &self,
        u: &LatentVector,
        target: usize,
        classifier: &LogisticClassifier,
        grid: &GridSpec,
        writer: W,
    ) -> Result<()> {
        let lattice = self.grid(u, grid)?;
        let dims = lattice.dims.clone();
        let x = self.spec.reduced_form(u)?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["u1", "u2", "logp", "feasible"])?;
        let mut failure = None;
        lattice.for_each(|u_cf| {
            if failure.is_some() {
                return;
            }
            let row = (|| -> Result<()> {
                let feasible = classifier.classify(&self.spec.reduced_form(u_cf)?)? == target;
                let lp = self.log_pb_from(&x, u, u_cf)?;
                let coord = |k: usize| dims.get(k).map_or(String::new(), |&d| u_cf[d].to_string());
                w.write_record([coord(0), coord(1), lp.to_string(), feasible.to_string()])?;
                Ok(())
            })();
            if let Err(e) = row {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{FeatureVector, NodeSpec};
    use crate::solver::{grid_oracle, Objective, TermWeights};

    fn spec() -> ScmSpec {
        ScmSpec::new(vec![
            NodeSpec::source("a", 1.5),
            NodeSpec::linear("b", vec![0], vec![0.8], 0.2, 1.0),
        ])
        .unwrap()
    }

    fn coarse() -> GridSpec {
        GridSpec {
            half_width: 4.0,
            resolution: 0.05,
        }
    }

    #[test]
    fn mode_is_the_factual_noise() {
        let k = BacktrackKernel::new(spec(), 0.7).unwrap();
        let u = LatentVector::from([0.3, -0.1]);
        assert_eq!(k.log_pb_unnormalized(&u, &u).unwrap(), 0.0);
        let v = LatentVector::from([0.4, -0.1]);
        assert!(k.log_pb_unnormalized(&u, &v).unwrap() < 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // Δu = (0.3, 0) gives Δx = (0.3, 0.24): d_X = 0.2 + 0.24, d_U = 0.2.
        let k = BacktrackKernel::new(spec(), 2.0).unwrap();
        let u = LatentVector::from([0.0, 0.0]);
        let v = LatentVector::from([0.3, 0.0]);
        let lp = k.log_pb_unnormalized(&u, &v).unwrap();
        assert!((lp + (0.2 + 0.24 + 2.0 * 0.2)).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(BacktrackKernel::new(spec(), -1.0).is_err());
        assert!(BacktrackKernel::new(spec(), f64::NAN).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let k = BacktrackKernel::new(spec(), 1.0).unwrap();
        let u = LatentVector::from([0.0, 0.0]);
        assert!(matches!(
            k.log_pb_unnormalized(&u, &LatentVector::from([0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn factual_in_target_maps_to_itself() {
        let k = BacktrackKernel::new(spec(), 1.0).unwrap();
        let h = LogisticClassifier::new(vec![0.0, 1.0], -2.0);
        let u = LatentVector::from([0.0, 0.0]);
        let (best, lp) = k.map_argmax_grid(&u, 0, &h, &coarse()).unwrap();
        assert_eq!(best, u);
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn unreachable_target_is_an_empty_set() {
        let k = BacktrackKernel::new(spec(), 1.0).unwrap();
        let h = LogisticClassifier::new(vec![0.0, 1.0], -200.0);
        let u = LatentVector::from([0.0, 0.0]);
        assert!(matches!(
            k.map_argmax_grid(&u, 1, &h, &coarse()),
            Err(Error::EmptyFeasibleSet)
        ));
    }

    #[test]
    fn argmax_equals_the_weighted_grid_minimiser() {
        let h = LogisticClassifier::new(vec![0.4, 1.0], -2.0);
        for lambda in [0.0, 0.5, 1.0, 3.0] {
            let mut obj = Objective::new(spec(), h.clone(), FeatureVector::from([0.5, 0.6]), 1).unwrap();
            obj.x_factual = obj.spec.reduced_form(&obj.u_factual).unwrap();
            let (u_min, v) = grid_oracle(&obj, TermWeights::brace(lambda), &coarse()).unwrap();
            let k = BacktrackKernel::new(spec(), lambda).unwrap();
            let (u_max, lp) = k.map_argmax_grid(&obj.u_factual, 1, &h, &coarse()).unwrap();
            assert_eq!(u_min, u_max, "λ = {lambda}");
            assert_eq!(-lp, v);
        }
    }

    #[test]
    fn density_csv_has_one_row_per_point() {
        let k = BacktrackKernel::new(spec(), 1.0).unwrap();
        let h = LogisticClassifier::new(vec![0.0, 1.0], -2.0);
        let g = GridSpec {
            half_width: 1.0,
            resolution: 0.5,
        };
        let mut buf = Vec::new();
        k.write_density_csv(&LatentVector::from([0.0, 0.0]), 1, &h, &g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u1,u2,logp,feasible\n"));
        assert_eq!(text.lines().count(), 1 + 25);
    }
}
