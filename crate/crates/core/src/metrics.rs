//! Distances in feature space and in noise space.
//!
//! Both sums skip frozen features. `d_X` is a σ-weighted ℓ1 norm, `d_U` a
//! σ-weighted ℓ2 norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::{FeatureMeta, FeatureVector, LatentVector, ScmSpec};

/// Which standard deviation normalises the noise distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentScale {
    /// The feature's own σ, the same scale as `d_X`.
    #[default]
    FeatureSigma,
    /// The σ of the node's noise term.
    NoiseSigma,
}

/// Precomputed scales for both distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    x_scale: Vec<f64>,
    u_scale: Vec<f64>,
    active: Vec<bool>,
}

impl Metrics {
    /// Both distances scaled by the feature σ in `meta`.
    pub fn new(meta: &[FeatureMeta]) -> Self {
        let x_scale: Vec<f64> = meta.iter().map(|m| m.sigma).collect();
        Self {
            u_scale: x_scale.clone(),
            x_scale,
            active: meta.iter().map(|m| m.mutable).collect(),
        }
    }

    pub fn for_spec(spec: &ScmSpec, scale: LatentScale) -> Self {
        let mut m = Self::new(&spec.features());
        if scale == LatentScale::NoiseSigma {
            m.u_scale = spec.nodes().iter().map(|n| n.noise_sigma).collect();
        }
        m
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// False for frozen features, which never enter a distance.
    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn x_scale(&self, i: usize) -> f64 {
        self.x_scale[i]
    }

    pub fn u_scale(&self, i: usize) -> f64 {
        self.u_scale[i]
    }

    fn check(&self, a: usize, b: usize) -> Result<()> {
        for got in [a, b] {
            if got != self.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.len(),
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn d_x(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a.len(), b.len())?;
        Ok((0..self.len())
            .filter(|&i| self.active[i])
            .map(|i| (a[i] - b[i]).abs() / self.x_scale[i])
            .sum())
    }

    pub fn d_u(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a.len(), b.len())?;
        Ok((0..self.len())
            .filter(|&i| self.active[i])
            .map(|i| ((a[i] - b[i]) / self.u_scale[i]).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// `Σ |a_i − b_i| / σ_i` over the non-frozen features.
pub fn distance_x(a: &FeatureVector, b: &FeatureVector, meta: &[FeatureMeta]) -> Result<f64> {
    Metrics::new(meta).d_x(a, b)
}

/// `√(Σ (a_i − b_i)² / σ_i²)` over the non-frozen features.
pub fn distance_u(a: &LatentVector, b: &LatentVector, meta: &[FeatureMeta]) -> Result<f64> {
    Metrics::new(meta).d_u(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::NodeSpec;
    use proptest::prelude::*;

    fn meta(sigmas: &[f64], frozen: &[usize]) -> Vec<FeatureMeta> {
        sigmas
            .iter()
            .enumerate()
            .map(|(index, &sigma)| FeatureMeta {
                name: format!("f{index}"),
                index,
                sigma,
                mutable: !frozen.contains(&index),
                categorical: false,
            })
            .collect()
    }

    #[test]
    fn unit_sigma_hand_sums() {
        let m = meta(&[1.0, 1.0], &[]);
        let d = distance_x(&FeatureVector::from([1.0, 2.0]), &FeatureVector::from([0.0, 4.0]), &m).unwrap();
        assert_eq!(d, 3.0);
        let d = distance_u(&LatentVector::from([3.0, 4.0]), &LatentVector::zeros(2), &m).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn identical_points_are_at_distance_zero() {
        let m = meta(&[2.0, 0.5, 3.0], &[1]);
        let a = FeatureVector::from([1.0, -4.0, 9.0]);
        assert_eq!(distance_x(&a, &a, &m).unwrap(), 0.0);
        assert_eq!(distance_u(&LatentVector(a.0.clone()), &LatentVector(a.0), &m).unwrap(), 0.0);
    }

    #[test]
    fn frozen_features_are_ignored_and_sigma_divides() {
        let m = meta(&[1.0, 2.0, 4.0], &[0]);
        let a = FeatureVector::from([100.0, 2.0, 8.0]);
        let b = FeatureVector::from([0.0, 0.0, 0.0]);
        assert_eq!(distance_x(&a, &b, &m).unwrap(), 3.0);
        let d = distance_u(&LatentVector(a.0), &LatentVector(b.0), &m).unwrap();
        assert!((d - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let m = meta(&[1.0, 1.0], &[]);
        assert!(matches!(
            distance_x(&FeatureVector::from([1.0]), &FeatureVector::from([1.0, 2.0]), &m),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn noise_sigma_scale_reads_the_noise_terms() {
        let spec = ScmSpec::new(vec![
            NodeSpec::source("a", 2.0).with_noise_sigma(4.0),
            NodeSpec::linear("b", vec![0], vec![1.0], 0.0, 1.0).with_noise_sigma(0.5),
        ])
        .unwrap();
        let m = Metrics::for_spec(&spec, LatentScale::NoiseSigma);
        assert_eq!(m.x_scale(0), 2.0);
        assert_eq!(m.u_scale(0), 4.0);
        assert_eq!(m.u_scale(1), 0.5);
        assert_eq!(Metrics::for_spec(&spec, LatentScale::FeatureSigma).u_scale(0), 2.0);
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..6).prop_flat_map(|n| {
            let v = || proptest::collection::vec(-100.0..100.0f64, n);
            (v(), v(), v(), proptest::collection::vec(0.01..10.0f64, n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn d_u_triangle_inequality((a, b, c, s) in triple()) {
            let m = Metrics::new(&meta(&s, &[]));
            let ab = m.d_u(&a, &b).unwrap();
            let bc = m.d_u(&b, &c).unwrap();
            let ac = m.d_u(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ab + bc));
        }

        #[test]
        fn d_x_triangle_and_symmetry((a, b, c, s) in triple()) {
            let m = Metrics::new(&meta(&s, &[]));
            let ab = m.d_x(&a, &b).unwrap();
            prop_assert_eq!(ab, m.d_x(&b, &a).unwrap());
            let ac = m.d_x(&a, &c).unwrap();
            prop_assert!(ac <= ab + m.d_x(&b, &c).unwrap() + 1e-9 * (1.0 + ac));
        }
    }
}
