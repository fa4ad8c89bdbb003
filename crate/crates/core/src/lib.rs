//! Counterfactual explanations for classifiers over linear structural causal
//! models.
//!
//! The crate is organised bottom up:
//!
//! * [`scm`]: models, abduction, interventions, interventional counterfactuals.
//! * [`learners`]: least-squares mechanisms and the logistic classifier.
//! * [`metrics`] and [`solver`]: distances, the penalised objective, the
//!   solver and brute-force grid oracles.
//! * [`methods`]: the four explanation methods, λ sweeps and matched-α
//!   comparisons.
//! * [`backtrack`]: the backtracking log-density and its grid MAP.
//! * [`data`] and [`bundle`]: German Credit ingestion, synthetic instances
//!   and the serialised model bundle.
//! * [`validate`]: the self-check suites behind `recourse-kit validate`.
//!
//! ```
//! use recourse_kit::scm::{FeatureVector, InterventionSet, NodeSpec, ScmSpec};
//!
//! let spec = ScmSpec::new(vec![
//!     NodeSpec::source("x1", 1.0),
//!     NodeSpec::linear("x2", vec![0], vec![2.0], 0.0, 1.0),
//! ])?;
//! let x = FeatureVector::from([1.0, 2.5]);
//! let a = InterventionSet::new([(0, 3.0)])?;
//! let icf = spec.icf_three_step(&x, &a)?;
//! assert_eq!(icf.0, vec![3.0, 6.5]);
//! // The same point is reached by changing the noise alone.
//! let u = spec.icf_noise_map(&x, &a)?;
//! assert_eq!(spec.reduced_form(&u)?, icf);
//! # Ok::<(), recourse_kit::Error>(())
//! ```

pub mod backtrack;
pub mod bundle;
pub mod data;
pub mod error;
pub mod json;
pub mod learners;
pub mod methods;
pub mod metrics;
pub mod scm;
pub mod solver;
pub mod validate;

pub use error::{Error, Result};
