//! Compiles the guide in `book/src` so every listing runs under `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/causal-models.md")]
pub mod causal_models {}
#[doc = include_str!("../../../book/src/distances.md")]
pub mod distances {}
#[doc = include_str!("../../../book/src/methods.md")]
pub mod methods {}
#[doc = include_str!("../../../book/src/tradeoff.md")]
pub mod tradeoff {}
#[doc = include_str!("../../../book/src/backtracking.md")]
pub mod backtracking {}
#[doc = include_str!("../../../book/src/credit-data.md")]
pub mod credit_data {}
#[doc = include_str!("../../../book/src/validation.md")]
pub mod validation {}
