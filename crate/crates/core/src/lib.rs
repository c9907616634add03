//! Domain generalization by learning to remove domain-specific features.
//!
//! Stage one trains one classifier per source domain that is accurate on its
//! own domain and maximally uncertain on the others; those classifiers are
//! frozen. Stage two trains an encoder-decoder and a classifier on its output
//! so that the frozen classifiers become uncertain on mapped images while the
//! class stays recoverable. The `divergence` module measures the effect with
//! proxy A-distances between domains and mixtures of domains.

pub mod data;
pub mod divergence;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod nets;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
