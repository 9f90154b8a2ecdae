//! Spoken dialect identification for two closely related dialects.
//!
//! The crate contains the whole pipeline: corpus handling and a synthetic
//! two-dialect corpus generator ([`corpus`]), the 39-dimensional MFCC
//! front-end ([`featext`]), diagonal Gaussian mixtures ([`gmm`]), phone HMMs
//! with embedded Viterbi training ([`hmm`]), token-passing decoding over
//! phone and word graphs ([`decode`]), a one-dimensional CNN ([`cnn`]) and
//! the six identification systems with evaluation ([`did`]).
//!
//! Dialects are labelled [`DialectLabel::Lt`] (literary) and
//! [`DialectLabel::Ct`] (colloquial). Every decision rule breaks ties towards
//! `Lt`.

pub mod cli;
pub mod cnn;
pub mod corpus;
pub mod decode;
pub mod did;
pub mod error;
pub mod featext;
pub mod gmm;
pub mod hmm;
pub mod pipeline;

pub use corpus::{DialectLabel, DialectPair, Membership};
pub use error::{Error, Result};
pub use featext::{FeatureMatrix, FrameView};

/// Toolkit version recorded in every run's reproducibility block.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
