//! Joint discrete-token / continuous-frame sequence modeling.
//!
//! A causal transformer reads past frames, `k` parallel heads predict the next
//! `k` semantic tokens, and a conditional flow-matching head generates the
//! continuous frame conditioned on the context and those tokens.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
