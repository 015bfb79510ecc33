//! Adaptive pay and quality control for crowdsourced binary labeling.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod belief;
pub mod em;
pub mod error;
pub mod experiments;
pub mod frontier;
pub mod pricing;
pub mod quality;
pub mod reconstruct;
pub mod selector;
pub mod sim;
pub mod trace;
pub mod worker;

pub use belief::BeliefState;
pub use error::{Error, Result};
