//! Flexibility aggregation for radial distribution feeders.

// `!(x > 0.0)` is deliberate: NaN has to fail these checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregate;
pub mod coordination;
pub mod error;
pub mod exec;
pub mod export;
pub mod geometry;
pub mod distflow;
pub mod lindistflow;
pub mod loss;
pub mod matpower;
pub mod network;
pub mod numerics;

pub use error::{FlexError, Result};
pub use exec::Execution;
