// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coupled;
pub mod error;
pub mod flex;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
