// validation uses negated comparisons so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod pixel;
pub mod plot;
pub mod recorded;
pub mod scurve;
pub mod signal;

pub use error::{Error, Result};
