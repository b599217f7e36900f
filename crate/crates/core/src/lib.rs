#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod losses;
pub mod pipeline;
pub mod qsur;
pub mod quantizer;
pub mod stiefel;
pub mod tensor_core;
pub mod toy_model;
pub mod transforms;

pub use error::{ErrorClass, OstError, Result};
pub use tensor_core::{Rng, Tensor};
