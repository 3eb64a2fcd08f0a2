#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod voxel;
pub mod graphcut;
pub mod datagen;
pub mod nn;
pub mod fsim;
pub mod classifier;
pub mod igen;
pub mod iseg;
pub mod refine;
pub mod eval;
pub mod export;
