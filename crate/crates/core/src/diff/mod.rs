//! Differentiable computation substrate: dense matrices, recorded
//! primitives with adjoints, parameters, and gradient verification.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use matrix::{dot, DenseMatrix};
pub use params::{ParamId, ParameterSet};
pub use tape::{CustomAdjoint, Tape, Var};

