//! Dense arrays, a reverse-mode tape over a fixed operator set, seeded
//! random streams, and a finite-difference gradient harness.

mod array;
pub mod gradcheck;
mod params;
pub mod rng;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::{seeded_normal, stream};
pub use tape::{
    sigmoid, softplus, swish, AttentionLayout, Gradients, RowMixPlan, Tape, Unary, Var,
};
pub(crate) use tape::crps_cell;

#[cfg(test)]
mod tests;
