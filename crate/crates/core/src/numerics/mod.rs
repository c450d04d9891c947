//! Dense linear algebra, seeded randomness, MLPs with explicit backpropagation,
//! Adam, and a finite-difference gradient oracle.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;
mod prng;

pub use adam::AdamState;
pub use gradcheck::{check_gradient, check_gradient_norm, numeric_gradient};
pub use matrix::{dot, sq_dist, DenseMatrix};
pub use mlp::{Activation, ForwardCache, Layer, Mlp};
pub use prng::Prng;
