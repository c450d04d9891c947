//! Implicit kernel learning.
//!
//! Shift-invariant kernels are represented through their spectral distribution.
//! Besides fixed closed-form kernels and explicit spectral mixtures, the spectral
//! distribution can be an implicit generative model: a network `h` that maps
//! standard-normal noise to frequencies. Kernels are then evaluated with random
//! Fourier features and learned by ascending a task objective through the sampler:
//!
//! - [`align`]: kernel alignment against labels, followed by a convex random
//!   kitchen sinks classifier ([`rks`]).
//! - [`gantoy`]: an MMD GAN whose base kernel is learned on top of a critic
//!   embedding ([`mmd`] holds the estimators and penalties).

pub mod align;
pub mod data;
pub mod error;
pub mod features;
pub mod gantoy;
pub mod mmd;
pub mod numerics;
pub mod rks;
pub mod spectral;

pub use error::{Error, Result};
