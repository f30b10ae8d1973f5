//! Numerical substrate: dense matrices, unit-sphere projection, Adam,
//! seeded randomness and finite-difference gradient checking.

mod adam;
mod gradcheck;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, DEFAULT_STEP};
pub use matrix::{axpy, cosine, dot, norm, normalize_unit, normalize_unit_eps, Matrix, NORM_EPS};
pub use rng::Rng;
