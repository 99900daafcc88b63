//! A solvable linear model of epochwise double descent.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectra`]: Gaussian data, spectral decompositions, pseudoinverse fits and
//!   the Marchenko–Pastur law.
//! - [`dynamics`]: full-batch gradient descent for MSE and (linearized) softmax
//!   cross-entropy, with closed-form trajectories.
//! - [`noise`]: eigen-thresholded, uniform and permutation label-noise models.
//! - [`theory`]: expected test loss by quadrature over the MP spectrum, loss-curve
//!   phase classification and phase diagrams.
//! - [`empirics`]: finite-size Monte Carlo runs and the two interventions that
//!   remove double descent (PCA filtering, converged last layer).
//! - [`matrix_io`]: the on-disk matrix container shared by every tool.
//!
//! All matrices are `ndarray::Array2<f64>`. Weights are `C×F` (classes by
//! features), data is `F×N` (features by samples).

pub mod dynamics;
pub mod empirics;
pub mod error;
pub mod matrix_io;
pub mod noise;
pub mod quadrature;
pub mod rng;
pub mod spectra;
pub mod theory;

pub use error::{Error, Result};
