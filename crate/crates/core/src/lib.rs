//! Differentiable architecture search over networks of symmetric positive
//! definite matrices: Riemannian layers, a reverse-mode tape with spectral
//! gradients, weighted Fréchet mixtures on cell edges, and a bi-level
//! optimizer with Stiefel-constrained weights.
//!
//! The numerical core is generic over [`Real`]; the aliases below fix it to
//! `f64`, which is what the networks and the command-line tool use.

pub mod bilevel;
pub mod cli;
pub mod data;
pub mod error;
pub mod frechet;
pub mod gradsuite;
pub mod layers;
pub mod linalg;
pub mod manifold;
pub mod rng;
pub mod scalar;
pub mod search_space;
pub mod simplex;
pub mod tape;
#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::Mat<f64>;
pub type Spd = manifold::SpdMatrix<f64>;
pub type Sym = manifold::SymMatrix<f64>;
pub type Stiefel = layers::StiefelParam<f64>;
pub type Weights = frechet::WeightVector<f64>;
pub type GradTape = tape::Tape<f64>;
