//! Conformal retrofitting of word embeddings onto Riemannian manifolds.

pub mod baselines;
pub mod data;
pub mod diff;
pub mod error;
pub mod fixtures;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod manifolds;
pub mod neighbors;
pub mod optim;
pub mod spd;
pub mod train;

pub use error::{Error, Result};
pub use manifolds::{Manifold, ManifoldPoint, TangentVector};
pub use spd::SpdMatrix;
