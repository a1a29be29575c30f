//! Product-of-orthogonal-spheres latent models.
//!
//! A latent code is split into `k` equal blocks of dimension `d`, stacked as
//! the columns of a `d × k` matrix `Z`. Training pushes `Z` toward the
//! Stiefel manifold (`ZᵀZ = I`) with a soft penalty and a Cayley retraction,
//! so that each block lives on its own unit sphere, orthogonal to the others.
//!
//! Modules, bottom-up: [`linalg`] (dense matrices), [`manifold`] (penalty,
//! Cayley step and its derivative), [`nn`] (MLPs, Adam), [`data`]
//! (synthetic and IDX datasets), [`disentangle`] (models, losses, training,
//! checkpoints) and [`eval`] (probes, leakage, interpolation, grids).

pub mod codec;
pub mod data;
pub mod disentangle;
pub mod eval;
pub mod kv;
pub mod linalg;
pub mod manifold;
pub mod nn;

pub use linalg::Matrix;
pub use manifold::{CayleyConfig, LatentBlocks};
