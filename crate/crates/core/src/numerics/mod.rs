//! Deterministic numerical primitives shared by every module.

mod matrix;
mod ops;
mod pca;
mod rng;

pub use matrix::{dot, sq_dist, Matrix};
pub use ops::{
    layer_norm, pairwise_sq_dists, pairwise_sq_dists_with, stable_softmax_rows,
    stable_softmax_rows_with,
};
pub(crate) use ops::softmax_in_place;
pub use pca::{pca_fit, pca_project, PcaModel};
pub use rng::SeededRng;
