//! Synthetic dataset generators and k-means prototype initialisation.

mod debris;
mod kmeans;
mod synthetic;

pub use debris::{generate_debris, orbital_period, DebrisParams, RegimeParams, MU_EARTH_KM3_S2};
pub use kmeans::{kmeans_init, kmeans_init_with, KMeansFit};
pub use synthetic::{
    generate_blobs, generate_corpus, BlobParams, Corpus, CorpusParams, TokenStream,
    TokenStreamParams,
};

use crate::error::{DdclError, Result};
use crate::numerics::Matrix;

/// Feature matrix with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(x: Matrix, y: Vec<usize>, feature_names: Vec<String>) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(DdclError::DimensionMismatch {
                context: "LabeledDataset labels",
                expected: x.rows(),
                got: y.len(),
            });
        }
        if feature_names.len() != x.cols() {
            return Err(DdclError::DimensionMismatch {
                context: "LabeledDataset feature names",
                expected: x.cols(),
                got: feature_names.len(),
            });
        }
        Ok(Self { x, y, feature_names })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |m| m + 1)
    }
}

/// Standardise every column to zero mean and unit population variance.
/// Constant columns are only centred.
pub fn standardize_columns(x: &mut Matrix) {
    let (n, d) = x.shape();
    if n == 0 {
        return;
    }
    let means = x.column_means();
    let mut vars = vec![0.0; d];
    for r in x.row_iter() {
        for (v, (val, m)) in vars.iter_mut().zip(r.iter().zip(&means)) {
            *v += (val - m) * (val - m);
        }
    }
    let stds: Vec<f64> = vars.iter().map(|v| (v / n as f64).sqrt()).collect();
    for i in 0..n {
        for (j, val) in x.row_mut(i).iter_mut().enumerate() {
            *val -= means[j];
            if stds[j] > 0.0 {
                *val /= stds[j];
            }
        }
    }
}
