use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const RANKME_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankMeOptions {
    pub eps: f64,
    /// Subtract the column means before the SVD.
    pub center: bool,
}

impl Default for RankMeOptions {
    fn default() -> Self {
        Self {
            eps: RANKME_EPS,
            center: true,
        }
    }
}

/// Effective rank of the embeddings: the exponential of the entropy of the
/// normalized singular value spectrum of the centered matrix.
pub fn rankme(features: &Matrix) -> Result<f64> {
    rankme_with(features, RankMeOptions::default())
}

pub fn rankme_with(features: &Matrix, opts: RankMeOptions) -> Result<f64> {
    let (n, d) = features.shape();
    if n < 2 || d == 0 {
        return Err(Error::Degenerate(format!("rankme needs at least 2 rows, got {n}×{d}")));
    }
    if !features.is_finite() {
        return Err(Error::Degenerate("non-finite embeddings".into()));
    }
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", opts.eps)));
    }
    let mut m = DMatrix::from_row_slice(n, d, features.data());
    if opts.center {
        for mut col in m.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    let sigma = m.singular_values();
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all-zero embedding matrix".into()));
    }
    let entropy: f64 = sigma
        .iter()
        .map(|s| {
            let p = s / total + opts.eps;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}
