//! Reconstruction-quality metrics.

use crate::error::{Error, Result};
use crate::tensor::TensorGrid;

/// Mean squared error between two equally shaped grids.
pub fn mse(a: &TensorGrid, b: &TensorGrid) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio 10·log10(max_val²/MSE) in decibels.
///
/// Identical inputs (MSE = 0) report `f64::INFINITY`.
pub fn psnr(a: &TensorGrid, b: &TensorGrid, max_val: f64) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / err).log10())
}
