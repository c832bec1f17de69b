//! Grayscale PGM rendering of node-wise maps.

use diagnet_core::geom::degree_normalize;
use diagnet_core::Matrix;

use crate::error::{CliError, Result};

/// Row sums of the degree-normalized target, one value per node.
pub fn target_map(a_diag: &Matrix) -> Vec<f64> {
    let norm = degree_normalize(a_diag);
    (0..norm.rows()).map(|i| norm.row(i).iter().sum()).collect()
}

/// Euclidean norm of each column of `Ŷ` (`L × N`).
pub fn diag_map(y_hat: &Matrix) -> Vec<f64> {
    let mut sq = vec![0.0; y_hat.cols()];
    for r in 0..y_hat.rows() {
        for (s, v) in sq.iter_mut().zip(y_hat.row(r)) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Linear rescale of `values` onto `0..=255`: the maximum maps to 255 and
/// the minimum (or 0, whichever is lower) to 0. A map with no positive range
/// renders black.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary P5 image of a row-major `side × side` map.
pub fn pgm(values: &[f64], side: usize) -> Result<Vec<u8>> {
    if values.len() != side * side {
        return Err(CliError::Usage(format!(
            "map has {} values, cannot reshape to {side}×{side}",
            values.len()
        )));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(to_gray(values));
    Ok(out)
}
