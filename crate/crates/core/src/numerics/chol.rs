//! Inverse of a small symmetric positive-definite matrix via Cholesky.

use crate::error::{Error, Result};

/// Inverse of the row-major `p x p` symmetric positive-definite matrix `a`.
pub fn invert_spd(a: &[f64], p: usize) -> Result<Vec<f64>> {
    if a.len() != p * p {
        return Err(Error::Dimension(format!(
            "expected {} entries, got {}",
            p * p,
            a.len()
        )));
    }
    // Lower factor L with a = L L^T.
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let s = a[i * p + j] - (0..j).map(|k| l[i * p + k] * l[j * p + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::InvalidArgument(
                        "matrix is not positive definite".into(),
                    ));
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    // Solve L L^T x = e_c column by column.
    let mut inv = vec![0.0; p * p];
    for c in 0..p {
        let mut y = vec![0.0; p];
        for i in 0..p {
            let rhs = if i == c { 1.0 } else { 0.0 };
            y[i] = (rhs - (0..i).map(|k| l[i * p + k] * y[k]).sum::<f64>()) / l[i * p + i];
        }
        for i in (0..p).rev() {
            let x = (y[i]
                - (i + 1..p)
                    .map(|k| l[k * p + i] * inv[k * p + c])
                    .sum::<f64>())
                / l[i * p + i];
            inv[i * p + c] = x;
        }
    }
    Ok(inv)
}
