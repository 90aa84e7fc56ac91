//! Reference ridge regression, solved independently of [`crate::dsi`].
//!
//! Forms the normal equations `(XᵀX + λI) W = XᵀY` explicitly and eliminates
//! with partial pivoting. Slower and less careful than the Cholesky route;
//! intended for cross-checking it.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Ridge weights for rows `X` (`n × D`) and targets `Y` (`n × C`).
pub fn ridge_oracle(x: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    let (n, d) = (x.rows(), x.cols());
    let c = y.cols();
    if n == 0 {
        return Err(Error::Empty("ridge oracle rows"));
    }
    if y.rows() != n {
        return Err(Error::dim(n, y.rows(), "ridge oracle targets"));
    }
    // Augmented system [A | B] with A = XᵀX + λI, B = XᵀY.
    let width = d + c;
    let mut m = vec![0.0; d * width];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..n {
                s += x[(r, i)] * x[(r, j)];
            }
            m[i * width + j] = s;
        }
        m[i * width + i] += lambda;
        for k in 0..c {
            let mut s = 0.0;
            for r in 0..n {
                s += x[(r, i)] * y[(r, k)];
            }
            m[i * width + d + k] = s;
        }
    }

    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&a, &b| m[a * width + col].abs().total_cmp(&m[b * width + col].abs()))
            .unwrap();
        let p = m[pivot * width + col];
        if !(p.abs() > 0.0) || !p.is_finite() {
            return Err(Error::Numeric(format!("singular normal equations at column {col}")));
        }
        if pivot != col {
            for j in 0..width {
                m.swap(pivot * width + j, col * width + j);
            }
        }
        for row in (col + 1)..d {
            let factor = m[row * width + col] / p;
            if factor == 0.0 {
                continue;
            }
            for j in col..width {
                m[row * width + j] -= factor * m[col * width + j];
            }
        }
    }

    let mut w = Matrix::zeros(d, c);
    for k in 0..c {
        for i in (0..d).rev() {
            let mut s = m[i * width + d + k];
            for j in (i + 1)..d {
                s -= m[i * width + j] * w[(j, k)];
            }
            w[(i, k)] = s / m[i * width + i];
        }
    }
    Ok(w)
}
