//! Small dense helpers for the Kronecker factors. Factor sizes are bounded by
//! layer widths, so plain O(n^3) routines are adequate.

use ndarray::Array2;

use crate::{Error, Result};

/// Lower-triangular `L` with `m = L Lᵀ`.
pub fn cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    let l = cholesky(m)?;
    // Invert L by forward substitution, then m⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = Array2::<f64>::zeros((n, n));
    for c in 0..n {
        linv[[c, c]] = 1.0 / l[[c, c]];
        for i in c + 1..n {
            let mut s = 0.0;
            for k in c..i {
                s -= l[[i, k]] * linv[[k, c]];
            }
            linv[[i, c]] = s / l[[i, i]];
        }
    }
    let inv = linv.t().dot(&linv);
    // Symmetrise away rounding.
    Ok((&inv + &inv.t()) * 0.5)
}

/// Adds `lambda` to the diagonal.
pub fn damped(m: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let mut out = m.clone();
    out.diag_mut().mapv_inplace(|v| v + lambda);
    out
}
