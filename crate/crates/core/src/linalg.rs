//! Dense least squares by Householder QR.
//!
//! Only used for spline coefficient transfer, where systems are at most a
//! few hundred rows by a few dozen columns.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LstsqError {
    #[error("least-squares system is underdetermined: {rows} rows < {cols} columns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("least-squares system is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("matrix has {got} entries, expected {rows}x{cols}")]
    Shape {
        rows: usize,
        cols: usize,
        got: usize,
    },
}

/// Minimises `|A x - b|_2` for row-major `a` of shape `rows x cols`.
///
/// A column whose reflected diagonal falls below `1e-10 * max|R_jj|`
/// is treated as rank deficient.
pub fn lstsq<T: Scalar>(a: &[T], rows: usize, cols: usize, b: &[T]) -> Result<Vec<T>, LstsqError> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(LstsqError::Shape {
            rows,
            cols,
            got: a.len(),
        });
    }
    if rows < cols {
        return Err(LstsqError::Underdetermined { rows, cols });
    }
    let mut r = a.to_vec();
    let mut rhs = b.to_vec();
    let mut diag = vec![T::zero(); cols];

    for j in 0..cols {
        let mut norm = T::zero();
        for i in j..rows {
            norm += r[i * cols + j] * r[i * cols + j];
        }
        let norm = norm.sqrt();
        if norm == T::zero() {
            return Err(LstsqError::RankDeficient { column: j });
        }
        let alpha = if r[j * cols + j] > T::zero() {
            -norm
        } else {
            norm
        };
        // v = x - alpha e_1, stored in place of column j below the diagonal.
        r[j * cols + j] -= alpha;
        let mut vnorm2 = T::zero();
        for i in j..rows {
            vnorm2 += r[i * cols + j] * r[i * cols + j];
        }
        if vnorm2 > T::zero() {
            let two = T::lit(2.0);
            for c in (j + 1)..cols {
                let mut dot = T::zero();
                for i in j..rows {
                    dot += r[i * cols + j] * r[i * cols + c];
                }
                let f = two * dot / vnorm2;
                for i in j..rows {
                    let v = r[i * cols + j];
                    r[i * cols + c] -= f * v;
                }
            }
            let mut dot = T::zero();
            for i in j..rows {
                dot += r[i * cols + j] * rhs[i];
            }
            let f = two * dot / vnorm2;
            for i in j..rows {
                rhs[i] -= f * r[i * cols + j];
            }
        }
        diag[j] = alpha;
    }

    let scale = diag.iter().fold(T::zero(), |m, d| m.max(d.abs()));
    let tol = scale * T::lit(1e-10);
    let mut x = vec![T::zero(); cols];
    for j in (0..cols).rev() {
        if diag[j].abs() <= tol {
            return Err(LstsqError::RankDeficient { column: j });
        }
        let mut s = rhs[j];
        for c in (j + 1)..cols {
            s -= r[j * cols + c] * x[c];
        }
        x[j] = s / diag[j];
    }
    Ok(x)
}
