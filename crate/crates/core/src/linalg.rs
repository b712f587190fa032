//! Dense symmetric linear algebra: Cholesky log-determinants, a cyclic Jacobi
//! eigensolver and Gram products.
//!
//! Everything here is a pure function of its inputs, so node workers may call
//! these kernels concurrently.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cholesky pivots at or below this value are treated as rank collapse.
pub const PIVOT_FLOOR: f64 = 1e-14;
/// Symmetry tolerance enforced by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Square symmetric matrix with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(Array2<f64>);

impl SymMatrix {
    /// Validates squareness, finiteness and symmetry (within [`SYMMETRY_TOL`]).
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (rows, cols) = entries.dim();
        if rows != cols || rows == 0 {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square and non-empty, got {rows}x{cols}"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for i in 0..rows {
            for j in (i + 1)..cols {
                let gap = (entries[[i, j]] - entries[[j, i]]).abs();
                if gap > SYMMETRY_TOL {
                    return Err(Error::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(SymMatrix(entries))
    }

    /// Builds `(a + aᵀ) / 2`, which is exactly symmetric.
    pub fn symmetrized(mut a: Array2<f64>) -> Self {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "symmetrized: matrix must be square");
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (a[[i, j]] + a[[j, i]]);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        SymMatrix(a)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(Array2::zeros((dim, dim)))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(Array2::eye(dim))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        SymMatrix(Array2::from_diag(&Array1::from(diag.to_vec())))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diag().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `tr(selfᵀ · other)`.
    pub fn inner(&self, other: &SymMatrix) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix(&self.0 * factor)
    }

    pub fn neg(&self) -> SymMatrix {
        SymMatrix(-&self.0)
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, factor: f64, other: &SymMatrix) {
        self.0.scaled_add(factor, &other.0);
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues in non-increasing order, with optional eigenvectors as columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Option<Array2<f64>>,
}

impl Spectrum {
    /// Singular values of a matrix whose Gram spectrum this is.
    pub fn sqrt_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut pivot = a[[j, j]];
        for k in 0..j {
            pivot -= l[[j, k]] * l[[j, k]];
        }
        if !(pivot > PIVOT_FLOOR) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

fn logdet_from_factor(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Inverse of `L Lᵀ` given its lower Cholesky factor.
fn inverse_from_factor(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // Invert L by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = Array2::<f64>::zeros((n, n));
    for col in 0..n {
        linv[[col, col]] = 1.0 / l[[col, col]];
        for i in (col + 1)..n {
            let mut s = 0.0;
            for k in col..i {
                s -= l[[i, k]] * linv[[k, col]];
            }
            linv[[i, col]] = s / l[[i, i]];
        }
    }
    let inv = linv.t().dot(&linv);
    SymMatrix::symmetrized(inv).into_array()
}

/// Natural-log determinant of `shift·I + m`.
pub fn logdet_psd(m: &SymMatrix, shift: f64) -> Result<f64> {
    let a = shifted(m.as_array(), shift);
    let l = cholesky(a.view())?;
    Ok(logdet_from_factor(&l))
}

/// `log det(a)` and `a⁻¹` from a single factorization of an SPD matrix.
pub fn logdet_and_inverse(a: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let l = cholesky(a)?;
    Ok((logdet_from_factor(&l), inverse_from_factor(&l)))
}

pub fn spd_inverse(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    Ok(inverse_from_factor(&l))
}

fn shifted(m: &Array2<f64>, shift: f64) -> Array2<f64> {
    let mut a = m.clone();
    a.diag_mut().iter_mut().for_each(|v| *v += shift);
    a
}

/// `Z·Zᵀ / scale`, symmetrized.
pub fn gram(z: ArrayView2<'_, f64>, scale: f64) -> SymMatrix {
    let g = z.dot(&z.t()) / scale;
    SymMatrix::symmetrized(g)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Stops once the off-diagonal Frobenius norm of the rotated matrix drops
/// below `tol`. Values are returned in non-increasing order.
pub fn sym_eig(m: &SymMatrix, tol: f64, max_sweeps: usize) -> Result<Spectrum> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("jacobi tol must be > 0, got {tol}")));
    }
    let n = m.dim();
    let mut a: Vec<f64> = m.as_array().iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off < tol {
            break;
        }
        if sweeps == max_sweeps {
            return Err(Error::NoConvergence { sweeps, off_norm: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) rotation.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, dst]] = v[k * n + src];
        }
    }
    Ok(Spectrum { values, vectors: Some(vectors) })
}

/// Eigendecomposition with the default tolerance and sweep budget.
pub fn sym_eig_default(m: &SymMatrix) -> Result<Spectrum> {
    sym_eig(m, JACOBI_TOL, JACOBI_MAX_SWEEPS)
}

/// Column L2 norms of a column-per-sample matrix.
pub fn column_norms(z: ArrayView2<'_, f64>) -> Array1<f64> {
    z.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
}
