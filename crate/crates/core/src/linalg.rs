//! Small dense linear-algebra helpers bridging `ndarray` data matrices and
//! `nalgebra` factorizations. Everything here operates on the low-dimensional
//! square matrices that appear in moment weighting and solver steps.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn to_na_vec(v: &Array1<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

pub fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn from_na_vec(v: &DVector<f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let chol = to_na(a).cholesky().ok_or_else(|| Error::SingularMatrix {
        what: "positive-definite solve".into(),
    })?;
    Ok(from_na_vec(&chol.solve(&to_na_vec(b))))
}

/// Solves `a x = b` for general square `a` via LU with partial pivoting.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let lu = to_na(a).lu();
    lu.solve(&to_na_vec(b))
        .map(|v| from_na_vec(&v))
        .ok_or_else(|| Error::SingularMatrix {
            what: "linear solve".into(),
        })
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = to_na(a)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// A factored symmetric positive-definite weight matrix.
///
/// Holds the Cholesky factorization of a conditioned copy of the input;
/// exposes quadratic forms `v' W^{-1} v` and products `W^{-1} v` without
/// forming the inverse. A single ridge `1e-10 * trace / dim` is applied if
/// the raw matrix fails to factor; a matrix that still fails, or whose
/// condition number exceeds 1e12 after the ridge, is reported singular.
pub struct SpdInverse {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ridged: bool,
}

impl SpdInverse {
    pub fn new(omega: &Array2<f64>) -> Result<Self> {
        let m = to_na(omega);
        let dim = m.nrows();
        if let Some(chol) = Self::accept(m.clone().cholesky()) {
            return Ok(SpdInverse {
                chol,
                ridged: false,
            });
        }
        let ridge = 1e-10 * m.trace() / dim as f64;
        if !ridge.is_finite() || ridge <= 0.0 {
            return Err(Error::SingularMatrix {
                what: "moment weight matrix".into(),
            });
        }
        let mut ridged = m;
        for i in 0..dim {
            ridged[(i, i)] += ridge;
        }
        match Self::accept(ridged.cholesky()) {
            Some(chol) => Ok(SpdInverse { chol, ridged: true }),
            None => Err(Error::SingularMatrix {
                what: "moment weight matrix".into(),
            }),
        }
    }

    /// A factorization is usable when every pivot is finite and positive and
    /// the squared pivot ratio (a condition-number proxy) stays below 1e12.
    fn accept(
        chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    ) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let chol = chol?;
        let l = chol.l_dirty();
        let mut min = f64::MAX;
        let mut max = 0.0f64;
        for i in 0..l.nrows() {
            let d = l[(i, i)];
            if !d.is_finite() || d <= 0.0 {
                return None;
            }
            min = min.min(d);
            max = max.max(d);
        }
        if (max / min).powi(2) > 1e12 {
            return None;
        }
        Some(chol)
    }

    pub fn was_ridged(&self) -> bool {
        self.ridged
    }

    /// `v' W^{-1} v`.
    pub fn quad_form(&self, v: &Array1<f64>) -> f64 {
        let nv = to_na_vec(v);
        let solved = self.chol.solve(&nv);
        nv.dot(&solved)
    }

    /// `W^{-1} v`.
    pub fn solve_vec(&self, v: &Array1<f64>) -> Array1<f64> {
        from_na_vec(&self.chol.solve(&to_na_vec(v)))
    }

    /// `W^{-1} M` column by column.
    pub fn solve_mat(&self, m: &Array2<f64>) -> Array2<f64> {
        from_na(&self.chol.solve(&to_na(m)))
    }

    /// Lower-triangular factor `L` of the *inverse* weight in the sense that
    /// premultiplying moment means by `L'` turns the quadratic form into an
    /// ordinary sum of squares: with `W = C C'` (Cholesky of the input),
    /// `v' W^{-1} v = || C^{-1} v ||^2`.
    pub fn whiten(&self, v: &Array1<f64>) -> Array1<f64> {
        let l = self.chol.l();
        let nv = to_na_vec(v);
        let solved = l.solve_lower_triangular(&nv).expect("factor is nonsingular");
        from_na_vec(&solved)
    }

    /// Whitens the columns of a matrix (same transform as [`Self::whiten`]).
    pub fn whiten_mat(&self, m: &Array2<f64>) -> Array2<f64> {
        let l = self.chol.l();
        let nm = to_na(m);
        let solved = l.solve_lower_triangular(&nm).expect("factor is nonsingular");
        from_na(&solved)
    }
}

/// Rank of a matrix from its singular values at relative tolerance `tol`.
pub fn rank(a: &Array2<f64>, tol: f64) -> usize {
    let svd = to_na(a).svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > tol * max).count()
}
