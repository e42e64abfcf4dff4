//! Dense Cholesky factorization used by every likelihood evaluation.
//!
//! The factor is stored row-major so the inner loops of both the
//! factorization and the triangular solves are contiguous dot products.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    // Lower triangle, row-major; entries above the diagonal are unused.
    l: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation flags.
    let mut s = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        s[0] += a[i] * b[i];
        s[1] += a[i + 1] * b[i + 1];
        s[2] += a[i + 2] * b[i + 2];
        s[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

impl Cholesky {
    /// Factors a symmetric positive definite matrix (only the lower
    /// triangle is read). Fails with the order of the first leading minor
    /// that is not positive.
    pub fn new(a: &DMatrix<f64>) -> Result<Cholesky> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Numerical(format!(
                "Cholesky of a non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = a[(i, j)];
            }
        }
        for i in 0..n {
            let (done, rest) = l.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for j in 0..i {
                let row_j = &done[j * n..j * n + j + 1];
                let s = row_i[j] - dot(&row_i[..j], &row_j[..j]);
                row_i[j] = s / row_j[j];
            }
            let pivot = row_i[i] - dot(&row_i[..i], &row_i[..i]);
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::SingularCovariance { order: i + 1, pivot });
            }
            row_i[i] = pivot.sqrt();
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.l[i * self.n..i * self.n + i + 1]
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let row = self.row(i);
            b[i] = (b[i] - dot(&row[..i], &b[..i])) / row[i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            b[i] /= self.l[i * self.n + i];
            let bi = b[i];
            let row = self.row(i);
            for (bk, lk) in b[..i].iter_mut().zip(&row[..i]) {
                *bk -= lk * bi;
            }
        }
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// `L⁻¹ b`, the whitened vector.
    pub fn whiten(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        x
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let w = self.whiten(b);
        dot(&w, &w)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// The factor as a dense lower-triangular matrix.
    pub fn l_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { self.l[i * self.n + j] } else { 0.0 })
    }

    /// `L⁻¹ M L⁻ᵀ` for a symmetric `M`.
    pub fn congruence(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        // Column j of L⁻¹M, then rows of (L⁻¹M)L⁻ᵀ = (L⁻¹(L⁻¹M)ᵀ)ᵀ.
        let mut half = DMatrix::zeros(n, n);
        for j in 0..n {
            let col: Vec<f64> = m.column(j).iter().copied().collect();
            let w = self.whiten(&col);
            half.set_column(j, &DVector::from_vec(w));
        }
        let half_t = half.transpose();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let col: Vec<f64> = half_t.column(j).iter().copied().collect();
            let w = self.whiten(&col);
            out.set_column(j, &DVector::from_vec(w));
        }
        // Symmetrize away round-off.
        (&out + out.transpose()) * 0.5
    }

    /// Dense inverse; used by tests and small diagnostics only.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut inv = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let x = self.solve(&e);
            inv.set_column(j, &DVector::from_vec(x));
        }
        inv
    }
}
