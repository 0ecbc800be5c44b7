use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Moore-Penrose inverse of a symmetric PSD matrix. Eigenvalues below
/// `rel_cutoff * max_eigenvalue` are treated as zero. Returns the inverse and
/// the retained eigenvalues.
pub(crate) fn sym_pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if !(max.is_finite() && max > 0.0) {
        return Err(Error::Numerical("pseudo-inverse of a zero or non-finite matrix".into()));
    }
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut kept = Vec::new();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > rel_cutoff * max {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
            kept.push(lam);
        }
    }
    symmetrize(&mut out);
    Ok((out, kept))
}

pub(crate) struct SpdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub(crate) fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        let mut s = m.clone();
        symmetrize(&mut s);
        s.cholesky()
            .map(|chol| SpdFactor { chol })
            .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub(crate) fn ln_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }

    /// Solves `L^T x = e`; if `e ~ N(0, I)` then `x ~ N(0, A^-1)`.
    pub(crate) fn solve_upper_transpose(&self, e: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l();
        l.transpose()
            .solve_upper_triangular(e)
            .expect("cholesky factor has a positive diagonal")
    }
}


/// `tr(A B)` for equally sized square matrices without forming the product.
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}
