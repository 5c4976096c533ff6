//! Least-squares kernel shared by adaptation and identification.
//!
//! Every fit goes through [`least_squares`]: normal equations, a symmetric
//! eigendecomposition of the Gram matrix, and a spectral cutoff relative to
//! the largest eigenvalue. Eigen-directions below the cutoff are dropped,
//! which yields the minimum-norm minimizer for rank-deficient designs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues of the Gram matrix below `SPECTRAL_CUTOFF * max_eigenvalue`
/// are treated as zero.
pub const SPECTRAL_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// Coefficients, one column per target column (`cols(design) x cols(targets)`).
    pub coef: DMatrix<f64>,
    /// Eigenvalues of `AᵀA + λI`, ascending.
    pub gram_eigenvalues: Vec<f64>,
    /// Number of retained eigen-directions.
    pub rank: usize,
    /// Largest over smallest Gram eigenvalue; infinite when rank-deficient.
    pub condition: f64,
}

impl LeastSquares {
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.coef.nrows()
    }
}

/// Solves `min_X ½‖A X − B‖² + ½ ridge ‖X‖²`.
pub fn least_squares(design: &DMatrix<f64>, targets: &DMatrix<f64>, ridge: f64) -> Result<LeastSquares> {
    if design.nrows() != targets.nrows() {
        return Err(Error::shape(format!(
            "design has {} rows but targets have {}",
            design.nrows(),
            targets.nrows()
        )));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let cols = design.ncols();
    let mut gram = design.transpose() * design;
    for i in 0..cols {
        gram[(i, i)] += ridge;
    }
    let rhs = design.transpose() * targets;
    Ok(solve_gram(gram, rhs))
}

/// Same as [`least_squares`] but starting from an already-formed Gram
/// matrix `G` and right-hand side `AᵀB`.
pub fn solve_gram(gram: DMatrix<f64>, rhs: DMatrix<f64>) -> LeastSquares {
    let cols = gram.nrows();
    // symmetrize to remove accumulated asymmetry before the eigensolver
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(gram);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = SPECTRAL_CUTOFF * max_eig;

    let mut inv_diag = DVector::zeros(cols);
    let mut rank = 0;
    let mut min_kept = f64::INFINITY;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff && lam > 0.0 {
            inv_diag[i] = 1.0 / lam;
            rank += 1;
            min_kept = min_kept.min(lam);
        }
    }
    let u = &eig.eigenvectors;
    let projected = u.transpose() * rhs;
    let scaled = DMatrix::from_fn(projected.nrows(), projected.ncols(), |i, j| projected[(i, j)] * inv_diag[i]);
    let coef = u * scaled;

    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let condition = if rank == cols && cols > 0 { max_eig / min_kept } else { f64::INFINITY };
    LeastSquares {
        coef,
        gram_eigenvalues: eigenvalues,
        rank,
        condition,
    }
}

/// Numerical rank from singular values relative to the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_cutoff: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_cutoff * max).count()
}

/// Pseudo-inverse through the same spectral policy: `(AᵀA)⁺ Aᵀ`.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = m.transpose() * m;
    solve_gram(gram, m.transpose()).coef
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds a row-major `rows x cols` matrix from nested slices.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::shape("ragged rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}
