//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{FlowError, Result};

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factorization; failure is the positive-definiteness test.
pub fn cholesky(a: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone()).ok_or(FlowError::NotPositiveDefinite(what))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut values: Vec<f64> = SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// True when `a` is PSD up to `-rel_tol * ‖a‖`.
pub fn is_psd(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let eig = sym_eigenvalues(a);
    let norm = eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    eig.first().map_or(true, |&min| min >= -rel_tol * norm)
}

pub fn ensure_finite_matrix(a: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFinite(what))
    }
}

pub fn ensure_finite_vector(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFinite(what))
    }
}

pub fn ensure_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(FlowError::Dimension { what, expected, found })
    }
}

/// Builds a matrix from row-major nested rows, rejecting ragged input.
pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(FlowError::Parse(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(FlowError::Parse(format!("{what}: empty row")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(FlowError::Parse(format!(
            "{what}: ragged rows (row {bad} has {} entries, expected {ncols})",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `‖a − b‖_F / max(‖b‖_F, floor)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

pub fn rel_diff_vec(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
