//! Small dense helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).eigenvalues.min()
}

/// Reassemble `Q diag(f(λ)) Qᵀ`.
pub fn eigen_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = f(*lambda);
        scaled.column_mut(j).scale_mut(s);
    }
    symmetrize(&(scaled * q.transpose()))
}

/// Symmetric square root of a PSD matrix, negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    eigen_map(&sym_eigen(m), |l| l.max(0.0).sqrt())
}

/// Factor `F` with `F Fᵀ = m` for a PSD `m`; tolerates rank deficiency.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let mut f = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(j).scale_mut(lambda.max(0.0).sqrt());
    }
    f
}

pub fn ones(k: usize) -> DVector<f64> {
    DVector::from_element(k, 1.0)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}
