//! Constrained generalized least squares, used as a comparison arm.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covest::{
    cts_covariance_raw_all, relative_change, residual_matrix, squared_proportions, subject_covariance,
    CtsCovarianceSet, DecalsOptions, DecalsResult,
};
use crate::deconv::{
    align_genes, enforce_psd, BulkMatrix, GenePolicy, ProportionEstimate, SignatureMatrix, SubjectCovariance,
};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, eigen_map, ones, sym_eigen, symmetrize};
use crate::qp::{LsDesign, SimplexVector};

/// Eigenvalues below this fraction of the largest are floored (or rejected).
pub const EIGEN_FLOOR: f64 = 1e-10;

/// `Σ^{-1/2}` via the symmetric eigendecomposition.
///
/// With `strict`, a covariance failing the positive-definiteness check is an error;
/// otherwise small and negative eigenvalues are raised to the floor.
pub fn inverse_sqrt(sigma: &DMatrix<f64>, strict: bool) -> Result<DMatrix<f64>> {
    if !all_finite(sigma) {
        return Err(Error::NonFinite("subject covariance"));
    }
    let eig = sym_eigen(sigma);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return Err(Error::SingularSigma);
    }
    let floor = EIGEN_FLOOR * max;
    if strict && eig.eigenvalues.min() <= floor {
        return Err(Error::SingularSigma);
    }
    Ok(eigen_map(&eig, |l| 1.0 / l.max(floor).sqrt()))
}

/// GLS proportions and their covariance from one whitening.
pub(crate) fn gls_fit(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma: &DMatrix<f64>,
    strict: bool,
) -> Result<(SimplexVector, DMatrix<f64>)> {
    let s = inverse_sqrt(sigma, strict)?;
    let design = LsDesign::new(&s * w)?;
    let pi = design.simplex(&(&s * y))?;
    Ok((pi, constrained_inverse(design.gram_inv())))
}

/// `A⁻¹ − A⁻¹11ᵀA⁻¹ / (1ᵀA⁻¹1)`.
fn constrained_inverse(a_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a_inv.nrows();
    let a1 = a_inv * ones(k);
    symmetrize(&(a_inv - &a1 * a1.transpose() / a1.sum()))
}

fn check_sigma(signature: &SignatureMatrix, sigma: &SubjectCovariance) -> Result<()> {
    let p = signature.n_genes();
    if sigma.values.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "subject covariance is {}x{}, expected {p}x{p}",
            sigma.values.nrows(),
            sigma.values.ncols()
        )));
    }
    Ok(())
}

/// Simplex-constrained fit of the whitened problem `Σ^{-1/2}y ≈ Σ^{-1/2}Wπ`.
pub fn solve_gls(signature: &SignatureMatrix, y: &DVector<f64>, sigma: &SubjectCovariance) -> Result<SimplexVector> {
    check_sigma(signature, sigma)?;
    if y.len() != signature.n_genes() {
        return Err(Error::DimensionMismatch(format!(
            "response has {} genes, signature has {}",
            y.len(),
            signature.n_genes()
        )));
    }
    gls_fit(&signature.values, y, &sigma.values, true)
        .map(|r| r.0)
        .map_err(|e| e.in_sample(&sigma.sample_id))
}

/// Covariance of the GLS proportions, `(WᵀΣ⁻¹W)⁻¹` restricted to the sum-to-one subspace.
pub fn gls_covariance(signature: &SignatureMatrix, sigma: &SubjectCovariance) -> Result<DMatrix<f64>> {
    check_sigma(signature, sigma)?;
    let s = inverse_sqrt(&sigma.values, true)?;
    let design = LsDesign::new(&s * &signature.values)?;
    Ok(constrained_inverse(design.gram_inv()))
}

/// Alternate GLS fits with raw cell-type covariance estimates, starting from `Σ_i = I`.
///
/// Only `max_iter` and `tol` are read from `options`.
pub fn run_gls_iterative(signature: &SignatureMatrix, bulk: &BulkMatrix, options: &DecalsOptions) -> Result<DecalsResult> {
    let (signature, bulk) = align_genes(signature, bulk, GenePolicy::Exact)?;
    signature.design()?;
    run_gls_with_matrix(&signature.values, &bulk, &signature.cell_types, options)
}

pub(crate) fn run_gls_with_matrix(
    w: &DMatrix<f64>,
    bulk: &BulkMatrix,
    cell_types: &[String],
    options: &DecalsOptions,
) -> Result<DecalsResult> {
    options.validate()?;
    let (p, k, n) = (w.nrows(), w.ncols(), bulk.n_samples());
    if n < k {
        return Err(Error::InsufficientSamples(format!("{n} samples for {k} cell types")));
    }
    // whitening matrices Σ_i^{-1/2} from the previous pass
    let mut whiteners: Option<Vec<DMatrix<f64>>> = None;
    let mut prev: Option<Vec<DMatrix<f64>>> = None;
    let mut proportions = Vec::new();
    let mut cov = Vec::new();
    let mut cts = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut psd_fixes = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let tag = |e: Error| e.at_iteration(iterations);
        proportions = match &whiteners {
            None => {
                let design = LsDesign::new(w.clone())?;
                (0..n)
                    .map(|i| design.simplex(&bulk.column(i)).map_err(|e| e.in_sample(&bulk.sample_ids[i])))
                    .collect::<Result<Vec<_>>>()
            }
            Some(s) => (0..n)
                .into_par_iter()
                .map(|i| {
                    LsDesign::new(&s[i] * w)
                        .and_then(|d| d.simplex(&(&s[i] * bulk.column(i))))
                        .map_err(|e| e.in_sample(&bulk.sample_ids[i]))
                })
                .collect::<Result<Vec<_>>>(),
        }
        .map_err(tag)?;
        let z = residual_matrix(w, &bulk.values, &proportions)?;
        let h = squared_proportions(&proportions);
        cts = cts_covariance_raw_all(&h, &z).map_err(tag)?;
        let set = CtsCovarianceSet {
            matrices: cts.clone(),
            cell_types: cell_types.to_vec(),
        };
        let fitted = proportions
            .par_iter()
            .map(|pi| {
                let s = inverse_sqrt(&subject_covariance(&set, pi)?, false)?;
                let mut c = constrained_inverse(LsDesign::new(&s * w)?.gram_inv());
                let fixed = enforce_psd(&mut c);
                Ok((s, c, fixed))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(tag)?;
        psd_fixes += fitted.iter().filter(|f| f.2).count();
        let (s, c): (Vec<_>, Vec<_>) = fitted.into_iter().map(|f| (f.0, f.1)).unzip();
        cov = c;
        whiteners = Some(s);
        if let Some(before) = &prev {
            let change = relative_change(before, &cov, p);
            log::debug!("GLS iteration {iterations}: relative change {change:.3e}");
            if change < options.tol {
                converged = true;
                break;
            }
        }
        prev = Some(cov.clone());
    }

    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("GLS iteration did not converge within {} iterations", options.max_iter));
    }
    if psd_fixes > 0 {
        warnings.push(format!("{psd_fixes} GLS covariances were projected to the PSD cone"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let estimates = proportions
        .into_iter()
        .zip(cov)
        .zip(&bulk.sample_ids)
        .map(|((pi, c), id)| ProportionEstimate::new(id.clone(), pi, c))
        .collect();
    Ok(DecalsResult {
        estimates,
        cts_covariances: CtsCovarianceSet {
            matrices: cts,
            cell_types: cell_types.to_vec(),
        },
        iterations,
        converged,
        lambda: None,
        n_genes: p,
        warnings,
    })
}
