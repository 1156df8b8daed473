//! Cell-type-specific covariance estimation and the iterative variance loop.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::deconv::{
    align_genes, enforce_psd, estimate_with_design, sandwich_covariance, BulkMatrix, GenePolicy,
    ProportionEstimate, SignatureMatrix,
};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, eigen_map, max_abs, sym_eigen, symmetrize};
use crate::qp::{nearest_psd, LsDesign, SimplexVector};

/// SCAD shape parameter.
pub const SCAD_A: f64 = 3.7;
/// Floor applied to estimated variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;
const MOMENT_CONDITION: f64 = 1e-10;
/// At ratio 1 the corrected moment matrix stops being positive definite.
const BIAS_LIMIT: f64 = 1.0;

/// One `p × p` covariance per cell type.
#[derive(Debug, Clone)]
pub struct CtsCovarianceSet {
    pub matrices: Vec<DMatrix<f64>>,
    pub cell_types: Vec<String>,
}

impl CtsCovarianceSet {
    pub fn n_types(&self) -> usize {
        self.matrices.len()
    }
}

/// Finite-sample bias of the squared-proportion regression.
#[derive(Debug, Clone)]
pub struct BiasTerms {
    /// Bias of `ĤᵀĤ` (`K × K`).
    pub b1: DMatrix<f64>,
    /// Bias of `Ĥ` (`n × K`).
    pub b2: DMatrix<f64>,
}

impl BiasTerms {
    pub fn zero(n: usize, k: usize) -> Self {
        BiasTerms {
            b1: DMatrix::zeros(k, k),
            b2: DMatrix::zeros(n, k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecalsOptions {
    /// SCAD thresholding with PSD repair of each `Σ^(k)`.
    ///
    /// The unthresholded estimate is linear in `ẑ_i ẑ_iᵀ`, and at an interior solution
    /// `Wᵀẑ_i` is parallel to `1`, so it carries no information about `WᵀΣ_iW` off the
    /// constraint direction. Leave this on unless the covariances themselves are the goal.
    pub sparse: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub bias_correction: bool,
    pub cv_folds: usize,
    pub lambda_grid: Vec<f64>,
    pub cv_seed: u64,
}

impl Default for DecalsOptions {
    fn default() -> Self {
        DecalsOptions {
            sparse: true,
            max_iter: 50,
            tol: 1e-4,
            bias_correction: true,
            cv_folds: 5,
            lambda_grid: default_lambda_grid(),
            cv_seed: 0,
        }
    }
}

impl DecalsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::InvalidInput(format!("tolerance {} must be nonnegative", self.tol)));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidInput("lambda grid must be nonempty and nonnegative".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidInput("cross-validation needs at least 2 folds".into()));
        }
        Ok(())
    }
}

/// 20 log-spaced values in `[0.01, 1]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..20).map(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / 19.0)).collect()
}

#[derive(Debug, Clone)]
pub struct DecalsResult {
    pub estimates: Vec<ProportionEstimate>,
    pub cts_covariances: CtsCovarianceSet,
    pub iterations: usize,
    pub converged: bool,
    /// Per-cell-type SCAD thresholds when sparse mode ran.
    pub lambda: Option<Vec<f64>>,
    pub n_genes: usize,
    pub warnings: Vec<String>,
}

/// Residual matrix `Z = Y − W Πᵀ` (`p × n`).
pub fn residuals(signature: &SignatureMatrix, bulk: &BulkMatrix, proportions: &[SimplexVector]) -> Result<DMatrix<f64>> {
    if signature.n_genes() != bulk.values.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "signature has {} genes, bulk has {}",
            signature.n_genes(),
            bulk.values.nrows()
        )));
    }
    residual_matrix(&signature.values, &bulk.values, proportions)
}

pub(crate) fn residual_matrix(w: &DMatrix<f64>, y: &DMatrix<f64>, proportions: &[SimplexVector]) -> Result<DMatrix<f64>> {
    if proportions.len() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} proportion vectors for {} samples",
            proportions.len(),
            y.ncols()
        )));
    }
    if let Some(bad) = proportions.iter().find(|p| p.len() != w.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "proportion vector of length {} for {} cell types",
            bad.len(),
            w.ncols()
        )));
    }
    let pi = DMatrix::from_fn(w.ncols(), proportions.len(), |k, i| proportions[i][k]);
    Ok(y - w * pi)
}

/// `Ĥ` with rows `π̂_i ∘ π̂_i` (`n × K`).
pub fn squared_proportions(proportions: &[SimplexVector]) -> DMatrix<f64> {
    let k = proportions.first().map_or(0, SimplexVector::len);
    DMatrix::from_fn(proportions.len(), k, |i, c| proportions[i][c] * proportions[i][c])
}

/// Largest eigenvalue of `B1` relative to `ĤᵀĤ`: the fraction of the moment matrix the correction removes
/// in its weakest direction.
pub fn bias_ratio(hth: &DMatrix<f64>, b1: &DMatrix<f64>) -> f64 {
    let eig = sym_eigen(hth);
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(*v));
    if largest <= 0.0 || eig.eigenvalues.iter().any(|v| *v <= MOMENT_CONDITION * largest) {
        return f64::INFINITY;
    }
    let inv_sqrt = eigen_map(&eig, |l| 1.0 / l.sqrt());
    sym_eigen(&(&inv_sqrt * b1 * &inv_sqrt)).eigenvalues.max()
}

/// Weights `G` such that the estimate of `Σ^(k)_jj'` is `Σ_i G_ik ẑ_ij ẑ_ij'`.
fn moment_weights(h: &DMatrix<f64>, bias: Option<&BiasTerms>) -> Result<DMatrix<f64>> {
    let mut a = h.transpose() * h;
    let mut lhs = h.clone();
    if let Some(b) = bias {
        if b.b1.shape() != a.shape() || b.b2.shape() != h.shape() {
            return Err(Error::DimensionMismatch("bias terms do not match squared proportions".into()));
        }
        if !all_finite(&b.b1) || !all_finite(&b.b2) {
            return Err(Error::NonFinite("bias terms"));
        }
        if bias_ratio(&a, &b.b1) >= BIAS_LIMIT {
            return Err(Error::SingularCorrectedMoment);
        }
        a -= &b.b1;
        lhs -= &b.b2;
    }
    let singular = if bias.is_some() {
        Error::SingularCorrectedMoment
    } else {
        Error::SingularMomentMatrix
    };
    if !all_finite(&a) {
        return Err(Error::NonFinite("moment matrix"));
    }
    let eig = sym_eigen(&a);
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let smallest = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if largest == 0.0 || smallest <= MOMENT_CONDITION * largest {
        return Err(singular);
    }
    let a_inv = symmetrize(&a).try_inverse().ok_or(singular)?;
    Ok(lhs * a_inv)
}

fn check_moment_inputs(h: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    if h.nrows() != z.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} squared-proportion rows for {} residual columns",
            h.nrows(),
            z.ncols()
        )));
    }
    if h.nrows() < h.ncols() {
        return Err(Error::InsufficientSamples(format!(
            "{} samples for {} cell types",
            h.nrows(),
            h.ncols()
        )));
    }
    Ok(())
}

/// Least-squares estimate of `(Σ^(1)_jj', …, Σ^(K)_jj')` for one gene pair.
pub fn cts_covariance_raw(h: &DMatrix<f64>, z: &DMatrix<f64>, j: usize, jp: usize) -> Result<DVector<f64>> {
    check_moment_inputs(h, z)?;
    if j >= z.nrows() || jp >= z.nrows() {
        return Err(Error::DimensionMismatch(format!("gene pair ({j}, {jp}) out of range")));
    }
    let g = moment_weights(h, None)?;
    let s = DVector::from_fn(z.ncols(), |i, _| z[(j, i)] * z[(jp, i)]);
    Ok(g.transpose() * s)
}

fn assemble(g: &DMatrix<f64>, z: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..g.ncols())
        .into_par_iter()
        .map(|k| {
            let mut scaled = z.clone();
            for (i, mut col) in scaled.column_iter_mut().enumerate() {
                col *= g[(i, k)];
            }
            symmetrize(&(scaled * z.transpose()))
        })
        .collect()
}

/// All gene pairs at once, reusing one factorization of `ĤᵀĤ`.
pub fn cts_covariance_raw_all(h: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_moment_inputs(h, z)?;
    Ok(assemble(&moment_weights(h, None)?, z))
}

/// Bias of `ĤᵀĤ` and `Ĥ` when `√p(π̂_i − π_i) ~ N(0, V_i)`.
///
/// `v` holds the `V_i` (not divided by `p`).
pub fn bias_terms(proportions: &[SimplexVector], v: &[DMatrix<f64>], p: usize) -> Result<BiasTerms> {
    if proportions.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} proportion vectors and {} covariances",
            proportions.len(),
            v.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("p must be positive".into()));
    }
    let n = proportions.len();
    let k = proportions.first().map_or(0, SimplexVector::len);
    let p = p as f64;
    let mut b1 = DMatrix::zeros(k, k);
    let mut b2 = DMatrix::zeros(n, k);
    for (i, (pi, vi)) in proportions.iter().zip(v).enumerate() {
        if vi.shape() != (k, k) {
            return Err(Error::DimensionMismatch(format!("covariance {i} is not {k}x{k}")));
        }
        if !all_finite(vi) {
            return Err(Error::NonFinite("proportion covariance"));
        }
        for a in 0..k {
            b2[(i, a)] = vi[(a, a)] / p;
            for b in 0..k {
                let (ha, hb) = (pi[a] * pi[a], pi[b] * pi[b]);
                let first = ha * vi[(b, b)] + vi[(a, a)] * hb + 4.0 * pi[a] * pi[b] * vi[(a, b)];
                let fourth = vi[(a, a)] * vi[(b, b)] + 2.0 * vi[(a, b)] * vi[(a, b)];
                b1[(a, b)] += first / p + fourth / (p * p);
            }
        }
    }
    Ok(BiasTerms {
        b1: symmetrize(&b1),
        b2,
    })
}

/// Bias-corrected estimate of every `Σ^(k)`.
pub fn cts_covariance_corrected(h: &DMatrix<f64>, z: &DMatrix<f64>, bias: &BiasTerms) -> Result<Vec<DMatrix<f64>>> {
    check_moment_inputs(h, z)?;
    Ok(assemble(&moment_weights(h, Some(bias))?, z))
}

/// Elementwise SCAD rule on off-diagonal entries.
pub fn scad_threshold(r: &DMatrix<f64>, lambda: f64, a: f64) -> DMatrix<f64> {
    let mut out = r.clone();
    for c in 0..r.ncols() {
        for row in 0..r.nrows() {
            if row != c {
                out[(row, c)] = scad_value(r[(row, c)], lambda, a);
            }
        }
    }
    out
}

fn scad_value(x: f64, lambda: f64, a: f64) -> f64 {
    let m = x.abs();
    if m <= 2.0 * lambda {
        x.signum() * (m - lambda).max(0.0)
    } else if m < a * lambda {
        x.signum() * (lambda + (a - 1.0) / (a - 2.0) * (m - 2.0 * lambda))
    } else {
        x
    }
}

fn floor_diagonal(sigma: &mut DMatrix<f64>) {
    for j in 0..sigma.nrows() {
        if sigma[(j, j)] < VARIANCE_FLOOR {
            sigma[(j, j)] = VARIANCE_FLOOR;
        }
    }
}

/// Threshold on the correlation scale and map back, without PSD repair.
fn threshold_covariance(sigma: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let sd: Vec<f64> = (0..sigma.nrows()).map(|j| sigma[(j, j)].max(VARIANCE_FLOOR).sqrt()).collect();
    let corr = DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |a, b| {
        if a == b {
            1.0
        } else {
            (sigma[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
        }
    });
    let t = scad_threshold(&corr, lambda, SCAD_A);
    DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |a, b| {
        if a == b {
            sigma[(a, a)].max(VARIANCE_FLOOR)
        } else {
            sd[a] * t[(a, b)] * sd[b]
        }
    })
}

/// SCAD-thresholded covariance projected onto the PSD cone.
pub fn sparse_covariance(sigma: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    nearest_psd(&threshold_covariance(&symmetrize(sigma), lambda))
}

/// Per-cell-type threshold chosen by K-fold cross-validation over samples.
/// Smallest sample count for which every held-out fold can be fitted on its own.
pub fn cv_min_samples(folds: usize, k: usize) -> usize {
    folds * k.max(2)
}

pub fn cross_validate_lambda(
    z: &DMatrix<f64>,
    h: &DMatrix<f64>,
    folds: usize,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    check_moment_inputs(h, z)?;
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    let n = z.ncols();
    let k = h.ncols();
    if folds < 2 || n < cv_min_samples(folds, k) {
        return Err(Error::InsufficientSamples(format!(
            "cross-validation with {folds} folds needs at least {} samples, got {n}",
            cv_min_samples(folds, k)
        )));
    }
    if grid.len() == 1 {
        return Ok(vec![grid[0]; k]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }

    let mut loss = vec![vec![0.0; grid.len()]; k];
    for fold in 0..folds {
        let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
        let fit = |idx: &[usize]| {
            let hs = h.select_rows(idx);
            let zs = z.select_columns(idx);
            cts_covariance_raw_all(&hs, &zs)
        };
        let train_est = fit(&train)?;
        let test_est = fit(&test)?;
        for c in 0..k {
            let train_c = symmetrize(&train_est[c]);
            let fold_loss: Vec<f64> = grid
                .par_iter()
                .map(|&lambda| (threshold_covariance(&train_c, lambda) - &test_est[c]).norm_squared())
                .collect();
            for (acc, l) in loss[c].iter_mut().zip(fold_loss) {
                *acc += l;
            }
        }
    }
    Ok(loss
        .iter()
        .map(|per_lambda| {
            let best = per_lambda
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(g, _)| g)
                .unwrap_or(0);
            grid[best]
        })
        .collect())
}

/// `Σ_i = Σ_k π_ik² Σ^(k)`.
pub fn subject_covariance(cts: &CtsCovarianceSet, proportions: &SimplexVector) -> Result<DMatrix<f64>> {
    if cts.n_types() != proportions.len() || cts.matrices.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} covariance matrices for {} proportions",
            cts.n_types(),
            proportions.len()
        )));
    }
    let p = cts.matrices[0].nrows();
    let mut out = DMatrix::zeros(p, p);
    for (m, pi) in cts.matrices.iter().zip(proportions.as_slice()) {
        out += m * (pi * pi);
    }
    Ok(out)
}

/// Covariance of `π̂_i` for each sample given `WᵀΣ^(k)W`.
pub(crate) fn covariances_from_projected(
    design: &LsDesign,
    projected: &[DMatrix<f64>],
    proportions: &[SimplexVector],
) -> (Vec<DMatrix<f64>>, usize) {
    let results: Vec<(DMatrix<f64>, bool)> = proportions
        .par_iter()
        .map(|pi| {
            let k = design.n_types();
            let mut wsw = DMatrix::zeros(k, k);
            for (m, v) in projected.iter().zip(pi.as_slice()) {
                wsw += m * (v * v);
            }
            let mut cov = sandwich_covariance(design, &wsw);
            let fixed = enforce_psd(&mut cov);
            (cov, fixed)
        })
        .collect();
    let fixes = results.iter().filter(|r| r.1).count();
    (results.into_iter().map(|r| r.0).collect(), fixes)
}

/// Sup-norm change on the `V` scale relative to the previous iterate.
pub(crate) fn relative_change(prev: &[DMatrix<f64>], next: &[DMatrix<f64>], p: usize) -> f64 {
    let p = p as f64;
    prev.iter()
        .zip(next)
        .map(|(a, b)| p * max_abs(&(b - a)) / (1.0 + p * max_abs(a)))
        .fold(0.0, f64::max)
}

/// Proportions, per-sample covariances and cell-type covariances by fixed-point iteration.
pub fn run_decals(signature: &SignatureMatrix, bulk: &BulkMatrix, options: &DecalsOptions) -> Result<DecalsResult> {
    let (signature, bulk) = align_genes(signature, bulk, GenePolicy::Exact)?;
    let design = signature.design()?;
    run_decals_with_design(&design, &bulk, &signature.cell_types, options)
}

pub(crate) fn run_decals_with_design(
    design: &LsDesign,
    bulk: &BulkMatrix,
    cell_types: &[String],
    options: &DecalsOptions,
) -> Result<DecalsResult> {
    options.validate()?;
    let (p, k, n) = (design.n_genes(), design.n_types(), bulk.n_samples());
    if n < k {
        return Err(Error::InsufficientSamples(format!("{n} samples for {k} cell types")));
    }
    let proportions = estimate_with_design(design, bulk)?;
    let z = residual_matrix(design.design(), &bulk.values, &proportions)?;
    let h = squared_proportions(&proportions);
    let mut warnings = Vec::new();
    let mut skip = |msg: String| {
        log::warn!("{msg}");
        warnings.push(msg);
        None
    };
    let lambda = if !options.sparse {
        None
    } else if n < cv_min_samples(options.cv_folds, k) {
        skip(format!("{n} samples are too few to cross-validate the threshold; thresholding skipped"))
    } else {
        match cross_validate_lambda(&z, &h, options.cv_folds, &options.lambda_grid, options.cv_seed) {
            Ok(l) => Some(l),
            Err(Error::SingularMomentMatrix) => {
                skip("a cross-validation fold had a singular moment matrix; thresholding skipped".into())
            }
            Err(e) => return Err(e),
        }
    };

    let gram = design.gram();
    let mut cov: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let s2 = z.column(i).norm_squared() / (p as f64 - 1.0).max(1.0);
            sandwich_covariance(design, &(gram * s2))
        })
        .collect();

    let mut cts = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut psd_fixes = 0;
    let mut fell_back = false;
    let w = design.design();
    while iterations < options.max_iter {
        iterations += 1;
        let mut step = || -> Result<Vec<DMatrix<f64>>> {
            // once the correction has been rejected the run stays uncorrected, so the loop settles
            let mut est = if options.bias_correction && !fell_back {
                let v: Vec<DMatrix<f64>> = cov.iter().map(|c| c * p as f64).collect();
                let bias = bias_terms(&proportions, &v, p)?;
                match cts_covariance_corrected(&h, &z, &bias) {
                    Err(Error::SingularCorrectedMoment) => {
                        fell_back = true;
                        cts_covariance_raw_all(&h, &z)?
                    }
                    other => other?,
                }
            } else {
                cts_covariance_raw_all(&h, &z)?
            };
            for (c, sigma) in est.iter_mut().enumerate() {
                floor_diagonal(sigma);
                if let Some(l) = &lambda {
                    *sigma = sparse_covariance(sigma, l[c])?;
                }
            }
            Ok(est)
        };
        cts = step().map_err(|e| e.at_iteration(iterations))?;
        let projected: Vec<DMatrix<f64>> = cts.iter().map(|s| symmetrize(&(w.transpose() * s * w))).collect();
        let (next, fixes) = covariances_from_projected(design, &projected, &proportions);
        psd_fixes += fixes;
        let change = relative_change(&cov, &next, p);
        cov = next;
        log::debug!("variance iteration {iterations}: relative change {change:.3e}");
        if change < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let msg = format!("variance iteration did not converge within {} iterations", options.max_iter);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if fell_back {
        let msg = "bias correction exceeded the squared-proportion signal; used the uncorrected estimator".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if psd_fixes > 0 {
        let msg = format!("{psd_fixes} proportion covariances were projected to the PSD cone");
        log::warn!("{msg}");
        warnings.push(msg);
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
        lambda,
        n_genes: p,
        warnings,
    })
}
