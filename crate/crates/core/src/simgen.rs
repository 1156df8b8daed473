//! Seeded synthetic data and the Monte-Carlo coverage harness.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::covest::{run_decals_with_design, DecalsOptions};
use crate::deconv::{
    estimate_with_design, ols_with_design, sandwich_covariance, wald_intervals, BulkMatrix,
};
use crate::error::{Error, Result};
use crate::gls::{gls_fit, run_gls_with_matrix};
use crate::linalg::{min_eigenvalue, psd_factor, symmetrize};
use crate::qp::{LsDesign, SimplexVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Gaussian,
    GammaCopula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ols,
    Decals,
    DecalsUncorrected,
    GlsOracle,
    GlsEstimated,
    DecalsOracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ols,
        Method::Decals,
        Method::DecalsUncorrected,
        Method::GlsOracle,
        Method::GlsEstimated,
        Method::DecalsOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Decals => "decals",
            Method::DecalsUncorrected => "decals_uncorrected",
            Method::GlsOracle => "gls_oracle",
            Method::GlsEstimated => "gls_estimated",
            Method::DecalsOracle => "decals_oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub dirichlet_alpha: Vec<f64>,
    pub generator: Generator,
    /// Sd of the noise added to the observed signature.
    pub noise_a0: f64,
    /// Sd of the true signature entries.
    pub signature_sd: f64,
    pub replicates: usize,
    pub seed: u64,
    /// `Σ^(k) = scale · R^(k)` for the Gaussian generator.
    pub scale: f64,
    pub level: f64,
    pub gamma_shape: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Iteration cap for the estimated-covariance GLS arm.
    pub gls_max_iter: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::desk()
    }
}

impl SimConfig {
    /// Reduced sizes that keep a full study to a few minutes.
    pub fn desk() -> Self {
        SimConfig {
            k: 3,
            p: 150,
            n: 200,
            dirichlet_alpha: vec![3.0, 2.0, 1.0],
            generator: Generator::Gaussian,
            noise_a0: 0.0,
            signature_sd: 1.0,
            replicates: 50,
            seed: 20240607,
            scale: 10.0,
            level: 0.95,
            gamma_shape: 0.01,
            max_iter: 50,
            tol: 1e-4,
            gls_max_iter: 3,
        }
    }

    pub fn paper() -> Self {
        SimConfig {
            p: 300,
            n: 500,
            replicates: 100,
            ..SimConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.k < 2 {
            return bad(format!("K = {} must be at least 2", self.k));
        }
        if !self.p.is_multiple_of(self.k) {
            return Err(Error::Divisibility { p: self.p, k: self.k });
        }
        if self.p < self.k {
            return bad(format!("p = {} must be at least K = {}", self.p, self.k));
        }
        if self.n < self.k {
            return bad(format!("n = {} must be at least K = {}", self.n, self.k));
        }
        if self.dirichlet_alpha.len() != self.k {
            return bad(format!("dirichlet_alpha has {} entries for K = {}", self.dirichlet_alpha.len(), self.k));
        }
        if self.dirichlet_alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("dirichlet_alpha entries must be positive".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.noise_a0.is_finite() && self.noise_a0 >= 0.0) {
            return bad(format!("noise_a0 = {} must be nonnegative", self.noise_a0));
        }
        if !(self.signature_sd.is_finite() && self.signature_sd > 0.0) {
            return bad(format!("signature_sd = {} must be positive", self.signature_sd));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale = {} must be positive", self.scale));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level = {} must lie in (0, 1)", self.level));
        }
        if !(self.gamma_shape.is_finite() && self.gamma_shape > 0.0) {
            return bad(format!("gamma_shape = {} must be positive", self.gamma_shape));
        }
        if self.max_iter == 0 || self.gls_max_iter == 0 {
            return bad("iteration caps must be at least 1".into());
        }
        if !(self.tol >= 0.0) {
            return bad(format!("tol = {} must be nonnegative", self.tol));
        }
        Ok(())
    }

    fn decals_options(&self, bias_correction: bool) -> DecalsOptions {
        DecalsOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            bias_correction,
            cv_seed: self.seed,
            ..DecalsOptions::default()
        }
    }
}

/// Generator for replicate `replicate`: the seed picks the key, the replicate the stream.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], n: usize, rng: &mut R) -> Result<Vec<SimplexVector>> {
    let gammas = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|_| Error::InvalidInput(format!("Dirichlet parameter {a} must be positive"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .map(|_| {
            let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
            SimplexVector::clip_normalize(&draws)
        })
        .collect())
}

/// Block-diagonal correlation matrices: cell type `k` carries the equicorrelated
/// block in position `k` and the decaying block elsewhere.
pub fn block_correlations(p: usize, k: usize) -> Result<Vec<DMatrix<f64>>> {
    if k == 0 || p == 0 || !p.is_multiple_of(k) {
        return Err(Error::Divisibility { p, k });
    }
    let b = p / k;
    let r1 = DMatrix::from_fn(b, b, |i, j| if i == j { 1.0 } else { 0.3 });
    let r2 = DMatrix::from_fn(b, b, |i, j| {
        if i == j {
            1.0
        } else {
            0.7 * 0.9f64.powi(i.abs_diff(j) as i32 - 1)
        }
    });
    Ok((0..k)
        .map(|c| {
            let mut r = DMatrix::zeros(p, p);
            for block in 0..k {
                let src = if block == c { &r1 } else { &r2 };
                r.view_mut((block * b, block * b), (b, b)).copy_from(src);
            }
            r
        })
        .collect())
}

/// Factor `F` with `F Fᵀ = Σ`: Cholesky when possible, eigenvalue clipping otherwise.
pub fn covariance_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = sigma.clone().cholesky() {
        return Ok(ch.l());
    }
    let scale = sigma.amax();
    if min_eigenvalue(sigma) < -1e-8 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NonPsd);
    }
    Ok(psd_factor(sigma))
}

fn standard_normals<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // column-major fill keeps the draw order fixed
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `n` draws (columns of a `p × n` matrix) from `N(w, Σ)`.
pub fn sample_gaussian_profiles<R: Rng + ?Sized>(
    w: &DVector<f64>,
    sigma: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let factor = covariance_factor(sigma)?;
    Ok(gaussian_with_factor(w, &factor, n, rng))
}

fn gaussian_with_factor<R: Rng + ?Sized>(w: &DVector<f64>, factor: &DMatrix<f64>, n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut x = factor * standard_normals(factor.ncols(), n, rng);
    for mut col in x.column_iter_mut() {
        col += w;
    }
    x
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Quantile of `Gamma(shape, 1)` at probability `Φ(z)`.
///
/// Works in the tail that keeps precision (lower for `z ≤ 0`, upper otherwise) and
/// solves on the log scale by safeguarded Newton steps.
pub fn gamma_quantile_at_normal(shape: f64, z: f64) -> f64 {
    let lower = z <= 0.0;
    let target = normal_cdf(if lower { z } else { -z });
    if target <= 0.0 {
        return if lower { 0.0 } else { f64::INFINITY };
    }
    let ln_target = target.ln();
    // small-x expansion P(X < x) ≈ x^a / Γ(a+1); below the normal range the quantile is 0
    let ln_small = (ln_target + ln_gamma(shape + 1.0)) / shape;
    if lower && ln_small < f64::MIN_POSITIVE.ln() {
        return 0.0;
    }
    let ln_gamma_shape = ln_gamma(shape);
    // g(t) = ln(tail(e^t)) − ln(target); increasing for the lower tail
    let eval = |t: f64| -> (f64, f64) {
        let x = t.exp();
        if x <= 0.0 {
            return if lower { (f64::NEG_INFINITY, 0.0) } else { (-ln_target, 0.0) };
        }
        let tail = if lower { gamma_lr(shape, x) } else { gamma_ur(shape, x) };
        let ln_tail = tail.ln();
        let slope = (shape * t - x - ln_gamma_shape - ln_tail).exp();
        let g = ln_tail - ln_target;
        if lower {
            (g, slope)
        } else {
            (-g, slope)
        }
    };
    let (mut lo, mut hi) = (-745.0_f64, 7.0_f64);
    while eval(hi).0 < 0.0 && hi < 700.0 {
        hi += 10.0;
    }
    if eval(lo).0 >= 0.0 {
        return 0.0;
    }
    let mut t = if lower {
        ln_small.clamp(lo, hi)
    } else {
        0.5 * (lo + hi)
    };
    for _ in 0..200 {
        let (g, slope) = eval(t);
        if g == 0.0 {
            break;
        }
        if g < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = t - g / slope;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) || hi - lo <= 1e-15 * (1.0 + t.abs()) {
            t = next;
            break;
        }
        t = next;
    }
    t.exp()
}

/// `n` draws with `Gamma(shape, w_j / shape)` marginals and Gaussian-copula correlation `R`.
pub fn sample_gamma_copula<R: Rng + ?Sized>(
    w: &DVector<f64>,
    corr: &DMatrix<f64>,
    shape: f64,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if let Some((j, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveMean { gene: j, value: *v });
    }
    let factor = covariance_factor(corr)?;
    Ok(gamma_copula_with_factor(w, &factor, shape, n, rng))
}

fn gamma_copula_with_factor<R: Rng + ?Sized>(
    w: &DVector<f64>,
    factor: &DMatrix<f64>,
    shape: f64,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let z = factor * standard_normals(factor.ncols(), n, rng);
    DMatrix::from_fn(z.nrows(), n, |j, i| w[j] / shape * gamma_quantile_at_normal(shape, z[(j, i)]))
}

/// Observed signature `W + E` with iid `N(0, a0²)` noise.
pub fn perturb_signature<R: Rng + ?Sized>(w: &DMatrix<f64>, a0: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(a0.is_finite() && a0 >= 0.0) {
        return Err(Error::InvalidInput(format!("noise sd {a0} must be nonnegative")));
    }
    if a0 == 0.0 {
        return Ok(w.clone());
    }
    let noise = Normal::new(0.0, a0).expect("valid sd");
    Ok(DMatrix::from_fn(w.nrows(), w.ncols(), |_, _| noise.sample(rng)) + w)
}

/// `y_i = Σ_k π_ik x_i^(k)`; `profiles[k]` is `p × n`.
pub fn synthesize_bulk(proportions: &[SimplexVector], profiles: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let n = proportions.len();
    let first = profiles
        .first()
        .ok_or_else(|| Error::DimensionMismatch("no cell-type profiles".into()))?;
    let p = first.nrows();
    if profiles.iter().any(|x| x.shape() != (p, n)) {
        return Err(Error::DimensionMismatch(format!("profiles must all be {p}x{n}")));
    }
    if let Some(bad) = proportions.iter().find(|pi| pi.len() != profiles.len()) {
        return Err(Error::DimensionMismatch(format!(
            "proportion vector of length {} for {} profiles",
            bad.len(),
            profiles.len()
        )));
    }
    let mut y = DMatrix::zeros(p, n);
    for (k, x) in profiles.iter().enumerate() {
        for i in 0..n {
            y.column_mut(i).axpy(proportions[i][k], &x.column(i), 1.0);
        }
    }
    Ok(y)
}

/// One synthetic replicate with its ground truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub replicate: usize,
    /// True signature (`p × K`).
    pub signature: DMatrix<f64>,
    /// Signature handed to the estimators.
    pub observed_signature: DMatrix<f64>,
    pub proportions: Vec<SimplexVector>,
    /// True cell-type covariances.
    pub cts: Vec<DMatrix<f64>>,
    pub bulk: DMatrix<f64>,
}

impl SimDataset {
    /// True `Σ_i`.
    pub fn subject_covariance(&self, i: usize) -> DMatrix<f64> {
        let p = self.bulk.nrows();
        let mut s = DMatrix::zeros(p, p);
        for (m, pi) in self.cts.iter().zip(self.proportions[i].as_slice()) {
            s += m * (pi * pi);
        }
        s
    }

    pub fn bulk_matrix(&self) -> BulkMatrix {
        BulkMatrix::from_matrix(self.bulk.clone()).expect("generated bulk is finite")
    }

    /// True covariance of the constrained estimate for sample `i`, given the observed signature.
    pub fn true_covariance(&self, design: &LsDesign, i: usize) -> DMatrix<f64> {
        let w = design.design();
        let mut wsw = DMatrix::zeros(w.ncols(), w.ncols());
        let projected: Vec<DMatrix<f64>> = self.cts.iter().map(|s| w.transpose() * s * w).collect();
        for (m, pi) in projected.iter().zip(self.proportions[i].as_slice()) {
            wsw += m * (pi * pi);
        }
        sandwich_covariance(design, &symmetrize(&wsw))
    }
}

pub fn generate_dataset(config: &SimConfig, replicate: usize) -> Result<SimDataset> {
    config.validate()?;
    let mut rng = replicate_rng(config.seed, replicate as u64);
    let (p, k, n) = (config.p, config.k, config.n);
    let sd = Normal::new(0.0, config.signature_sd).expect("validated sd");
    let signature = match config.generator {
        Generator::Gaussian => DMatrix::from_fn(p, k, |_, _| sd.sample(&mut rng)),
        Generator::GammaCopula => DMatrix::from_fn(p, k, |_, _| sd.sample(&mut rng).abs() + 0.1),
    };
    let corr = block_correlations(p, k)?;
    let proportions = sample_dirichlet(&config.dirichlet_alpha, n, &mut rng)?;
    let mut cts = Vec::with_capacity(k);
    let mut profiles = Vec::with_capacity(k);
    for c in 0..k {
        let w = signature.column(c).into_owned();
        match config.generator {
            Generator::Gaussian => {
                let sigma = &corr[c] * config.scale;
                let factor = covariance_factor(&sigma)?;
                profiles.push(gaussian_with_factor(&w, &factor, n, &mut rng));
                cts.push(sigma);
            }
            Generator::GammaCopula => {
                let factor = covariance_factor(&corr[c])?;
                profiles.push(gamma_copula_with_factor(&w, &factor, config.gamma_shape, n, &mut rng));
                // copula correlation on the marginal scale, used as the oracle covariance
                let sd: Vec<f64> = w.iter().map(|m| m / config.gamma_shape.sqrt()).collect();
                cts.push(DMatrix::from_fn(p, p, |a, b| sd[a] * corr[c][(a, b)] * sd[b]));
            }
        }
    }
    let bulk = synthesize_bulk(&proportions, &profiles)?;
    let observed_signature = perturb_signature(&signature, config.noise_a0, &mut rng)?;
    Ok(SimDataset {
        replicate,
        signature,
        observed_signature,
        proportions,
        cts,
        bulk,
    })
}

/// Point estimates and their covariances from one method on one dataset.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub centers: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

pub fn run_method(dataset: &SimDataset, config: &SimConfig, method: Method) -> Result<MethodOutput> {
    let design = LsDesign::new(dataset.observed_signature.clone())?;
    let bulk = dataset.bulk_matrix();
    let types: Vec<String> = (1..=config.k).map(|k| format!("ct{k}")).collect();
    let from_estimates = |r: crate::covest::DecalsResult| MethodOutput {
        centers: r.estimates.iter().map(|e| e.proportions.as_slice().to_vec()).collect(),
        covariances: r.estimates.into_iter().map(|e| e.covariance).collect(),
    };
    Ok(match method {
        Method::Ols => {
            let est = ols_with_design(&design, &bulk)?;
            MethodOutput {
                centers: est.iter().map(|e| e.proportions.as_slice().to_vec()).collect(),
                covariances: est.into_iter().map(|e| e.covariance).collect(),
            }
        }
        Method::Decals => from_estimates(run_decals_with_design(&design, &bulk, &types, &config.decals_options(true))?),
        Method::DecalsUncorrected => {
            from_estimates(run_decals_with_design(&design, &bulk, &types, &config.decals_options(false))?)
        }
        Method::DecalsOracle => {
            let pis = estimate_with_design(&design, &bulk)?;
            MethodOutput {
                centers: pis.iter().map(|p| p.as_slice().to_vec()).collect(),
                covariances: (0..config.n).map(|i| dataset.true_covariance(&design, i)).collect(),
            }
        }
        Method::GlsOracle => {
            let fits = (0..config.n)
                .into_par_iter()
                .map(|i| {
                    gls_fit(design.design(), &bulk.column(i), &dataset.subject_covariance(i), true)
                        .map_err(|e| e.in_sample(&bulk.sample_ids[i]))
                })
                .collect::<Result<Vec<_>>>()?;
            let (pis, covs): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
            MethodOutput {
                centers: pis.iter().map(|p: &SimplexVector| p.as_slice().to_vec()).collect(),
                covariances: covs,
            }
        }
        Method::GlsEstimated => {
            let options = DecalsOptions {
                max_iter: config.gls_max_iter,
                tol: config.tol,
                ..DecalsOptions::default()
            };
            from_estimates(run_gls_with_matrix(design.design(), &bulk, &types, &options)?)
        }
    })
}

/// Per-replicate summary; `error` is set when the method failed on that replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub stream: u64,
    pub coverage: Vec<f64>,
    pub mean_width: Vec<f64>,
    pub mean_abs_error: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTypeCoverage {
    pub cell_type: String,
    /// Pooled over samples and successful replicates.
    pub coverage: f64,
    pub mean_width: f64,
    pub mean_abs_error: f64,
    /// Min, quartiles and max of the per-replicate coverage.
    pub replicate_quantiles: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub method: Method,
    pub config: SimConfig,
    pub cell_types: Vec<CellTypeCoverage>,
    pub replicates: Vec<ReplicateRecord>,
    pub failed_replicates: usize,
}

impl CoverageReport {
    pub fn coverage(&self) -> Vec<f64> {
        self.cell_types.iter().map(|c| c.coverage).collect()
    }
}

fn score(dataset: &SimDataset, output: &MethodOutput, level: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let k = dataset.proportions[0].len();
    let n = dataset.proportions.len();
    let (mut cover, mut width, mut err) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for i in 0..n {
        let ci = wald_intervals(&output.centers[i], &output.covariances[i], level)?;
        for c in 0..k {
            let truth = dataset.proportions[i][c];
            if ci[c].contains(truth) {
                cover[c] += 1.0;
            }
            width[c] += ci[c].width();
            err[c] += (output.centers[i][c] - truth).abs();
        }
    }
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x / n as f64).collect::<Vec<_>>();
    Ok((scale(cover), scale(width), scale(err)))
}

fn quantiles(values: &[f64]) -> [f64; 5] {
    if values.is_empty() {
        return [f64::NAN; 5];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [v[0], at(0.25), at(0.5), at(0.75), v[v.len() - 1]]
}

fn assemble_report(config: &SimConfig, method: Method, records: Vec<ReplicateRecord>) -> CoverageReport {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let cell_types = (0..config.k)
        .map(|c| CellTypeCoverage {
            cell_type: format!("ct{}", c + 1),
            coverage: mean(&|r| r.coverage[c]),
            mean_width: mean(&|r| r.mean_width[c]),
            mean_abs_error: mean(&|r| r.mean_abs_error[c]),
            replicate_quantiles: quantiles(&ok.iter().map(|r| r.coverage[c]).collect::<Vec<_>>()),
        })
        .collect();
    let failed = records.len() - ok.len();
    CoverageReport {
        method,
        config: config.clone(),
        cell_types,
        replicates: records,
        failed_replicates: failed,
    }
}

/// Coverage of several methods on shared replicates (each dataset generated once).
pub fn coverage_study(config: &SimConfig, methods: &[Method]) -> Result<Vec<CoverageReport>> {
    config.validate()?;
    let per_replicate: Vec<Vec<ReplicateRecord>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let record = |res: Result<(Vec<f64>, Vec<f64>, Vec<f64>)>| match res {
                Ok((coverage, mean_width, mean_abs_error)) => ReplicateRecord {
                    replicate: r,
                    seed: config.seed,
                    stream: r as u64,
                    coverage,
                    mean_width,
                    mean_abs_error,
                    error: None,
                },
                Err(e) => {
                    log::warn!("replicate {r} failed: {e}");
                    ReplicateRecord {
                        replicate: r,
                        seed: config.seed,
                        stream: r as u64,
                        coverage: Vec::new(),
                        mean_width: Vec::new(),
                        mean_abs_error: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            };
            match generate_dataset(config, r) {
                Ok(ds) => methods
                    .iter()
                    .map(|&m| record(run_method(&ds, config, m).and_then(|out| score(&ds, &out, config.level))))
                    .collect(),
                Err(e) => {
                    let msg = e.to_string();
                    methods.iter().map(|_| record(Err(Error::InvalidInput(msg.clone())))).collect()
                }
            }
        })
        .collect();
    Ok(methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let records = per_replicate.iter().map(|row| row[m].clone()).collect();
            assemble_report(config, method, records)
        })
        .collect())
}

pub fn coverage_experiment(config: &SimConfig, method: Method) -> Result<CoverageReport> {
    Ok(coverage_study(config, &[method])?.remove(0))
}

/// Error of the estimated proportion covariance for one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VErrorRow {
    pub p: usize,
    pub signature_sd: f64,
    pub method: Method,
    /// Entry pairs `(l, l')`, 1-based, diagonal first.
    pub entries: Vec<(usize, usize)>,
    /// Mean over replicates of `sqrt(mean_i (V̂_i,ll' − V_i,ll')²)`.
    pub error: Vec<f64>,
    /// Monte-Carlo standard error of `error`.
    pub std_error: Vec<f64>,
    pub failed_replicates: usize,
}

fn entry_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = (0..k).map(|l| (l, l)).collect();
    for l in 0..k {
        for m in l + 1..k {
            e.push((l, m));
        }
    }
    e
}

/// Covariance-estimation error of DECALS and OLS for each `(p, a)` pair on the base design.
///
/// Errors are on the scale of `Cov(π̂_i)`.
pub fn v_error_study(base: &SimConfig, ps: &[usize], sds: &[f64]) -> Result<Vec<VErrorRow>> {
    let mut rows = Vec::new();
    for &p in ps {
        for &a in sds {
            let config = SimConfig {
                p,
                signature_sd: a,
                ..base.clone()
            };
            config.validate()?;
            let pairs = entry_pairs(config.k);
            let per_rep: Vec<Result<[Vec<f64>; 2]>> = (0..config.replicates)
                .into_par_iter()
                .map(|r| {
                    let ds = generate_dataset(&config, r)?;
                    let design = LsDesign::new(ds.observed_signature.clone())?;
                    let truth: Vec<DMatrix<f64>> = (0..config.n).map(|i| ds.true_covariance(&design, i)).collect();
                    let err = |out: &MethodOutput| -> Vec<f64> {
                        pairs
                            .iter()
                            .map(|&(l, m)| {
                                let ss: f64 = out
                                    .covariances
                                    .iter()
                                    .zip(&truth)
                                    .map(|(v, t)| (v[(l, m)] - t[(l, m)]).powi(2))
                                    .sum();
                                (ss / config.n as f64).sqrt()
                            })
                            .collect()
                    };
                    let decals = run_method(&ds, &config, Method::Decals)?;
                    let ols = run_method(&ds, &config, Method::Ols)?;
                    Ok([err(&decals), err(&ols)])
                })
                .collect();
            for (slot, method) in [Method::Decals, Method::Ols].into_iter().enumerate() {
                let ok: Vec<&Vec<f64>> = per_rep.iter().filter_map(|r| r.as_ref().ok()).map(|r| &r[slot]).collect();
                let failed = per_rep.len() - ok.len();
                let count = ok.len() as f64;
                let (error, std_error) = (0..pairs.len())
                    .map(|e| {
                        let vals: Vec<f64> = ok.iter().map(|r| r[e]).collect();
                        let mean = vals.iter().sum::<f64>() / count;
                        let var = if vals.len() > 1 {
                            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0)
                        } else {
                            0.0
                        };
                        (mean, (var / count).sqrt())
                    })
                    .unzip();
                rows.push(VErrorRow {
                    p,
                    signature_sd: a,
                    method,
                    entries: pairs.iter().map(|&(l, m)| (l + 1, m + 1)).collect(),
                    error,
                    std_error,
                    failed_replicates: failed,
                });
            }
        }
    }
    Ok(rows)
}
