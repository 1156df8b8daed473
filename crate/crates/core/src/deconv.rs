//! Per-sample proportion estimates, their asymptotic covariance, and Wald intervals.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, min_eigenvalue, ones, symmetrize};
use crate::qp::{LsDesign, SimplexVector};

/// Proportions below this are reported with a boundary warning.
pub const BOUNDARY_THRESHOLD: f64 = 1e-6;

/// Mean expression of signature genes per cell type (`p × K`).
#[derive(Debug, Clone)]
pub struct SignatureMatrix {
    pub values: DMatrix<f64>,
    pub gene_ids: Vec<String>,
    pub cell_types: Vec<String>,
}

impl SignatureMatrix {
    pub fn new(values: DMatrix<f64>, gene_ids: Vec<String>, cell_types: Vec<String>) -> Result<Self> {
        if values.nrows() != gene_ids.len() || values.ncols() != cell_types.len() {
            return Err(Error::DimensionMismatch(format!(
                "signature is {}x{} but has {} gene ids and {} cell types",
                values.nrows(),
                values.ncols(),
                gene_ids.len(),
                cell_types.len()
            )));
        }
        ensure_unique(&gene_ids, "gene id")?;
        ensure_unique(&cell_types, "cell type")?;
        // conditioning and finiteness
        LsDesign::new(values.clone())?;
        Ok(SignatureMatrix {
            values,
            gene_ids,
            cell_types,
        })
    }

    /// Signature with generated ids (`g1..gp`, `ct1..ctK`).
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let genes = (1..=values.nrows()).map(|j| format!("g{j}")).collect();
        let types = (1..=values.ncols()).map(|k| format!("ct{k}")).collect();
        Self::new(values, genes, types)
    }

    pub fn n_genes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_types(&self) -> usize {
        self.values.ncols()
    }

    pub fn design(&self) -> Result<LsDesign> {
        LsDesign::new(self.values.clone())
    }
}

/// Observed bulk expression (`p × n`, one column per sample).
#[derive(Debug, Clone)]
pub struct BulkMatrix {
    pub values: DMatrix<f64>,
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl BulkMatrix {
    pub fn new(values: DMatrix<f64>, gene_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        if values.nrows() != gene_ids.len() || values.ncols() != sample_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "bulk is {}x{} but has {} gene ids and {} sample ids",
                values.nrows(),
                values.ncols(),
                gene_ids.len(),
                sample_ids.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("bulk matrix"));
        }
        ensure_unique(&gene_ids, "gene id")?;
        ensure_unique(&sample_ids, "sample id")?;
        Ok(BulkMatrix {
            values,
            gene_ids,
            sample_ids,
        })
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let genes = (1..=values.nrows()).map(|j| format!("g{j}")).collect();
        let samples = (1..=values.ncols()).map(|i| format!("s{i}")).collect();
        Self::new(values, genes, samples)
    }

    pub fn n_samples(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.values.column(i).into_owned()
    }
}

fn ensure_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate {what} '{id}'")));
        }
    }
    Ok(())
}

/// How genes present on only one side are treated during alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GenePolicy {
    /// Both sides must carry the same gene set; order may differ.
    Exact,
    /// Keep the intersection, in signature order.
    #[default]
    Intersect,
}

/// Reorder (and possibly subset) both matrices to a common gene order.
pub fn align_genes(
    signature: &SignatureMatrix,
    bulk: &BulkMatrix,
    policy: GenePolicy,
) -> Result<(SignatureMatrix, BulkMatrix)> {
    if signature.gene_ids == bulk.gene_ids {
        return Ok((signature.clone(), bulk.clone()));
    }
    let bulk_index: HashMap<&str, usize> = bulk
        .gene_ids
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let sig_set: HashSet<&str> = signature.gene_ids.iter().map(String::as_str).collect();

    if policy == GenePolicy::Exact {
        if let Some(g) = signature.gene_ids.iter().find(|g| !bulk_index.contains_key(g.as_str())) {
            return Err(Error::GeneMismatch(format!("signature gene '{g}' not found in bulk")));
        }
        if let Some(g) = bulk.gene_ids.iter().find(|g| !sig_set.contains(g.as_str())) {
            return Err(Error::GeneMismatch(format!("bulk gene '{g}' not found in signature")));
        }
    }

    let kept: Vec<(usize, usize)> = signature
        .gene_ids
        .iter()
        .enumerate()
        .filter_map(|(j, g)| bulk_index.get(g.as_str()).map(|&b| (j, b)))
        .collect();
    let dropped = signature.n_genes() + bulk.gene_ids.len() - 2 * kept.len();
    if dropped > 0 {
        log::warn!("gene alignment dropped {dropped} genes present on only one side");
    }
    if kept.len() < signature.n_types() {
        return Err(Error::GeneMismatch(format!(
            "only {} shared genes for {} cell types",
            kept.len(),
            signature.n_types()
        )));
    }
    let sig_values = DMatrix::from_fn(kept.len(), signature.n_types(), |r, c| {
        signature.values[(kept[r].0, c)]
    });
    let bulk_values = DMatrix::from_fn(kept.len(), bulk.n_samples(), |r, c| bulk.values[(kept[r].1, c)]);
    let genes: Vec<String> = kept.iter().map(|(j, _)| signature.gene_ids[*j].clone()).collect();
    Ok((
        SignatureMatrix::new(sig_values, genes.clone(), signature.cell_types.clone())?,
        BulkMatrix::new(bulk_values, genes, bulk.sample_ids.clone())?,
    ))
}

/// Point estimate and sampling covariance for one sample.
///
/// `covariance` is the covariance of `π̂_i` itself, i.e. `V_i / p`.
#[derive(Debug, Clone)]
pub struct ProportionEstimate {
    pub sample_id: String,
    pub proportions: SimplexVector,
    pub covariance: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl ProportionEstimate {
    pub fn new(sample_id: String, proportions: SimplexVector, covariance: DMatrix<f64>) -> Self {
        let mut warnings = Vec::new();
        if let Some(k) = proportions.as_slice().iter().position(|v| *v < BOUNDARY_THRESHOLD) {
            warnings.push(format!(
                "proportion of cell type {} is on the boundary; normal approximation may be inaccurate",
                k + 1
            ));
        }
        ProportionEstimate {
            sample_id,
            proportions,
            covariance,
            warnings,
        }
    }

    pub fn confidence_intervals(&self, level: f64) -> Result<Vec<Interval>> {
        wald_intervals(self.proportions.as_slice(), &self.covariance, level)
    }
}

/// Subject-specific covariance `Σ_i` of the bulk errors (`p × p`).
#[derive(Debug, Clone)]
pub struct SubjectCovariance {
    pub values: DMatrix<f64>,
    pub sample_id: String,
}

/// Closed interval `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Proportions for every sample via simplex-constrained least squares.
pub fn estimate_proportions(signature: &SignatureMatrix, bulk: &BulkMatrix) -> Result<Vec<SimplexVector>> {
    let (signature, bulk) = align_genes(signature, bulk, GenePolicy::Exact)?;
    let design = signature.design()?;
    estimate_with_design(&design, &bulk)
}

pub(crate) fn estimate_with_design(design: &LsDesign, bulk: &BulkMatrix) -> Result<Vec<SimplexVector>> {
    (0..bulk.n_samples())
        .into_par_iter()
        .map(|i| {
            design
                .simplex(&bulk.column(i))
                .map_err(|e| e.in_sample(&bulk.sample_ids[i]))
        })
        .collect()
}

/// The constraint projector `U = I − G⁻¹1(1ᵀG⁻¹1)⁻¹1ᵀ` (scale-free in `G`).
pub fn constraint_projector(gram_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let k = gram_inv.nrows();
    let g1 = gram_inv * ones(k);
    let denom = g1.sum();
    DMatrix::identity(k, k) - &g1 * ones(k).transpose() / denom
}

/// Covariance of `π̂` (that is `V/p`) given `WᵀΣW`.
pub(crate) fn sandwich_covariance(design: &LsDesign, wsw: &DMatrix<f64>) -> DMatrix<f64> {
    let u = constraint_projector(design.gram_inv());
    let d = design.gram_inv() * wsw * design.gram_inv();
    symmetrize(&(&u * d * u.transpose()))
}

/// Asymptotic covariance `V_i = U D Uᵀ` of `√p(π̂_i − π_i)`.
pub fn theorem1_covariance(signature: &SignatureMatrix, sigma: &SubjectCovariance) -> Result<DMatrix<f64>> {
    let p = signature.n_genes();
    if sigma.values.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "subject covariance is {}x{}, expected {p}x{p}",
            sigma.values.nrows(),
            sigma.values.ncols()
        )));
    }
    if !all_finite(&sigma.values) {
        return Err(Error::NonFinite("subject covariance"));
    }
    let design = signature.design()?;
    Ok(theorem1_with_design(&design, &sigma.values))
}

pub(crate) fn theorem1_with_design(design: &LsDesign, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let w = design.design();
    let wsw = symmetrize(&(w.transpose() * sigma * w));
    sandwich_covariance(design, &wsw) * design.n_genes() as f64
}

/// Two-sided standard normal quantile for a confidence level.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf((1.0 + level) / 2.0))
}

/// Per-coordinate Wald intervals truncated to `[0, 1]`.
pub fn wald_intervals(center: &[f64], covariance: &DMatrix<f64>, level: f64) -> Result<Vec<Interval>> {
    let z = normal_quantile(level)?;
    if covariance.shape() != (center.len(), center.len()) {
        return Err(Error::DimensionMismatch("covariance does not match estimate".into()));
    }
    Ok(center
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let half = z * covariance[(k, k)].max(0.0).sqrt();
            let lower = (c - half).clamp(0.0, 1.0);
            let upper = (c + half).clamp(0.0, 1.0);
            Interval {
                lower,
                upper: upper.max(lower),
            }
        })
        .collect())
}

pub fn confidence_intervals(est: &ProportionEstimate, level: f64) -> Result<Vec<Interval>> {
    est.confidence_intervals(level)
}

/// Unconstrained least-squares estimate with an iid-error covariance.
#[derive(Debug, Clone)]
pub struct OlsEstimate {
    pub sample_id: String,
    pub proportions: DVector<f64>,
    /// `σ̂²(WᵀW)⁻¹` with `σ̂² = RSS / (p − K)`.
    pub covariance: DMatrix<f64>,
    pub sigma2: f64,
}

impl OlsEstimate {
    pub fn confidence_intervals(&self, level: f64) -> Result<Vec<Interval>> {
        wald_intervals(self.proportions.as_slice(), &self.covariance, level)
    }
}

pub fn ols_baseline(signature: &SignatureMatrix, bulk: &BulkMatrix) -> Result<Vec<OlsEstimate>> {
    let (signature, bulk) = align_genes(signature, bulk, GenePolicy::Exact)?;
    let design = signature.design()?;
    ols_with_design(&design, &bulk)
}

pub(crate) fn ols_with_design(design: &LsDesign, bulk: &BulkMatrix) -> Result<Vec<OlsEstimate>> {
    let (p, k) = (design.n_genes(), design.n_types());
    if p <= k {
        return Err(Error::InsufficientSamples(format!(
            "OLS residual variance needs p > K (p = {p}, K = {k})"
        )));
    }
    (0..bulk.n_samples())
        .map(|i| {
            let y = bulk.column(i);
            let pi = design.ols(&y).map_err(|e| e.in_sample(&bulk.sample_ids[i]))?;
            let sigma2 = design.objective(&y, &pi) / (p - k) as f64;
            Ok(OlsEstimate {
                sample_id: bulk.sample_ids[i].clone(),
                proportions: pi,
                covariance: design.gram_inv() * sigma2,
                sigma2,
            })
        })
        .collect()
}

/// Replace a covariance by its nearest PSD matrix if it has meaningfully negative eigenvalues.
///
/// Returns whether a projection happened.
pub(crate) fn enforce_psd(cov: &mut DMatrix<f64>) -> bool {
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    if min_eigenvalue(cov) < -1e-12 * scale {
        *cov = crate::qp::nearest_psd(cov).expect("finite covariance");
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn orthonormal_signature(p: usize, k: usize) -> SignatureMatrix {
        // columns with WᵀW = p·I: scaled orthonormal basis from QR of a fixed matrix
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(&mut rng));
        let q = a.qr().q();
        SignatureMatrix::from_matrix(q * (p as f64).sqrt()).unwrap()
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DMatrix::from_fn(40, 3, |_, _| StandardNormal.sample(&mut rng));
        let truth = DVector::from_vec(vec![0.5, 1.0 / 3.0, 1.0 / 6.0]);
        let y = &w * &truth;
        let sig = SignatureMatrix::from_matrix(w).unwrap();
        let bulk = BulkMatrix::from_matrix(DMatrix::from_columns(&[y])).unwrap();
        let est = estimate_proportions(&sig, &bulk).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(est[0][k], truth[k], epsilon = 1e-10);
        }
        let ols = ols_baseline(&sig, &bulk).unwrap();
        assert_abs_diff_eq!(ols[0].sigma2, 0.0, epsilon = 1e-20);
        for k in 0..3 {
            assert_abs_diff_eq!(ols[0].proportions[k], truth[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn orthonormal_closed_form() {
        let (p, k, s2) = (30, 3, 2.5);
        let sig = orthonormal_signature(p, k);
        let sigma = SubjectCovariance {
            values: DMatrix::identity(p, p) * s2,
            sample_id: "s".into(),
        };
        let v = theorem1_covariance(&sig, &sigma).unwrap();
        let expected = (DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)) * s2;
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        assert_abs_diff_eq!((&v * ones(k)).amax(), 0.0, epsilon = 1e-12);

        let zero = SubjectCovariance {
            values: DMatrix::zeros(p, p),
            sample_id: "s".into(),
        };
        assert_abs_diff_eq!(theorem1_covariance(&sig, &zero).unwrap().amax(), 0.0);
    }

    #[test]
    fn interval_examples() {
        let est = ProportionEstimate::new(
            "s".into(),
            SimplexVector::new(vec![0.5, 0.5]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.01, -0.01, -0.01, 0.01]),
        );
        let ci = est.confidence_intervals(0.95).unwrap();
        // quantile evaluated independently: Φ⁻¹(0.975) = 1.959963984540054
        assert_abs_diff_eq!(ci[0].lower, 0.5 - 1.959963984540054 * 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(ci[0].upper, 0.5 + 1.959963984540054 * 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(ci[0].lower, 0.304, epsilon = 1e-3);

        let degenerate = ProportionEstimate::new(
            "s".into(),
            SimplexVector::new(vec![0.25, 0.75]).unwrap(),
            DMatrix::zeros(2, 2),
        );
        for (k, iv) in degenerate.confidence_intervals(0.9).unwrap().iter().enumerate() {
            assert_eq!(iv.lower, degenerate.proportions[k]);
            assert_eq!(iv.upper, degenerate.proportions[k]);
        }
        assert!(est.confidence_intervals(1.0).is_err());
        assert!(est.confidence_intervals(0.0).is_err());
    }

    #[test]
    fn intervals_truncate_to_unit_range() {
        let est = ProportionEstimate::new(
            "s".into(),
            SimplexVector::new(vec![0.02, 0.98]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.04, -0.04, -0.04, 0.04]),
        );
        let ci = est.confidence_intervals(0.95).unwrap();
        assert_eq!(ci[0].lower, 0.0);
        assert_eq!(ci[1].upper, 1.0);
        assert!(ci.iter().all(|c| c.width() >= 0.0));
    }

    #[test]
    fn boundary_warning_attached() {
        let est = ProportionEstimate::new(
            "s".into(),
            SimplexVector::new(vec![0.0, 1.0]).unwrap(),
            DMatrix::zeros(2, 2),
        );
        assert_eq!(est.warnings.len(), 1);
    }

    #[test]
    fn alignment_reorders_and_intersects() {
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let sig = SignatureMatrix::new(
            w,
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let bulk = BulkMatrix::new(
            DMatrix::from_row_slice(4, 1, &[3.0, 1.0, 2.0, 9.0]),
            vec!["c".into(), "a".into(), "b".into(), "zz".into()],
            vec!["s1".into()],
        )
        .unwrap();
        let err = align_genes(&sig, &bulk, GenePolicy::Exact).unwrap_err();
        assert!(err.to_string().contains("zz"));
        let (s2, b2) = align_genes(&sig, &bulk, GenePolicy::Intersect).unwrap();
        assert_eq!(s2.gene_ids, b2.gene_ids);
        assert_eq!(b2.values.column(0).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let err = SignatureMatrix::new(
            w,
            vec!["a".into(), "a".into(), "c".into()],
            vec!["x".into(), "y".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
