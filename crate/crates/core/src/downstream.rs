//! Resampling proportions for downstream analyses and counting repeated calls.

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deconv::ProportionEstimate;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, psd_factor};
use crate::qp::SimplexVector;
use crate::simgen::replicate_rng;

/// `M` resampled proportion sets; `draws[m][i]` belongs to sample `i`.
#[derive(Debug, Clone)]
pub struct ProportionDrawSet {
    pub draws: Vec<Vec<SimplexVector>>,
    pub sample_ids: Vec<String>,
    pub seed: u64,
}

impl ProportionDrawSet {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }
}

/// Factor of a proportion covariance, rejecting matrices that are not PSD.
pub fn draw_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    if min_eigenvalue(cov) < -1e-8 * scale {
        return Err(Error::NonPsd);
    }
    Ok(psd_factor(cov))
}

/// Unprojected Gaussian draw `π̂ + F ε`.
pub fn gaussian_draw<R: Rng + ?Sized>(center: &SimplexVector, factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let eps = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(rng));
    center.to_dvector() + factor * eps
}

/// Draw `m` proportion sets; draw `d` uses its own stream so draws can be produced in any order.
pub fn sample_proportion_sets(estimates: &[ProportionEstimate], m: usize, seed: u64) -> Result<ProportionDrawSet> {
    if m == 0 {
        return Err(Error::InvalidInput("number of draws must be at least 1".into()));
    }
    let factors = estimates
        .iter()
        .map(|e| draw_factor(&e.covariance).map_err(|err| err.in_sample(&e.sample_id)))
        .collect::<Result<Vec<_>>>()?;
    let draws = (0..m)
        .into_par_iter()
        .map(|d| {
            let mut rng = replicate_rng(seed, d as u64);
            estimates
                .iter()
                .zip(&factors)
                .map(|(e, f)| SimplexVector::clip_normalize(gaussian_draw(&e.proportions, f, &mut rng).as_slice()))
                .collect()
        })
        .collect();
    Ok(ProportionDrawSet {
        draws,
        sample_ids: estimates.iter().map(|e| e.sample_id.clone()).collect(),
        seed,
    })
}

/// One downstream p-value from draw `draw_index` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRecord {
    pub draw_index: usize,
    pub unit_id: String,
    pub cell_type: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CutoffRule {
    /// `ceil(Mα + 2·sqrt(Mα(1−α)))`.
    #[default]
    TwoSd,
    Fixed(usize),
}

impl CutoffRule {
    pub fn cutoff(self, m: usize, alpha: f64) -> usize {
        match self {
            CutoffRule::TwoSd => binomial_cutoff(m, alpha),
            CutoffRule::Fixed(c) => c,
        }
    }
}

/// Mean plus two standard deviations of a `Binomial(m, alpha)` count, rounded up.
pub fn binomial_cutoff(m: usize, alpha: f64) -> usize {
    let mean = m as f64 * alpha;
    (mean + 2.0 * (mean * (1.0 - alpha)).sqrt()).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallDecision {
    pub unit_id: String,
    pub cell_type: String,
    pub hit_count: usize,
    pub cutoff: usize,
    pub called: bool,
}

/// Count `p < alpha` over draws per (unit, cell type); call when the count exceeds the cutoff.
///
/// Output follows the order in which (unit, cell type) pairs first appear.
pub fn aggregate_calls(records: &[PValueRecord], m: usize, alpha: f64, rule: CutoffRule) -> Result<Vec<CallDecision>> {
    if m == 0 {
        return Err(Error::InvalidInput("number of draws must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    let cutoff = rule.cutoff(m, alpha);
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut seen = HashSet::new();
    let mut out: Vec<CallDecision> = Vec::new();
    for (row, r) in records.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.p_value) {
            return Err(Error::InvalidInput(format!("record {}: p-value {} outside [0, 1]", row + 1, r.p_value)));
        }
        if r.draw_index == 0 || r.draw_index > m {
            return Err(Error::InvalidInput(format!(
                "record {}: draw index {} outside 1..={m}",
                row + 1,
                r.draw_index
            )));
        }
        if !seen.insert((r.draw_index, r.unit_id.as_str(), r.cell_type.as_str())) {
            return Err(Error::InvalidInput(format!(
                "record {}: duplicate entry for draw {}, unit '{}', cell type '{}'",
                row + 1,
                r.draw_index,
                r.unit_id,
                r.cell_type
            )));
        }
        let slot = *index.entry((r.unit_id.as_str(), r.cell_type.as_str())).or_insert_with(|| {
            out.push(CallDecision {
                unit_id: r.unit_id.clone(),
                cell_type: r.cell_type.clone(),
                hit_count: 0,
                cutoff,
                called: false,
            });
            out.len() - 1
        });
        if r.p_value < alpha {
            out[slot].hit_count += 1;
        }
    }
    for d in &mut out {
        d.called = d.hit_count > d.cutoff;
    }
    Ok(out)
}
