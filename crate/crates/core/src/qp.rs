//! Simplex- and equality-constrained least squares, and the PSD projection.
//!
//! The simplex solver is a Goldfarb–Idnani dual active-set method. It starts
//! from the unconstrained least-squares solution, keeps the working set in a
//! factored form (`J = L⁻ᵀ Q`, upper-triangular `R`) and updates both with
//! Givens rotations when a constraint enters or leaves the active set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, eigen_map, ones, sym_eigen, symmetrize};

/// Smallest admissible ratio between the extreme eigenvalues of `WᵀW`.
pub const CONDITION_RATIO: f64 = 1e-10;

const SIMPLEX_SUM_TOL: f64 = 1e-10;
const SIMPLEX_NEG_TOL: f64 = 1e-12;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates `values` against the simplex invariants without modifying them.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty simplex vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simplex vector"));
        }
        if let Some(v) = values.iter().find(|v| **v < -SIMPLEX_NEG_TOL) {
            return Err(Error::InvalidInput(format!("negative proportion {v}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!("proportions sum to {sum}, not 1")));
        }
        Ok(SimplexVector(values))
    }

    /// Clip negative entries to zero and rescale to unit sum.
    ///
    /// Falls back to the uniform vector if nothing positive remains.
    pub fn clip_normalize(values: &[f64]) -> Self {
        let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
        let sum: f64 = clipped.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            let k = values.len().max(1);
            return SimplexVector(vec![1.0 / k as f64; k]);
        }
        SimplexVector(clipped.into_iter().map(|v| v / sum).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A validated design matrix with its gram factorization, reusable across responses.
#[derive(Debug, Clone)]
pub struct LsDesign {
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    gram_inv: DMatrix<f64>,
}

impl LsDesign {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        let (p, k) = design.shape();
        if k < 2 || p < k {
            return Err(Error::DimensionMismatch(format!(
                "design must satisfy p >= K >= 2, got p = {p}, K = {k}"
            )));
        }
        if !all_finite(&design) {
            return Err(Error::NonFinite("design matrix"));
        }
        let gram = symmetrize(&(design.transpose() * &design));
        check_conditioning(&gram)?;
        let chol = Cholesky::new(gram.clone()).ok_or(Error::SingularDesign { ratio: 0.0 })?;
        let gram_inv = symmetrize(&chol.inverse());
        Ok(LsDesign {
            design,
            gram,
            chol,
            gram_inv,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    pub fn n_genes(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_types(&self) -> usize {
        self.design.ncols()
    }

    fn check_response(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.n_genes() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries, design has {} rows",
                y.len(),
                self.n_genes()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        Ok(())
    }

    /// Unconstrained least squares `(WᵀW)⁻¹Wᵀy`.
    pub fn ols(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_response(y)?;
        Ok(self.chol.solve(&(self.design.transpose() * y)))
    }

    /// Least squares under `1ᵀπ = 1` only.
    pub fn equality(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let ols = self.ols(y)?;
        let k = self.n_types();
        let g1 = &self.gram_inv * ones(k);
        let denom = g1.sum();
        let mut pi = &ols - &g1 * ((ols.sum() - 1.0) / denom);
        // one refinement pass against rounding in the sum
        let excess = pi.sum() - 1.0;
        pi -= &g1 * (excess / denom);
        Ok(pi)
    }

    /// Least squares over the probability simplex.
    pub fn simplex(&self, y: &DVector<f64>) -> Result<SimplexVector> {
        self.check_response(y)?;
        let k = self.n_types();
        let linear = self.design.transpose() * y;
        let x = dual_active_set(&self.chol, &linear, k)?;
        Ok(SimplexVector::clip_normalize(x.as_slice()))
    }

    /// `‖y − Wπ‖²`.
    pub fn objective(&self, y: &DVector<f64>, pi: &DVector<f64>) -> f64 {
        (y - &self.design * pi).norm_squared()
    }
}

/// Rejects gram matrices whose eigenvalue spread exceeds [`CONDITION_RATIO`].
pub fn check_conditioning(gram: &DMatrix<f64>) -> Result<()> {
    let eig = sym_eigen(gram).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(max > 0.0) || !(min > CONDITION_RATIO * max) {
        return Err(Error::SingularDesign { ratio });
    }
    Ok(())
}

/// One least-squares instance: a `p × K` design and a length-`p` response.
#[derive(Debug, Clone)]
pub struct LsProblem {
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
}

impl LsProblem {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>) -> Self {
        LsProblem { design, response }
    }
}

pub fn solve_simplex_ls(problem: &LsProblem) -> Result<SimplexVector> {
    LsDesign::new(problem.design.clone())?.simplex(&problem.response)
}

pub fn solve_equality_ls(problem: &LsProblem) -> Result<DVector<f64>> {
    LsDesign::new(problem.design.clone())?.equality(&problem.response)
}

/// Nearest symmetric PSD matrix in Frobenius norm (eigenvalue clipping).
pub fn nearest_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "nearest_psd needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if !all_finite(s) {
        return Err(Error::NonFinite("matrix passed to nearest_psd"));
    }
    Ok(eigen_map(&sym_eigen(s), |l| l.max(0.0)))
}

/// Working-set state of the dual method.
struct WorkingSet {
    /// `L⁻ᵀ` rotated so that its first `q` columns span the active normals.
    j: DMatrix<f64>,
    /// Upper triangular, leading `q × q` block in use.
    r: DMatrix<f64>,
    active: Vec<Constraint>,
    multipliers: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Constraint {
    /// `1ᵀx = 1`, possibly sign-flipped when it entered.
    SumToOne { flipped: bool },
    /// `x_k ≥ 0`.
    NonNegative(usize),
}

impl Constraint {
    fn normal(&self, k: usize) -> DVector<f64> {
        match *self {
            Constraint::SumToOne { flipped } => ones(k) * if flipped { -1.0 } else { 1.0 },
            Constraint::NonNegative(idx) => {
                let mut n = DVector::zeros(k);
                n[idx] = 1.0;
                n
            }
        }
    }

    fn slack(&self, x: &DVector<f64>) -> f64 {
        match *self {
            Constraint::SumToOne { flipped } => {
                let s = x.sum() - 1.0;
                if flipped {
                    -s
                } else {
                    s
                }
            }
            Constraint::NonNegative(idx) => x[idx],
        }
    }
}

impl WorkingSet {
    fn q(&self) -> usize {
        self.active.len()
    }

    /// Rotate `J` so that `Jᵀn` is zero below position `q`, then append to `R`.
    fn add(&mut self, mut d: DVector<f64>, constraint: Constraint, multiplier: f64) {
        let k = d.len();
        let q = self.q();
        for i in (q + 1..k).rev() {
            let (a, b) = (d[i - 1], d[i]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[i - 1] = h;
            d[i] = 0.0;
            rotate_columns(&mut self.j, i - 1, i, c, s);
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.active.push(constraint);
        self.multipliers.push(multiplier);
    }

    /// Remove the active constraint at `pos` and restore triangularity of `R`.
    fn drop(&mut self, pos: usize) {
        let q = self.q();
        for col in pos..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for col in pos..q - 1 {
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for cc in col..q - 1 {
                let (top, bot) = (self.r[(col, cc)], self.r[(col + 1, cc)]);
                self.r[(col, cc)] = c * top + s * bot;
                self.r[(col + 1, cc)] = -s * top + c * bot;
            }
            rotate_columns(&mut self.j, col, col + 1, c, s);
        }
        self.active.remove(pos);
        self.multipliers.remove(pos);
    }

    /// Solve the leading `q × q` triangular system `R r = d[..q]`.
    fn dual_direction(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q();
        let mut out = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for jj in i + 1..q {
                acc -= self.r[(i, jj)] * out[jj];
            }
            out[i] = acc / self.r[(i, i)];
        }
        out
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let (x, y) = (m[(row, a)], m[(row, b)]);
        m[(row, a)] = c * x + s * y;
        m[(row, b)] = -s * x + c * y;
    }
}

/// Minimize `½xᵀGx − dᵀx` subject to `1ᵀx = 1`, `x ≥ 0`, with `G = LLᵀ` given.
fn dual_active_set(chol: &Cholesky<f64, Dyn>, linear: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    let max_changes = 50 * (k + 1);
    let feas_tol = 1e-13;

    let mut x = chol.solve(linear);
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::SingularDesign { ratio: 0.0 })?;
    let mut ws = WorkingSet {
        j: l_inv.transpose(),
        r: DMatrix::zeros(k, k),
        active: Vec::with_capacity(k),
        multipliers: Vec::with_capacity(k),
    };
    // zero-direction threshold relative to the scale of G⁻¹
    let z_tol = 1e-12 * l_inv.amax().powi(2);
    let mut changes = 0usize;
    let mut equality_done = false;

    loop {
        // pick the entering constraint: the equality first, then the most violated bound
        let entering = if !equality_done {
            equality_done = true;
            Constraint::SumToOne {
                flipped: x.sum() - 1.0 > 0.0,
            }
        } else {
            let scale = 1.0 + x.amax();
            let candidate = (0..k)
                .filter(|idx| !ws.active.contains(&Constraint::NonNegative(*idx)))
                .map(|idx| (idx, x[idx]))
                .filter(|(_, s)| *s < -feas_tol * scale)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match candidate {
                Some((idx, _)) => Constraint::NonNegative(idx),
                None => return Ok(x),
            }
        };
        let normal = entering.normal(k);
        let mut entering_multiplier = 0.0;
        loop {
            changes += 1;
            if changes > max_changes {
                return Err(Error::MaxIterations(max_changes));
            }
            let q = ws.q();
            let d = ws.j.transpose() * &normal;
            let z = ws.j.columns(q, k - q) * d.rows(q, k - q);
            let r = ws.dual_direction(&d);

            // partial (dual) step: largest move keeping active bound multipliers nonnegative
            let mut t_partial = f64::INFINITY;
            let mut blocking = None;
            for (pos, (c, rj)) in ws.active.iter().zip(&r).enumerate() {
                if matches!(c, Constraint::NonNegative(_)) && *rj > 0.0 {
                    let ratio = ws.multipliers[pos] / rj;
                    if ratio < t_partial {
                        t_partial = ratio;
                        blocking = Some(pos);
                    }
                }
            }
            // full (primal) step
            let zn = z.dot(&normal);
            let t_full = if z.amax() > z_tol && zn > 0.0 {
                -entering.slack(&x) / zn
            } else {
                f64::INFINITY
            };
            let t = t_partial.min(t_full);
            if !t.is_finite() {
                return Err(Error::InvalidInput("constraint set is infeasible".into()));
            }

            for (u, rj) in ws.multipliers.iter_mut().zip(&r) {
                *u -= t * rj;
            }
            entering_multiplier += t;
            if t_full.is_finite() {
                x += &z * t;
            }
            if t_full <= t_partial {
                ws.add(d, entering, entering_multiplier);
                break;
            }
            let pos = blocking.expect("finite partial step has a blocking constraint");
            ws.drop(pos);
        }
    }
}
