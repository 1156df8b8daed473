//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projected gradient descent on `‖y − Wπ‖²` over the simplex, run to a fixed point.
pub fn projected_gradient(w: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
    let k = w.ncols();
    let gram = w.transpose() * w;
    let wy = w.transpose() * y;
    let lmax = gram.clone().symmetric_eigen().eigenvalues.max();
    let step = 1.0 / lmax;
    let mut x = vec![1.0 / k as f64; k];
    for _ in 0..5_000_000 {
        let xv = DVector::from_column_slice(&x);
        let grad = &gram * &xv - &wy;
        let cand: Vec<f64> = x.iter().zip(grad.iter()).map(|(a, g)| a - step * g).collect();
        let next = project_simplex(&cand);
        let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if change < 1e-15 {
            break;
        }
    }
    x
}

/// KKT residual of a simplex-constrained least-squares candidate.
pub fn simplex_kkt_residual(w: &DMatrix<f64>, y: &DVector<f64>, pi: &[f64]) -> f64 {
    let x = DVector::from_column_slice(pi);
    let grad = w.transpose() * (w * &x - y);
    let support: Vec<usize> = (0..pi.len()).filter(|&k| pi[k] > 1e-9).collect();
    let nu = support.iter().map(|&k| grad[k]).sum::<f64>() / support.len() as f64;
    let mut res: f64 = 0.0;
    for k in 0..pi.len() {
        if support.contains(&k) {
            res = res.max((grad[k] - nu).abs());
        } else {
            res = res.max((nu - grad[k]).max(0.0));
        }
    }
    res / (1.0 + grad.amax())
}

/// Plain sample covariance (divisor n − 1) of row vectors.
pub fn sample_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    (mean, cov)
}

/// Standard error of the sample covariance entries, via the variance of centered products.
pub fn covariance_standard_errors(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let (mean, cov) = sample_covariance(rows);
    let mut var: DMatrix<f64> = DMatrix::zeros(d, d);
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                let prod = (r[a] - mean[a]) * (r[b] - mean[b]);
                var[(a, b)] += (prod - cov[(a, b)]).powi(2) / (n - 1) as f64;
            }
        }
    }
    var.map(|v: f64| (v / n as f64).sqrt())
}
