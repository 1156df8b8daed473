mod common;

use approx::assert_abs_diff_eq;
use decals::qp::{nearest_psd, solve_equality_ls, solve_simplex_ls, LsDesign, LsProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

#[test]
fn seeded_instance_matches_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let w = gaussian_matrix(&mut rng, 30, 3);
    let truth = DVector::from_vec(vec![0.5, 0.3, 0.2]);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let y = &w * &truth + DVector::from_fn(30, |_, _| noise.sample(&mut rng));
    let oracle = common::projected_gradient(&w, &y);
    let pi = solve_simplex_ls(&LsProblem::new(w.clone(), y.clone())).unwrap();
    for k in 0..3 {
        assert_abs_diff_eq!(pi[k], oracle[k], epsilon = 1e-6);
    }
    assert!(common::simplex_kkt_residual(&w, &y, pi.as_slice()) < 1e-8);
}

#[test]
fn objective_not_worse_than_any_vertex() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let w = gaussian_matrix(&mut rng, 12, 4);
        let y = DVector::from_fn(12, |_, _| StandardNormal.sample(&mut rng));
        let design = LsDesign::new(w).unwrap();
        let pi = design.simplex(&y).unwrap().to_dvector();
        let obj = design.objective(&y, &pi);
        for k in 0..4 {
            let mut e = DVector::zeros(4);
            e[k] = 1.0;
            assert!(obj <= design.objective(&y, &e) + 1e-10);
        }
    }
}

#[test]
fn nearest_psd_beats_random_psd_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a = gaussian_matrix(&mut rng, 5, 5);
    let s = (&a + a.transpose()) * 0.5;
    assert!(s.clone().symmetric_eigen().eigenvalues.min() < 0.0, "probe needs an indefinite input");
    let proj = nearest_psd(&s).unwrap();
    assert!(proj.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
    let best = (&proj - &s).norm();
    for _ in 0..1000 {
        // random PSD matrix near the projection
        let b = gaussian_matrix(&mut rng, 5, 5) * 0.3;
        let cand = nearest_psd(&(&proj + &b * b.transpose() * 0.1 + (&b + b.transpose()) * 0.5)).unwrap();
        assert!((&cand - &s).norm() >= best - 1e-12);
    }
}

fn instance() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>)> {
    (2usize..=5, any::<u64>()).prop_flat_map(|(k, seed)| {
        (k + 1..=25).prop_map(move |p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = gaussian_matrix(&mut rng, p, k);
            let y = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            (w, y)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn simplex_output_is_on_the_simplex((w, y) in instance()) {
        let Ok(design) = LsDesign::new(w) else { return Ok(()) };
        let pi = design.simplex(&y).unwrap();
        prop_assert!(pi.as_slice().iter().all(|v| *v >= -1e-12));
        prop_assert!((pi.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn objectives_are_ordered((w, y) in instance()) {
        let Ok(design) = LsDesign::new(w) else { return Ok(()) };
        let simplex = design.objective(&y, &design.simplex(&y).unwrap().to_dvector());
        let eq = design.objective(&y, &design.equality(&y).unwrap());
        let ols = design.objective(&y, &design.ols(&y).unwrap());
        let slack = 1e-10 * (1.0 + y.norm_squared());
        prop_assert!(simplex >= eq - slack);
        prop_assert!(eq >= ols - slack);
    }

    #[test]
    fn equality_solution_sums_to_one((w, y) in instance()) {
        let Ok(design) = LsDesign::new(w) else { return Ok(()) };
        let eq = design.equality(&y).unwrap();
        prop_assert!((eq.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn interior_solutions_agree_with_equality_solver((w, y) in instance()) {
        let Ok(design) = LsDesign::new(w) else { return Ok(()) };
        let pi = design.simplex(&y).unwrap();
        if pi.as_slice().iter().all(|v| *v > 1e-6) {
            let eq = design.equality(&y).unwrap();
            for k in 0..pi.len() {
                prop_assert!((pi[k] - eq[k]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn column_permutation_permutes_solution((w, y) in instance(), rot in 1usize..5) {
        let k = w.ncols();
        let Ok(design) = LsDesign::new(w.clone()) else { return Ok(()) };
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let permuted = DMatrix::from_fn(w.nrows(), k, |r, c| w[(r, perm[c])]);
        let a = design.simplex(&y).unwrap();
        let b = LsDesign::new(permuted).unwrap().simplex(&y).unwrap();
        for c in 0..k {
            prop_assert!((b[c] - a[perm[c]]).abs() <= 1e-9);
        }
    }

    #[test]
    fn nearest_psd_is_idempotent(seed in any::<u64>(), d in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_matrix(&mut rng, d, d);
        let s = (&a + a.transpose()) * 0.5;
        let once = nearest_psd(&s).unwrap();
        let twice = nearest_psd(&once).unwrap();
        prop_assert!((&once - &twice).amax() <= 1e-10);
        prop_assert!(once.symmetric_eigen().eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn simplex_solver_satisfies_kkt((w, y) in instance()) {
        let Ok(design) = LsDesign::new(w.clone()) else { return Ok(()) };
        let pi = design.simplex(&y).unwrap();
        prop_assert!(common::simplex_kkt_residual(&w, &y, pi.as_slice()) <= 1e-8);
    }
}

#[test]
fn equality_solver_matches_lagrangian_system() {
    // independent route: solve the bordered KKT system directly
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = gaussian_matrix(&mut rng, 15, 4);
    let y = DVector::from_fn(15, |_, _| StandardNormal.sample(&mut rng));
    let gram = w.transpose() * &w;
    let mut kkt = DMatrix::zeros(5, 5);
    kkt.view_mut((0, 0), (4, 4)).copy_from(&gram);
    for i in 0..4 {
        kkt[(i, 4)] = 1.0;
        kkt[(4, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(5);
    rhs.rows_mut(0, 4).copy_from(&(w.transpose() * &y));
    rhs[4] = 1.0;
    let sol = kkt.lu().solve(&rhs).unwrap();
    let eq = solve_equality_ls(&LsProblem::new(w, y)).unwrap();
    for k in 0..4 {
        assert_abs_diff_eq!(eq[k], sol[k], epsilon = 1e-10);
    }
}
