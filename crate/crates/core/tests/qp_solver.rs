mod common;

use ccopf::qp::{
    balance_matrix, check_kkt, export_triplets, import_triplets, ramp_matrix, solve_qp, CompactQp,
    QpLayout, DEFAULT_TOL,
};
use ccopf::Error;
use common::{dual_gradient_qp, random_qp, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn bare(q: DMatrix<f64>, c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> CompactQp {
    let n = c.len();
    CompactQp {
        q,
        c,
        a,
        b,
        layout: QpLayout {
            gens: vec![n],
            horizon: 1,
            states: 0,
        },
    }
}

fn from_random(seed: u64, n: usize, m: usize) -> CompactQp {
    let r = random_qp(&mut rng(seed), n, m);
    bare(r.q, r.c, r.a, r.b)
}

#[test]
fn ten_variable_qp_matches_dual_gradient_oracle() {
    for seed in 0..5 {
        let qp = from_random(seed, 10, 20);
        let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
        let oracle = dual_gradient_qp(&qp.q, &qp.c, &qp.a, &qp.b, 1e-13, 2_000_000);
        let f_oracle = qp.objective(&oracle);
        let rel = (sol.objective - f_oracle).abs() / f_oracle.abs().max(1.0);
        assert!(rel <= 1e-7, "seed {seed}: rel {rel:e}");
        assert!((&sol.x - &oracle).amax() <= 1e-6, "seed {seed}");
        assert!(sol.kkt.max_residual() <= 1e-8, "seed {seed}: {:?}", sol.kkt);
    }
}

#[test]
fn perturbed_optimum_has_stationarity_residual() {
    let qp = from_random(7, 10, 20);
    let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
    let mut x = sol.x.clone();
    x[0] += 1e-3;
    let r = check_kkt(&qp, &x, &sol.lambda);
    assert!(r.stationarity > 1e-4, "{r:?}");
}

#[test]
fn negative_multiplier_is_flagged() {
    let qp = bare(
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 0.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, -1.0),
    );
    let r = check_kkt(
        &qp,
        &DVector::from_element(1, -1.0),
        &DVector::from_element(1, -1.0),
    );
    assert!(r.dual_infeasible);
    assert_eq!(r.min_multiplier, -1.0);
}

#[test]
fn empty_feasible_set_is_reported() {
    // x ≤ −1 and −x ≤ −1
    let qp = bare(
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 0.0),
        DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
        DVector::from_column_slice(&[-1.0, -1.0]),
    );
    assert!(matches!(
        solve_qp(&qp, DEFAULT_TOL),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn repeated_solves_are_identical() {
    let qp = from_random(3, 12, 30);
    let a = solve_qp(&qp, DEFAULT_TOL).unwrap();
    let b = solve_qp(&qp, DEFAULT_TOL).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.lambda, b.lambda);
}

fn qp(q: &[f64], c: &[f64], a: &[f64], b: &[f64]) -> CompactQp {
    let n = c.len();
    let m = b.len();
    CompactQp {
        q: DMatrix::from_row_slice(n, n, q),
        c: DVector::from_column_slice(c),
        a: DMatrix::from_row_slice(m, n, a),
        b: DVector::from_column_slice(b),
        layout: QpLayout::default(),
    }
}

#[test]
fn active_bound() {
    let p = qp(&[1.0], &[0.0], &[1.0], &[-1.0]);
    let sol = solve_qp(&p, 1e-10).unwrap();
    assert!((sol.x[0] + 1.0).abs() < 1e-8);
    assert!((sol.lambda[0] - 1.0).abs() < 1e-6);
}

#[test]
fn unconstrained_stationary_point() {
    let p = qp(&[1.0], &[1.0], &[], &[]);
    let sol = solve_qp(&p, 1e-10).unwrap();
    assert!((sol.x[0] + 1.0).abs() < 1e-10);
}

#[test]
fn kkt_of_hand_optimum() {
    let p = qp(&[1.0], &[0.0], &[1.0], &[-1.0]);
    let r = check_kkt(
        &p,
        &DVector::from_element(1, -1.0),
        &DVector::from_element(1, 1.0),
    );
    assert!(r.max_residual() <= 1e-12);
    assert!(!r.dual_infeasible);
    let r = check_kkt(
        &p,
        &DVector::from_element(1, -1.0 + 1e-3),
        &DVector::from_element(1, 1.0),
    );
    assert!(r.stationarity > 1e-4);
    let r = check_kkt(
        &p,
        &DVector::from_element(1, -1.0),
        &DVector::from_element(1, -0.5),
    );
    assert!(r.dual_infeasible);
}

#[test]
fn infeasible_is_reported() {
    // x <= -1 and -x <= -1
    let p = qp(&[1.0], &[0.0], &[1.0, -1.0], &[-1.0, -1.0]);
    assert!(matches!(solve_qp(&p, 1e-8), Err(Error::Infeasible(_))));
}

#[test]
fn zero_row_with_negative_rhs_is_infeasible() {
    let p = qp(&[1.0], &[0.0], &[0.0], &[-1.0]);
    assert!(matches!(solve_qp(&p, 1e-8), Err(Error::Infeasible(_))));
}

#[test]
fn ramp_and_balance_patterns() {
    let e = ramp_matrix(2, 3);
    assert_eq!(e.shape(), (4, 6));
    assert_eq!(
        e.row(1).iter().copied().collect::<Vec<_>>(),
        vec![0.0, -1.0, 0.0, 1.0, 0.0, 0.0]
    );
    assert_eq!(ramp_matrix(3, 1).nrows(), 0);
    let k = balance_matrix(1, 2);
    assert_eq!(k, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]));
}

#[test]
fn triplet_round_trip() {
    let p = qp(
        &[2.0, 0.5, 0.5, 1.0],
        &[1.0, 0.0],
        &[1.0, -1.0, 0.0, 3.0],
        &[1.0, 0.0],
    );
    let back = import_triplets(&export_triplets(&p)).unwrap();
    assert_eq!(back.q, p.q);
    assert_eq!(back.c, p.c);
    assert_eq!(back.a, p.a);
    assert_eq!(back.b, p.b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solution_satisfies_kkt(seed in any::<u64>(), n in 2usize..12, m in 1usize..30) {
        let qp = from_random(seed, n, m);
        let sol = solve_qp(&qp, DEFAULT_TOL).unwrap();
        let scale = 1.0 + sol.x.amax() + sol.lambda.amax();
        prop_assert!(sol.kkt.stationarity <= 1e-7 * scale, "{:?}", sol.kkt);
        prop_assert!(sol.kkt.primal_infeasibility <= 1e-8 * scale, "{:?}", sol.kkt);
        prop_assert!(sol.kkt.complementarity <= 1e-7 * scale, "{:?}", sol.kkt);
        prop_assert!(!sol.kkt.dual_infeasible);
    }

    #[test]
    fn positive_row_scaling_keeps_the_optimum(seed in any::<u64>(), n in 2usize..10, m in 1usize..20) {
        let qp = from_random(seed, n, m);
        let mut r = rng(seed ^ 0xabc);
        let scales = DVector::from_fn(m, |_, _| rand::Rng::random_range(&mut r, 0.5..2.0));
        let mut scaled = qp.clone();
        for i in 0..m {
            let s = scales[i];
            scaled.a.row_mut(i).scale_mut(s);
            scaled.b[i] *= s;
        }
        let x0 = solve_qp(&qp, DEFAULT_TOL).unwrap().x;
        let x1 = solve_qp(&scaled, DEFAULT_TOL).unwrap().x;
        prop_assert!((&x0 - &x1).amax() <= 1e-7 * (1.0 + x0.amax()));
    }
}
