mod common;

use ccopf::central::formulate;
use ccopf::dlpf::{assemble_dlpf, invert_oracle, mapping_coefficients, state_functional};
use ccopf::grid_case::MonitoredState;
use ccopf::wind::{
    rhs_state, rhs_supply_demand, JointComponent, JointGmm, ScalarComponent, ScalarGmm, WindModel,
};
use ccopf::Error;
use common::{empirical_quantile, quadrature_cdf, rng, sample_joint_gmm, toy2};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn mixture(parts: &[(f64, f64, f64)]) -> ScalarGmm {
    ScalarGmm::new(
        parts
            .iter()
            .map(|&(weight, mean, variance)| ScalarComponent {
                weight,
                mean,
                variance,
            })
            .collect(),
    )
    .unwrap()
}

/// `(weight, mean, covariance)` components for the sampling oracle.
type OracleComponents = Vec<(f64, DVector<f64>, DMatrix<f64>)>;

fn two_farm_gmm() -> (JointGmm, OracleComponents) {
    let raw = [
        (
            0.6,
            vec![0.8, 0.5],
            vec![vec![0.04, 0.01], vec![0.01, 0.02]],
        ),
        (
            0.4,
            vec![0.3, 0.6],
            vec![vec![0.02, -0.005], vec![-0.005, 0.03]],
        ),
    ];
    let joint = JointGmm::new(
        raw.iter()
            .map(|(w, m, c)| JointComponent {
                weight: *w,
                mean: m.clone(),
                covariance: c.clone(),
            })
            .collect(),
    )
    .unwrap();
    let oracle = raw
        .iter()
        .map(|(w, m, c)| {
            (
                *w,
                DVector::from_column_slice(m),
                DMatrix::from_fn(2, 2, |i, j| c[i][j]),
            )
        })
        .collect();
    (joint, oracle)
}

#[test]
fn three_component_cdf_matches_quadrature() {
    let parts = [(0.2, -1.0, 0.3), (0.5, 0.4, 0.05), (0.3, 2.0, 1.2)];
    let g = mixture(&parts);
    for x in [0.4, -0.7, 1.1, 3.0] {
        let q = quadrature_cdf(&parts, x);
        assert!((g.cdf(x) - q).abs() <= 1e-8, "x {x}: {} vs {q}", g.cdf(x));
    }
}

#[test]
fn normal_upper_quantile() {
    // 0.95 quantile of the standard normal to 16 digits
    let q = ScalarGmm::normal(0.0, 1.0).quantile(0.95).unwrap();
    assert!((q - 1.6448536269514722).abs() <= 1e-8, "{q}");
}

#[test]
fn projection_matches_sampled_distribution() {
    let (joint, oracle) = two_farm_gmm();
    let mut r = rng(11);
    let a = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let proj = joint.project(&a, 0.3).unwrap();
    let a_vec = DVector::from_column_slice(&a);
    let mut samples: Vec<f64> = sample_joint_gmm(&mut r, &oracle, 100_000)
        .iter()
        .map(|w| a_vec.dot(w) + 0.3)
        .collect();
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let sup = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = proj.cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(sup <= 0.01, "sup deviation {sup}");
}

#[test]
fn zero_wind_balance_rhs_is_negative_load() {
    let mut case = toy2();
    case.wind_farms.clear();
    case.wind = WindModel::stationary(JointGmm::point_mass(Vec::new()));
    for t in 0..case.horizon {
        let load: f64 = case.loads.iter().map(|l| l.active[t]).sum();
        assert_eq!(rhs_supply_demand(&case, 1e-4, t).unwrap(), -load);
    }
}

#[test]
fn median_wind_balance_rhs_for_one_gaussian_farm() {
    let mut case = toy2();
    case.wind = WindModel::stationary(
        JointGmm::new(vec![JointComponent {
            weight: 1.0,
            mean: vec![0.45],
            covariance: vec![vec![0.02]],
        }])
        .unwrap(),
    );
    let load: f64 = case.loads.iter().map(|l| l.active[1]).sum();
    let v = rhs_supply_demand(&case, 0.5, 1).unwrap();
    assert!((v - (0.45 - load)).abs() <= 1e-10, "{v}");
}

#[test]
fn two_farm_balance_rhs_matches_sampling() {
    let (joint, oracle) = two_farm_gmm();
    let mut case = toy2();
    case.wind_farms.push(ccopf::grid_case::WindFarm {
        id: 2,
        bus: 2,
        region: 1,
        power_factor_angle: 0.0,
    });
    case.wind = WindModel::stationary(joint);
    let eps = 0.05;
    let n = 200_000;
    let totals: Vec<f64> = sample_joint_gmm(&mut rng(5), &oracle, n)
        .iter()
        .map(|w| w.sum())
        .collect();
    let load: f64 = case.loads.iter().map(|l| l.active[0]).sum();
    let v = rhs_supply_demand(&case, eps, 0).unwrap();
    // the sampled probability mass below the computed quantile is within
    // three standard errors of eps
    let below = totals.iter().filter(|&&x| x <= v + load).count() as f64 / n as f64;
    let se = (eps * (1.0 - eps) / n as f64).sqrt();
    assert!((below - eps).abs() <= 3.0 * se, "mass {below}, se {se}");
    let emp = empirical_quantile(totals, eps) - load;
    assert!((emp - v).abs() <= 0.01, "{emp} vs {v}");
}

#[test]
fn symmetric_state_quantile_at_half_is_the_mean() {
    let mut case = toy2();
    case.wind = WindModel::stationary(
        JointGmm::new(vec![JointComponent {
            weight: 1.0,
            mean: vec![0.4],
            covariance: vec![vec![0.03]],
        }])
        .unwrap(),
    );
    let sys = assemble_dlpf(&case).unwrap();
    let maps = mapping_coefficients(&sys, &invert_oracle(&sys).unwrap(), &case).unwrap();
    for (s, m) in maps.states.iter().enumerate() {
        let mut expect = m.upper - m.xi;
        for (k, l) in case.loads.iter().enumerate() {
            expect -= m.load_active[k] * l.active[0] + m.load_reactive[k] * l.reactive[0];
        }
        expect -= m.wind_weights(&case)[0] * 0.4;
        let got = rhs_state(&case, &maps, 0.5, s, 0).unwrap();
        assert!(
            (got - expect).abs() <= 1e-10,
            "state {s}: {got} vs {expect}"
        );
    }
}

#[test]
fn zero_wind_zero_load_state_rhs_is_limit_minus_constant() {
    let mut case = toy2();
    case.wind_farms.clear();
    case.wind = WindModel::stationary(JointGmm::point_mass(Vec::new()));
    for l in &mut case.loads {
        l.active.iter_mut().for_each(|v| *v = 0.0);
        l.reactive.iter_mut().for_each(|v| *v = 0.0);
    }
    case.monitored = vec![MonitoredState::LineFlow {
        line: 4,
        reverse: false,
    }];
    let sys = assemble_dlpf(&case).unwrap();
    let maps = mapping_coefficients(&sys, &invert_oracle(&sys).unwrap(), &case).unwrap();
    let m = &maps.states[0];
    assert_eq!(rhs_state(&case, &maps, 0.05, 0, 0).unwrap(), m.upper - m.xi);
}

#[test]
fn case39_state_rhs_matches_sampled_recomputation() {
    let case = common::case39();
    let (alpha, t, s) = (0.05, 10, 0);
    let f = formulate(&case, 1e-4, alpha).unwrap();
    let got = f.delta[t * f.maps.len() + s];

    // state with zero generation, straight from linear solves
    let sys = assemble_dlpf(&case).unwrap();
    let (func, upper) = state_functional(&case, &sys.layout, &case.monitored[s]).unwrap();
    let fixed = sys.layout.fixed_values();
    let gens = vec![0.0; case.generators.len()];
    let farms = case.wind_farms.len();
    let state_at = |wind: &[f64]| {
        let u = sys.solve(&sys.injections(&case, &gens, wind, t)).unwrap();
        func.evaluate(&u, &fixed)
    };
    let base = state_at(&vec![0.0; farms]);
    let slopes: Vec<f64> = (0..farms)
        .map(|k| {
            let mut w = vec![0.0; farms];
            w[k] = 1.0;
            state_at(&w) - base
        })
        .collect();
    let gmm = case.wind.at(t);
    let oracle: Vec<_> = (0..gmm.weights().len())
        .map(|k| {
            (
                gmm.weights()[k],
                gmm.means()[k].clone(),
                gmm.covariances()[k].clone(),
            )
        })
        .collect();
    let states: Vec<f64> = sample_joint_gmm(&mut rng(9), &oracle, 400_000)
        .iter()
        .map(|w| base + slopes.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let expect = upper - empirical_quantile(states, 1.0 - alpha);
    assert!((got - expect).abs() <= 1e-3, "{got} vs {expect}");
}

fn std_normal() -> ScalarGmm {
    ScalarGmm::normal(0.0, 1.0)
}

#[test]
fn cdf_of_standard_normal_at_zero_is_half() {
    assert!((std_normal().cdf(0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn cdf_counts_point_masses_as_steps() {
    let g = ScalarGmm::new(vec![
        ScalarComponent {
            weight: 0.5,
            mean: -1.0,
            variance: 0.0,
        },
        ScalarComponent {
            weight: 0.5,
            mean: 1.0,
            variance: 0.0,
        },
    ])
    .unwrap();
    assert_eq!(g.cdf(0.0), 0.5);
    assert_eq!(g.cdf(-1.0), 0.5);
    assert_eq!(g.cdf(-1.0 - 1e-12), 0.0);
    // left endpoint of the flat segment
    assert_eq!(g.quantile(0.5).unwrap(), -1.0);
    assert_eq!(g.quantile(0.75).unwrap(), 1.0);
}

#[test]
fn median_of_standard_normal() {
    assert!(std_normal().quantile(0.5).unwrap().abs() <= 1e-10);
}

#[test]
fn degenerate_mixture_quantile_is_the_atom() {
    let g = ScalarGmm::normal(3.25, 0.0);
    for p in [1e-9, 1e-4, 0.3, 0.5, 0.95, 1.0 - 1e-9] {
        assert_eq!(g.quantile(p).unwrap(), 3.25);
    }
}

#[test]
fn quantile_rejects_out_of_range_probabilities() {
    for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(
            std_normal().quantile(p),
            Err(Error::Probability(_))
        ));
    }
}

#[test]
fn quantile_meets_cdf_tolerance_in_the_tail() {
    let g = ScalarGmm::new(vec![
        ScalarComponent {
            weight: 0.3,
            mean: 0.4,
            variance: 0.01,
        },
        ScalarComponent {
            weight: 0.7,
            mean: 2.0,
            variance: 0.36,
        },
    ])
    .unwrap();
    for p in [1e-4, 0.05, 0.5, 0.95] {
        let x = g.quantile(p).unwrap();
        assert!((g.cdf(x) - p).abs() <= 1e-10, "p={p}");
    }
}

#[test]
fn zero_projection_collapses_to_offset() {
    let gmm = JointGmm::new(vec![JointComponent {
        weight: 1.0,
        mean: vec![1.0, 2.0],
        covariance: vec![vec![1.0, 0.2], vec![0.2, 2.0]],
    }])
    .unwrap();
    let s = gmm.project(&[0.0, 0.0], 7.5).unwrap();
    assert_eq!(s.components.len(), 1);
    assert_eq!(s.components[0].mean, 7.5);
    assert_eq!(s.components[0].variance, 0.0);
    assert_eq!(s.quantile(0.01).unwrap(), 7.5);
}

#[test]
fn coordinate_projection_is_the_marginal() {
    let gmm = JointGmm::new(vec![JointComponent {
        weight: 1.0,
        mean: vec![1.0, 2.0],
        covariance: vec![vec![1.0, 0.2], vec![0.2, 2.0]],
    }])
    .unwrap();
    let s = gmm.project(&[0.0, 1.0], 0.0).unwrap();
    assert_eq!(s.components[0].mean, 2.0);
    assert_eq!(s.components[0].variance, 2.0);
}

#[test]
fn project_checks_dimension() {
    let gmm = JointGmm::point_mass(vec![1.0, 2.0]);
    assert!(matches!(gmm.project(&[1.0], 0.0), Err(Error::Dimension(_))));
}

#[test]
fn joint_mixture_validation() {
    let bad_weights = JointGmm::new(vec![JointComponent {
        weight: 0.9,
        mean: vec![0.0],
        covariance: vec![vec![1.0]],
    }]);
    assert!(bad_weights.is_err());
    let not_psd = JointGmm::new(vec![JointComponent {
        weight: 1.0,
        mean: vec![0.0, 0.0],
        covariance: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
    }]);
    assert!(not_psd.is_err());
    let asym = JointGmm::new(vec![JointComponent {
        weight: 1.0,
        mean: vec![0.0, 0.0],
        covariance: vec![vec![1.0, 0.1], vec![0.0, 1.0]],
    }]);
    assert!(asym.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_inverts_cdf(
        m1 in -3.0f64..3.0, m2 in -3.0f64..3.0,
        v1 in 0.01f64..2.0, v2 in 0.01f64..2.0,
        w in 0.05f64..0.95, p in 0.001f64..0.999,
    ) {
        let g = mixture(&[(w, m1, v1), (1.0 - w, m2, v2)]);
        let q = g.quantile(p).unwrap();
        prop_assert!((g.cdf(q) - p).abs() <= 1e-9);
        let x = m1 + v1.sqrt() * (p - 0.5);
        let back = g.quantile(g.cdf(x)).unwrap();
        prop_assert!((back - x).abs() <= 1e-7, "{} vs {}", back, x);
    }

    #[test]
    fn cdf_is_monotone(m in -2.0f64..2.0, v in 0.0f64..1.0, a in -5.0f64..5.0, d in 0.0f64..3.0) {
        let g = mixture(&[(0.5, m, v), (0.5, -m, 0.3)]);
        prop_assert!(g.cdf(a) <= g.cdf(a + d));
    }

    #[test]
    fn projection_mean_is_linear(a0 in -2.0f64..2.0, a1 in -2.0f64..2.0, b0 in -2.0f64..2.0, b1 in -2.0f64..2.0) {
        let (joint, _) = two_farm_gmm();
        let pa = joint.project(&[a0, a1], 0.0).unwrap();
        let pb = joint.project(&[b0, b1], 0.0).unwrap();
        let pab = joint.project(&[a0 + b0, a1 + b1], 0.0).unwrap();
        for k in 0..2 {
            let lhs = pab.components[k].mean;
            let rhs = pa.components[k].mean + pb.components[k].mean;
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn tighter_risk_never_loosens_rhs(e1 in 1e-5f64..0.5, e2 in 1e-5f64..0.5, t in 0usize..2) {
        let case = toy2();
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(rhs_supply_demand(&case, lo, t).unwrap() <= rhs_supply_demand(&case, hi, t).unwrap());
        let sys = assemble_dlpf(&case).unwrap();
        let maps = mapping_coefficients(&sys, &invert_oracle(&sys).unwrap(), &case).unwrap();
        for s in 0..maps.len() {
            prop_assert!(rhs_state(&case, &maps, lo, s, t).unwrap() <= rhs_state(&case, &maps, hi, s, t).unwrap());
        }
    }
}
