//! Oracles and fixtures shared by the integration tests. The oracles do not
//! call into the code they check.
#![allow(dead_code)]

pub mod instances;

use std::path::PathBuf;

use ccopf::grid_case::{load_case, parse_case, CaseFormat, GridCase};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn case_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../cases")
        .join(name)
}

pub fn toy2() -> GridCase {
    load_case(&case_path("toy2.json"), None).expect("toy2 loads")
}

pub fn case39() -> GridCase {
    load_case(&case_path("case39.m"), None).expect("case39 loads")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A strictly convex QP `min ½xᵀQx + cᵀx s.t. Ax ≤ b` whose feasible set
/// contains an interior point.
pub struct RandomQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn random_qp(rng: &mut impl Rng, n: usize, m: usize) -> RandomQp {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    let c = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.05..1.0));
    RandomQp { q, c, a, b }
}

/// Accelerated projected-gradient ascent on the dual
/// `max_{λ≥0} −½(c+Aᵀλ)ᵀQ⁻¹(c+Aᵀλ) − bᵀλ` with adaptive restart. The primal
/// point is `x(λ) = −Q⁻¹(c + Aᵀλ)`.
pub fn dual_gradient_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> DVector<f64> {
    let qinv = q.clone().try_inverse().expect("Q invertible");
    let x_of = |lam: &DVector<f64>| -(&qinv * (c + a.tr_mul(lam)));
    let h = a * &qinv * a.transpose();
    let step = 1.0 / h.symmetric_eigenvalues().amax().max(1e-12);
    let m = b.len();
    let mut lam = DVector::zeros(m);
    let mut y = lam.clone();
    let mut t = 1.0_f64;
    for _ in 0..max_iters {
        let grad = a * x_of(&y) - b;
        let next = (&y + step * grad).map(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let moved = &next - &lam;
        if (&y - &next).dot(&moved) > 0.0 {
            // momentum points uphill: restart
            y = next.clone();
            t = 1.0;
        } else {
            y = &next + ((t - 1.0) / t_next) * &moved;
            t = t_next;
        }
        let done = moved.amax() < tol;
        lam = next;
        if done {
            break;
        }
    }
    x_of(&lam)
}

/// Mixture density `Σ w φ(x; μ, σ²)` with no degenerate components.
fn mixture_density(components: &[(f64, f64, f64)], x: f64) -> f64 {
    components
        .iter()
        .map(|&(w, mu, var)| {
            let z = (x - mu) / var.sqrt();
            w * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        })
        .sum()
}

/// CDF of a non-degenerate scalar mixture by composite Simpson quadrature of
/// the density, starting far in the left tail.
pub fn quadrature_cdf(components: &[(f64, f64, f64)], x: f64) -> f64 {
    let lo = components
        .iter()
        .map(|&(_, mu, var)| mu - 40.0 * var.sqrt())
        .fold(f64::INFINITY, f64::min);
    if x <= lo {
        return 0.0;
    }
    let n = 200_000;
    let h = (x - lo) / n as f64;
    let mut sum = mixture_density(components, lo) + mixture_density(components, x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * mixture_density(components, lo + i as f64 * h);
    }
    sum * h / 3.0
}

/// Samples `n` draws of a joint Gaussian mixture given by
/// `(weight, mean, covariance)` components.
pub fn sample_joint_gmm(
    rng: &mut impl Rng,
    components: &[(f64, DVector<f64>, DMatrix<f64>)],
    n: usize,
) -> Vec<DVector<f64>> {
    let factors: Vec<DMatrix<f64>> = components
        .iter()
        .map(|(_, _, cov)| {
            let d = cov.nrows();
            let jittered = cov + DMatrix::identity(d, d) * 1e-14;
            jittered.cholesky().expect("covariance PSD").l()
        })
        .collect();
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = components.len() - 1;
            for (i, (w, _, _)) in components.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let (_, mean, _) = &components[k];
            let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
            mean + &factors[k] * z
        })
        .collect()
}

/// Empirical `p`-quantile (lower order statistic).
pub fn empirical_quantile(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = ((p * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1;
    values[k]
}

/// A connected multi-region native case: `regions` regions of
/// `buses_per_region` buses each, chained inside regions, with one tie line
/// between consecutive regions; one generator and one load per region; one
/// wind farm in the last region. Bus 1 is the slack.
pub fn chain_case(regions: usize, buses_per_region: usize, horizon: usize, seed: u64) -> GridCase {
    let mut rng = rng(seed);
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut gens = Vec::new();
    let mut loads = Vec::new();
    let mut line_id = 1;
    for r in 1..=regions {
        for k in 0..buses_per_region {
            let id = (r - 1) * buses_per_region + k + 1;
            let bus = if id == 1 {
                serde_json::json!({"id": id, "kind": "slack", "region": r, "voltage": 1.0, "angle": 0.0})
            } else {
                serde_json::json!({"id": id, "kind": "pq", "region": r})
            };
            buses.push(bus);
            if k > 0 || r > 1 {
                let x: f64 = rng.random_range(0.05..0.2);
                lines.push(serde_json::json!({
                    "id": line_id, "from": id - 1, "to": id,
                    "g": 0.1 / x, "b": -1.0 / x, "flow_limit": 5.0
                }));
                line_id += 1;
            }
        }
        let first = (r - 1) * buses_per_region + 1;
        let last = r * buses_per_region;
        let p_max: f64 = rng.random_range(2.0..3.0);
        gens.push(serde_json::json!({
            "id": r, "bus": if first == 1 { last } else { first },
            "quad_cost": rng.random_range(1.0..4.0), "lin_cost": rng.random_range(5.0..15.0),
            "p_min": 0.1, "p_max": p_max, "ramp_min": -0.8, "ramp_max": 0.8
        }));
        let base: f64 = rng.random_range(0.6..1.0);
        let active: Vec<f64> = (0..horizon)
            .map(|t| base * (1.0 + 0.1 * t as f64))
            .collect();
        let reactive: Vec<f64> = active.iter().map(|p| 0.2 * p).collect();
        loads.push(
            serde_json::json!({"id": r, "bus": last, "active": active, "reactive": reactive}),
        );
    }
    let wind_bus = regions * buses_per_region;
    let text = serde_json::json!({
        "format_version": 1,
        "name": format!("chain{regions}x{buses_per_region}"),
        "horizon": horizon,
        "buses": buses,
        "lines": lines,
        "generators": gens,
        "loads": loads,
        "wind_farms": [{"id": 1, "bus": wind_bus, "power_factor_angle": 0.1}],
        "wind": {"components": [
            {"weight": 0.5, "mean": [0.4], "covariance": [[0.01]]},
            {"weight": 0.5, "mean": [0.2], "covariance": [[0.005]]}
        ]}
    })
    .to_string();
    parse_case(&text, CaseFormat::NativeJson, None).expect("chain case is valid")
}

/// `p`-quantile of a scalar mixture `(weight, mean, variance)` by bisection
/// on its CDF; zero-variance components are point masses.
pub fn mixture_quantile(components: &[(f64, f64, f64)], p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let cdf = |x: f64| -> f64 {
        components
            .iter()
            .map(|&(w, mu, var)| {
                if var <= 0.0 {
                    if x >= mu {
                        w
                    } else {
                        0.0
                    }
                } else {
                    w * Normal::new(mu, var.sqrt()).unwrap().cdf(x)
                }
            })
            .sum()
    };
    let spread = components
        .iter()
        .map(|&(_, mu, var)| mu.abs() + 50.0 * var.sqrt())
        .fold(1.0, f64::max);
    let (mut lo, mut hi) = (-spread, spread);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}
