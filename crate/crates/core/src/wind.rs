//! Wind uncertainty as a Gaussian mixture and the quantiles that turn the
//! single chance constraints into deterministic right-hand sides.
//!
//! The joint model covers every wind farm of the grid (active power only);
//! reactive wind output enters through each farm's fixed power-factor map, so
//! any state that depends on wind is a linear image of the joint vector and
//! therefore itself a scalar mixture (see [`JointGmm::project`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dlpf::StateMaps;
use crate::error::{Error, Result};
use crate::grid_case::GridCase;

const WEIGHT_TOL: f64 = 1e-12;
const BRACKET_SIGMAS: f64 = 10.0;
const MAX_BISECTIONS: usize = 400;

/// One component of a joint mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Joint Gaussian mixture over the active output of all wind farms.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    dim: usize,
}

impl JointGmm {
    pub fn new(components: Vec<JointComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Distribution("mixture has no components".into()));
        }
        let dim = components[0].mean.len();
        let mut weights = Vec::with_capacity(components.len());
        let mut means = Vec::with_capacity(components.len());
        let mut covariances = Vec::with_capacity(components.len());
        for (k, c) in components.into_iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Distribution(format!(
                    "component {k} has non-positive weight {}",
                    c.weight
                )));
            }
            if c.mean.len() != dim || c.covariance.len() != dim {
                return Err(Error::Distribution(format!(
                    "component {k} does not have dimension {dim}"
                )));
            }
            let mut cov = DMatrix::zeros(dim, dim);
            for (i, row) in c.covariance.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::Distribution(format!(
                        "component {k} covariance row {i} has length {}",
                        row.len()
                    )));
                }
                for (j, v) in row.iter().enumerate() {
                    cov[(i, j)] = *v;
                }
            }
            check_psd(&cov).map_err(|m| Error::Distribution(format!("component {k}: {m}")))?;
            weights.push(c.weight);
            means.push(DVector::from_vec(c.mean));
            covariances.push(cov);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Distribution(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            weights,
            means,
            covariances,
            dim,
        })
    }

    /// A point mass at `value` (zero covariance, single component).
    pub fn point_mass(value: Vec<f64>) -> Self {
        let dim = value.len();
        Self {
            weights: vec![1.0],
            means: vec![DVector::from_vec(value)],
            covariances: vec![DMatrix::zeros(dim, dim)],
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn components(&self) -> Vec<JointComponent> {
        (0..self.weights.len())
            .map(|k| JointComponent {
                weight: self.weights[k],
                mean: self.means[k].iter().copied().collect(),
                covariance: (0..self.dim)
                    .map(|i| (0..self.dim).map(|j| self.covariances[k][(i, j)]).collect())
                    .collect(),
            })
            .collect()
    }

    /// Distribution of `aᵀw + offset`.
    pub fn project(&self, a: &[f64], offset: f64) -> Result<ScalarGmm> {
        if a.len() != self.dim {
            return Err(Error::Dimension(format!(
                "projection weights have length {}, mixture dimension is {}",
                a.len(),
                self.dim
            )));
        }
        let a = DVector::from_column_slice(a);
        let components = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(&w, (mu, cov))| ScalarComponent {
                weight: w,
                mean: a.dot(mu) + offset,
                variance: (a.dot(&(cov * &a))).max(0.0),
            })
            .collect();
        Ok(ScalarGmm { components })
    }
}

fn check_psd(cov: &DMatrix<f64>) -> std::result::Result<(), String> {
    let n = cov.nrows();
    let scale = cov.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err("covariance is not symmetric".into());
            }
        }
    }
    if n == 0 {
        return Ok(());
    }
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.min() < -1e-10 * scale {
        return Err(format!(
            "covariance has negative eigenvalue {}",
            eig.eigenvalues.min()
        ));
    }
    Ok(())
}

/// Wind model of a case: one joint mixture, optionally replaced per period.
#[derive(Clone, Debug, PartialEq)]
pub struct WindModel {
    pub base: JointGmm,
    pub per_period: Option<Vec<JointGmm>>,
}

impl WindModel {
    pub fn stationary(base: JointGmm) -> Self {
        Self {
            base,
            per_period: None,
        }
    }

    /// Mixture in period `t` (0-based).
    pub fn at(&self, t: usize) -> &JointGmm {
        match &self.per_period {
            Some(list) => &list[t],
            None => &self.base,
        }
    }

    /// `p`-quantile of the total wind output in period `t`.
    pub fn total_quantile(&self, p: f64, t: usize) -> Result<f64> {
        let gmm = self.at(t);
        gmm.project(&vec![1.0; gmm.dim()], 0.0)?.quantile(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Univariate Gaussian mixture; zero-variance components are point masses.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGmm {
    pub components: Vec<ScalarComponent>,
}

impl ScalarGmm {
    pub fn new(components: Vec<ScalarComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Distribution("mixture has no components".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.weight > 0.0) || !(c.variance >= 0.0) || !c.mean.is_finite() {
                return Err(Error::Distribution(format!("invalid component {c:?}")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Distribution(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn normal(mean: f64, variance: f64) -> Self {
        Self {
            components: vec![ScalarComponent {
                weight: 1.0,
                mean,
                variance,
            }],
        }
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    /// `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        let p: f64 = self
            .components
            .iter()
            .map(|c| {
                if c.variance > 0.0 {
                    let z = (x - c.mean) / c.variance.sqrt();
                    c.weight * 0.5 * erfc(-z / std::f64::consts::SQRT_2)
                } else if x >= c.mean {
                    c.weight
                } else {
                    0.0
                }
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    /// Generalized inverse `inf { x : cdf(x) >= p }`, by bisection.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Probability(p));
        }
        let (mut lo, mut hi) = self.bracket();
        while self.cdf(lo) >= p {
            lo -= (hi - lo).max(1.0);
        }
        while self.cdf(hi) < p {
            hi += (hi - lo).max(1.0);
        }
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        // An atom inside the final bracket is the exact answer.
        if let Some(atom) = self
            .components
            .iter()
            .filter(|c| c.variance == 0.0 && c.mean > lo && c.mean <= hi)
            .map(|c| c.mean)
            .next()
        {
            return Ok(atom);
        }
        Ok(hi)
    }

    fn bracket(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.components {
            let s = BRACKET_SIGMAS * c.variance.sqrt();
            lo = lo.min(c.mean - s);
            hi = hi.max(c.mean + s);
        }
        // Strictly below the lowest atom so that cdf(lo) < p.
        (lo - 1.0, hi)
    }
}

/// Right-hand side `υ_t` of the supply-demand constraint
/// `-Σ g_t <= υ_t` for period `t` (0-based).
pub fn rhs_supply_demand(case: &GridCase, eps_b: f64, t: usize) -> Result<f64> {
    let total_load: f64 = case.loads.iter().map(|l| l.active[t]).sum();
    Ok(total_wind_quantile(case, eps_b, t)? - total_load)
}

/// `eps_b`-quantile of the total wind output in period `t`.
pub fn total_wind_quantile(case: &GridCase, eps_b: f64, t: usize) -> Result<f64> {
    case.wind.total_quantile(eps_b, t)
}

/// Right-hand side `𝓙` of the converted state constraint for monitored state
/// `state` (index into the registry) in period `t` (0-based).
pub fn rhs_state(
    case: &GridCase,
    maps: &StateMaps,
    alpha_s: f64,
    state: usize,
    t: usize,
) -> Result<f64> {
    let s = maps
        .states
        .get(state)
        .ok_or_else(|| Error::UnknownState(format!("state index {state}")))?;
    let mut value = s.upper - s.xi;
    for (k, load) in case.loads.iter().enumerate() {
        value -= s.load_active[k] * load.active[t] + s.load_reactive[k] * load.reactive[t];
    }
    let omega = case.wind.at(t).project(&s.wind_weights(case), 0.0)?;
    Ok(value - omega.quantile(1.0 - alpha_s)?)
}
