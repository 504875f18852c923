//! The compact deterministic dispatch QP and a dense interior-point solver.
//!
//! Decision vector: generator outputs, region-major, then time-major within
//! a region (`x_n = [g_{n,1}; …; g_{n,T}]`). Inequality rows, in order:
//!
//! | block        | rows          | right-hand side |
//! |--------------|---------------|-----------------|
//! | capacity ≤   | `H`           | `G⁺`            |
//! | capacity ≥   | `H`           | `−G⁻`           |
//! | ramp ≤       | `H − |G|`     | `R⁺`            |
//! | ramp ≥       | `H − |G|`     | `−R⁻`           |
//! | balance      | `T`           | `Υ`             |
//! | states       | `T·|S|`       | `Δ`             |
//!
//! Within each of the first four blocks rows are region-major. State rows are
//! time-major, then by monitored-state index.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dlpf::{block_repeat, StateMaps};
use crate::error::{Error, Result};
use crate::grid_case::{Generator, GridCase};

/// Default relative KKT tolerance of [`solve_qp`].
pub const DEFAULT_TOL: f64 = 1e-8;

const MAX_ITERS: usize = 200;
const STEP_FRACTION: f64 = 0.995;

/// Row-block bookkeeping of a compact QP.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QpLayout {
    /// Generators per region.
    pub gens: Vec<usize>,
    pub horizon: usize,
    pub states: usize,
}

impl QpLayout {
    pub fn region_dim(&self, n: usize) -> usize {
        self.gens[n] * self.horizon
    }

    /// Column range of region `n` (0-based).
    pub fn columns(&self, n: usize) -> Range<usize> {
        let start: usize = (0..n).map(|m| self.region_dim(m)).sum();
        start..start + self.region_dim(n)
    }

    pub fn dim(&self) -> usize {
        self.gens.iter().sum::<usize>() * self.horizon
    }

    fn ramp_rows(&self) -> usize {
        self.gens.iter().sum::<usize>() * self.horizon.saturating_sub(1)
    }

    pub fn cap_upper(&self) -> Range<usize> {
        0..self.dim()
    }

    pub fn cap_lower(&self) -> Range<usize> {
        let h = self.dim();
        h..2 * h
    }

    pub fn ramp_upper(&self) -> Range<usize> {
        let s = 2 * self.dim();
        s..s + self.ramp_rows()
    }

    pub fn ramp_lower(&self) -> Range<usize> {
        let s = 2 * self.dim() + self.ramp_rows();
        s..s + self.ramp_rows()
    }

    pub fn balance(&self) -> Range<usize> {
        let s = 2 * self.dim() + 2 * self.ramp_rows();
        s..s + self.horizon
    }

    pub fn state_rows(&self) -> Range<usize> {
        let s = self.balance().end;
        s..s + self.horizon * self.states
    }

    /// Row of state `s` in period `t`.
    pub fn state_row(&self, t: usize, s: usize) -> usize {
        self.state_rows().start + t * self.states + s
    }

    pub fn rows(&self) -> usize {
        self.state_rows().end
    }
}

/// `min ½xᵀQx + cᵀx  s.t.  Ax ≤ b`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub layout: QpLayout,
}

impl CompactQp {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    pub fn is_feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        (&self.a * x - &self.b).iter().all(|v| *v <= tol)
    }
}

/// One region's column block of the QP with its own right-hand sides; the
/// unit from which both the plain and the encrypted problem are stacked.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionQpPart {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub cap_upper: DMatrix<f64>,
    pub cap_upper_rhs: DVector<f64>,
    pub cap_lower: DMatrix<f64>,
    pub cap_lower_rhs: DVector<f64>,
    pub ramp_upper: DMatrix<f64>,
    pub ramp_upper_rhs: DVector<f64>,
    pub ramp_lower: DMatrix<f64>,
    pub ramp_lower_rhs: DVector<f64>,
    pub balance: DMatrix<f64>,
    pub states: DMatrix<f64>,
}

impl RegionQpPart {
    pub fn dim(&self) -> usize {
        self.c.len()
    }
}

/// Raw local data of one region: `Λ_n`, `c_n`, `J_n`, `E_n`, `K_n`, `U_n`
/// and the capacity and ramp vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBlocks {
    pub region: usize,
    pub gens: usize,
    pub horizon: usize,
    pub lambda: DMatrix<f64>,
    pub c: DVector<f64>,
    pub j: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub g_plus: DVector<f64>,
    pub g_minus: DVector<f64>,
    pub r_plus: DVector<f64>,
    pub r_minus: DVector<f64>,
}

/// `J_n = I`.
pub fn capacity_matrix(gens: usize, horizon: usize) -> DMatrix<f64> {
    DMatrix::identity(gens * horizon, gens * horizon)
}

/// `E_n`: row `(t, g)` is `x[t+1, g] − x[t, g]`.
pub fn ramp_matrix(gens: usize, horizon: usize) -> DMatrix<f64> {
    let rows = gens * horizon.saturating_sub(1);
    let mut e = DMatrix::zeros(rows, gens * horizon);
    for t in 0..horizon.saturating_sub(1) {
        for g in 0..gens {
            e[(t * gens + g, (t + 1) * gens + g)] = 1.0;
            e[(t * gens + g, t * gens + g)] = -1.0;
        }
    }
    e
}

/// `K_n`: row `t` is `−1` over the period-`t` block.
pub fn balance_matrix(gens: usize, horizon: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(horizon, gens * horizon);
    for t in 0..horizon {
        for g in 0..gens {
            k[(t, t * gens + g)] = -1.0;
        }
    }
    k
}

impl RegionBlocks {
    /// Local blocks of `region` (1-based) given its `Φ_n`.
    pub fn new(case: &GridCase, region: usize, phi: &DMatrix<f64>) -> Result<Self> {
        let gens: Vec<_> = case.generators_in(region).collect();
        Self::from_generators(region, &gens, case.horizon, phi)
    }

    /// Local blocks from the region's own generators, in region order.
    pub fn from_generators(
        region: usize,
        gens: &[&Generator],
        horizon: usize,
        phi: &DMatrix<f64>,
    ) -> Result<Self> {
        let (ng, t) = (gens.len(), horizon);
        if phi.ncols() != ng {
            return Err(Error::Dimension(format!(
                "state map of region {region} has {} columns, region has {ng} generators",
                phi.ncols()
            )));
        }
        if let Some(g) = gens.iter().find(|g| !(g.quad_cost > 0.0)) {
            return Err(Error::InvalidCase(format!(
                "generator {} has non-positive quadratic cost",
                g.id
            )));
        }
        let rep = |f: &dyn Fn(usize) -> f64, periods: usize| {
            DVector::from_iterator(ng * periods, (0..periods).flat_map(|_| (0..ng).map(f)))
        };
        Ok(Self {
            region,
            gens: ng,
            horizon: t,
            lambda: DMatrix::from_diagonal(&rep(&|g| gens[g].quad_cost, t)),
            c: rep(&|g| gens[g].lin_cost, t),
            j: capacity_matrix(ng, t),
            e: ramp_matrix(ng, t),
            k: balance_matrix(ng, t),
            u: block_repeat(phi, t),
            g_plus: rep(&|g| gens[g].p_max, t),
            g_minus: rep(&|g| gens[g].p_min, t),
            r_plus: rep(&|g| gens[g].ramp_max, t.saturating_sub(1)),
            r_minus: rep(&|g| gens[g].ramp_min, t.saturating_sub(1)),
        })
    }

    pub fn dim(&self) -> usize {
        self.gens * self.horizon
    }

    /// The unencrypted part this region contributes to the compact QP.
    pub fn part(&self) -> RegionQpPart {
        RegionQpPart {
            q: self.lambda.clone(),
            c: self.c.clone(),
            cap_upper: self.j.clone(),
            cap_upper_rhs: self.g_plus.clone(),
            cap_lower: -&self.j,
            cap_lower_rhs: -&self.g_minus,
            ramp_upper: self.e.clone(),
            ramp_upper_rhs: self.r_plus.clone(),
            ramp_lower: -&self.e,
            ramp_lower_rhs: -&self.r_minus,
            balance: self.k.clone(),
            states: self.u.clone(),
        }
    }
}

/// Stacks region parts in the documented row order.
pub fn stack_parts(
    parts: &[RegionQpPart],
    horizon: usize,
    states: usize,
    upsilon: &[f64],
    delta: &[f64],
) -> Result<CompactQp> {
    let layout = QpLayout {
        gens: parts
            .iter()
            .map(|p| p.dim().checked_div(horizon).unwrap_or(0))
            .collect(),
        horizon,
        states,
    };
    if upsilon.len() != horizon || delta.len() != horizon * states {
        return Err(Error::Dimension(format!(
            "balance/state right-hand sides have lengths {}/{}, expected {}/{}",
            upsilon.len(),
            delta.len(),
            horizon,
            horizon * states
        )));
    }
    let n = layout.dim();
    let m = layout.rows();
    let mut q = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    let mut offsets = [
        layout.cap_upper().start,
        layout.cap_lower().start,
        layout.ramp_upper().start,
        layout.ramp_lower().start,
    ];
    for (r, p) in parts.iter().enumerate() {
        let cols = layout.columns(r);
        let h = cols.len();
        let ramp = layout.gens[r] * horizon.saturating_sub(1);
        let shapes_ok = p.q.shape() == (h, h)
            && p.c.len() == h
            && p.cap_upper.shape() == (h, h)
            && p.cap_lower.shape() == (h, h)
            && p.ramp_upper.shape() == (ramp, h)
            && p.ramp_lower.shape() == (ramp, h)
            && p.balance.shape() == (horizon, h)
            && p.states.shape() == (horizon * states, h)
            && p.cap_upper_rhs.len() == h
            && p.cap_lower_rhs.len() == h
            && p.ramp_upper_rhs.len() == ramp
            && p.ramp_lower_rhs.len() == ramp;
        if !shapes_ok || !h.is_multiple_of(horizon.max(1)) {
            return Err(Error::Dimension(format!(
                "region part {} has inconsistent shapes",
                r + 1
            )));
        }
        q.view_mut((cols.start, cols.start), (h, h)).copy_from(&p.q);
        c.rows_mut(cols.start, h).copy_from(&p.c);
        let blocks = [
            (&p.cap_upper, &p.cap_upper_rhs),
            (&p.cap_lower, &p.cap_lower_rhs),
            (&p.ramp_upper, &p.ramp_upper_rhs),
            (&p.ramp_lower, &p.ramp_lower_rhs),
        ];
        for (slot, (mat, rhs)) in blocks.into_iter().enumerate() {
            let rows = mat.nrows();
            a.view_mut((offsets[slot], cols.start), (rows, h))
                .copy_from(mat);
            b.rows_mut(offsets[slot], rows).copy_from(rhs);
            offsets[slot] += rows;
        }
        a.view_mut((layout.balance().start, cols.start), (horizon, h))
            .copy_from(&p.balance);
        a.view_mut(
            (layout.state_rows().start, cols.start),
            (horizon * states, h),
        )
        .copy_from(&p.states);
    }
    b.rows_mut(layout.balance().start, horizon)
        .copy_from_slice(upsilon);
    b.rows_mut(layout.state_rows().start, horizon * states)
        .copy_from_slice(delta);
    Ok(CompactQp { q, c, a, b, layout })
}

/// Builds the compact QP from the case, the state maps and the aggregated
/// right-hand sides (`Υ` per period, `Δ` time-major then by state).
pub fn assemble_p0(
    case: &GridCase,
    maps: &StateMaps,
    upsilon: &[f64],
    delta: &[f64],
) -> Result<CompactQp> {
    let parts = (1..=case.regions)
        .map(|r| RegionBlocks::new(case, r, &maps.phi(case, r)).map(|b| b.part()))
        .collect::<Result<Vec<_>>>()?;
    stack_parts(&parts, case.horizon, maps.len(), upsilon, delta)
}

/// KKT residuals of a primal-dual pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KktReport {
    /// `‖Qx + c + Aᵀλ‖∞`
    pub stationarity: f64,
    /// `‖max(Ax − b, 0)‖∞`
    pub primal_infeasibility: f64,
    /// `|λᵀ(Ax − b)|`
    pub complementarity: f64,
    /// Most negative multiplier (zero when all are non-negative).
    pub min_multiplier: f64,
    pub dual_infeasible: bool,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_infeasibility)
            .max(self.complementarity)
    }
}

pub fn check_kkt(qp: &CompactQp, x: &DVector<f64>, lambda: &DVector<f64>) -> KktReport {
    let grad = &qp.q * x + &qp.c + qp.a.tr_mul(lambda);
    let slack = &qp.a * x - &qp.b;
    let min = lambda.iter().copied().fold(0.0, f64::min);
    KktReport {
        stationarity: grad.amax(),
        primal_infeasibility: slack.iter().copied().fold(0.0, f64::max),
        complementarity: lambda.dot(&slack).abs(),
        min_multiplier: min,
        dual_infeasible: min < 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt: KktReport,
}

/// Mehrotra predictor-corrector interior-point method on the slack form
/// `Ax + s = b, s ≥ 0`, with rows scaled to unit max-norm. Terminates when
/// stationarity, primal residual and complementarity are all below `tol`
/// relative to the data scale.
pub fn solve_qp(qp: &CompactQp, tol: f64) -> Result<QpSolution> {
    let n = qp.dim();
    if qp.q.shape() != (n, n) || qp.a.ncols() != n || qp.a.nrows() != qp.b.len() {
        return Err(Error::Dimension("QP data shapes are inconsistent".into()));
    }
    if n == 0 {
        return Err(Error::Dimension("QP has no variables".into()));
    }
    // Drop all-zero rows (vacuous or infeasible) and scale the rest.
    let mut keep = Vec::new();
    let mut scale = Vec::new();
    for i in 0..qp.a.nrows() {
        let norm = qp.a.row(i).amax();
        if norm == 0.0 {
            if qp.b[i] < 0.0 {
                return Err(Error::Infeasible(format!("row {i} reads 0 <= {}", qp.b[i])));
            }
        } else {
            keep.push(i);
            scale.push(1.0 / norm);
        }
    }
    let m = keep.len();
    let a = DMatrix::from_fn(m, n, |i, j| qp.a[(keep[i], j)] * scale[i]);
    let b = DVector::from_fn(m, |i, _| qp.b[keep[i]] * scale[i]);
    let q = &qp.q;
    let c = &qp.c;

    let data_scale = 1.0 + q.amax().max(c.amax()).max(a.amax());
    let b_scale = 1.0 + b.amax();
    let c_scale = 1.0 + c.amax();

    let (mut x, mut s, mut lam) = initial_point(q, c, &a, &b)?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERS {
        let rd = q * &x + c + a.tr_mul(&lam);
        let rp = &a * &x + &s - &b;
        let mu = if m > 0 { s.dot(&lam) / m as f64 } else { 0.0 };
        let obj = 0.5 * x.dot(&(q * &x)) + c.dot(&x);
        if rd.amax() <= tol * c_scale.max(1.0 + (q * &x).amax())
            && rp.amax() <= tol * b_scale
            && mu * (m.max(1) as f64) <= tol * (1.0 + obj.abs())
        {
            converged = true;
            break;
        }
        if m > 0 && lam.amax() > 1e14 * data_scale {
            let y = &lam / lam.amax();
            if a.tr_mul(&y).amax() < 1e-8 && b.dot(&y) < 0.0 {
                return Err(Error::Infeasible(
                    "dual ray certifies an empty feasible set".into(),
                ));
            }
        }
        iterations += 1;
        let d = DVector::from_fn(m, |i, _| lam[i] / s[i]);
        let mut h = q.clone();
        let da = DMatrix::from_fn(m, n, |i, j| a[(i, j)] * d[i]);
        h += a.tr_mul(&da);
        let chol = factor(h)?;

        let solve_dir = |rc: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            // S dλ = −rc + Λ rp + Λ A dx  ⇒  dλ = S⁻¹(−rc + Λ rp) + D A dx
            let w = DVector::from_fn(m, |i, _| (-rc[i] + lam[i] * rp[i]) / s[i]);
            let rhs = -&rd - a.tr_mul(&w);
            let dx = chol.solve(&rhs);
            let adx = &a * &dx;
            let dl = &w + d.component_mul(&adx);
            let ds = -&rp - adx;
            (dx, ds, dl)
        };

        // predictor
        let rc_aff = s.component_mul(&lam);
        let (_, ds_a, dl_a) = solve_dir(&rc_aff);
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (&s + alpha_aff * &ds_a).dot(&(&lam + alpha_aff * &dl_a)) / m.max(1) as f64;
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).min(1.0)
        } else {
            0.0
        };
        // corrector
        let rc = DVector::from_fn(m, |i, _| s[i] * lam[i] + ds_a[i] * dl_a[i] - sigma * mu);
        let (dx, ds, dl) = solve_dir(&rc);
        let alpha = (STEP_FRACTION * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Numerical(format!(
                "step length collapsed at iteration {iterations} (mu {mu:.3e})"
            )));
        }
        x += alpha * dx;
        s += alpha * ds;
        lam += alpha * dl;
        // keep strictly interior
        for i in 0..m {
            s[i] = s[i].max(1e-300);
            lam[i] = lam[i].max(1e-300);
        }
    }
    if !converged {
        let rp = (&a * &x - &b).iter().copied().fold(0.0, f64::max);
        if rp > 1e-6 * b_scale {
            return Err(Error::Infeasible(format!(
                "no feasible point found (max violation {rp:.3e})"
            )));
        }
        return Err(Error::Numerical(format!(
            "interior point method did not converge in {MAX_ITERS} iterations"
        )));
    }
    if let Some((px, pl)) = polish(q, c, &a, &b, &s, &lam, tol * b_scale) {
        x = px;
        lam = pl;
    }
    let mut lambda = DVector::zeros(qp.a.nrows());
    for (k, &i) in keep.iter().enumerate() {
        lambda[i] = lam[k] * scale[k];
    }
    let kkt = check_kkt(qp, &x, &lambda);
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        lambda,
        iterations,
        kkt,
    })
}

/// Re-solves the equality-constrained QP on the rows the interior point
/// identified as active, refining that set by dropping rows with negative
/// multipliers and adding violated ones. Returns a point only when it is
/// primal and dual feasible, which for a strictly convex objective makes it
/// the exact optimum.
#[allow(clippy::too_many_arguments)]
fn polish(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    s: &DVector<f64>,
    lam: &DVector<f64>,
    feas_tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    const MAX_PASSES: usize = 20;
    let n = q.nrows();
    let dual_tol = feas_tol * (1.0 + lam.amax());
    let mut active: Vec<usize> = (0..b.len()).filter(|&i| lam[i] > s[i]).collect();
    for _ in 0..MAX_PASSES {
        let k = active.len();
        if k > n {
            return None;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(q);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-c));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let sol = kkt.clone().lu().solve(&rhs)?;
        if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > feas_tol {
            return None;
        }
        let px = sol.rows(0, n).into_owned();
        let negative: Vec<usize> = (0..k).filter(|&r| sol[n + r] < -dual_tol).collect();
        if !negative.is_empty() {
            active = (0..k)
                .filter(|r| !negative.contains(r))
                .map(|r| active[r])
                .collect();
            continue;
        }
        let resid = a * &px - b;
        let violated: Vec<usize> = (0..b.len())
            .filter(|&i| resid[i] > feas_tol && !active.contains(&i))
            .collect();
        if !violated.is_empty() {
            active.extend(violated);
            active.sort_unstable();
            continue;
        }
        let mut pl = DVector::zeros(b.len());
        for (r, &i) in active.iter().enumerate() {
            pl[i] = sol[n + r].max(0.0);
        }
        return Some((px, pl));
    }
    None
}

fn initial_point(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let m = b.len();
    // x minimises ½xᵀQx + cᵀx + ½‖Ax − b‖², then slacks and duals are
    // shifted into the positive orthant.
    let h = q + a.tr_mul(a);
    let x = factor(h)?.solve(&(a.tr_mul(b) - c));
    let mut s = b - a * &x;
    let mut lam = DVector::from_element(m, 1.0);
    if m > 0 {
        let shift = (-1.5 * s.min()).max(0.0);
        s.add_scalar_mut(shift + 1.0);
        let dot = s.dot(&lam);
        let ds = 0.5 * dot / lam.sum();
        let dl = 0.5 * dot / s.sum();
        s.add_scalar_mut(ds);
        lam.add_scalar_mut(dl);
    }
    Ok((x, s, lam))
}

/// Cholesky with increasing diagonal regularisation as a fallback.
fn factor(h: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = h.diagonal().amax().max(1.0);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut m = h.clone();
        if reg > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += reg;
            }
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch);
        }
        reg = if reg == 0.0 {
            1e-14 * scale
        } else {
            reg * 100.0
        };
    }
    Err(Error::Numerical(
        "normal-equation matrix is not positive definite".into(),
    ))
}

/// Largest `α ≤ ∞` with `v + α dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Plain-text sparse triplet export: a header line `n m`, then one line per
/// nonzero: `Q i j v`, `c i v`, `A i j v`, `b i v` (0-based indices).
pub fn export_triplets(qp: &CompactQp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", qp.dim(), qp.a.nrows());
    for j in 0..qp.q.ncols() {
        for i in 0..qp.q.nrows() {
            if qp.q[(i, j)] != 0.0 {
                let _ = writeln!(out, "Q {i} {j} {:e}", qp.q[(i, j)]);
            }
        }
    }
    for (i, v) in qp.c.iter().enumerate().filter(|(_, v)| **v != 0.0) {
        let _ = writeln!(out, "c {i} {v:e}");
    }
    for i in 0..qp.a.nrows() {
        for j in 0..qp.a.ncols() {
            if qp.a[(i, j)] != 0.0 {
                let _ = writeln!(out, "A {i} {j} {:e}", qp.a[(i, j)]);
            }
        }
    }
    for (i, v) in qp.b.iter().enumerate().filter(|(_, v)| **v != 0.0) {
        let _ = writeln!(out, "b {i} {v:e}");
    }
    out
}

/// Inverse of [`export_triplets`]; the row layout is not preserved.
pub fn import_triplets(text: &str) -> Result<CompactQp> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, msg: &str| Error::Syntax {
        line: line + 1,
        column: 1,
        message: msg.to_string(),
    };
    let (hl, header) = lines.next().ok_or_else(|| bad(0, "empty input"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(hl, "header must be `n m`")))
        .collect::<Result<_>>()?;
    let [n, m] = dims[..] else {
        return Err(bad(hl, "header must be `n m`"));
    };
    let mut qp = CompactQp {
        q: DMatrix::zeros(n, n),
        c: DVector::zeros(n),
        a: DMatrix::zeros(m, n),
        b: DVector::zeros(m),
        layout: QpLayout::default(),
    };
    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let idx = |t: &str, lim: usize| -> Result<usize> {
            let v: usize = t.parse().map_err(|_| bad(ln, "invalid index"))?;
            if v >= lim {
                return Err(bad(ln, "index out of range"));
            }
            Ok(v)
        };
        let val = |t: &str| -> Result<f64> { t.parse().map_err(|_| bad(ln, "invalid value")) };
        match toks.as_slice() {
            ["Q", i, j, v] => qp.q[(idx(i, n)?, idx(j, n)?)] = val(v)?,
            ["A", i, j, v] => qp.a[(idx(i, m)?, idx(j, n)?)] = val(v)?,
            ["c", i, v] => qp.c[idx(i, n)?] = val(v)?,
            ["b", i, v] => qp.b[idx(i, m)?] = val(v)?,
            _ => return Err(bad(ln, "unrecognised record")),
        }
    }
    Ok(qp)
}
