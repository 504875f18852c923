//! Transformation-based encryption of the dispatch QP.
//!
//! Region `n` substitutes `x_n = M_n x̄_n` with a private invertible `M_n`,
//! which masks its cost and constraint columns, and scales its capacity and
//! ramp rows (with their right-hand sides) by private positive diagonals.
//! Balance and state rows are shared aggregates and are not row-scaled.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dlpf::condition_number;
use crate::error::{Error, Result};
use crate::qp::{stack_parts, CompactQp, QpLayout, RegionBlocks, RegionQpPart};

/// Default bound on the condition number of generated key matrices.
pub const DEFAULT_KAPPA_MAX: f64 = 1e4;

const MAX_ATTEMPTS: usize = 1000;
const PHI_RANGE: (f64, f64) = (0.5, 2.0);

/// Sizes of the key material of one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyDims {
    /// `H_n`
    pub vars: usize,
    /// Ramp rows, `H_n − |G_n|`.
    pub ramp_rows: usize,
    /// Reactive and active DLPF rows of the region.
    pub q_rows: usize,
    pub p_rows: usize,
}

/// Private key material of one region. Deliberately neither `Clone` across
/// agents nor serializable.
#[derive(Debug)]
pub struct TeKeys {
    m: DMatrix<f64>,
    phi_cap_upper: DVector<f64>,
    phi_cap_lower: DVector<f64>,
    phi_ramp_upper: DVector<f64>,
    phi_ramp_lower: DVector<f64>,
    w_q: DMatrix<f64>,
    w_p: DMatrix<f64>,
    flow_rng: Option<ChaCha8Rng>,
}

/// Uniform `[−1, 1]` entries, resampled until the 2-norm condition number is
/// at most `kappa_max`.
pub fn random_invertible(rng: &mut impl Rng, dim: usize, kappa_max: f64) -> Result<DMatrix<f64>> {
    if dim == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    for _ in 0..MAX_ATTEMPTS {
        let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..=1.0));
        if condition_number(&m) <= kappa_max {
            return Ok(m);
        }
    }
    Err(Error::KeyGeneration {
        attempts: MAX_ATTEMPTS,
        limit: kappa_max,
    })
}

fn random_positive(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(PHI_RANGE.0..=PHI_RANGE.1))
}

/// Deterministic key generation from `seed`.
pub fn gen_keys(dims: KeyDims, seed: u64, kappa_max: f64) -> Result<TeKeys> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = random_invertible(&mut rng, dims.vars, kappa_max)?;
    let phi_cap_upper = random_positive(&mut rng, dims.vars);
    let phi_cap_lower = random_positive(&mut rng, dims.vars);
    let phi_ramp_upper = random_positive(&mut rng, dims.ramp_rows);
    let phi_ramp_lower = random_positive(&mut rng, dims.ramp_rows);
    let w_q = random_invertible(&mut rng, dims.q_rows, kappa_max)?;
    let w_p = random_invertible(&mut rng, dims.p_rows, kappa_max)?;
    let mut flow_rng = ChaCha8Rng::seed_from_u64(seed);
    flow_rng.set_stream(1);
    Ok(TeKeys {
        m,
        phi_cap_upper,
        phi_cap_lower,
        phi_ramp_upper,
        phi_ramp_lower,
        w_q,
        w_p,
        flow_rng: Some(flow_rng),
    })
}

impl TeKeys {
    /// All-identity keys: encryption becomes a no-op. Only for tests and
    /// deliberate negative controls.
    pub fn identity(dims: KeyDims) -> Self {
        Self {
            m: DMatrix::identity(dims.vars, dims.vars),
            phi_cap_upper: DVector::from_element(dims.vars, 1.0),
            phi_cap_lower: DVector::from_element(dims.vars, 1.0),
            phi_ramp_upper: DVector::from_element(dims.ramp_rows, 1.0),
            phi_ramp_lower: DVector::from_element(dims.ramp_rows, 1.0),
            w_q: DMatrix::identity(dims.q_rows, dims.q_rows),
            w_p: DMatrix::identity(dims.p_rows, dims.p_rows),
            flow_rng: None,
        }
    }

    pub fn dims(&self) -> KeyDims {
        KeyDims {
            vars: self.m.nrows(),
            ramp_rows: self.phi_ramp_upper.len(),
            q_rows: self.w_q.nrows(),
            p_rows: self.w_p.nrows(),
        }
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn w_q(&self) -> &DMatrix<f64> {
        &self.w_q
    }

    pub fn w_p(&self) -> &DMatrix<f64> {
        &self.w_p
    }

    /// Row scalings of the capacity-upper, capacity-lower, ramp-upper and
    /// ramp-lower blocks.
    pub fn phi(&self) -> [&DVector<f64>; 4] {
        [
            &self.phi_cap_upper,
            &self.phi_cap_lower,
            &self.phi_ramp_upper,
            &self.phi_ramp_lower,
        ]
    }

    /// Next positive scale for a shared line-flow row (1 for identity keys).
    pub fn next_flow_scale(&mut self) -> f64 {
        match &mut self.flow_rng {
            Some(rng) => rng.random_range(PHI_RANGE.0..=PHI_RANGE.1),
            None => 1.0,
        }
    }

    /// Every secret array, flattened, for leak checks.
    pub fn secret_arrays(&self) -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("M", self.m.as_slice().to_vec()),
            ("phi cap upper", self.phi_cap_upper.as_slice().to_vec()),
            ("phi cap lower", self.phi_cap_lower.as_slice().to_vec()),
            ("phi ramp upper", self.phi_ramp_upper.as_slice().to_vec()),
            ("phi ramp lower", self.phi_ramp_lower.as_slice().to_vec()),
            ("W_Q", self.w_q.as_slice().to_vec()),
            ("W_P", self.w_p.as_slice().to_vec()),
        ]
    }
}

/// What a region publishes about its part of the QP.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedShare {
    pub region: usize,
    /// Masked blocks: `q = MᵀΛM`, `c = Mᵀc` (i.e. `cᵀM`), constraint
    /// blocks `φ J M`, `φ E M`, `K M`, `U M` and right-hand sides `φ G±`,
    /// `φ R±`.
    pub part: RegionQpPart,
}

impl EncryptedShare {
    /// Flat payload: every block column-major, in field order.
    pub fn to_payload(&self) -> Vec<f64> {
        let p = &self.part;
        let mut out = Vec::new();
        out.extend_from_slice(p.q.as_slice());
        out.extend_from_slice(p.c.as_slice());
        for (m, v) in [
            (&p.cap_upper, &p.cap_upper_rhs),
            (&p.cap_lower, &p.cap_lower_rhs),
            (&p.ramp_upper, &p.ramp_upper_rhs),
            (&p.ramp_lower, &p.ramp_lower_rhs),
        ] {
            out.extend_from_slice(m.as_slice());
            out.extend_from_slice(v.as_slice());
        }
        out.extend_from_slice(p.balance.as_slice());
        out.extend_from_slice(p.states.as_slice());
        out
    }

    /// Length of the payload of a region with `gens` generators.
    pub fn payload_len(gens: usize, horizon: usize, states: usize) -> usize {
        let h = gens * horizon;
        let ramp = gens * horizon.saturating_sub(1);
        3 * h * h + 3 * h + 2 * ramp * h + 2 * ramp + horizon * h + states * horizon * h
    }

    /// Inverse of [`Self::to_payload`]; the shapes follow from public sizes.
    pub fn from_payload(
        region: usize,
        gens: usize,
        horizon: usize,
        states: usize,
        payload: &[f64],
    ) -> Result<Self> {
        if payload.len() != Self::payload_len(gens, horizon, states) {
            return Err(Error::Dimension(format!(
                "share payload of region {region} has length {}",
                payload.len()
            )));
        }
        let h = gens * horizon;
        let ramp = gens * horizon.saturating_sub(1);
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &payload[at..at + len];
            at += len;
            s
        };
        let q = DMatrix::from_column_slice(h, h, take(h * h));
        let c = DVector::from_column_slice(take(h));
        let mut pair = |rows: usize| {
            let m = DMatrix::from_column_slice(rows, h, take(rows * h));
            (m, DVector::from_column_slice(take(rows)))
        };
        let (cap_upper, cap_upper_rhs) = pair(h);
        let (cap_lower, cap_lower_rhs) = pair(h);
        let (ramp_upper, ramp_upper_rhs) = pair(ramp);
        let (ramp_lower, ramp_lower_rhs) = pair(ramp);
        let balance = DMatrix::from_column_slice(horizon, h, take(horizon * h));
        let states = DMatrix::from_column_slice(states * horizon, h, take(states * horizon * h));
        Ok(Self {
            region,
            part: RegionQpPart {
                q,
                c,
                cap_upper,
                cap_upper_rhs,
                cap_lower,
                cap_lower_rhs,
                ramp_upper,
                ramp_upper_rhs,
                ramp_lower,
                ramp_lower_rhs,
                balance,
                states,
            },
        })
    }
}

fn scale_rows(phi: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= phi[i];
    }
    out
}

/// Encrypts the local blocks of one region.
pub fn encrypt_local(blocks: &RegionBlocks, keys: &TeKeys) -> Result<EncryptedShare> {
    let h = blocks.dim();
    let d = keys.dims();
    if d.vars != h || d.ramp_rows != blocks.e.nrows() {
        return Err(Error::Dimension(format!(
            "keys sized for {} variables / {} ramp rows, region {} has {} / {}",
            d.vars,
            d.ramp_rows,
            blocks.region,
            h,
            blocks.e.nrows()
        )));
    }
    let raw = blocks.part();
    let m = &keys.m;
    let [p1, p2, p3, p4] = keys.phi();
    Ok(EncryptedShare {
        region: blocks.region,
        part: RegionQpPart {
            q: symmetrize(m.transpose() * &raw.q * m),
            c: m.tr_mul(&raw.c),
            cap_upper: scale_rows(p1, &raw.cap_upper) * m,
            cap_upper_rhs: raw.cap_upper_rhs.component_mul(p1),
            cap_lower: scale_rows(p2, &raw.cap_lower) * m,
            cap_lower_rhs: raw.cap_lower_rhs.component_mul(p2),
            ramp_upper: scale_rows(p3, &raw.ramp_upper) * m,
            ramp_upper_rhs: raw.ramp_upper_rhs.component_mul(p3),
            ramp_lower: scale_rows(p4, &raw.ramp_lower) * m,
            ramp_lower_rhs: raw.ramp_lower_rhs.component_mul(p4),
            balance: &raw.balance * m,
            states: &raw.states * m,
        },
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// The encrypted problem in `x̄`; same layout as the plain problem.
pub type EncryptedQp = CompactQp;

/// Stacks all regions' shares in region order, independent of arrival
/// order.
pub fn assemble_p1(
    shares: &[EncryptedShare],
    regions: usize,
    horizon: usize,
    states: usize,
    upsilon: &[f64],
    delta: &[f64],
) -> Result<EncryptedQp> {
    let mut parts = Vec::with_capacity(regions);
    for r in 1..=regions {
        let share = shares
            .iter()
            .find(|s| s.region == r)
            .ok_or(Error::MissingShare(r))?;
        parts.push(share.part.clone());
    }
    stack_parts(&parts, horizon, states, upsilon, delta)
}

/// A linear inequality `coeffsᵀ x̄ ≤ rhs` over the encrypted variables.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowExpression {
    pub coeffs: DVector<f64>,
    pub rhs: f64,
}

/// Scales both sides of a flow inequality by `scale > 0`.
pub fn mask_flow_expression(expr: &FlowExpression, scale: f64) -> Result<FlowExpression> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Numerical(format!(
            "mask scale {scale} is not positive"
        )));
    }
    Ok(FlowExpression {
        coeffs: &expr.coeffs * scale,
        rhs: expr.rhs * scale,
    })
}

/// Replaces state row `(t, s)` of an assembled problem.
pub fn set_state_row(qp: &mut CompactQp, t: usize, s: usize, expr: &FlowExpression) -> Result<()> {
    if expr.coeffs.len() != qp.dim() || t >= qp.layout.horizon || s >= qp.layout.states {
        return Err(Error::Dimension("flow row does not fit the problem".into()));
    }
    let row = qp.layout.state_row(t, s);
    qp.a.row_mut(row).copy_from(&expr.coeffs.transpose());
    qp.b[row] = expr.rhs;
    Ok(())
}

/// `x_n = M_n x̄_n` for region `n` (1-based).
pub fn decrypt_solution(
    xbar: &DVector<f64>,
    keys: &TeKeys,
    layout: &QpLayout,
    region: usize,
) -> Result<DVector<f64>> {
    if xbar.len() != layout.dim() || region == 0 || region > layout.gens.len() {
        return Err(Error::Dimension(format!(
            "encrypted solution of length {} does not match the layout",
            xbar.len()
        )));
    }
    let cols = layout.columns(region - 1);
    if keys.m.nrows() != cols.len() {
        return Err(Error::Dimension(format!(
            "key of size {} for a block of {} variables",
            keys.m.nrows(),
            cols.len()
        )));
    }
    Ok(&keys.m * xbar.rows(cols.start, cols.len()))
}
