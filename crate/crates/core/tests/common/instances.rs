//! Random multi-region dispatch problems built from random generators.

use ccopf::grid_case::Generator;
use ccopf::qp::RegionBlocks;
use ccopf::te::{encrypt_local, gen_keys, EncryptedShare, KeyDims, TeKeys, DEFAULT_KAPPA_MAX};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::rng;

pub fn dims_for(blocks: &RegionBlocks) -> KeyDims {
    KeyDims {
        vars: blocks.dim(),
        ramp_rows: blocks.e.nrows(),
        q_rows: 2,
        p_rows: 3,
    }
}

/// Random multi-region dispatch problem with a known strictly feasible
/// point.
pub struct Instance {
    pub blocks: Vec<RegionBlocks>,
    pub horizon: usize,
    pub states: usize,
    pub upsilon: Vec<f64>,
    pub delta: Vec<f64>,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let horizon = r.random_range(1..=4);
    let regions = r.random_range(1..=3);
    let states = r.random_range(0..=2);
    let mut gens_per: Vec<usize> = (0..regions).map(|_| r.random_range(1..=3)).collect();
    // 5 to 20 variables
    while gens_per.iter().sum::<usize>() * horizon < 5 {
        gens_per[0] += 1;
    }
    while gens_per.iter().sum::<usize>() * horizon > 20 {
        let k = gens_per.iter().position(|&g| g > 1).unwrap();
        gens_per[k] -= 1;
    }
    let mut blocks = Vec::new();
    let mut x0: Vec<DVector<f64>> = Vec::new();
    let mut id = 1;
    for (n, &ng) in gens_per.iter().enumerate() {
        let gens: Vec<Generator> = (0..ng)
            .map(|_| {
                let p_min = r.random_range(0.0..0.5);
                let g = Generator {
                    id,
                    bus: 1,
                    region: n + 1,
                    quad_cost: r.random_range(0.5..5.0),
                    lin_cost: r.random_range(1.0..20.0),
                    p_min,
                    p_max: p_min + r.random_range(0.5..3.0),
                    ramp_min: -r.random_range(0.2..1.0),
                    ramp_max: r.random_range(0.2..1.0),
                };
                id += 1;
                g
            })
            .collect();
        let refs: Vec<&Generator> = gens.iter().collect();
        let phi = DMatrix::from_fn(states, ng, |_, _| r.random_range(-0.5..0.5));
        let b = RegionBlocks::from_generators(n + 1, &refs, horizon, &phi).unwrap();
        // constant output inside the capacity band
        let level: Vec<f64> = gens.iter().map(|g| 0.5 * (g.p_min + g.p_max)).collect();
        x0.push(DVector::from_iterator(
            ng * horizon,
            (0..horizon).flat_map(|_| level.clone()),
        ));
        blocks.push(b);
    }
    let upsilon: Vec<f64> = (0..horizon)
        .map(|t| {
            let total: f64 = blocks
                .iter()
                .zip(&x0)
                .map(|(b, x)| x.rows(t * b.gens, b.gens).sum())
                .sum();
            -0.95 * total
        })
        .collect();
    let mut delta = vec![0.0; horizon * states];
    for t in 0..horizon {
        for s in 0..states {
            let at_x0: f64 = blocks
                .iter()
                .zip(&x0)
                .map(|(b, x)| (&b.u * x)[t * states + s])
                .sum();
            delta[t * states + s] = at_x0 + r.random_range(0.01..0.3);
        }
    }
    Instance {
        blocks,
        horizon,
        states,
        upsilon,
        delta,
    }
}

pub fn keys_for(inst: &Instance, seed: u64) -> Vec<TeKeys> {
    inst.blocks
        .iter()
        .enumerate()
        .map(|(n, b)| {
            gen_keys(
                dims_for(b),
                seed.wrapping_add(n as u64 * 7919),
                DEFAULT_KAPPA_MAX,
            )
            .unwrap()
        })
        .collect()
}

pub fn shares_for(inst: &Instance, keys: &[TeKeys]) -> Vec<EncryptedShare> {
    inst.blocks
        .iter()
        .zip(keys)
        .map(|(b, k)| encrypt_local(b, k).unwrap())
        .collect()
}
