//! Finite-difference verification of the analytic gradients.

use rand::Rng;

use crate::error::Result;
use crate::model::backward::{loss, loss_and_grad};
use crate::model::{ModelConfig, Params};
use crate::seeds;

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<ProbeResult>,
}

pub const GRADCHECK_STEP: f64 = 1e-3;

/// Compare analytic gradients against central finite differences at
/// `n_probes` randomly sampled parameters. The difference quotient runs the
/// whole forward in f64; probe choice is seeded and reproducible.
///
/// Intended for small models (couple of layers); cost is two f64 forwards
/// per probe.
pub fn grad_check(
    params: &Params<f32>,
    cfg: &ModelConfig,
    ids: &[u16],
    cond: Option<usize>,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(params, cfg, ids, cond)?;
    let mut p64 = params.to_f64();
    let slots = Params::<f32>::slots(cfg);
    let mut rng = seeds::rng_for(seed, "gradcheck");

    let mut probes = Vec::with_capacity(n_probes);
    let mut max_rel = 0.0f64;
    for _ in 0..n_probes {
        let slot = slots[rng.gen_range(0..slots.len())];
        let len = params.get(slot).len();
        let index = rng.gen_range(0..len);

        let orig = p64.get(slot)[index];
        p64.get_mut(slot)[index] = orig + GRADCHECK_STEP;
        let up = loss(&p64, cfg, ids, cond)?;
        p64.get_mut(slot)[index] = orig - GRADCHECK_STEP;
        let down = loss(&p64, cfg, ids, cond)?;
        p64.get_mut(slot)[index] = orig;

        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let a = analytic.get(slot)[index] as f64;
        let rel_err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel_err);
        probes.push(ProbeResult {
            name: slot.name(),
            index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        probes,
    })
}
