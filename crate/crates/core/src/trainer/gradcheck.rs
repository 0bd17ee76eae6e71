use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pass::{batch_loss, loss_and_grad, Objective};
use crate::datakit::Triplet;
use crate::error::{Error, Result};
use crate::model::Params;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub step: f64,
    pub coords: Vec<CoordCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn coord_name(params: &Params, mut idx: usize) -> String {
    for ((name, _), s) in params.layout().into_iter().zip(params.slices()) {
        if idx < s.len() {
            return format!("{name}[{idx}]");
        }
        idx -= s.len();
    }
    unreachable!("index within num_scalars")
}

/// Flat indices of every tensor whose name starts with `prefix`.
pub fn coordinates(params: &Params, prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for ((name, _), s) in params.layout().into_iter().zip(params.slices()) {
        if name.starts_with(prefix) {
            out.extend(offset..offset + s.len());
        }
        offset += s.len();
    }
    out
}

/// Central differences against the analytic gradient on `samples` random
/// coordinates.
pub fn gradient_check(
    params: &Params,
    batch: &[Triplet],
    obj: &Objective,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let n = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, n, samples.min(n)).into_vec();
    picks.sort_unstable();
    gradient_check_at(params, batch, obj, step, &picks)
}

/// Central differences on the given flat coordinates.
pub fn gradient_check_at(
    params: &Params,
    batch: &[Triplet],
    obj: &Objective,
    step: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= params.num_scalars()) {
        return Err(Error::Contract(format!("coordinate {bad} out of range")));
    }
    let (_, grads) = loss_and_grad(params, batch, obj)?;
    let mut probe = params.clone();
    let mut coords = Vec::with_capacity(indices.len());
    for &idx in indices {
        let orig = params.get_flat(idx);
        probe.set_flat(idx, orig + step);
        let up = batch_loss(&probe, batch, obj)?.loss;
        probe.set_flat(idx, orig - step);
        let down = batch_loss(&probe, batch, obj)?.loss;
        probe.set_flat(idx, orig);
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.get_flat(idx);
        coords.push(CoordCheck {
            index: idx,
            name: coord_name(params, idx),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        step,
        coords,
    })
}
