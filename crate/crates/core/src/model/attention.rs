//! Channel attention: `σ(MLP(avgpool F) + MLP(maxpool F))` with one shared,
//! bias-free two-layer MLP, and the channel-wise filtering it drives.

use ndarray::{Array1, Array3, Zip};

use super::backbone::FeatureMap;
use super::params::Params;
use crate::error::{Error, Result};

/// Per-channel weights, every entry strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionVector(pub Array1<f64>);

impl ChannelAttentionVector {
    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Keeps sigmoid outputs off the closed endpoints once logits saturate.
const SIGMOID_FLOOR: f64 = 1e-12;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Spatial average and max per channel, plus the flat argmax position.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub avg: Array1<f64>,
    pub max: Array1<f64>,
    pub argmax: Vec<usize>,
}

pub fn pool(f: &FeatureMap) -> Pooled {
    let (c, h, w) = f.data.dim();
    let n = (h * w) as f64;
    let mut avg = Array1::zeros(c);
    let mut max = Array1::zeros(c);
    let mut argmax = vec![0; c];
    for (k, plane) in f.data.outer_iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for (i, &v) in plane.iter().enumerate() {
            sum += v;
            if v > best {
                best = v;
                argmax[k] = i;
            }
        }
        avg[k] = sum / n;
        max[k] = best;
    }
    Pooled { avg, max, argmax }
}

/// Spreads gradients w.r.t. the pooled statistics back onto the map.
pub fn pool_backward(
    shape: (usize, usize, usize),
    pooled: &Pooled,
    d_avg: &Array1<f64>,
    d_max: Option<&Array1<f64>>,
) -> Array3<f64> {
    let (c, h, w) = shape;
    let n = (h * w) as f64;
    let mut d = Array3::zeros(shape);
    for k in 0..c {
        let g = d_avg[k] / n;
        d.index_axis_mut(ndarray::Axis(0), k).fill(g);
        if let Some(dm) = d_max {
            let i = pooled.argmax[k];
            d[[k, i / w, i % w]] += dm[k];
        }
    }
    d
}

/// Forward state kept for [`attention_backward`].
#[derive(Debug, Clone)]
pub struct AttentionTape {
    pub pooled: Pooled,
    hidden_avg: Array1<f64>,
    hidden_max: Array1<f64>,
    /// Unclamped sigmoid outputs.
    sig: Array1<f64>,
}

fn check_finite(f: &FeatureMap) -> Result<()> {
    if f.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract("feature map contains non-finite values".into()))
    }
}

pub fn attention_from_pooled(pooled: Pooled, params: &Params) -> (ChannelAttentionVector, AttentionTape) {
    let hidden_avg = params.mlp_in.dot(&pooled.avg).mapv(|v| v.max(0.0));
    let hidden_max = params.mlp_in.dot(&pooled.max).mapv(|v| v.max(0.0));
    let logits = params.mlp_out.dot(&(&hidden_avg + &hidden_max));
    let sig = logits.mapv(sigmoid);
    let m = sig.mapv(|s| s.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR));
    (
        ChannelAttentionVector(m),
        AttentionTape {
            pooled,
            hidden_avg,
            hidden_max,
            sig,
        },
    )
}

pub fn channel_attention_tape(f: &FeatureMap, params: &Params) -> Result<(ChannelAttentionVector, AttentionTape)> {
    check_finite(f)?;
    if f.channels() != params.mlp_in.ncols() {
        return Err(Error::Contract(format!(
            "feature map has {} channels, attention expects {}",
            f.channels(),
            params.mlp_in.ncols()
        )));
    }
    Ok(attention_from_pooled(pool(f), params))
}

pub fn channel_attention(f: &FeatureMap, params: &Params) -> Result<ChannelAttentionVector> {
    channel_attention_tape(f, params).map(|(m, _)| m)
}

/// Backpropagates `d(loss)/dM`: accumulates MLP gradients into `grads` and
/// returns gradients w.r.t. the average- and max-pooled inputs.
pub fn attention_backward(
    params: &Params,
    tape: &AttentionTape,
    d_m: &Array1<f64>,
    grads: &mut Params,
) -> (Array1<f64>, Array1<f64>) {
    let d_logits = Zip::from(d_m).and(&tape.sig).map_collect(|&g, &s| g * s * (1.0 - s));
    let hidden_sum = &tape.hidden_avg + &tape.hidden_max;
    for ((i, j), g) in grads.mlp_out.indexed_iter_mut() {
        *g += d_logits[i] * hidden_sum[j];
    }
    let d_hidden = params.mlp_out.t().dot(&d_logits);
    let gate = |h: &Array1<f64>| Zip::from(&d_hidden).and(h).map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 });
    let d_ha = gate(&tape.hidden_avg);
    let d_hm = gate(&tape.hidden_max);
    for ((i, j), g) in grads.mlp_in.indexed_iter_mut() {
        *g += d_ha[i] * tape.pooled.avg[j] + d_hm[i] * tape.pooled.max[j];
    }
    (params.mlp_in.t().dot(&d_ha), params.mlp_in.t().dot(&d_hm))
}

/// `F'[k, i, j] = M[k] · F[k, i, j]`
pub fn apply_attention(f: &FeatureMap, m: &ChannelAttentionVector) -> Result<FeatureMap> {
    if f.channels() != m.len() {
        return Err(Error::Contract(format!(
            "attention vector of length {} for {} channels",
            m.len(),
            f.channels()
        )));
    }
    let mut out = f.data.clone();
    for (mut plane, &mk) in out.outer_iter_mut().zip(m.0.iter()) {
        plane *= mk;
    }
    Ok(FeatureMap::new(out))
}
