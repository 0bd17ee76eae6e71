//! Training objective: attention alignment loss, triplet loss (as printed and a
//! numerically safe surrogate), per-triplet importance weights and their
//! combination. Every loss comes with its analytic gradient.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletVariant {
    /// `e^{d+} / (e^{d+} - e^{d-})`, singular at `d+ = d-`.
    Verbatim,
    /// `softplus(d+ - d-)`.
    Stable,
}

impl std::str::FromStr for TripletVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(TripletVariant::Verbatim),
            "stable" => Ok(TripletVariant::Stable),
            other => Err(Error::Config(format!("unknown triplet variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Learned,
    LowlevelGradient,
    ConstantOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub triplet_variant: TripletVariant,
    pub denom_epsilon: f64,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 2.5,
            triplet_variant: TripletVariant::Stable,
            denom_epsilon: 1e-8,
            weight_mode: WeightMode::Learned,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.denom_epsilon > 0.0) {
            return Err(Error::Config("denom_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletDistances {
    /// Anchor to corresponding frame.
    pub d_pos: f64,
    /// Anchor to non-corresponding frame.
    pub d_neg: f64,
}

/// Euclidean distance and its gradients w.r.t. both operands; the gradient
/// at coincident points is taken as zero.
pub fn distance_with_grad(a: &Array1<f64>, b: &Array1<f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let diff = a - b;
    let d = diff.dot(&diff).sqrt();
    if d == 0.0 {
        return (0.0, Array1::zeros(a.len()), Array1::zeros(a.len()));
    }
    let g = diff / d;
    let neg = -&g;
    (d, g, neg)
}

fn same_len(a: &Array1<f64>, b: &Array1<f64>) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "attention vectors of length {} and {}",
            a.len(),
            b.len()
        )))
    }
}

/// `‖Mx − My‖₂`
pub fn attention_loss(mx: &Array1<f64>, my: &Array1<f64>) -> Result<f64> {
    same_len(mx, my)?;
    Ok(distance_with_grad(mx, my).0)
}

pub fn attention_loss_grad(mx: &Array1<f64>, my: &Array1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    same_len(mx, my)?;
    Ok(distance_with_grad(mx, my))
}

/// Returns `(loss, ∂/∂d_pos, ∂/∂d_neg)`.
pub fn triplet_loss_verbatim_grad(d: TripletDistances, epsilon: f64) -> Result<(f64, f64, f64)> {
    let ep = d.d_pos.exp();
    let en = d.d_neg.exp();
    let denom = ep - en;
    if !(denom.abs() >= epsilon) {
        return Err(Error::Singular {
            gap: denom.abs(),
            epsilon,
        });
    }
    let loss = ep / denom;
    let k = ep * en / (denom * denom);
    Ok((loss, -k, k))
}

pub fn triplet_loss_verbatim(d: TripletDistances, epsilon: f64) -> Result<f64> {
    triplet_loss_verbatim_grad(d, epsilon).map(|(l, _, _)| l)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn triplet_loss_stable_grad(d: TripletDistances) -> (f64, f64, f64) {
    let x = d.d_pos - d.d_neg;
    let s = crate::model::sigmoid(x);
    (softplus(x), s, -s)
}

/// `log(1 + e^{d_pos − d_neg})`, overflow-safe.
pub fn triplet_loss_stable(d: TripletDistances) -> f64 {
    softplus(d.d_pos - d.d_neg)
}

pub fn triplet_loss_grad(d: TripletDistances, cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    match cfg.triplet_variant {
        TripletVariant::Verbatim => triplet_loss_verbatim_grad(d, cfg.denom_epsilon),
        TripletVariant::Stable => Ok(triplet_loss_stable_grad(d)),
    }
}

/// `[L_TL + λ·L_AL]·w`
pub fn total_loss(l_tl: f64, l_al: f64, w: f64, lambda: f64) -> f64 {
    (l_tl + lambda * l_al) * w
}

/// Batch weights `w_i = B·softmax(s)_i`; their mean is 1.
pub fn weights_from_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("importance weights need a nonempty batch".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let b = scores.len() as f64;
    Ok(exps.into_iter().map(|e| b * e / total).collect())
}

/// Pulls `∂L/∂w` back through `w = B·softmax(s)`.
pub fn weights_backward(weights: &[f64], d_w: &[f64]) -> Vec<f64> {
    let b = weights.len() as f64;
    // w_i = B p_i, dw_i/ds_j = B p_i (δ_ij − p_j)
    let mix: f64 = weights.iter().zip(d_w).map(|(w, g)| w / b * g).sum();
    weights.iter().zip(d_w).map(|(w, g)| w * (g - mix)).collect()
}

/// One affine layer over the concatenated pooled features of (x, y, z).
pub fn learned_scores(params: &Params, pooled: &[Array1<f64>]) -> Vec<f64> {
    pooled
        .iter()
        .map(|f| params.weight_fc.dot(f) + params.weight_bias[0])
        .collect()
}

/// Mean Sobel gradient magnitude of the luminance, over interior pixels.
pub fn mean_gradient(image: &Array3<f64>) -> f64 {
    let (h, w, _) = image.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let gray = |y: usize, x: usize| {
        0.299 * image[[y, x, 0]] + 0.587 * image[[y, x, 1]] + 0.114 * image[[y, x, 2]]
    };
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (gray(y - 1, x + 1) + 2.0 * gray(y, x + 1) + gray(y + 1, x + 1))
                - (gray(y - 1, x - 1) + 2.0 * gray(y, x - 1) + gray(y + 1, x - 1));
            let gy = (gray(y + 1, x - 1) + 2.0 * gray(y + 1, x) + gray(y + 1, x + 1))
                - (gray(y - 1, x - 1) + 2.0 * gray(y - 1, x) + gray(y - 1, x + 1));
            acc += (gx * gx + gy * gy).sqrt();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

/// Low-level triplet score: mean Sobel magnitude over its three frames.
pub fn lowlevel_score(frames: [&Array3<f64>; 3]) -> f64 {
    frames.iter().map(|f| mean_gradient(f)).sum::<f64>() / 3.0
}

/// Per-triplet importance weights for a batch. `pooled[i]` is the
/// concatenated pooled feature of triplet `i`; `images[i]` its frames (only
/// read in low-level mode).
pub fn importance_weights(
    mode: WeightMode,
    params: &Params,
    pooled: &[Array1<f64>],
    images: &[[&Array3<f64>; 3]],
) -> Result<Vec<f64>> {
    let n = pooled.len().max(images.len());
    if n == 0 {
        return Err(Error::Contract("importance weights need a nonempty batch".into()));
    }
    match mode {
        WeightMode::ConstantOne => Ok(vec![1.0; n]),
        WeightMode::Learned => weights_from_scores(&learned_scores(params, pooled)),
        WeightMode::LowlevelGradient => {
            let scores: Vec<f64> = images.iter().map(|t| lowlevel_score(*t)).collect();
            weights_from_scores(&scores)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    fn d(p: f64, n: f64) -> TripletDistances {
        TripletDistances { d_pos: p, d_neg: n }
    }

    #[test]
    fn attention_loss_anchors() {
        let a = Array1::from_vec(vec![0.2, 0.7, 0.4]);
        assert_eq!(attention_loss(&a, &a).unwrap(), 0.0);
        let x = Array1::from_vec(vec![1.0, 0.0]);
        let y = Array1::from_vec(vec![0.0, 1.0]);
        assert_eq!(attention_loss(&x, &y).unwrap(), 2f64.sqrt());
        assert!(matches!(attention_loss(&a, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_loss_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let a = Array1::from_shape_simple_fn(2048, || rng.gen::<f64>());
            let b = Array1::from_shape_simple_fn(2048, || rng.gen::<f64>());
            let mut sum = 0.0;
            for i in 0..2048 {
                sum += (a[i] - b[i]).powi(2);
            }
            assert!((attention_loss(&a, &b).unwrap() - sum.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn verbatim_scalar_values() {
        let e = std::f64::consts::E;
        let v = triplet_loss_verbatim(d(0.0, 1.0), 1e-8).unwrap();
        assert!((v - 1.0 / (1.0 - e)).abs() < 1e-15);
        assert!((v + 0.5820).abs() < 1e-4);
        let v = triplet_loss_verbatim(d(1.0, 0.0), 1e-8).unwrap();
        assert!((v - e / (e - 1.0)).abs() < 1e-15);
        assert!((v - 1.5820).abs() < 1e-4);
    }

    #[test]
    fn verbatim_singularity_surfaces() {
        assert!(matches!(
            triplet_loss_verbatim(d(0.4, 0.4), 1e-8),
            Err(Error::Singular { .. })
        ));
        // gap of ~1.5e-9 is inside the guard band
        assert!(triplet_loss_verbatim(d(0.0, 1.5e-9), 1e-8).is_err());
        assert!(triplet_loss_verbatim(d(0.0, 1e-6), 1e-8).is_ok());
    }

    #[test]
    fn stable_scalar_values() {
        assert!((triplet_loss_stable(d(0.8, 0.8)) - 2f64.ln()).abs() < 1e-15);
        let v = triplet_loss_stable(d(0.0, 10.0));
        assert!((v - (-10f64).exp().ln_1p()).abs() < 1e-18);
        assert!((v - 4.54e-5).abs() < 1e-7);
        let v = triplet_loss_stable(d(100.0, 0.0));
        assert!(v.is_finite() && (v - 100.0).abs() < 1e-12);
        assert!(triplet_loss_stable(d(1000.0, 0.0)).is_finite());
    }

    #[test]
    fn softmax_weight_examples() {
        assert_eq!(weights_from_scores(&[0.3, 0.3, 0.3]).unwrap(), vec![1.0, 1.0, 1.0]);
        let w = weights_from_scores(&[3f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        assert!(weights_from_scores(&[]).is_err());
    }

    #[test]
    fn constant_mode_is_all_ones() {
        let p = Params::init(&crate::model::ModelConfig::default(), 0).unwrap();
        let pooled = vec![Array1::from_elem(192, 3.0); 5];
        let w = importance_weights(WeightMode::ConstantOne, &p, &pooled, &[]).unwrap();
        assert_eq!(w, vec![1.0; 5]);
        assert!(importance_weights(WeightMode::Learned, &p, &[], &[]).is_err());
    }

    #[test]
    fn zero_initialised_scorer_gives_unit_weights() {
        let p = Params::init(&crate::model::ModelConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pooled: Vec<_> = (0..4).map(|_| Array1::from_shape_simple_fn(192, || rng.gen::<f64>())).collect();
        let w = importance_weights(WeightMode::Learned, &p, &pooled, &[]).unwrap();
        assert_eq!(w, vec![1.0; 4]);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 1.0, 2.5), 6.0);
        assert_eq!(total_loss(3.0, 7.0, 0.0, 2.5), 0.0);
        assert_eq!(total_loss(3.0, 7.0, 0.8, 0.0), 0.8 * 3.0);
    }

    #[test]
    fn sobel_of_flat_and_ramp() {
        assert_eq!(mean_gradient(&Array3::from_elem((8, 8, 3), 0.4)), 0.0);
        // horizontal ramp of slope 0.1 per pixel: |gx| = 8 · 0.1
        let ramp = Array3::from_shape_fn((6, 6, 3), |(_, x, _)| 0.1 * x as f64);
        assert!((mean_gradient(&ramp) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let a = Array1::from_shape_simple_fn(16, || rng.gen::<f64>());
            let b = Array1::from_shape_simple_fn(16, || rng.gen::<f64>());
            let (_, ga, gb) = attention_loss_grad(&a, &b).unwrap();
            for i in 0..16 {
                let f = |da: f64, db: f64| {
                    let mut a2 = a.clone();
                    let mut b2 = b.clone();
                    a2[i] += da;
                    b2[i] += db;
                    attention_loss(&a2, &b2).unwrap()
                };
                let na = (f(STEP, 0.0) - f(-STEP, 0.0)) / (2.0 * STEP);
                let nb = (f(0.0, STEP) - f(0.0, -STEP)) / (2.0 * STEP);
                assert!(rel_err(ga[i], na) < 1e-4 && rel_err(gb[i], nb) < 1e-4);
            }
        }
    }

    #[test]
    fn triplet_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let p: f64 = rng.gen_range(0.0..2.0);
            let n: f64 = rng.gen_range(0.0..2.0);
            if (p - n).abs() < 0.05 {
                continue;
            }
            checked += 1;
            let (_, gp, gn) = triplet_loss_verbatim_grad(d(p, n), 1e-8).unwrap();
            let f = |p, n| triplet_loss_verbatim(d(p, n), 1e-8).unwrap();
            assert!(rel_err(gp, (f(p + STEP, n) - f(p - STEP, n)) / (2.0 * STEP)) < 1e-4);
            assert!(rel_err(gn, (f(p, n + STEP) - f(p, n - STEP)) / (2.0 * STEP)) < 1e-4);
            let (_, gp, gn) = triplet_loss_stable_grad(d(p, n));
            let f = |p, n| triplet_loss_stable(d(p, n));
            assert!(rel_err(gp, (f(p + STEP, n) - f(p - STEP, n)) / (2.0 * STEP)) < 1e-4);
            assert!(rel_err(gn, (f(p, n + STEP) - f(p, n - STEP)) / (2.0 * STEP)) < 1e-4);
        }
    }

    #[test]
    fn softmax_weight_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = weights_from_scores(&s).unwrap();
            let analytic = weights_backward(&w, &g);
            for j in 0..5 {
                let f = |h: f64| {
                    let mut s2 = s.clone();
                    s2[j] += h;
                    weights_from_scores(&s2).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (f(STEP) - f(-STEP)) / (2.0 * STEP);
                assert!(rel_err(analytic[j], fd) < 1e-4, "{} vs {fd}", analytic[j]);
            }
        }
    }

    #[test]
    fn verbatim_matches_printed_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let (p, n): (f64, f64) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            let oracle = p.exp() / (p.exp() - n.exp());
            match triplet_loss_verbatim(d(p, n), 1e-8) {
                Ok(v) => assert!((v - oracle).abs() <= 1e-12 * oracle.abs().max(1.0)),
                Err(_) => assert!((p.exp() - n.exp()).abs() < 1e-8),
            }
        }
    }

    proptest! {
        #[test]
        fn stable_is_monotone(p in 0.0f64..2.0, n in 0.0f64..2.0, h in 1e-3f64..1.0) {
            prop_assert!(triplet_loss_stable(d(p + h, n)) > triplet_loss_stable(d(p, n)));
            prop_assert!(triplet_loss_stable(d(p, n + h)) < triplet_loss_stable(d(p, n)));
        }

        #[test]
        fn attention_loss_symmetric(a in proptest::collection::vec(0.0f64..1.0, 8), b in proptest::collection::vec(0.0f64..1.0, 8)) {
            let (a, b) = (Array1::from_vec(a), Array1::from_vec(b));
            prop_assert_eq!(attention_loss(&a, &b).unwrap(), attention_loss(&b, &a).unwrap());
        }

        #[test]
        fn softmax_weights_sum_to_batch(s in proptest::collection::vec(-20.0f64..20.0, 1..32)) {
            let w = weights_from_scores(&s).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - s.len() as f64).abs() < 1e-6);
            prop_assert!(w.iter().all(|&v| v > 0.0 && v.is_finite()));
        }
    }
}
