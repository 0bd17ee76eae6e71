//! Forward and backward pass of the weighted objective over a batch of
//! triplets. Every frame of the batch goes through one backbone call.

use ndarray::{concatenate, s, Array1, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::Variant;
use crate::datakit::{Triplet, View};
use crate::error::{Error, Result};
use crate::losses::{
    distance_with_grad, lowlevel_score, triplet_loss_grad, weights_backward, weights_from_scores, LossConfig,
    TripletDistances, WeightMode,
};
use crate::model::{
    attention_backward, attention_from_pooled, backward_batch, embed_filtered, forward_batch, normalize_backward,
    pool, pool_backward, roa_heatmap, AttentionTape, ChannelAttentionVector, Embedding, FeatureMap, Params,
    RoaHeatmap,
};

/// Loss wiring of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub variant: Variant,
    pub loss: LossConfig,
}

impl Objective {
    pub fn new(variant: Variant, lambda: f64, triplet_variant: crate::losses::TripletVariant, eps: f64) -> Self {
        Objective {
            variant,
            loss: variant.loss_config(lambda, triplet_variant, eps),
        }
    }
}

/// Everything computed for one triplet.
#[derive(Debug, Clone)]
pub struct TripletOutput {
    /// Embeddings of x, y, z.
    pub embeddings: [Embedding; 3],
    pub attention: [ChannelAttentionVector; 3],
    pub heatmaps: [RoaHeatmap; 3],
    pub distances: TripletDistances,
    pub attention_loss: f64,
    pub triplet_loss: f64,
    pub weight: f64,
}

/// Per-triplet entry of a batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemLoss {
    pub d_pos: f64,
    pub d_neg: f64,
    pub attention_loss: f64,
    pub triplet_loss: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Mean weighted objective.
    pub loss: f64,
    pub attention_loss: f64,
    pub triplet_loss: f64,
    /// Entropy of the normalised weights `w / B`.
    pub weight_entropy: f64,
    pub items: Vec<ItemLoss>,
}

const ROLES: [View; 3] = [View::First, View::Third, View::First];

/// Embeddings of (x, y, z) from pooled averages and attention vectors under
/// a variant's wiring.
pub fn wired_embeddings(
    variant: Variant,
    avg: [&Array1<f64>; 3],
    m: [&ChannelAttentionVector; 3],
) -> [Embedding; 3] {
    std::array::from_fn(|r| embed_filtered(avg[r], variant.filters(ROLES[r]).then_some(m[r])))
}

struct View3 {
    map_shape: (usize, usize, usize),
    tape: AttentionTape,
    m: ChannelAttentionVector,
}

fn entropy(weights: &[f64]) -> f64 {
    let b = weights.len() as f64;
    -weights
        .iter()
        .map(|w| w / b)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

fn concat3(a: [&Array1<f64>; 3]) -> Array1<f64> {
    concatenate(Axis(0), &[a[0].view(), a[1].view(), a[2].view()]).expect("equal-rank vectors")
}

/// Runs the objective over `batch`; when `grads` is given, accumulates the
/// gradient of the mean batch loss into it.
pub fn batch_pass(
    params: &Params,
    batch: &[[&Array3<f64>; 3]],
    obj: &Objective,
    mut grads: Option<&mut Params>,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let b = batch.len();
    let images: Vec<&Array3<f64>> = batch.iter().flat_map(|t| t.iter().copied()).collect();
    let (maps, tape) = forward_batch(params, &images)?;
    let views: Vec<View3> = maps
        .iter()
        .map(|f| {
            let (m, tape) = attention_from_pooled(pool(f), params);
            View3 {
                map_shape: f.data.dim(),
                tape,
                m,
            }
        })
        .collect();
    let avg = |i: usize, r: usize| &views[3 * i + r].tape.pooled.avg;

    let scores = match obj.loss.weight_mode {
        WeightMode::ConstantOne => None,
        WeightMode::Learned => Some(
            (0..b)
                .map(|i| params.weight_fc.dot(&concat3([avg(i, 0), avg(i, 1), avg(i, 2)])) + params.weight_bias[0])
                .collect::<Vec<_>>(),
        ),
        WeightMode::LowlevelGradient => Some(batch.iter().map(|t| lowlevel_score(*t)).collect()),
    };
    let weights = match &scores {
        Some(s) => weights_from_scores(s)?,
        None => vec![1.0; b],
    };

    let lambda = obj.loss.lambda;
    let variant = obj.variant;
    let mut items = Vec::with_capacity(b);
    // gradient pieces per triplet: d/dL_TL terms and the embedding chain
    struct Chain {
        g: [Array1<f64>; 3],
        d_tl: (f64, f64),
        d_pos: (Array1<f64>, Array1<f64>),
        d_neg: (Array1<f64>, Array1<f64>),
        al: (Array1<f64>, Array1<f64>),
    }
    let mut chains = Vec::with_capacity(b);
    for i in 0..b {
        let g: [Array1<f64>; 3] = std::array::from_fn(|r| {
            let v = &views[3 * i + r];
            if variant.filters(ROLES[r]) {
                avg(i, r) * &v.m.0
            } else {
                avg(i, r).clone()
            }
        });
        let e: [Embedding; 3] = std::array::from_fn(|r| crate::model::normalize(&g[r]));
        let (d_pos, gx, gy1) = distance_with_grad(&e[0].values, &e[1].values);
        let (d_neg, gy2, gz) = distance_with_grad(&e[1].values, &e[2].values);
        let d = TripletDistances { d_pos, d_neg };
        let (l_tl, dp, dn) = triplet_loss_grad(d, &obj.loss)?;
        let p = if variant.raw_in_attention_loss(View::First) { avg(i, 0) } else { &views[3 * i].m.0 };
        let q = if variant.raw_in_attention_loss(View::Third) {
            avg(i, 1)
        } else {
            &views[3 * i + 1].m.0
        };
        let (l_al, gp, gq) = distance_with_grad(p, q);
        items.push(ItemLoss {
            d_pos,
            d_neg,
            attention_loss: l_al,
            triplet_loss: l_tl,
            weight: weights[i],
        });
        chains.push(Chain {
            g,
            d_tl: (dp, dn),
            d_pos: (gx, gy1),
            d_neg: (gy2, gz),
            al: (gp, gq),
        });
    }

    let bf = b as f64;
    let loss = items
        .iter()
        .map(|it| crate::losses::total_loss(it.triplet_loss, it.attention_loss, it.weight, lambda))
        .sum::<f64>()
        / bf;
    let stats = BatchStats {
        loss,
        attention_loss: items.iter().map(|it| it.attention_loss).sum::<f64>() / bf,
        triplet_loss: items.iter().map(|it| it.triplet_loss).sum::<f64>() / bf,
        weight_entropy: entropy(&weights),
        items,
    };

    let Some(grads) = grads.as_deref_mut() else {
        return Ok(stats);
    };

    let c = params.config.channels();
    let mut d_avg: Vec<Array1<f64>> = vec![Array1::zeros(c); 3 * b];
    let mut d_m: Vec<Array1<f64>> = vec![Array1::zeros(c); 3 * b];

    if obj.loss.weight_mode == WeightMode::Learned {
        let d_w: Vec<f64> = stats
            .items
            .iter()
            .map(|it| (it.triplet_loss + lambda * it.attention_loss) / bf)
            .collect();
        let d_s = weights_backward(&weights, &d_w);
        for i in 0..b {
            let feats = concat3([avg(i, 0), avg(i, 1), avg(i, 2)]);
            grads.weight_fc.scaled_add(d_s[i], &feats);
            grads.weight_bias[0] += d_s[i];
            for r in 0..3 {
                d_avg[3 * i + r].scaled_add(d_s[i], &params.weight_fc.slice(s![r * c..(r + 1) * c]));
            }
        }
    }

    for (i, ch) in chains.iter().enumerate() {
        let k_tl = weights[i] / bf;
        let k_al = lambda * weights[i] / bf;
        let d_e: [Array1<f64>; 3] = [
            &ch.d_pos.0 * (k_tl * ch.d_tl.0),
            &ch.d_pos.1 * (k_tl * ch.d_tl.0) + &ch.d_neg.0 * (k_tl * ch.d_tl.1),
            &ch.d_neg.1 * (k_tl * ch.d_tl.1),
        ];
        for r in 0..3 {
            let d_g = normalize_backward(&ch.g[r], &d_e[r]);
            let j = 3 * i + r;
            if variant.filters(ROLES[r]) {
                d_avg[j] += &(&d_g * &views[j].m.0);
                d_m[j] += &(&d_g * avg(i, r));
            } else {
                d_avg[j] += &d_g;
            }
        }
        if k_al != 0.0 {
            for (r, gr) in [(0, &ch.al.0), (1, &ch.al.1)] {
                let j = 3 * i + r;
                if variant.raw_in_attention_loss(ROLES[r]) {
                    d_avg[j].scaled_add(k_al, gr);
                } else {
                    d_m[j].scaled_add(k_al, gr);
                }
            }
        }
    }

    let mut d_maps = Vec::with_capacity(3 * b);
    for (j, v) in views.iter().enumerate() {
        let (da, dmax) = attention_backward(params, &v.tape, &d_m[j], grads);
        let total_avg = &d_avg[j] + &da;
        d_maps.push(pool_backward(v.map_shape, &v.tape.pooled, &total_avg, Some(&dmax)));
    }
    backward_batch(params, &tape, &d_maps, grads);
    Ok(stats)
}

/// Batch objective for decoded triplets.
pub fn batch_loss(params: &Params, batch: &[Triplet], obj: &Objective) -> Result<BatchStats> {
    let frames: Vec<[&Array3<f64>; 3]> = batch.iter().map(|t| [&t.x.image, &t.y.image, &t.z.image]).collect();
    batch_pass(params, &frames, obj, None)
}

/// Mean batch loss and its gradient with respect to every parameter.
pub fn loss_and_grad(params: &Params, batch: &[Triplet], obj: &Objective) -> Result<(BatchStats, Params)> {
    let frames: Vec<[&Array3<f64>; 3]> = batch.iter().map(|t| [&t.x.image, &t.y.image, &t.z.image]).collect();
    let mut grads = params.zeros_like();
    let stats = batch_pass(params, &frames, obj, Some(&mut grads))?;
    Ok((stats, grads))
}

/// Single-triplet forward pass with heatmaps for all three frames. The
/// importance weight of a lone triplet is 1 under batch normalisation.
pub fn forward_triplet(params: &Params, t: &Triplet, obj: &Objective) -> Result<TripletOutput> {
    let (maps, _) = forward_batch(params, &[&t.x.image, &t.y.image, &t.z.image])?;
    let side = params.config.backbone.input_side;
    let mut pooled_avg = Vec::with_capacity(3);
    let mut att = Vec::with_capacity(3);
    for f in &maps {
        let (m, tape) = attention_from_pooled(pool(f), params);
        pooled_avg.push(tape.pooled.avg);
        att.push(m);
    }
    let embeddings = wired_embeddings(
        obj.variant,
        [&pooled_avg[0], &pooled_avg[1], &pooled_avg[2]],
        [&att[0], &att[1], &att[2]],
    );
    let distances = TripletDistances {
        d_pos: embeddings[0].distance(&embeddings[1]),
        d_neg: embeddings[1].distance(&embeddings[2]),
    };
    let (triplet_loss, _, _) = triplet_loss_grad(distances, &obj.loss)?;
    let p = if obj.variant.raw_in_attention_loss(View::First) { &pooled_avg[0] } else { &att[0].0 };
    let q = if obj.variant.raw_in_attention_loss(View::Third) { &pooled_avg[1] } else { &att[1].0 };
    let attention_loss = crate::losses::attention_loss(p, q)?;
    let heatmaps = [
        roa_heatmap(&maps[0], &att[0], side)?,
        roa_heatmap(&maps[1], &att[1], side)?,
        roa_heatmap(&maps[2], &att[2], side)?,
    ];
    let weight = if obj.loss.weight_mode == WeightMode::ConstantOne { 1.0 } else { weights_from_scores(&[0.0])?[0] };
    Ok(TripletOutput {
        embeddings,
        attention: [att[0].clone(), att[1].clone(), att[2].clone()],
        heatmaps,
        distances,
        attention_loss,
        triplet_loss,
        weight,
    })
}

/// Embedding of one frame from `view` under a variant's wiring, with its
/// attention vector and feature map.
pub fn embed_frame(
    params: &Params,
    image: &Array3<f64>,
    view: View,
    variant: Variant,
) -> Result<(Embedding, ChannelAttentionVector, FeatureMap)> {
    let (mut maps, _) = forward_batch(params, &[image])?;
    let f = maps.pop().expect("one map per frame");
    let (m, tape) = attention_from_pooled(pool(&f), params);
    let e = embed_filtered(&tape.pooled.avg, variant.filters(view).then_some(&m));
    Ok((e, m, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::Frame;
    use crate::losses::TripletVariant;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(rng: &mut ChaCha8Rng, view: View) -> Frame {
        Frame {
            pair_id: "p".into(),
            view,
            timestamp: 0.0,
            image: Array3::from_shape_simple_fn((64, 64, 3), || rng.gen::<f64>()),
        }
    }

    fn triplet(rng: &mut ChaCha8Rng) -> Triplet {
        Triplet {
            x: frame(rng, View::First),
            y: frame(rng, View::Third),
            z: frame(rng, View::First),
        }
    }

    fn obj(v: Variant) -> Objective {
        Objective::new(v, 2.5, TripletVariant::Stable, 1e-8)
    }

    #[test]
    fn identical_x_and_y_give_zero_distance_and_attention_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Params::init(&ModelConfig::default(), 0).unwrap();
        let mut t = triplet(&mut rng);
        t.y.image = t.x.image.clone();
        let out = forward_triplet(&p, &t, &obj(Variant::Full)).unwrap();
        assert_eq!(out.distances.d_pos, 0.0);
        assert_eq!(out.attention_loss, 0.0);
        assert!(out.distances.d_neg > 0.0);
    }

    #[test]
    fn batch_and_single_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Params::init(&ModelConfig::default(), 1).unwrap();
        let t = triplet(&mut rng);
        let single = forward_triplet(&p, &t, &obj(Variant::Full)).unwrap();
        let batch = batch_loss(&p, std::slice::from_ref(&t), &obj(Variant::Full)).unwrap();
        assert!((batch.items[0].d_pos - single.distances.d_pos).abs() < 1e-12);
        assert!((batch.items[0].attention_loss - single.attention_loss).abs() < 1e-12);
        assert!((batch.loss - (single.triplet_loss + 2.5 * single.attention_loss)).abs() < 1e-12);
    }

    #[test]
    fn cnn_tl_3_equals_full_with_unit_third_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let avg: Vec<Array1<f64>> = (0..3).map(|_| Array1::from_shape_simple_fn(64, || rng.gen::<f64>())).collect();
        let m: Vec<ChannelAttentionVector> = (0..3)
            .map(|_| ChannelAttentionVector(Array1::from_shape_simple_fn(64, || rng.gen_range(0.05..0.95))))
            .collect();
        let ones = ChannelAttentionVector(Array1::ones(64));
        let a = wired_embeddings(Variant::CnnTl3, [&avg[0], &avg[1], &avg[2]], [&m[0], &m[1], &m[2]]);
        let b = wired_embeddings(Variant::Full, [&avg[0], &avg[1], &avg[2]], [&m[0], &ones, &m[2]]);
        assert_eq!(a[0].distance(&a[1]), b[0].distance(&b[1]));
        assert_eq!(a[1].distance(&a[2]), b[1].distance(&b[2]));
    }

    #[test]
    fn without_sa_leaves_attention_loss_out_of_the_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Params::init(&ModelConfig::default(), 3).unwrap();
        let batch: Vec<Triplet> = (0..2).map(|_| triplet(&mut rng)).collect();
        let (_, g_without) = loss_and_grad(&p, &batch, &obj(Variant::WithoutSa)).unwrap();
        let mut zero_lambda = obj(Variant::Full);
        zero_lambda.loss.lambda = 0.0;
        let (_, g_full0) = loss_and_grad(&p, &batch, &zero_lambda).unwrap();
        assert!(g_without.bitwise_eq(&g_full0));
        let (_, g_full) = loss_and_grad(&p, &batch, &obj(Variant::Full)).unwrap();
        assert!(!g_full.bitwise_eq(&g_without));
    }

    #[test]
    fn lowlevel_weights_depend_on_image_texture() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Params::init(&ModelConfig::default(), 4).unwrap();
        let mut flat = triplet(&mut rng);
        for f in [&mut flat.x, &mut flat.y, &mut flat.z] {
            f.image.fill(0.5);
        }
        let noisy = triplet(&mut rng);
        let stats = batch_loss(&p, &[flat, noisy], &obj(Variant::LowlevelTw)).unwrap();
        assert!(stats.items[1].weight > stats.items[0].weight);
        assert!((stats.items[0].weight + stats.items[1].weight - 2.0).abs() < 1e-12);
    }

    #[test]
    fn verbatim_singularity_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Params::init(&ModelConfig::default(), 5).unwrap();
        let mut t = triplet(&mut rng);
        t.z.image = t.x.image.clone();
        let o = Objective::new(Variant::Full, 2.5, TripletVariant::Verbatim, 1e-8);
        assert!(matches!(batch_loss(&p, &[t], &o), Err(Error::Singular { .. })));
    }
}
