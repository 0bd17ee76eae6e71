//! Pairs discrimination, moment localization, attention hit rate and the
//! ablation comparison table.

mod table;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use table::{evaluate_checkpoints, run_ablations, AblationRow, AblationRun, AblationTable, EvalSettings};

use crate::datakit::{
    align_timestamp, image_to_array, FrameRef, FrameStore, Manifest, PairTruth, SamplerConfig, TripletRef,
    TripletSampler, View,
};
use crate::error::{Error, Result};
use crate::model::{euclidean, forward_batch, pool, attention_from_pooled, embed_filtered, roa_heatmap, Params};
use crate::trainer::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PairsDiscrimination,
    MomentLocalization,
    RoaHitRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Triplet {
        triplet: TripletRef,
        d_pos: f64,
        d_neg: f64,
        correct: bool,
    },
    Moment {
        pair_id: String,
        third_second: usize,
        predicted: usize,
        target: f64,
        error: f64,
    },
    Frame {
        pair_id: String,
        third_second: usize,
        peak: (usize, usize),
        hit: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub value: f64,
    pub n: usize,
    /// Median of per-moment errors (moment localization only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    pub records: Vec<Record>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-frame embeddings and attention vectors of every stream in a store.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub first: Vec<Vec<Array1<f64>>>,
    pub third: Vec<Vec<Array1<f64>>>,
    pub first_attention: Vec<Vec<Array1<f64>>>,
    pub third_attention: Vec<Vec<Array1<f64>>>,
}

impl EmbeddingTable {
    pub fn embedding(&self, r: FrameRef) -> &Array1<f64> {
        match r.view {
            View::First => &self.first[r.pair][r.second],
            View::Third => &self.third[r.pair][r.second],
        }
    }

    pub fn stream(&self, pair: usize, view: View) -> &[Array1<f64>] {
        match view {
            View::First => &self.first[pair],
            View::Third => &self.third[pair],
        }
    }

    pub fn attention(&self, pair: usize, view: View) -> &[Array1<f64>] {
        match view {
            View::First => &self.first_attention[pair],
            View::Third => &self.third_attention[pair],
        }
    }
}

const CHUNK: usize = 32;

/// Embeddings and attention vectors of one stream, in frame order.
pub fn embed_stream(
    params: &Params,
    variant: Variant,
    store: &FrameStore,
    pair: usize,
    view: View,
) -> Result<(Vec<Array1<f64>>, Vec<Array1<f64>>)> {
    let mut emb = Vec::new();
    let mut att = Vec::new();
    for chunk in store.stream(pair, view).chunks(CHUNK) {
        let arrays: Vec<_> = chunk.iter().map(image_to_array).collect();
        let refs: Vec<_> = arrays.iter().collect();
        let (maps, _) = forward_batch(params, &refs)?;
        for f in &maps {
            let (m, tape) = attention_from_pooled(pool(f), params);
            emb.push(embed_filtered(&tape.pooled.avg, variant.filters(view).then_some(&m)).values);
            att.push(m.0);
        }
    }
    Ok((emb, att))
}

/// Embeds every frame of `store` under a variant's wiring.
pub fn embed_store(params: &Params, variant: Variant, store: &FrameStore, pairs: usize) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable {
        first: Vec::with_capacity(pairs),
        third: Vec::with_capacity(pairs),
        first_attention: Vec::with_capacity(pairs),
        third_attention: Vec::with_capacity(pairs),
    };
    for pair in 0..pairs {
        let (emb, att) = embed_stream(params, variant, store, pair, View::First)?;
        table.first.push(emb);
        table.first_attention.push(att);
        let (emb, att) = embed_stream(params, variant, store, pair, View::Third)?;
        table.third.push(emb);
        table.third_attention.push(att);
    }
    Ok(table)
}

/// One test triplet per third-person frame of every valid pair, negatives
/// drawn from a seeded sampler.
pub fn test_triplets(manifest: &Manifest, cfg: SamplerConfig, seed: u64) -> Result<Vec<TripletRef>> {
    let sampler = TripletSampler::new(manifest, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sampler.total_anchor_frames()).map(|_| sampler.sample(&mut rng)).collect()
}

/// A triplet counts as correct iff `d(y, x) < d(y, z)`; ties are incorrect.
pub fn pairs_discrimination_from(
    distance: impl Fn(FrameRef, FrameRef) -> f64,
    triplets: &[TripletRef],
) -> Result<EvalReport> {
    if triplets.is_empty() {
        return Err(Error::Validation("pairs discrimination needs at least one triplet".into()));
    }
    let records: Vec<Record> = triplets
        .iter()
        .map(|t| {
            let d_pos = distance(t.y, t.x);
            let d_neg = distance(t.y, t.z);
            Record::Triplet {
                triplet: *t,
                d_pos,
                d_neg,
                correct: d_pos < d_neg,
            }
        })
        .collect();
    let correct = records
        .iter()
        .filter(|r| matches!(r, Record::Triplet { correct: true, .. }))
        .count();
    Ok(EvalReport {
        task: Task::PairsDiscrimination,
        value: correct as f64 / records.len() as f64,
        n: records.len(),
        median: None,
        records,
    })
}

pub fn pairs_discrimination(table: &EmbeddingTable, triplets: &[TripletRef]) -> Result<EvalReport> {
    pairs_discrimination_from(|a, b| euclidean(table.embedding(a), table.embedding(b)), triplets)
}

/// Index of the smallest value; the earliest wins ties.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Best-match moment search per third-person second. The value is the mean
/// over pairs of each pair's mean error; the median is over all moments.
pub fn moment_localization(table: &EmbeddingTable, manifest: &Manifest) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut pair_means = Vec::new();
    for (pi, pair) in manifest.entries.iter().enumerate() {
        if !pair.valid {
            continue;
        }
        if pair.first_view.duration < 2.0 || pair.third_view.duration < 2.0 {
            log::warn!("skipping pair '{}': stream shorter than 2 s", pair.pair_id);
            continue;
        }
        let firsts = table.stream(pi, View::First);
        let mut sum = 0.0;
        let thirds = table.stream(pi, View::Third);
        for (t, e3) in thirds.iter().enumerate() {
            let predicted = argmin(firsts.iter().map(|e1| euclidean(e3, e1)));
            let target = align_timestamp(t as f64, pair.third_view.duration, pair.first_view.duration)?;
            let error = (predicted as f64 - target).abs();
            sum += error;
            records.push(Record::Moment {
                pair_id: pair.pair_id.clone(),
                third_second: t,
                predicted,
                target,
                error,
            });
        }
        pair_means.push(sum / thirds.len() as f64);
    }
    if pair_means.is_empty() {
        return Err(Error::Validation("no pair long enough for moment localization".into()));
    }
    let mut errors: Vec<f64> = records
        .iter()
        .filter_map(|r| match r {
            Record::Moment { error, .. } => Some(*error),
            _ => None,
        })
        .collect();
    Ok(EvalReport {
        task: Task::MomentLocalization,
        value: pair_means.iter().sum::<f64>() / pair_means.len() as f64,
        n: records.len(),
        median: Some(median(&mut errors)),
        records,
    })
}

/// Fraction of third-person frames whose heatmap peak lies in the
/// ground-truth attention box.
pub fn roa_hit_rate(params: &Params, store: &FrameStore, truths: &[PairTruth]) -> Result<EvalReport> {
    let side = params.config.backbone.input_side;
    let mut records = Vec::new();
    for (pi, truth) in truths.iter().enumerate() {
        let frames = store.stream(pi, View::Third);
        for (chunk_start, chunk) in (0..frames.len()).step_by(CHUNK).zip(frames.chunks(CHUNK)) {
            let arrays: Vec<_> = chunk.iter().map(image_to_array).collect();
            let refs: Vec<_> = arrays.iter().collect();
            let (maps, _) = forward_batch(params, &refs)?;
            for (k, f) in maps.iter().enumerate() {
                let t = chunk_start + k;
                let (m, _) = attention_from_pooled(pool(f), params);
                let peak = roa_heatmap(f, &m, side)?.peak();
                let b = truth
                    .frames
                    .get(t)
                    .ok_or_else(|| Error::Validation(format!("no ground truth for '{}' second {t}", truth.pair_id)))?
                    .attention_box_third;
                records.push(Record::Frame {
                    pair_id: truth.pair_id.clone(),
                    third_second: t,
                    peak,
                    hit: b.contains_pixel(peak.0, peak.1),
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Validation("no frames to score".into()));
    }
    let hits = records.iter().filter(|r| matches!(r, Record::Frame { hit: true, .. })).count();
    Ok(EvalReport {
        task: Task::RoaHitRate,
        value: hits as f64 / records.len() as f64,
        n: records.len(),
        median: None,
        records,
    })
}
