use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{corresponding_second, ActionSegment, FrameStore, Manifest, View};
use crate::error::{Error, Result};
use crate::eval::embed_stream;
use crate::model::Checkpoint;

/// How the selection threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Percentile (0..=100) of the video's own importance scores.
    Percentile(f64),
    Fixed(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Percentile(75.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pair_id: String,
    pub importance: Vec<f64>,
    pub selected: Vec<usize>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f_score: f64,
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Linear-interpolated percentile of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Seconds whose importance reaches `threshold`.
pub fn select(importance: &[f64], threshold: f64) -> Vec<usize> {
    importance
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(t, _)| t)
        .collect()
}

pub fn resolve_threshold(importance: &[f64], policy: ThresholdPolicy) -> Result<f64> {
    match policy {
        ThresholdPolicy::Fixed(t) if t.is_finite() => Ok(t),
        ThresholdPolicy::Percentile(q) if (0.0..=100.0).contains(&q) => Ok(percentile(importance, q)),
        other => Err(Error::Config(format!("invalid threshold policy {other:?}"))),
    }
}

/// Per-second importance from attention vectors: cosine similarity of the
/// third-person vector at `t` and the first-person vector at the aligned
/// second, mapped from [-1, 1] to [0, 1].
pub fn summarize_attention(
    manifest: &Manifest,
    pair: usize,
    third: &[Array1<f64>],
    first: &[Array1<f64>],
    policy: ThresholdPolicy,
) -> Result<Summary> {
    let entry = &manifest.entries[pair];
    let seconds = entry.third_view.duration.floor() as usize;
    if seconds == 0 {
        return Err(Error::Validation(format!("pair '{}' is shorter than one second", entry.pair_id)));
    }
    let importance: Vec<f64> = (0..seconds)
        .map(|t| {
            let s = corresponding_second(manifest, pair, t);
            0.5 * (cosine(&third[t], &first[s]) + 1.0)
        })
        .collect();
    let threshold = resolve_threshold(&importance, policy)?;
    Ok(Summary {
        pair_id: entry.pair_id.clone(),
        selected: select(&importance, threshold),
        importance,
        threshold,
    })
}

/// Joint-attention summary of one pair under a trained checkpoint.
pub fn summarize(
    ck: &Checkpoint,
    manifest: &Manifest,
    store: &FrameStore,
    pair: usize,
    policy: ThresholdPolicy,
) -> Result<Summary> {
    if ck.epochs_trained == 0 {
        return Err(Error::Validation("summarization needs a trained checkpoint".into()));
    }
    let (_, first) = embed_stream(&ck.params, ck.variant, store, pair, View::First)?;
    let (_, third) = embed_stream(&ck.params, ck.variant, store, pair, View::Third)?;
    summarize_attention(manifest, pair, &third, &first, policy)
}

/// Seconds `t < floor(duration)` with `start <= t < end` for some segment.
pub fn annotated_seconds(segments: &[ActionSegment], duration: f64) -> Vec<usize> {
    (0..duration.floor() as usize)
        .filter(|&t| segments.iter().any(|s| s.start <= t as f64 && (t as f64) < s.end))
        .collect()
}

/// Second-level set overlap; an empty selection has precision 0.
pub fn set_metrics(selected: &[usize], annotated: &[usize]) -> SummaryMetrics {
    let hit = selected.iter().filter(|t| annotated.contains(t)).count() as f64;
    let precision = if selected.is_empty() { 0.0 } else { hit / selected.len() as f64 };
    let recall = if annotated.is_empty() { 0.0 } else { hit / annotated.len() as f64 };
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SummaryMetrics {
        recall,
        precision,
        f_score,
    }
}

pub fn summary_metrics(s: &Summary, segments: &[ActionSegment]) -> SummaryMetrics {
    set_metrics(&s.selected, &annotated_seconds(segments, s.importance.len() as f64))
}

/// `k` seconds drawn uniformly without replacement from `0..seconds`, sorted.
pub fn random_selection<R: Rng + ?Sized>(seconds: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut v = sample(rng, seconds, k.min(seconds)).into_vec();
    v.sort_unstable();
    v
}
