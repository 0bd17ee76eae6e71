use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::segment::{Segmentation, Segmenter};
use crate::error::{Error, Result};
use crate::model::{channel_attention, extract_features, roa_heatmap, Params};

pub const HIST_BINS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosegConfig {
    /// Weight of ROA proximity against appearance.
    pub alpha: f64,
}

impl Default for CosegConfig {
    fn default() -> Self {
        CosegConfig { alpha: 0.5 }
    }
}

/// Centroid and colour histogram of one candidate segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeature {
    /// `(x, y)` in pixels.
    pub centroid: (f64, f64),
    /// `HIST_BINS` bins per RGB channel, concatenated; sums to 1.
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosegScores {
    pub first_segment: usize,
    pub third_segment: usize,
    pub proximity_cost: f64,
    pub appearance_cost: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosegResult {
    pub first_mask: Array2<bool>,
    pub third_mask: Array2<bool>,
    pub scores: CosegScores,
}

pub fn segment_features(image: &Array3<f64>, seg: &Segmentation) -> Vec<SegmentFeature> {
    let mut sums = vec![(0.0, 0.0, 0usize, vec![0.0; 3 * HIST_BINS]); seg.count];
    for ((y, x), &l) in seg.labels.indexed_iter() {
        let s = &mut sums[l];
        s.0 += x as f64;
        s.1 += y as f64;
        s.2 += 1;
        for c in 0..3 {
            let bin = ((image[[y, x, c]] * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            s.3[c * HIST_BINS + bin] += 1.0;
        }
    }
    sums.into_iter()
        .map(|(sx, sy, n, hist)| {
            let n = n.max(1) as f64;
            SegmentFeature {
                centroid: (sx / n, sy / n),
                histogram: hist.into_iter().map(|v| v / (3.0 * n)).collect(),
            }
        })
        .collect()
}

/// `½ Σ (a−b)² / (a+b)` over bins with mass; in [0, 1] for unit-mass inputs.
pub fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y).powi(2) / (x + y))
        .sum::<f64>()
        / 2.0
}

fn proximity(f: &SegmentFeature, peak: (f64, f64), diag: f64) -> f64 {
    (f.centroid.0 - peak.0).hypot(f.centroid.1 - peak.1) / diag
}

/// Proximity and appearance costs of every cross-view pair, indexed
/// `[[first_segment, third_segment]]`.
pub fn pair_costs(
    first: &[SegmentFeature],
    third: &[SegmentFeature],
    peaks: [(f64, f64); 2],
    dims: [(usize, usize); 2],
) -> (Array2<f64>, Array2<f64>) {
    let diag = |(h, w): (usize, usize)| (h as f64).hypot(w as f64);
    let p1: Vec<f64> = first.iter().map(|f| proximity(f, peaks[0], diag(dims[0]))).collect();
    let p3: Vec<f64> = third.iter().map(|f| proximity(f, peaks[1], diag(dims[1]))).collect();
    let prox = Array2::from_shape_fn((first.len(), third.len()), |(i, j)| p1[i] + p3[j]);
    let app = Array2::from_shape_fn((first.len(), third.len()), |(i, j)| {
        chi_square(&first[i].histogram, &third[j].histogram)
    });
    (prox, app)
}

/// Picks the cheapest cross-view segment pair given the two ROA peaks
/// `(x, y)`; ties go to the lowest indices.
pub fn cosegment_at(
    first: &Array3<f64>,
    third: &Array3<f64>,
    peaks: [(f64, f64); 2],
    segmenter: &dyn Segmenter,
    cfg: &CosegConfig,
) -> Result<CosegResult> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {}", cfg.alpha)));
    }
    let s1 = segmenter
        .segment(first)
        .map_err(|e| Error::Segmentation(format!("first-person frame: {e}")))?;
    let s3 = segmenter
        .segment(third)
        .map_err(|e| Error::Segmentation(format!("third-person frame: {e}")))?;
    let f1 = segment_features(first, &s1);
    let f3 = segment_features(third, &s3);
    let dims = [s1.labels.dim(), s3.labels.dim()];
    let (prox, app) = pair_costs(&f1, &f3, peaks, dims);
    let mut best: Option<CosegScores> = None;
    for ((i, j), &p) in prox.indexed_iter() {
        let a = app[[i, j]];
        let cost = cfg.alpha * p + (1.0 - cfg.alpha) * a;
        if best.as_ref().map_or(true, |b| cost < b.cost) {
            best = Some(CosegScores {
                first_segment: i,
                third_segment: j,
                proximity_cost: p,
                appearance_cost: a,
                cost,
            });
        }
    }
    let scores = best.ok_or_else(|| Error::Segmentation("no candidate segments".into()))?;
    Ok(CosegResult {
        first_mask: s1.mask(scores.first_segment),
        third_mask: s3.mask(scores.third_segment),
        scores,
    })
}

fn roa_peak(params: &Params, image: &Array3<f64>) -> Result<(f64, f64)> {
    let f = extract_features(params, image)?;
    let m = channel_attention(&f, params)?;
    let (x, y) = roa_heatmap(&f, &m, params.config.backbone.input_side)?.peak();
    Ok((x as f64, y as f64))
}

/// Co-segments a corresponding frame pair around the model's ROA peaks.
pub fn cosegment(
    params: &Params,
    first: &Array3<f64>,
    third: &Array3<f64>,
    segmenter: &dyn Segmenter,
    cfg: &CosegConfig,
) -> Result<CosegResult> {
    let peaks = [roa_peak(params, first)?, roa_peak(params, third)?];
    cosegment_at(first, third, peaks, segmenter, cfg)
}
