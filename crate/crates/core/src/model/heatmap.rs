use ndarray::Array2;

use super::attention::ChannelAttentionVector;
use super::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Spatial region-of-attention map: the attention-weighted channel average of
/// a feature map, min-max normalised, plus a bilinear upsampling to the input
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RoaHeatmap {
    pub grid: Array2<f64>,
    pub upsampled: Array2<f64>,
    /// The weighted map was constant; every entry is 0.5.
    pub constant: bool,
}

impl RoaHeatmap {
    /// `(x, y)` of the upsampled maximum; ties go to the first in row-major order.
    pub fn peak(&self) -> (usize, usize) {
        argmax(&self.upsampled)
    }
}

pub(crate) fn argmax(a: &Array2<f64>) -> (usize, usize) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for ((y, x), &v) in a.indexed_iter() {
        if v > best.1 {
            best = ((x, y), v);
        }
    }
    best.0
}

/// Channel-weighted average `Σ_k M_k F_k / Σ_k M_k` before normalisation.
pub fn weighted_grid(f: &FeatureMap, m: &ChannelAttentionVector) -> Result<Array2<f64>> {
    let (c, h, w) = f.data.dim();
    if m.len() != c {
        return Err(Error::Contract(format!(
            "attention vector of length {} for {c} channels",
            m.len()
        )));
    }
    let total: f64 = m.0.sum();
    let mut grid = Array2::zeros((h, w));
    for (plane, &mk) in f.data.outer_iter().zip(m.0.iter()) {
        grid.scaled_add(mk / total, &plane);
    }
    Ok(grid)
}

/// Min-max normalises in place; returns false (and fills 0.5) for a constant map.
pub fn normalize_unit(a: &mut Array2<f64>) -> bool {
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE)) {
        a.fill(0.5);
        return false;
    }
    a.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
    true
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let coord = |dst: usize, out: usize, src: usize| {
        let x = ((dst as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, x - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn roa_heatmap(f: &FeatureMap, m: &ChannelAttentionVector, input_side: usize) -> Result<RoaHeatmap> {
    let mut grid = weighted_grid(f, m)?;
    let constant = !normalize_unit(&mut grid);
    let upsampled = if constant {
        Array2::from_elem((input_side, input_side), 0.5)
    } else {
        upsample_bilinear(&grid, input_side, input_side).mapv(|v| v.clamp(0.0, 1.0))
    };
    Ok(RoaHeatmap {
        grid,
        upsampled,
        constant,
    })
}
