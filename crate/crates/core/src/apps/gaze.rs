use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{channel_attention, extract_features, roa_heatmap, Params, RoaHeatmap};

/// Fraction of heatmap mass kept around the peak for the gaze centroid.
pub const TOP_MASS: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeResult {
    pub head: (f64, f64),
    pub gaze_point: (f64, f64),
    /// Unit vector from head to gaze point; zero when degenerate.
    pub ray: (f64, f64),
    pub degenerate: bool,
}

/// Intensity-weighted centroid `(x, y)` of the brightest pixels whose
/// cumulative mass first reaches `TOP_MASS` of the total. `None` when the
/// map has no positive mass.
pub fn top_mass_centroid(map: &Array2<f64>) -> Option<(f64, f64)> {
    let mut px: Vec<((usize, usize), f64)> = map.indexed_iter().map(|(i, &v)| (i, v.max(0.0))).collect();
    let total: f64 = px.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return None;
    }
    px.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for ((y, x), v) in px {
        if v <= 0.0 {
            break;
        }
        mass += v;
        sx += v * x as f64;
        sy += v * y as f64;
        if mass >= TOP_MASS * total {
            break;
        }
    }
    Some((sx / mass, sy / mass))
}

/// Gaze from a heatmap and a head position in pixels of the upsampled map.
pub fn gaze_from_heatmap(h: &RoaHeatmap, head: (f64, f64)) -> Result<GazeResult> {
    let (rows, cols) = h.upsampled.dim();
    let inside = |p: f64, n: usize| p >= 0.0 && p <= (n - 1) as f64;
    if !(inside(head.0, cols) && inside(head.1, rows)) {
        return Err(Error::Validation(format!(
            "head ({}, {}) outside a {cols}x{rows} frame",
            head.0, head.1
        )));
    }
    let center = ((cols - 1) as f64 / 2.0, (rows - 1) as f64 / 2.0);
    let (gaze_point, flat) = match (h.constant, top_mass_centroid(&h.upsampled)) {
        (false, Some(p)) => (p, false),
        _ => (center, true),
    };
    let (dx, dy) = (gaze_point.0 - head.0, gaze_point.1 - head.1);
    let norm = dx.hypot(dy);
    let degenerate = flat || norm < 1e-9;
    let ray = if norm < 1e-9 { (0.0, 0.0) } else { (dx / norm, dy / norm) };
    Ok(GazeResult {
        head,
        gaze_point,
        ray,
        degenerate,
    })
}

/// Where the person in a third-person frame looks: the centre of its ROA.
pub fn predict_gaze(params: &Params, third_frame: &Array3<f64>, head: (f64, f64)) -> Result<GazeResult> {
    let f = extract_features(params, third_frame)?;
    let m = channel_attention(&f, params)?;
    gaze_from_heatmap(&roa_heatmap(&f, &m, params.config.backbone.input_side)?, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn heat(a: Array2<f64>) -> RoaHeatmap {
        RoaHeatmap {
            grid: a.clone(),
            upsampled: a,
            constant: false,
        }
    }

    #[test]
    fn point_mass_is_the_gaze_point() {
        let mut a = Array2::zeros((16, 16));
        a[[3, 11]] = 1.0;
        let g = gaze_from_heatmap(&heat(a), (0.0, 0.0)).unwrap();
        assert_eq!(g.gaze_point, (11.0, 3.0));
        assert!(!g.degenerate);
        assert!((g.ray.0.hypot(g.ray.1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_on_gaze_point_is_degenerate() {
        let mut a = Array2::zeros((8, 8));
        a[[5, 2]] = 1.0;
        let g = gaze_from_heatmap(&heat(a), (2.0, 5.0)).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.ray, (0.0, 0.0));
    }

    #[test]
    fn constant_map_falls_back_to_center() {
        let h = RoaHeatmap {
            grid: Array2::from_elem((8, 8), 0.5),
            upsampled: Array2::from_elem((8, 8), 0.5),
            constant: true,
        };
        let g = gaze_from_heatmap(&h, (1.0, 1.0)).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.gaze_point, (3.5, 3.5));
    }

    #[test]
    fn head_outside_frame_is_rejected() {
        let a = Array2::from_elem((8, 8), 0.1);
        assert!(gaze_from_heatmap(&heat(a.clone()), (8.5, 1.0)).is_err());
        assert!(gaze_from_heatmap(&heat(a), (1.0, -0.1)).is_err());
    }

    #[test]
    fn model_gaze_lands_in_frame() {
        let cfg = crate::model::ModelConfig::default();
        let params = Params::init(&cfg, 3).unwrap();
        let side = cfg.backbone.input_side;
        let img = Array3::from_shape_fn((side, side, 3), |(y, x, c)| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        let g = predict_gaze(&params, &img, (10.0, 20.0)).unwrap();
        assert!(g.gaze_point.0 >= 0.0 && g.gaze_point.0 < side as f64);
        assert!(g.gaze_point.1 >= 0.0 && g.gaze_point.1 < side as f64);
    }

    proptest! {
        #[test]
        fn invariant_to_positive_rescaling(vals in proptest::collection::vec(0.0f64..1.0, 64), s in 0.01f64..100.0) {
            let a = Array2::from_shape_vec((8, 8), vals).unwrap();
            let p = top_mass_centroid(&a);
            let q = top_mass_centroid(&a.mapv(|v| v * s));
            match (p, q) {
                (Some(p), Some(q)) => prop_assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
