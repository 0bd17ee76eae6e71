use ndarray::Array1;

use super::attention::ChannelAttentionVector;
use super::backbone::FeatureMap;

/// Globally average-pooled, L2-normalised representation of a (filtered)
/// feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Array1<f64>,
    /// Pooled vector was zero; `values` is the zero vector.
    pub degenerate: bool,
}

impl Embedding {
    pub fn distance(&self, other: &Embedding) -> f64 {
        euclidean(&self.values, &other.values)
    }
}

pub fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn normalize(g: &Array1<f64>) -> Embedding {
    let norm = g.dot(g).sqrt();
    if norm > 0.0 {
        Embedding {
            values: g / norm,
            degenerate: false,
        }
    } else {
        Embedding {
            values: Array1::zeros(g.len()),
            degenerate: true,
        }
    }
}

/// Gradient of `g / |g|` pulled back from `d_e`.
pub fn normalize_backward(g: &Array1<f64>, d_e: &Array1<f64>) -> Array1<f64> {
    let norm = g.dot(g).sqrt();
    if norm == 0.0 {
        return Array1::zeros(g.len());
    }
    let e = g / norm;
    (d_e - &(&e * e.dot(d_e))) / norm
}

pub fn embed(f: &FeatureMap) -> Embedding {
    let (h, w) = f.spatial();
    let n = (h * w) as f64;
    normalize(&Array1::from_iter(f.data.outer_iter().map(|p| p.sum() / n)))
}

/// Embedding of `M ⊗ F` computed from the pooled map: pooling commutes with
/// channel scaling.
pub fn embed_filtered(avg: &Array1<f64>, m: Option<&ChannelAttentionVector>) -> Embedding {
    match m {
        Some(m) => normalize(&(avg * &m.0)),
        None => normalize(avg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::attention::{apply_attention, pool};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_gives_unit_vector_along_channel_means() {
        let mut f = Array3::zeros((3, 2, 2));
        for (k, v) in [1.0, 2.0, 2.0].iter().enumerate() {
            f.index_axis_mut(ndarray::Axis(0), k).fill(*v);
        }
        let e = embed(&FeatureMap::new(f));
        let expect = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in e.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_map_is_flagged() {
        let e = embed(&FeatureMap::new(Array3::zeros((4, 2, 2))));
        assert!(e.degenerate);
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn near_identity_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = FeatureMap::new(Array3::from_shape_simple_fn((6, 3, 3), || rng.gen_range(0.0..3.0)));
        let m = ChannelAttentionVector(Array1::from_elem(6, 1.0 - 1e-12));
        let a = embed(&apply_attention(&f, &m).unwrap());
        let b = embed(&f);
        assert!(a.distance(&b) < 1e-6);
    }

    #[test]
    fn pooled_route_matches_map_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FeatureMap::new(Array3::from_shape_simple_fn((5, 4, 4), || rng.gen_range(0.0..3.0)));
        let m = ChannelAttentionVector(Array1::from_shape_simple_fn(5, || rng.gen_range(0.05..0.95)));
        let a = embed(&apply_attention(&f, &m).unwrap());
        let b = embed_filtered(&pool(&f).avg, Some(&m));
        assert!(a.distance(&b) < 1e-14);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let g = Array1::from_vec(vec![0.3, -1.2, 0.7]);
        let d_e = Array1::from_vec(vec![0.5, 0.1, -0.4]);
        let analytic = normalize_backward(&g, &d_e);
        let h = 1e-6;
        for i in 0..3 {
            let mut gp = g.clone();
            gp[i] += h;
            let mut gm = g.clone();
            gm[i] -= h;
            let f = |v: &Array1<f64>| normalize(v).values.dot(&d_e);
            let fd = (f(&gp) - f(&gm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn unit_norm_and_scale_invariant(vals in proptest::collection::vec(0.01f64..5.0, 4 * 4), alpha in 0.001f64..1000.0) {
            let f = FeatureMap::new(Array3::from_shape_vec((4, 2, 2), vals).unwrap());
            let e = embed(&f);
            prop_assert!((e.values.dot(&e.values).sqrt() - 1.0).abs() < 1e-12);
            let scaled = FeatureMap::new(f.data.mapv(|v| v * alpha));
            prop_assert!(embed(&scaled).distance(&e) < 1e-12);
        }
    }
}
