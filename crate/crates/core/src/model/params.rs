use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;

/// A 3×3, padding-1 convolution stored as an `out × (in·9)` matrix whose
/// column order is `(in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
}

impl ConvParams {
    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }
}

/// Every trainable tensor of the network. Gradients and optimizer state
/// reuse the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub convs: Vec<ConvParams>,
    /// `hidden × c`
    pub mlp_in: Array2<f64>,
    /// `c × hidden`
    pub mlp_out: Array2<f64>,
    /// Importance-weight scorer over the concatenated pooled features of
    /// (x, y, z): `3c` weights and one bias.
    pub weight_fc: Array1<f64>,
    pub weight_bias: Array1<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..=bound))
}

impl Params {
    /// Fan-in scaled uniform initialisation for convolutions and the attention
    /// MLP; zero biases; zero importance scorer so every weight starts at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.backbone.desk_widths();
        let strides = config.backbone.desk_strides();
        let mut convs = Vec::with_capacity(4);
        let mut cin = 3;
        for (block, (&cout, &stride)) in widths.iter().zip(&strides).enumerate() {
            let fan_in = cin * 9;
            let weight = uniform(&mut rng, (cout, fan_in), (6.0 / fan_in as f64).sqrt());
            let last = block == widths.len() - 1;
            convs.push(ConvParams {
                weight,
                bias: (!last).then(|| Array1::zeros(cout)),
                stride,
            });
            cin = cout;
        }
        let c = config.channels();
        let h = config.hidden();
        let mlp_in = uniform(&mut rng, (h, c), 1.0 / (c as f64).sqrt());
        let mlp_out = uniform(&mut rng, (c, h), 1.0 / (h as f64).sqrt());
        Ok(Params {
            config: config.clone(),
            convs,
            mlp_in,
            mlp_out,
            weight_fc: Array1::zeros(3 * c),
            weight_bias: Array1::zeros(1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for s in self.slices_mut() {
            s.fill(v);
        }
    }

    /// Names and shapes in a fixed order shared by [`Params::slices`] and
    /// [`Params::slices_mut`].
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), conv.weight.shape().to_vec()));
            if let Some(b) = &conv.bias {
                out.push((format!("backbone.{i}.bias"), b.shape().to_vec()));
            }
        }
        out.push(("attention.mlp_in".into(), self.mlp_in.shape().to_vec()));
        out.push(("attention.mlp_out".into(), self.mlp_out.shape().to_vec()));
        out.push(("importance.weight".into(), self.weight_fc.shape().to_vec()));
        out.push(("importance.bias".into(), self.weight_bias.shape().to_vec()));
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for conv in &self.convs {
            out.push(conv.weight.as_slice().expect("standard layout"));
            if let Some(b) = &conv.bias {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        for a in [&self.mlp_in, &self.mlp_out] {
            out.push(a.as_slice().expect("standard layout"));
        }
        for a in [&self.weight_fc, &self.weight_bias] {
            out.push(a.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for conv in &mut self.convs {
            out.push(conv.weight.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut conv.bias {
                out.push(b.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.mlp_in.as_slice_mut().expect("standard layout"));
        out.push(self.mlp_out.as_slice_mut().expect("standard layout"));
        out.push(self.weight_fc.as_slice_mut().expect("standard layout"));
        out.push(self.weight_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Scalar at a flat index over the concatenation of all tensors.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for s in self.slices() {
            if idx < s.len() {
                return s[idx];
            }
            idx -= s.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for s in self.slices_mut() {
            if idx < s.len() {
                s[idx] = v;
                return;
            }
            idx -= s.len();
        }
        panic!("flat index out of range")
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &Params, alpha: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Whether the two parameter sets are exactly equal element for element.
    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.config == other.config
            && self
                .slices()
                .iter()
                .zip(other.slices())
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
