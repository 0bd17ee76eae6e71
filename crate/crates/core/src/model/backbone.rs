//! Weight-shared convolutional feature extractor with an explicit backward pass.
//!
//! Activations of a batch are kept channel-major as `C × (N·H·W)` matrices so
//! each convolution is one im2col matrix product for the whole batch.

use ndarray::{s, Array2, Array3, Axis};

use super::params::{ConvParams, Params};
use crate::error::{Error, Result};

/// Per-frame backbone output, `c × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Self {
        FeatureMap { data }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Anything that turns an `H×W×3` image into a `c×h×w` map. The desk network
/// implements it; an externally trained backbone can be plugged in for
/// inference.
pub trait FeatureExtractor {
    fn extract(&self, image: &Array3<f64>) -> Result<FeatureMap>;
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    h: usize,
    w: usize,
}

fn out_side(side: usize, stride: usize) -> usize {
    (side - 1) / stride + 1
}

fn im2col(input: &Array2<f64>, d: Dims, stride: usize) -> (Array2<f64>, Dims) {
    let c = input.nrows();
    let (ho, wo) = (out_side(d.h, stride), out_side(d.w, stride));
    let out_d = Dims { n: d.n, h: ho, w: wo };
    let cols_n = d.n * ho * wo;
    let mut cols = Array2::<f64>::zeros((c * 9, cols_n));
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let plane = d.n * d.h * d.w;
    for ci in 0..c {
        let sp = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for n in 0..d.n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src_row = n * d.h * d.w + iy as usize * d.w;
                        let dst_row = row + n * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < d.w as isize {
                                dst[dst_row + ox] = sp[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, out_d)
}

fn col2im(cols: &Array2<f64>, c: usize, d: Dims, stride: usize) -> Array2<f64> {
    let (ho, wo) = (out_side(d.h, stride), out_side(d.w, stride));
    let cols_n = d.n * ho * wo;
    let plane = d.n * d.h * d.w;
    let mut out = Array2::<f64>::zeros((c, plane));
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let dp = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for n in 0..d.n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst_row = n * d.h * d.w + iy as usize * d.w;
                        let src_row = row + n * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < d.w as isize {
                                dp[dst_row + ix as usize] += src[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct LayerCache {
    cols: Array2<f64>,
    out: Array2<f64>,
    in_dims: Dims,
}

/// Forward state of one batch through the backbone, kept for the backward pass.
pub struct BackboneTape {
    layers: Vec<LayerCache>,
    out_dims: Dims,
}

fn conv_forward(conv: &ConvParams, input: &Array2<f64>, d: Dims) -> (Array2<f64>, LayerCache, Dims) {
    let (cols, od) = im2col(input, d, conv.stride);
    let mut z = conv.weight.dot(&cols);
    if let Some(b) = &conv.bias {
        for (mut row, &bv) in z.axis_iter_mut(Axis(0)).zip(b) {
            row += bv;
        }
    }
    z.mapv_inplace(|v| v.max(0.0));
    let cache = LayerCache {
        cols,
        out: z.clone(),
        in_dims: d,
    };
    (z, cache, od)
}

fn pack_images(images: &[&Array3<f64>], side: usize) -> Result<Array2<f64>> {
    let n = images.len();
    let mut x = Array2::<f64>::zeros((3, n * side * side));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (side, side, 3) {
            return Err(Error::Contract(format!(
                "frame shape {:?} does not match backbone input {side}×{side}×3",
                img.dim()
            )));
        }
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("frame contains non-finite values".into()));
        }
        for c in 0..3 {
            let mut dst = x.slice_mut(s![c, i * side * side..(i + 1) * side * side]);
            for (k, v) in img.slice(s![.., .., c]).iter().enumerate() {
                dst[k] = *v;
            }
        }
    }
    Ok(x)
}

fn unpack(out: &Array2<f64>, d: Dims) -> Vec<FeatureMap> {
    let c = out.nrows();
    let hw = d.h * d.w;
    (0..d.n)
        .map(|i| {
            let block = out.slice(s![.., i * hw..(i + 1) * hw]).to_owned();
            FeatureMap::new(block.into_shape_with_order((c, d.h, d.w)).expect("contiguous block"))
        })
        .collect()
}

/// Runs the shared backbone on a batch; every frame goes through the same
/// parameters.
pub fn forward_batch(params: &Params, images: &[&Array3<f64>]) -> Result<(Vec<FeatureMap>, BackboneTape)> {
    let side = params.config.backbone.input_side;
    let mut x = pack_images(images, side)?;
    let mut d = Dims {
        n: images.len(),
        h: side,
        w: side,
    };
    let mut layers = Vec::with_capacity(params.convs.len());
    for conv in &params.convs {
        let (y, cache, od) = conv_forward(conv, &x, d);
        layers.push(cache);
        x = y;
        d = od;
    }
    Ok((unpack(&x, d), BackboneTape { layers, out_dims: d }))
}

pub fn extract_features(params: &Params, image: &Array3<f64>) -> Result<FeatureMap> {
    let (mut maps, _) = forward_batch(params, &[image])?;
    Ok(maps.pop().expect("one frame in, one map out"))
}

impl FeatureExtractor for Params {
    fn extract(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        extract_features(self, image)
    }
}

/// Accumulates backbone parameter gradients into `grads` given `d(loss)/d(map)`
/// for every frame of the batch.
pub fn backward_batch(params: &Params, tape: &BackboneTape, d_maps: &[Array3<f64>], grads: &mut Params) {
    let d = tape.out_dims;
    let c = params.convs.last().map(ConvParams::out_channels).unwrap_or(0);
    let hw = d.h * d.w;
    let mut dy = Array2::<f64>::zeros((c, d.n * hw));
    for (i, dm) in d_maps.iter().enumerate() {
        let flat = dm.view().into_shape_with_order((c, hw)).expect("contiguous map gradient");
        dy.slice_mut(s![.., i * hw..(i + 1) * hw]).assign(&flat);
    }
    for (l, (conv, cache)) in params.convs.iter().zip(&tape.layers).enumerate().rev() {
        let mut dz = dy;
        ndarray::Zip::from(&mut dz).and(&cache.out).for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        let g = &mut grads.convs[l];
        g.weight += &dz.dot(&cache.cols.t());
        if let Some(gb) = &mut g.bias {
            *gb += &dz.sum_axis(Axis(1));
        }
        if l == 0 {
            break;
        }
        let dcols = conv.weight.t().dot(&dz);
        dy = col2im(&dcols, conv.in_channels(), cache.in_dims, conv.stride);
    }
}
