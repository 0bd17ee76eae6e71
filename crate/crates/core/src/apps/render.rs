use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Opacity of the heatmap layer.
pub const OVERLAY_ALPHA: f64 = 0.45;

/// Jet-style colour for `v` in [0, 1]: blue, cyan, green, yellow, red.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Alpha-composites the coloured heatmap over `frame`; the heatmap must
/// match the frame's size.
pub fn overlay(frame: &RgbImage, heat: &Array2<f64>) -> Result<RgbImage> {
    let (w, h) = frame.dimensions();
    if heat.dim() != (h as usize, w as usize) {
        return Err(Error::Contract(format!(
            "heatmap {:?} does not match a {w}x{h} frame",
            heat.dim()
        )));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let c = colormap(heat[[y as usize, x as usize]]);
        let p = frame.get_pixel(x, y);
        Rgb(std::array::from_fn(|i| {
            let base = f64::from(p[i]) / 255.0;
            let v = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * c[i];
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

pub fn render_heatmap(frame: &RgbImage, heat: &Array2<f64>, out: impl AsRef<Path>) -> Result<RgbImage> {
    let img = overlay(frame, heat)?;
    let out = out.as_ref();
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| Error::image(out, e))?;
    Ok(img)
}

/// Binary mask as a black and white PNG.
pub fn write_mask(mask: &Array2<bool>, out: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    let out = out.as_ref();
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| Error::image(out, e))
}
