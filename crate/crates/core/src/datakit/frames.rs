//! Per-second frame decoding, preprocessing and an in-memory frame cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::align::frames_at_one_fps;
use super::manifest::{Manifest, View};
use crate::error::{Error, Result};

/// A preprocessed frame. `image` is H×W×3 with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pair_id: String,
    pub view: View,
    pub timestamp: f64,
    pub image: Array3<f64>,
}

/// Address of a frame inside a [`FrameStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub pair: usize,
    pub view: View,
    pub second: usize,
}

pub fn image_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn array_to_image(a: &Array3<f64>) -> RgbImage {
    let (h, w, _) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (a[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Resizes the shorter side to `side` and crops a `side`×`side` window: centred
/// when `rng` is `None`, uniformly placed otherwise.
pub fn preprocess<R: Rng + ?Sized>(img: &RgbImage, side: u32, rng: Option<&mut R>) -> RgbImage {
    let (w, h) = img.dimensions();
    let resized;
    let src = if w.min(h) == side {
        img
    } else {
        let scale = f64::from(side) / f64::from(w.min(h));
        let nw = ((f64::from(w) * scale).round() as u32).max(side);
        let nh = ((f64::from(h) * scale).round() as u32).max(side);
        resized = imageops::resize(img, nw, nh, FilterType::Triangle);
        &resized
    };
    let (w, h) = src.dimensions();
    if w == side && h == side {
        return src.clone();
    }
    let (x0, y0) = match rng {
        Some(rng) => (rng.gen_range(0..=w - side), rng.gen_range(0..=h - side)),
        None => ((w - side) / 2, (h - side) / 2),
    };
    imageops::crop_imm(src, x0, y0, side, side).to_image()
}

pub fn frame_path(stream_dir: &Path, second: usize) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| stream_dir.join(format!("{second}.{ext}")))
        .find(|p| p.exists())
}

/// All frames of a manifest at one frame per second, preprocessed to a square
/// side. Indexed by manifest position.
#[derive(Debug, Clone)]
pub struct FrameStore {
    side: u32,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    first: Vec<Vec<RgbImage>>,
    third: Vec<Vec<RgbImage>>,
}

impl FrameStore {
    pub fn load(manifest: &Manifest, side: u32) -> Result<Self> {
        let mut first = Vec::with_capacity(manifest.len());
        let mut third = Vec::with_capacity(manifest.len());
        for pair in &manifest.entries {
            for (view, sink) in [(View::First, &mut first), (View::Third, &mut third)] {
                let stream = pair.stream(view);
                let dir = manifest.resolve(stream);
                let n = frames_at_one_fps(stream.duration);
                let mut frames = Vec::with_capacity(n);
                for t in 0..n {
                    let path = frame_path(&dir, t).ok_or_else(|| {
                        Error::io(
                            dir.join(format!("{t}.png")),
                            std::io::Error::new(std::io::ErrorKind::NotFound, "frame not found"),
                        )
                    })?;
                    let img = image::open(&path).map_err(|e| Error::image(&path, e))?.to_rgb8();
                    frames.push(preprocess::<rand::rngs::ThreadRng>(&img, side, None));
                }
                sink.push(frames);
            }
        }
        Ok(Self::assemble(manifest, side, first, third))
    }

    /// Builds a store from already decoded frames, `streams[i] = (first, third)`
    /// for manifest entry `i`.
    pub fn from_images(
        manifest: &Manifest,
        side: u32,
        streams: Vec<(Vec<RgbImage>, Vec<RgbImage>)>,
    ) -> Result<Self> {
        if streams.len() != manifest.len() {
            return Err(Error::Contract(format!(
                "{} frame streams for {} manifest entries",
                streams.len(),
                manifest.len()
            )));
        }
        let (first, third): (Vec<_>, Vec<_>) = streams
            .into_iter()
            .map(|(f, t)| {
                let prep = |v: Vec<RgbImage>| {
                    v.iter()
                        .map(|i| preprocess::<rand::rngs::ThreadRng>(i, side, None))
                        .collect::<Vec<_>>()
                };
                (prep(f), prep(t))
            })
            .unzip();
        for (i, pair) in manifest.entries.iter().enumerate() {
            for (view, v) in [(View::First, &first[i]), (View::Third, &third[i])] {
                let want = frames_at_one_fps(pair.stream(view).duration);
                if v.len() != want {
                    return Err(Error::Contract(format!(
                        "pair '{}' {view}: {} frames, expected {want}",
                        pair.pair_id,
                        v.len()
                    )));
                }
            }
        }
        Ok(Self::assemble(manifest, side, first, third))
    }

    fn assemble(
        manifest: &Manifest,
        side: u32,
        first: Vec<Vec<RgbImage>>,
        third: Vec<Vec<RgbImage>>,
    ) -> Self {
        let ids: Vec<String> = manifest.entries.iter().map(|p| p.pair_id.clone()).collect();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        FrameStore {
            side,
            ids,
            index,
            first,
            third,
        }
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn pair_index(&self, pair_id: &str) -> Option<usize> {
        self.index.get(pair_id).copied()
    }

    pub fn pair_id(&self, pair: usize) -> &str {
        &self.ids[pair]
    }

    pub fn len(&self, pair: usize, view: View) -> usize {
        self.stream(pair, view).len()
    }

    pub fn stream(&self, pair: usize, view: View) -> &[RgbImage] {
        match view {
            View::First => &self.first[pair],
            View::Third => &self.third[pair],
        }
    }

    pub fn image(&self, r: FrameRef) -> &RgbImage {
        &self.stream(r.pair, r.view)[r.second]
    }

    pub fn frame(&self, r: FrameRef) -> Frame {
        Frame {
            pair_id: self.ids[r.pair].clone(),
            view: r.view,
            timestamp: r.second as f64,
            image: image_to_array(self.image(r)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_crop_of_wide_image() {
        let img = RgbImage::from_fn(128, 64, |x, _| image::Rgb([(x * 2) as u8, 0, 0]));
        let out = preprocess::<ChaCha8Rng>(&img, 64, None);
        assert_eq!(out.dimensions(), (64, 64));
        assert_eq!(out.get_pixel(0, 0)[0], 64);
    }

    #[test]
    fn resize_then_crop() {
        let img = RgbImage::new(300, 200);
        let out = preprocess::<ChaCha8Rng>(&img, 32, None);
        assert_eq!(out.dimensions(), (32, 32));
    }

    #[test]
    fn random_crop_stays_inside() {
        let img = RgbImage::from_fn(96, 64, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = preprocess(&img, 64, Some(&mut rng));
            assert_eq!(out.dimensions(), (64, 64));
            let x0 = out.get_pixel(0, 0)[0];
            assert!(x0 <= 32);
            assert_eq!(out.get_pixel(63, 0)[0], x0 + 63);
        }
    }

    #[test]
    fn array_conversion_is_exact_on_8bit_values() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 90, 255]));
        let a = image_to_array(&img);
        assert_eq!(a.dim(), (3, 5, 3));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(array_to_image(&a), img);
    }
}
