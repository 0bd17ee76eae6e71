//! Procedural paired-view videos with known joint-attention regions.
//!
//! Each pair shares one world: a smoothly textured tabletop, an action object
//! whose hue drifts over time, and (third-person only) an actor blob standing
//! next to it. The third-person camera sees the whole table. The first-person
//! camera is a magnified, rotated, colour-jittered window centred on the
//! object while the action runs and looking elsewhere otherwise, with two
//! view-specific "hand" blobs drawn on top.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::align::{align_timestamp, frames_at_one_fps};
use super::frames::FrameStore;
use super::manifest::{ActionSegment, Manifest, StreamRef, VideoPair, View};
use crate::error::{Error, Result};

pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "square", "triangle", "cross", "ring", "diamond", "bar", "star",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub pairs: usize,
    pub side: u32,
    pub classes: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    /// First-person duration is the third-person duration times a ratio in this range.
    pub first_duration_ratio: (f64, f64),
    /// Object radius as a fraction of the frame side.
    pub object_radius: f64,
    pub first_scale: (f64, f64),
    pub max_rotation_deg: f64,
    /// Relative saturation/value jitter of first-person frames.
    pub sv_jitter: f64,
    /// Absolute hue jitter of first-person frames, in turns.
    pub hue_jitter: f64,
    /// Total hue change of the object over a video, in turns.
    pub hue_drift: f64,
    pub first_distractors: usize,
    /// First-person camera looks away from the object outside the action segment.
    pub hide_outside_action: bool,
    /// Saturation range of the background colour.
    pub background_saturation: (f64, f64),
    /// Action start and end as fractions of the third-person duration.
    pub action_start: (f64, f64),
    pub action_end: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pairs: 10,
            side: 64,
            classes: 6,
            min_duration: 10.0,
            max_duration: 16.0,
            first_duration_ratio: (0.8, 1.25),
            object_radius: 0.12,
            first_scale: (1.5, 2.5),
            max_rotation_deg: 15.0,
            sv_jitter: 0.1,
            hue_jitter: 0.02,
            hue_drift: 0.5,
            first_distractors: 2,
            hide_outside_action: true,
            background_saturation: (0.0, 0.12),
            action_start: (0.05, 0.15),
            action_end: (0.85, 0.95),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.side < 32 {
            return bad("frame side must be at least 32");
        }
        if self.classes == 0 || self.classes > SHAPE_NAMES.len() {
            return bad(&format!("classes must be in 1..={}", SHAPE_NAMES.len()));
        }
        if !(self.min_duration >= 2.0 && self.max_duration >= self.min_duration) {
            return bad("durations must satisfy 2 <= min <= max");
        }
        let (r0, r1) = self.first_duration_ratio;
        if !(r0 > 0.0 && r1 >= r0) {
            return bad("first_duration_ratio must be a positive range");
        }
        let (s0, s1) = self.first_scale;
        if !(s0 > 0.0 && s1 >= s0) {
            return bad("first_scale must be a positive range");
        }
        if !(self.object_radius > 0.0 && self.object_radius < 0.5) {
            return bad("object_radius must be in (0, 0.5)");
        }
        let (b0, b1) = self.background_saturation;
        if !(0.0 <= b0 && b0 <= b1 && b1 <= 1.0) {
            return bad("background_saturation must be a range inside [0, 1]");
        }
        let ((a0, a1), (e0, e1)) = (self.action_start, self.action_end);
        if !(0.0 <= a0 && a0 <= a1 && a1 < e0 && e0 <= e1 && e1 <= 1.0) {
            return bad("action_start must precede action_end inside [0, 1]");
        }
        Ok(())
    }
}

/// Pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxPx {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Whether the centre of integer pixel `(x, y)` falls inside.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }

    fn around(cx: f64, cy: f64, r: f64, side: f64) -> Option<BoxPx> {
        let b = BoxPx {
            x0: (cx - r).max(0.0),
            y0: (cy - r).max(0.0),
            x1: (cx + r).min(side),
            y1: (cy + r).min(side),
        };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub third_second: usize,
    /// Duration-scaled first-person timestamp of this third-person second.
    pub first_timestamp: f64,
    /// First-person frame used as the positive for this second.
    pub first_second: usize,
    pub attention_box_third: BoxPx,
    /// Object box in the corresponding first-person frame; absent when the
    /// first-person camera is looking away.
    pub attention_box_first: Option<BoxPx>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub pair_id: String,
    pub object_id: usize,
    pub label: String,
    pub frames: Vec<FrameTruth>,
    /// Object box in every first-person frame, indexed by second.
    pub first_boxes: Vec<Option<BoxPx>>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub truths: Vec<PairTruth>,
    /// `(first, third)` frames per pair at one frame per second.
    pub streams: Vec<(Vec<RgbImage>, Vec<RgbImage>)>,
}

impl SynthDataset {
    pub fn frame_store(&self, side: u32) -> Result<FrameStore> {
        FrameStore::from_images(&self.manifest, side, self.streams.clone())
    }

    /// Splits into `(first n pairs, remainder)`.
    pub fn split(&self, n: usize) -> (SynthDataset, SynthDataset) {
        let part = |range: std::ops::Range<usize>| SynthDataset {
            manifest: self.manifest.subset(|i, _| range.contains(&i)),
            truths: self.truths[range.clone()].to_vec(),
            streams: self.streams[range].to_vec(),
        };
        let n = n.min(self.truths.len());
        (part(0..n), part(n..self.truths.len()))
    }
}

type Color = [f64; 3];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Color {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv(c: Color) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / d + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Membership of a point given in object-normalised coordinates (radius 1).
fn inside_shape(shape: usize, x: f64, y: f64) -> bool {
    let r2 = x * x + y * y;
    match shape % SHAPE_NAMES.len() {
        0 => r2 <= 1.0,
        1 => x.abs() <= 0.72 && y.abs() <= 0.72,
        2 => y <= 0.55 && y >= -0.95 + 1.6 * x.abs() * 1.05,
        3 => (x.abs() <= 0.3 && y.abs() <= 0.95) || (y.abs() <= 0.3 && x.abs() <= 0.95),
        4 => (0.3..=1.0).contains(&r2),
        5 => x.abs() + y.abs() <= 1.0,
        6 => x.abs() <= 0.95 && y.abs() <= 0.35,
        _ => {
            let a = y.atan2(x);
            r2.sqrt() <= 0.55 + 0.4 * (5.0 * a).cos().max(0.0)
        }
    }
}

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

/// Everything about one pair that does not change per frame.
#[derive(Debug, Clone)]
struct Scene {
    side: f64,
    bg: Color,
    waves: Vec<Wave>,
    shape: usize,
    radius: f64,
    start_pos: (f64, f64),
    end_pos: (f64, f64),
    hue0: f64,
    hue_drift: f64,
    actor_offset: (f64, f64),
    actor_color: Color,
    hands: Vec<(usize, Color, (f64, f64))>,
    duration: f64,
}

impl Scene {
    fn object_center(&self, tau: f64) -> (f64, f64) {
        let a = (tau / self.duration).clamp(0.0, 1.0);
        (
            self.start_pos.0 + a * (self.end_pos.0 - self.start_pos.0),
            self.start_pos.1 + a * (self.end_pos.1 - self.start_pos.1),
        )
    }

    fn object_color(&self, tau: f64) -> Color {
        let a = (tau / self.duration).clamp(0.0, 1.0);
        hsv_to_rgb(self.hue0 + self.hue_drift * a, 0.85, 0.95)
    }

    fn background(&self, u: f64, v: f64) -> Color {
        let tex: f64 = self
            .waves
            .iter()
            .map(|w| w.amp * (w.kx * u + w.ky * v + w.phase).sin())
            .sum();
        self.bg.map(|c| (c * (1.0 + tex)).clamp(0.0, 1.0))
    }

    /// Colour of world point `(u, v)` at time `tau`; the actor is only
    /// visible to the third-person camera.
    fn world(&self, u: f64, v: f64, tau: f64, with_actor: bool) -> Color {
        let (ox, oy) = self.object_center(tau);
        if inside_shape(self.shape, (u - ox) / self.radius, (v - oy) / self.radius) {
            return self.object_color(tau);
        }
        if with_actor {
            let (ax, ay) = (ox + self.actor_offset.0, oy + self.actor_offset.1);
            let (rx, ry) = (0.1 * self.side, 0.2 * self.side);
            let q = ((u - ax) / rx).powi(2) + ((v - ay) / ry).powi(2);
            if q <= 1.0 {
                return self.actor_color;
            }
        }
        self.background(u, v)
    }
}

fn sample_scene(cfg: &SynthConfig, shape: usize, duration: f64, rng: &mut ChaCha8Rng) -> Scene {
    let side = f64::from(cfg.side);
    let (s0, s1) = cfg.background_saturation;
    let bg = hsv_to_rgb(rng.gen(), rng.gen_range(s0..=s1), rng.gen_range(0.45..0.7));
    let waves = (0..3)
        .map(|_| {
            let k = rng.gen_range(1.0..4.0) * 2.0 * PI / side;
            let dir: f64 = rng.gen_range(0.0..2.0 * PI);
            Wave {
                kx: k * dir.cos(),
                ky: k * dir.sin(),
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: 0.07,
            }
        })
        .collect();
    let mut pos = || (rng.gen_range(0.3..0.7) * side, rng.gen_range(0.3..0.7) * side);
    let start_pos = pos();
    let end_pos = pos();
    let side_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let actor_offset = (side_sign * 0.3 * side, rng.gen_range(-0.05..0.05) * side);
    let actor_color = hsv_to_rgb(rng.gen_range(0.02..0.1), rng.gen_range(0.25..0.4), rng.gen_range(0.55..0.8));
    let hands = (0..cfg.first_distractors)
        .map(|k| {
            let shape = rng.gen_range(0..SHAPE_NAMES.len());
            let color = hsv_to_rgb(rng.gen(), rng.gen_range(0.5..0.9), rng.gen_range(0.6..0.95));
            // spread the hands along the bottom edge
            let fx = (k as f64 + 0.5) / cfg.first_distractors.max(1) as f64;
            (shape, color, (fx * side, rng.gen_range(0.78..0.9) * side))
        })
        .collect();
    let drift_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    Scene {
        side,
        bg,
        waves,
        shape,
        radius: cfg.object_radius * side,
        start_pos,
        end_pos,
        hue0: rng.gen(),
        hue_drift: drift_sign * cfg.hue_drift,
        actor_offset,
        actor_color,
        hands,
        duration,
    }
}

const SUPERSAMPLE: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

fn to_rgb8(c: Color) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

fn render_third(scene: &Scene, tau: f64) -> (RgbImage, BoxPx) {
    let n = scene.side as u32;
    let img = RgbImage::from_fn(n, n, |x, y| {
        let mut acc = [0.0; 3];
        for (dx, dy) in SUPERSAMPLE {
            let c = scene.world(f64::from(x) + dx, f64::from(y) + dy, tau, true);
            (0..3).for_each(|k| acc[k] += c[k] / 4.0);
        }
        to_rgb8(acc)
    });
    let (ox, oy) = scene.object_center(tau);
    let bx = BoxPx::around(ox, oy, scene.radius, scene.side).expect("object centre lies inside the frame");
    (img, bx)
}

struct Camera {
    center: (f64, f64),
    scale: f64,
    angle: f64,
}

impl Camera {
    fn to_world(&self, px: f64, py: f64, side: f64) -> (f64, f64) {
        let (dx, dy) = ((px - side / 2.0) / self.scale, (py - side / 2.0) / self.scale);
        let (s, c) = self.angle.sin_cos();
        (self.center.0 + c * dx - s * dy, self.center.1 + s * dx + c * dy)
    }

    fn to_pixel(&self, u: f64, v: f64, side: f64) -> (f64, f64) {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.angle.sin_cos();
        (
            (c * du + s * dv) * self.scale + side / 2.0,
            (-s * du + c * dv) * self.scale + side / 2.0,
        )
    }
}

fn render_first(
    scene: &Scene,
    tau: f64,
    attending: bool,
    base_scale: f64,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Option<BoxPx>) {
    let side = scene.side;
    let scale = base_scale * rng.gen_range(0.95..1.05);
    let angle = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let (ox, oy) = scene.object_center(tau);
    let center = if attending {
        let j = 0.04 * side;
        (ox + rng.gen_range(-j..=j), oy + rng.gen_range(-j..=j))
    } else {
        // far enough that no part of the object enters the window
        let clearance = scene.radius + side * std::f64::consts::SQRT_2 / (2.0 * scale) + 2.0;
        loop {
            let c = (rng.gen_range(-0.3..1.3) * side, rng.gen_range(-0.3..1.3) * side);
            if ((c.0 - ox).powi(2) + (c.1 - oy).powi(2)).sqrt() >= clearance {
                break c;
            }
        }
    };
    let cam = Camera {
        center,
        scale,
        angle,
    };
    let hands: Vec<(usize, Color, (f64, f64), f64)> = scene
        .hands
        .iter()
        .map(|&(shape, color, (hx, hy))| {
            let j = 0.05 * side;
            (shape, color, (hx + rng.gen_range(-j..=j), hy + rng.gen_range(-j..=j)), 0.13 * side)
        })
        .collect();
    let dh = rng.gen_range(-1.0..=1.0) * cfg.hue_jitter;
    let ks = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.sv_jitter;
    let kv = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.sv_jitter;
    let n = side as u32;
    let img = RgbImage::from_fn(n, n, |x, y| {
        let mut acc = [0.0; 3];
        for (dx, dy) in SUPERSAMPLE {
            let (px, py) = (f64::from(x) + dx, f64::from(y) + dy);
            let hand = hands.iter().find(|(shape, _, (hx, hy), r)| {
                inside_shape(*shape, (px - hx) / r, (py - hy) / r)
            });
            let c = match hand {
                Some((_, color, _, _)) => *color,
                None => {
                    let (u, v) = cam.to_world(px, py, side);
                    scene.world(u, v, tau, false)
                }
            };
            (0..3).for_each(|k| acc[k] += c[k] / 4.0);
        }
        let (h, s, v) = rgb_to_hsv(acc);
        to_rgb8(hsv_to_rgb(h + dh, (s * ks).clamp(0.0, 1.0), (v * kv).clamp(0.0, 1.0)))
    });
    let bx = if attending {
        let (cx, cy) = cam.to_pixel(ox, oy, side);
        BoxPx::around(cx, cy, scene.radius * scale, side)
    } else {
        None
    };
    (img, bx)
}

fn pair_id(i: usize) -> String {
    format!("pair_{i:04}")
}

/// Deterministic in `(cfg, seed)`: every pair draws from its own ChaCha stream.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed);
    class_rng.set_stream(u64::MAX);
    // balanced class assignment, then shuffled
    let mut classes: Vec<usize> = (0..cfg.pairs).map(|i| i % cfg.classes).collect();
    classes.shuffle(&mut class_rng);

    let mut entries = Vec::with_capacity(cfg.pairs);
    let mut truths = Vec::with_capacity(cfg.pairs);
    let mut streams = Vec::with_capacity(cfg.pairs);
    for (i, &class) in classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let d_third = rng.gen_range(cfg.min_duration..=cfg.max_duration);
        let d_first = d_third * rng.gen_range(cfg.first_duration_ratio.0..=cfg.first_duration_ratio.1);
        let scene = sample_scene(cfg, class, d_third, &mut rng);
        let seg_start = d_third * rng.gen_range(cfg.action_start.0..=cfg.action_start.1);
        let seg_end = d_third * rng.gen_range(cfg.action_end.0..=cfg.action_end.1);
        let label = SHAPE_NAMES[class].to_string();
        let base_scale = rng.gen_range(cfg.first_scale.0..=cfg.first_scale.1);

        let n_third = frames_at_one_fps(d_third);
        let n_first = frames_at_one_fps(d_first);
        let mut third = Vec::with_capacity(n_third);
        let mut third_boxes = Vec::with_capacity(n_third);
        for t in 0..n_third {
            let (img, bx) = render_third(&scene, t as f64);
            third.push(img);
            third_boxes.push(bx);
        }
        let mut first = Vec::with_capacity(n_first);
        let mut first_boxes = Vec::with_capacity(n_first);
        for s in 0..n_first {
            let tau = (s as f64 * d_third / d_first).min(d_third);
            let attending = !cfg.hide_outside_action || (seg_start..seg_end).contains(&tau);
            let (img, bx) = render_first(&scene, tau, attending, base_scale, cfg, &mut rng);
            first.push(img);
            first_boxes.push(bx);
        }

        let id = pair_id(i);
        let frames = (0..n_third)
            .map(|t| {
                let first_timestamp = align_timestamp(t as f64, d_third, d_first)?;
                let first_second = (first_timestamp.round() as usize).min(n_first - 1);
                Ok(FrameTruth {
                    third_second: t,
                    first_timestamp,
                    first_second,
                    attention_box_third: third_boxes[t],
                    attention_box_first: first_boxes[first_second],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stream = |view: View, d: f64| StreamRef {
            path: format!("{id}/{view}"),
            fps: 1.0,
            duration: d,
        };
        entries.push(VideoPair {
            pair_id: id.clone(),
            first_view: stream(View::First, d_first),
            third_view: stream(View::Third, d_third),
            action_segments: vec![ActionSegment {
                label: label.clone(),
                start: seg_start,
                end: seg_end,
            }],
            valid: true,
        });
        truths.push(PairTruth {
            pair_id: id,
            object_id: class,
            label,
            frames,
            first_boxes,
        });
        streams.push((first, third));
    }
    Ok(SynthDataset {
        manifest: Manifest::new(entries, format!("synthetic-seed{seed}"))?,
        truths,
        streams,
    })
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `<out>/<pair_id>/<view>/<t>.png`, `<out>/<pair_id>/ground_truth.json`
/// and `<out>/manifest.jsonl`.
pub fn write_synthetic(ds: &SynthDataset, out: &Path) -> Result<()> {
    for ((pair, truth), (first, third)) in ds.manifest.entries.iter().zip(&ds.truths).zip(&ds.streams) {
        for (view, frames) in [(View::First, first), (View::Third, third)] {
            let dir = out.join(&pair.pair_id).join(view.as_str());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, img) in frames.iter().enumerate() {
                let path = dir.join(format!("{t}.png"));
                img.save(&path).map_err(|e| Error::image(&path, e))?;
            }
        }
        let path = out.join(&pair.pair_id).join(GROUND_TRUTH_FILE);
        fs::write(&path, serde_json::to_vec_pretty(truth)?).map_err(|e| Error::io(&path, e))?;
    }
    ds.manifest.write(out.join(MANIFEST_FILE))
}

pub fn load_ground_truth(manifest: &Manifest) -> Result<Vec<PairTruth>> {
    manifest
        .entries
        .iter()
        .map(|p| {
            let path = manifest.base_dir.join(&p.pair_id).join(GROUND_TRUTH_FILE);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
        .collect()
}
