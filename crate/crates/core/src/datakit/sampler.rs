//! Triplet mining: a third-person anchor `y`, the first-person frame `x` at the
//! duration-scaled timestamp, and a non-corresponding first-person frame `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::align::{align_timestamp, frames_at_one_fps};
use super::frames::{Frame, FrameRef, FrameStore};
use super::manifest::{Manifest, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeMix {
    pub cross_video: f64,
    pub same_video: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub negative_mix: NegativeMix,
    /// Minimum first-person distance, in seconds, between a same-video
    /// negative and the aligned anchor time.
    pub margin_seconds: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            negative_mix: NegativeMix {
                cross_video: 0.5,
                same_video: 0.5,
            },
            margin_seconds: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletRef {
    pub x: FrameRef,
    pub y: FrameRef,
    pub z: FrameRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub x: Frame,
    pub y: Frame,
    pub z: Frame,
}

impl FrameStore {
    pub fn triplet(&self, t: &TripletRef) -> Triplet {
        Triplet {
            x: self.frame(t.x),
            y: self.frame(t.y),
            z: self.frame(t.z),
        }
    }
}

/// First-person second matching a third-person second after duration scaling.
pub fn corresponding_second(manifest: &Manifest, pair: usize, third_second: usize) -> usize {
    let p = &manifest.entries[pair];
    let t = align_timestamp(
        third_second as f64,
        p.third_view.duration,
        p.first_view.duration,
    )
    .expect("manifest durations are validated positive");
    (t.round() as usize).min(frames_at_one_fps(p.first_view.duration) - 1)
}

/// Precomputed sampling tables for one manifest.
#[derive(Debug, Clone)]
pub struct TripletSampler<'m> {
    manifest: &'m Manifest,
    cfg: SamplerConfig,
    /// Manifest positions of valid pairs.
    pairs: Vec<usize>,
    /// Cumulative third-person frame counts over `pairs`.
    cumulative: Vec<usize>,
}

impl<'m> TripletSampler<'m> {
    pub fn new(manifest: &'m Manifest, cfg: SamplerConfig) -> Result<Self> {
        let NegativeMix {
            cross_video,
            same_video,
        } = cfg.negative_mix;
        if !(cross_video >= 0.0 && same_video >= 0.0 && cross_video + same_video > 0.0) {
            return Err(Error::Config(format!(
                "negative mix must be nonnegative with positive total, got {cross_video}/{same_video}"
            )));
        }
        if !(cfg.margin_seconds >= 0.0) {
            return Err(Error::Config("negative margin must be nonnegative".into()));
        }
        let pairs: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, p)| p.valid)
            .map(|(i, _)| i)
            .collect();
        if pairs.is_empty() {
            return Err(Error::Sampling("manifest has no valid pairs".into()));
        }
        if pairs.len() < 2 && cross_video > 0.0 {
            return Err(Error::Sampling(format!(
                "cross-video negatives need at least 2 valid pairs, manifest has {}",
                pairs.len()
            )));
        }
        let mut cumulative = Vec::with_capacity(pairs.len());
        let mut total = 0;
        for &i in &pairs {
            total += frames_at_one_fps(manifest.entries[i].third_view.duration);
            cumulative.push(total);
        }
        Ok(TripletSampler {
            manifest,
            cfg,
            pairs,
            cumulative,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn total_anchor_frames(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TripletRef> {
        let k = rng.gen_range(0..self.total_anchor_frames());
        let slot = self.cumulative.partition_point(|&c| c <= k);
        let pair = self.pairs[slot];
        let start = if slot == 0 { 0 } else { self.cumulative[slot - 1] };
        let y = FrameRef {
            pair,
            view: View::Third,
            second: k - start,
        };
        let x = FrameRef {
            pair,
            view: View::First,
            second: corresponding_second(self.manifest, pair, y.second),
        };
        let mix = self.cfg.negative_mix;
        let cross = rng.gen::<f64>() * (mix.cross_video + mix.same_video) < mix.cross_video;
        let z = if cross {
            self.cross_video_negative(rng, slot)?
        } else {
            match self.same_video_negative(rng, pair, y.second) {
                Some(z) => z,
                None if self.pairs.len() >= 2 => self.cross_video_negative(rng, slot)?,
                None => {
                    return Err(Error::Sampling(format!(
                        "pair '{}' too short for a {} s negative margin and no other pair to fall back on",
                        self.manifest.entries[pair].pair_id, self.cfg.margin_seconds
                    )))
                }
            }
        };
        Ok(TripletRef { x, y, z })
    }

    fn cross_video_negative<R: Rng + ?Sized>(&self, rng: &mut R, anchor_slot: usize) -> Result<FrameRef> {
        if self.pairs.len() < 2 {
            return Err(Error::Sampling("no other pair for a cross-video negative".into()));
        }
        let mut slot = rng.gen_range(0..self.pairs.len() - 1);
        if slot >= anchor_slot {
            slot += 1;
        }
        let pair = self.pairs[slot];
        let n = frames_at_one_fps(self.manifest.entries[pair].first_view.duration);
        Ok(FrameRef {
            pair,
            view: View::First,
            second: rng.gen_range(0..n),
        })
    }

    fn same_video_negative<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        pair: usize,
        third_second: usize,
    ) -> Option<FrameRef> {
        let p = &self.manifest.entries[pair];
        let aligned =
            align_timestamp(third_second as f64, p.third_view.duration, p.first_view.duration).ok()?;
        let n = frames_at_one_fps(p.first_view.duration);
        let far: Vec<usize> = (0..n)
            .filter(|&s| (s as f64 - aligned).abs() >= self.cfg.margin_seconds)
            .collect();
        if far.is_empty() {
            return None;
        }
        Some(FrameRef {
            pair,
            view: View::First,
            second: far[rng.gen_range(0..far.len())],
        })
    }
}

pub fn sample_triplet<R: Rng + ?Sized>(
    m: &Manifest,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<TripletRef> {
    TripletSampler::new(m, *cfg)?.sample(rng)
}

/// Checks the structural triplet invariants against a manifest.
pub fn check_triplet(m: &Manifest, t: &TripletRef, margin_seconds: f64) -> std::result::Result<(), String> {
    if t.x.pair != t.y.pair {
        return Err("x and y come from different pairs".into());
    }
    if t.x.view != View::First || t.z.view != View::First || t.y.view != View::Third {
        return Err("view roles violated".into());
    }
    for r in [t.x, t.y, t.z] {
        let n = frames_at_one_fps(m.entries[r.pair].stream(r.view).duration);
        if r.second >= n {
            return Err(format!("frame {r:?} beyond stream end"));
        }
    }
    if t.z.pair == t.y.pair {
        let p = &m.entries[t.y.pair];
        let aligned = align_timestamp(t.y.second as f64, p.third_view.duration, p.first_view.duration)
            .map_err(|e| e.to_string())?;
        if (t.z.second as f64 - aligned).abs() < margin_seconds {
            return Err(format!(
                "same-video negative at {} s is within {margin_seconds} s of aligned anchor {aligned}",
                t.z.second
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::manifest::{ActionSegment, StreamRef, VideoPair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(id: &str, d_first: f64, d_third: f64) -> VideoPair {
        let s = |d: f64, v: &str| StreamRef {
            path: format!("{id}/{v}"),
            fps: 1.0,
            duration: d,
        };
        VideoPair {
            pair_id: id.into(),
            first_view: s(d_first, "first"),
            third_view: s(d_third, "third"),
            action_segments: vec![ActionSegment {
                label: "obj".into(),
                start: 1.0,
                end: 2.0,
            }],
            valid: true,
        }
    }

    fn fixture() -> Manifest {
        Manifest::new(
            vec![pair("a", 12.0, 10.0), pair("b", 9.0, 15.0), pair("c", 20.0, 20.0)],
            "fixture",
        )
        .unwrap()
    }

    #[test]
    fn fixed_seed_repeats() {
        let m = fixture();
        let cfg = SamplerConfig::default();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..50).map(|_| sample_triplet(&m, &mut rng, &cfg).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn forced_cross_video() {
        let m = fixture();
        let cfg = SamplerConfig {
            negative_mix: NegativeMix {
                cross_video: 1.0,
                same_video: 0.0,
            },
            margin_seconds: 3.0,
        };
        let s = TripletSampler::new(&m, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hit = [false; 3];
        for _ in 0..2000 {
            let t = s.sample(&mut rng).unwrap();
            assert_ne!(t.z.pair, t.y.pair);
            hit[t.z.pair] = true;
        }
        assert_eq!(hit, [true; 3]);
    }

    #[test]
    fn forced_same_video_respects_margin() {
        let m = fixture();
        let cfg = SamplerConfig {
            negative_mix: NegativeMix {
                cross_video: 0.0,
                same_video: 1.0,
            },
            margin_seconds: 3.0,
        };
        let s = TripletSampler::new(&m, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let t = s.sample(&mut rng).unwrap();
            assert_eq!(t.z.pair, t.y.pair);
            let p = &m.entries[t.y.pair];
            let aligned =
                align_timestamp(t.y.second as f64, p.third_view.duration, p.first_view.duration)
                    .unwrap();
            assert!((t.z.second as f64 - aligned).abs() >= 3.0);
        }
    }

    #[test]
    fn invariants_hold_under_default_mix() {
        let m = fixture();
        for seed in 0..3 {
            let s = TripletSampler::new(&m, SamplerConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10_000 {
                let t = s.sample(&mut rng).unwrap();
                check_triplet(&m, &t, 3.0).unwrap();
            }
        }
    }

    #[test]
    fn anchors_are_uniform_over_third_person_frames() {
        let m = fixture();
        let s = TripletSampler::new(&m, SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut per_pair = [0usize; 3];
        let n = 45_000;
        for _ in 0..n {
            per_pair[s.sample(&mut rng).unwrap().y.pair] += 1;
        }
        // 10 + 15 + 20 anchor frames
        for (count, frames) in per_pair.iter().zip([10.0, 15.0, 20.0]) {
            let expect = n as f64 * frames / 45.0;
            assert!((*count as f64 - expect).abs() < 4.0 * expect.sqrt(), "{per_pair:?}");
        }
    }

    #[test]
    fn positive_is_duration_scaled() {
        let m = fixture();
        // pair b: third 15 s, first 9 s, so second 10 maps to 6.
        assert_eq!(corresponding_second(&m, 1, 10), 6);
        assert_eq!(corresponding_second(&m, 1, 14), 8);
        assert_eq!(corresponding_second(&m, 0, 9), 11);
    }

    #[test]
    fn single_pair_needs_same_video_only() {
        let m = Manifest::new(vec![pair("a", 12.0, 10.0)], "one").unwrap();
        assert!(matches!(
            TripletSampler::new(&m, SamplerConfig::default()),
            Err(Error::Sampling(_))
        ));
        let cfg = SamplerConfig {
            negative_mix: NegativeMix {
                cross_video: 0.0,
                same_video: 1.0,
            },
            margin_seconds: 3.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_triplet(&m, &mut rng, &cfg).unwrap();
        check_triplet(&m, &t, 3.0).unwrap();
    }

    #[test]
    fn invalid_pairs_never_sampled() {
        let mut m = fixture();
        m.entries[2].valid = false;
        let s = TripletSampler::new(&m, SamplerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let t = s.sample(&mut rng).unwrap();
            assert!(t.x.pair != 2 && t.y.pair != 2 && t.z.pair != 2);
        }
    }
}
