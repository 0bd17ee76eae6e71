//! Weight-shared three-branch training with SGD, ablation wiring and
//! finite-difference verification.

mod gradcheck;
mod pass;
mod variant;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{coordinates, gradient_check, gradient_check_at, relative_error, CoordCheck, GradCheckReport, REL_ERROR_FLOOR};
pub use pass::{
    batch_loss, batch_pass, embed_frame, forward_triplet, loss_and_grad, wired_embeddings, BatchStats, ItemLoss,
    Objective, TripletOutput,
};
pub use variant::Variant;

use crate::datakit::{image_to_array, FrameStore, Manifest, NegativeMix, SamplerConfig, TripletRef, TripletSampler};
use crate::error::{Error, Result};
use crate::losses::TripletVariant;
use crate::model::{AttentionConfig, BackboneConfig, Checkpoint, ModelConfig, Params};

/// Flat training configuration; the JSON config file uses these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub variant: Variant,
    pub momentum: f64,
    pub triplet_variant: TripletVariant,
    pub denom_epsilon: f64,
    /// Triplets drawn per epoch; defaults to one per third-person frame.
    pub triplets_per_epoch: Option<usize>,
    pub cross_video_fraction: f64,
    pub margin_seconds: f64,
    pub channels: usize,
    pub input_side: usize,
    pub reduction: usize,
    /// Triplets in the fixed batch whose loss is re-evaluated after training.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            lambda: 2.5,
            variant: Variant::Full,
            momentum: 0.9,
            triplet_variant: TripletVariant::Stable,
            denom_epsilon: 1e-8,
            triplets_per_epoch: None,
            cross_video_fraction: 0.5,
            margin_seconds: 3.0,
            channels: 64,
            input_side: 64,
            reduction: 8,
            probe_size: 8,
        }
    }
}

impl TrainConfig {
    /// Synthetic-benchmark recipe: batch 4 at lr 3e-3, 512 triplets per
    /// epoch for 30 epochs. The batch-16 defaults learn too slowly here.
    pub fn benchmark() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            triplets_per_epoch: Some(512),
            seed: 42,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.triplets_per_epoch == Some(0) {
            return Err(Error::Config("triplets_per_epoch must be >= 1".into()));
        }
        if self.input_side % 8 != 0 || self.input_side == 0 {
            return Err(Error::Config(format!("input_side must be a positive multiple of 8, got {}", self.input_side)));
        }
        self.objective().loss.validate()?;
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: self.channels,
                height: self.input_side / 8,
                width: self.input_side / 8,
                input_side: self.input_side,
                ..BackboneConfig::desk_small()
            },
            attention: AttentionConfig {
                reduction: self.reduction,
                mlp_bias: false,
            },
        }
    }

    pub fn objective(&self) -> Objective {
        Objective::new(self.variant, self.lambda, self.triplet_variant, self.denom_epsilon)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            negative_mix: NegativeMix {
                cross_video: self.cross_video_fraction,
                same_video: 1.0 - self.cross_video_fraction,
            },
            margin_seconds: self.margin_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub attention_loss: f64,
    pub triplet_loss: f64,
    pub weight_entropy: f64,
    pub steps: usize,
    pub wall_seconds: f64,
}

/// Loss of a fixed batch under the final (stored-precision) parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub triplets: Vec<TripletRef>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub epochs: Vec<EpochRecord>,
    pub probe: ProbeRecord,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Probe(&'a ProbeRecord),
}

impl TrainReport {
    /// One JSON object per epoch, then the probe record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&ReportLine::Epoch(e))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&ReportLine::Probe(&self.probe))?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Total loss smoothed by a trailing moving average of `window` epochs.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.epochs.iter().map(|e| e.loss).collect();
        losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g; θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Params,
}

impl Sgd {
    pub fn new(params: &Params, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        for (v, g) in self.velocity.slices_mut().into_iter().zip(grads.slices()) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
        }
        params.add_scaled(&self.velocity, -self.learning_rate);
    }
}

fn decode(store: &FrameStore, refs: &[TripletRef]) -> Vec<[Array3<f64>; 3]> {
    refs.iter()
        .map(|t| {
            [
                image_to_array(store.image(t.x)),
                image_to_array(store.image(t.y)),
                image_to_array(store.image(t.z)),
            ]
        })
        .collect()
}

fn as_views(frames: &[[Array3<f64>; 3]]) -> Vec<[&Array3<f64>; 3]> {
    frames.iter().map(|[x, y, z]| [x, y, z]).collect()
}

/// Probe loss of a checkpoint on the report's probe batch.
pub fn probe_loss(ck: &Checkpoint, cfg: &TrainConfig, store: &FrameStore, refs: &[TripletRef]) -> Result<f64> {
    let frames = decode(store, refs);
    Ok(batch_pass(&ck.params, &as_views(&frames), &cfg.objective(), None)?.loss)
}

/// Trains from initialisation; `store` must hold the frames of `manifest`.
pub fn train(cfg: &TrainConfig, manifest: &Manifest, store: &FrameStore) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if manifest.valid_pairs().next().is_none() {
        return Err(Error::Validation("training manifest has no valid pairs".into()));
    }
    if store.side() as usize != cfg.input_side {
        return Err(Error::Contract(format!(
            "frames stored at side {}, model expects {}",
            store.side(),
            cfg.input_side
        )));
    }
    let started = Instant::now();
    let obj = cfg.objective();
    let mut params = Params::init(&cfg.model(), cfg.seed)?;
    let mut opt = Sgd::new(&params, cfg.learning_rate, cfg.momentum);
    let sampler = TripletSampler::new(manifest, cfg.sampler())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    probe_rng.set_stream(1);
    let probe_refs = (0..cfg.probe_size.max(1))
        .map(|_| sampler.sample(&mut probe_rng))
        .collect::<Result<Vec<_>>>()?;

    let per_epoch = cfg.triplets_per_epoch.unwrap_or_else(|| sampler.total_anchor_frames());
    let steps = per_epoch.div_ceil(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let (mut loss, mut al, mut tl, mut ent) = (0.0, 0.0, 0.0, 0.0);
        for step in 0..steps {
            let n = cfg.batch_size.min(per_epoch - step * cfg.batch_size);
            let refs = (0..n).map(|_| sampler.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
            let frames = decode(store, &refs);
            let mut grads = params.zeros_like();
            let stats = batch_pass(&params, &as_views(&frames), &obj, Some(&mut grads))?;
            if !stats.loss.is_finite() || !grads.all_finite() {
                let detail = serde_json::json!({ "triplets": refs, "items": stats.items }).to_string();
                log::error!("non-finite loss at epoch {epoch} step {step}: {detail}");
                return Err(Error::NonFinite { epoch, step, detail });
            }
            opt.step(&mut params, &grads);
            loss += stats.loss;
            al += stats.attention_loss;
            tl += stats.triplet_loss;
            ent += stats.weight_entropy;
        }
        let k = steps as f64;
        let rec = EpochRecord {
            epoch,
            loss: loss / k,
            attention_loss: al / k,
            triplet_loss: tl / k,
            weight_entropy: ent / k,
            steps,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} (tl {:.5}, al {:.5})",
            cfg.variant,
            rec.loss,
            rec.triplet_loss,
            rec.attention_loss
        );
        epochs.push(rec);
    }

    let meta = serde_json::to_value(cfg)?;
    let ck = Checkpoint::new(params, cfg.variant, cfg.epochs, meta);
    let loss = probe_loss(&ck, cfg, store, &probe_refs)?;
    let report = TrainReport {
        variant: cfg.variant,
        epochs,
        probe: ProbeRecord {
            triplets: probe_refs,
            loss,
        },
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((ck, report))
}

/// Parameters a checkpoint would hold after zero epochs.
pub fn untrained(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let meta = serde_json::to_value(cfg)?;
    Ok(Checkpoint::new(Params::init(&cfg.model(), cfg.seed)?, cfg.variant, 0, meta))
}
