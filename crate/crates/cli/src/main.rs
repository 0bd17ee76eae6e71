//! `egoexo`: data generation, training, evaluation and applications.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egoexo_core::apps::{self, CosegConfig, Slico, ThresholdPolicy};
use egoexo_core::datakit::{
    self, filter_invalid_pairs, image_to_array, load_blacklist, load_manifest, synth, FrameStore, Manifest,
    SynthConfig, TripletSampler,
};
use egoexo_core::eval::{self, EvalSettings};
use egoexo_core::losses::TripletVariant;
use egoexo_core::model::{channel_attention, extract_features, roa_heatmap, Checkpoint, Params};
use egoexo_core::trainer::{self, TrainConfig, Variant};
use egoexo_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::FileConfig;

const PRECEDENCE: &str = "Settings resolve in this order: command-line flags, then the --config file, then built-in defaults.";

#[derive(Parser)]
#[command(name = "egoexo", version, about = "Joint-attention learning on paired first- and third-person video", after_help = PRECEDENCE)]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config file; flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed [default: config value, else 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: print JSON to stdout where possible]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Data {
    /// Manifest file (JSON lines)
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Pair ids to drop, one per line
    #[arg(long, value_name = "PATH")]
    blacklist: Option<PathBuf>,
}

#[derive(Args)]
struct Training {
    /// Model variant [default: full]
    #[arg(long, value_name = "NAME")]
    variant: Option<Variant>,
    /// Attention-loss weight [default: 2.5]
    #[arg(long)]
    lambda: Option<f64>,
    /// Triplet loss form, verbatim or stable [default: stable]
    #[arg(long, value_name = "NAME")]
    triplet_variant: Option<TripletVariant>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Triplets per step [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Triplets drawn per epoch [default: one per third-person frame]
    #[arg(long)]
    triplets_per_epoch: Option<usize>,
}

#[derive(Args)]
struct CheckpointArg {
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset with ground truth
    #[command(after_help = PRECEDENCE)]
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Number of pairs [default: 10]
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train a model on a manifest
    #[command(after_help = PRECEDENCE)]
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        training: Training,
    },
    /// Pairs-discrimination accuracy on a manifest
    #[command(after_help = PRECEDENCE)]
    EvalPairs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Moment-localization alignment error on a manifest
    #[command(after_help = PRECEDENCE)]
    EvalMoments {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Train every variant on --manifest and compare them on --test-manifest
    #[command(after_help = PRECEDENCE)]
    Ablations {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Evaluation manifest
        #[arg(long, value_name = "PATH")]
        test_manifest: Option<PathBuf>,
        /// Comma-separated variants [default: all]
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[command(flatten)]
        training: Training,
    },
    /// Joint-attention video summaries
    #[command(after_help = PRECEDENCE)]
    Summarize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ck: CheckpointArg,
        /// Only this pair [default: every pair]
        #[arg(long)]
        pair: Option<String>,
        /// Fixed importance threshold in [0, 1]; overrides --percentile
        #[arg(long)]
        threshold: Option<f64>,
        /// Per-video percentile threshold [default: 75]
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Gaze point and ray from a third-person frame
    #[command(after_help = PRECEDENCE)]
    Gaze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
        /// Third-person frame
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Head position X,Y in model-input pixels
        #[arg(long, value_name = "X,Y", value_parser = parse_point)]
        head: (f64, f64),
    },
    /// Co-segment a corresponding first-/third-person frame pair
    #[command(after_help = PRECEDENCE)]
    Coseg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
        /// First-person frame
        #[arg(long, value_name = "PATH")]
        first: PathBuf,
        /// Third-person frame
        #[arg(long, value_name = "PATH")]
        third: PathBuf,
        /// Proximity weight against appearance [default: 0.5]
        #[arg(long)]
        alpha: Option<f64>,
        /// Target superpixels per image [default: 24]
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Render the ROA heatmap of a frame as a PNG overlay
    #[command(after_help = PRECEDENCE)]
    Visualize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
    },
    /// Compare analytic and finite-difference gradients
    #[command(after_help = PRECEDENCE)]
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ck: CheckpointArg,
        #[command(flatten)]
        training: Training,
        /// Coordinates to check [default: 200]
        #[arg(long)]
        samples: Option<usize>,
        /// Finite-difference step [default: 1e-6]
        #[arg(long)]
        step: Option<f64>,
        /// Triplets in the checked batch
        #[arg(long, default_value_t = 3)]
        batch: usize,
        /// Largest accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn parse_point(s: &str) -> std::result::Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}"));
    Ok((num(x)?, num(y)?))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Validation(format!("missing required flag --{flag}")))
}

fn load_data(data: &Data) -> Result<Manifest> {
    let m = load_manifest(required(&data.manifest, "manifest")?)?;
    match &data.blacklist {
        Some(b) => Ok(filter_invalid_pairs(&m, &load_blacklist(b)?).0),
        None => Ok(m),
    }
}

fn load_checkpoint(ck: &CheckpointArg) -> Result<Checkpoint> {
    Checkpoint::load(required(&ck.checkpoint, "checkpoint")?)
}

fn store_for(manifest: &Manifest, params: &Params) -> Result<FrameStore> {
    FrameStore::load(manifest, params.config.backbone.input_side as u32)
}

fn load_frame(path: &Path, side: usize) -> Result<image::RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    Ok(datakit::preprocess::<ChaCha8Rng>(&img, side as u32, None))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `<out>/<name>` when an output directory is given, else prints.
fn emit(out: &Option<PathBuf>, name: &str, json: &str) -> Result<()> {
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join(name), &format!("{json}\n"))
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn train_config(common: &Common, t: &Training, file: &FileConfig) -> Result<TrainConfig> {
    let mut cfg = file.train.clone();
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = t.variant {
        cfg.variant = v;
    }
    if let Some(v) = t.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = t.triplet_variant {
        cfg.triplet_variant = v;
    }
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = t.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.momentum {
        cfg.momentum = v;
    }
    if t.triplets_per_epoch.is_some() {
        cfg.triplets_per_epoch = t.triplets_per_epoch;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_settings(common: &Common, file: &FileConfig) -> EvalSettings {
    EvalSettings {
        sampler: file.train.sampler(),
        seed: common.seed.unwrap_or(file.train.seed),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth { common, pairs } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let out = required(&common.out, "out")?;
            let mut cfg = file.extras.synth.clone().unwrap_or_default();
            cfg.pairs = pairs.or(file.extras.pairs).unwrap_or(SynthConfig::default().pairs);
            let ds = datakit::generate_synthetic(&cfg, common.seed.unwrap_or(file.train.seed))?;
            create_dir(out)?;
            synth::write_synthetic(&ds, out)?;
            log::info!("wrote {} pairs to {}", ds.manifest.len(), out.display());
        }
        Command::Train { common, data, training } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let cfg = train_config(&common, &training, &file)?;
            let out = required(&common.out, "out")?;
            let manifest = load_data(&data)?;
            let store = FrameStore::load(&manifest, cfg.input_side as u32)?;
            let (ck, report) = trainer::train(&cfg, &manifest, &store)?;
            create_dir(out)?;
            ck.save(out.join("checkpoint.ckpt"))?;
            report.write_jsonl(out.join("report.jsonl"))?;
            write_file(&out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
        }
        Command::EvalPairs { common, data, ck } => {
            let ck = load_checkpoint(&ck)?;
            let file = FileConfig::load(common.config.as_deref())?;
            let manifest = load_data(&data)?;
            let store = store_for(&manifest, &ck.params)?;
            let settings = eval_settings(&common, &file);
            let table = eval::embed_store(&ck.params, ck.variant, &store, manifest.len())?;
            let triplets = eval::test_triplets(&manifest, settings.sampler, settings.seed)?;
            let report = eval::pairs_discrimination(&table, &triplets)?;
            log::info!("accuracy {:.4} over {} triplets", report.value, report.n);
            emit(&common.out, "eval_pairs.json", &report.to_json()?)?;
        }
        Command::EvalMoments { common, data, ck } => {
            let ck = load_checkpoint(&ck)?;
            let manifest = load_data(&data)?;
            let store = store_for(&manifest, &ck.params)?;
            let table = eval::embed_store(&ck.params, ck.variant, &store, manifest.len())?;
            let report = eval::moment_localization(&table, &manifest)?;
            log::info!("mean alignment error {:.3} s over {} pairs", report.value, report.n);
            emit(&common.out, "eval_moments.json", &report.to_json()?)?;
        }
        Command::Ablations {
            common,
            data,
            test_manifest,
            variants,
            training,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let base = train_config(&common, &training, &file)?;
            let out = required(&common.out, "out")?;
            let train_m = load_data(&data)?;
            let test_m = load_manifest(required(&test_manifest, "test-manifest")?)?;
            let side = base.input_side as u32;
            let (train_s, test_s) = (FrameStore::load(&train_m, side)?, FrameStore::load(&test_m, side)?);
            let truths = match synth::load_ground_truth(&test_m) {
                Ok(t) => Some(t),
                Err(e) => {
                    log::warn!("no attention ground truth, skipping hit rate: {e}");
                    None
                }
            };
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let run = eval::run_ablations(
                &base,
                &variants,
                (&train_m, &train_s),
                (&test_m, &test_s),
                truths.as_deref(),
                &eval_settings(&common, &file),
            )?;
            create_dir(out)?;
            for (ck, report) in &run.trained {
                ck.save(out.join(format!("{}.ckpt", ck.variant)))?;
                report.write_jsonl(out.join(format!("{}.report.jsonl", ck.variant)))?;
            }
            write_file(&out.join("ablations.txt"), &run.table.to_text())?;
            write_file(&out.join("ablations.csv"), &run.table.to_csv())?;
            write_file(&out.join("ablations.json"), &run.table.to_json()?)?;
            print!("{}", run.table.to_text());
        }
        Command::Summarize {
            common,
            data,
            ck,
            pair,
            threshold,
            percentile,
        } => {
            let ck = load_checkpoint(&ck)?;
            let file = FileConfig::load(common.config.as_deref())?;
            let manifest = load_data(&data)?;
            let policy = match (threshold.or(file.extras.threshold), percentile.or(file.extras.percentile)) {
                (Some(t), _) => ThresholdPolicy::Fixed(t),
                (None, Some(q)) => ThresholdPolicy::Percentile(q),
                (None, None) => ThresholdPolicy::default(),
            };
            let indices: Vec<usize> = match &pair {
                Some(id) => vec![manifest
                    .entries
                    .iter()
                    .position(|p| &p.pair_id == id)
                    .ok_or_else(|| Error::Validation(format!("pair '{id}' is not in the manifest")))?],
                None => (0..manifest.len()).collect(),
            };
            let store = store_for(&manifest, &ck.params)?;
            let summaries = indices
                .into_iter()
                .map(|i| apps::summarize(&ck, &manifest, &store, i, policy))
                .collect::<Result<Vec<_>>>()?;
            emit(&common.out, "summary.json", &serde_json::to_string_pretty(&summaries)?)?;
        }
        Command::Gaze { common, ck, image, head } => {
            let ck = load_checkpoint(&ck)?;
            let side = ck.params.config.backbone.input_side;
            let frame = image_to_array(&load_frame(&image, side)?);
            let g = apps::predict_gaze(&ck.params, &frame, head)?;
            emit(&common.out, "gaze.json", &serde_json::to_string_pretty(&g)?)?;
        }
        Command::Coseg {
            common,
            ck,
            first,
            third,
            alpha,
            segments,
        } => {
            let ck = load_checkpoint(&ck)?;
            let file = FileConfig::load(common.config.as_deref())?;
            let out = required(&common.out, "out")?;
            let side = ck.params.config.backbone.input_side;
            let a = image_to_array(&load_frame(&first, side)?);
            let b = image_to_array(&load_frame(&third, side)?);
            let cfg = CosegConfig {
                alpha: alpha.or(file.extras.alpha).unwrap_or(CosegConfig::default().alpha),
            };
            let slico = Slico {
                segments: segments.or(file.extras.segments).unwrap_or(Slico::default().segments),
                ..Slico::default()
            };
            let r = apps::cosegment(&ck.params, &a, &b, &slico, &cfg)?;
            create_dir(out)?;
            apps::write_mask(&r.first_mask, out.join("first_mask.png"))?;
            apps::write_mask(&r.third_mask, out.join("third_mask.png"))?;
            write_file(&out.join("coseg.json"), &serde_json::to_string_pretty(&r.scores)?)?;
        }
        Command::Visualize { common, ck, image } => {
            let ck = load_checkpoint(&ck)?;
            let out = required(&common.out, "out")?;
            let side = ck.params.config.backbone.input_side;
            let frame = load_frame(&image, side)?;
            let f = extract_features(&ck.params, &image_to_array(&frame))?;
            let m = channel_attention(&f, &ck.params)?;
            let h = roa_heatmap(&f, &m, side)?;
            create_dir(out)?;
            apps::render_heatmap(&frame, &h.upsampled, out.join("heatmap.png"))?;
        }
        Command::GradCheck {
            common,
            data,
            ck,
            training,
            samples,
            step,
            batch,
            tolerance,
        } => {
            let file = FileConfig::load(common.config.as_deref())?;
            let cfg = train_config(&common, &training, &file)?;
            let params = match &ck.checkpoint {
                Some(p) => Checkpoint::load(p)?.params,
                None => Params::init(&cfg.model(), cfg.seed)?,
            };
            let (manifest, store) = match &data.manifest {
                Some(_) => {
                    let m = load_data(&data)?;
                    let s = store_for(&m, &params)?;
                    (m, s)
                }
                None => {
                    let ds = datakit::generate_synthetic(&SynthConfig { pairs: 4, ..Default::default() }, cfg.seed)?;
                    let s = ds.frame_store(params.config.backbone.input_side as u32)?;
                    (ds.manifest, s)
                }
            };
            let sampler = TripletSampler::new(&manifest, cfg.sampler())?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let triplets = (0..batch.max(1))
                .map(|_| sampler.sample(&mut rng).map(|t| store.triplet(&t)))
                .collect::<Result<Vec<_>>>()?;
            let report = trainer::gradient_check(
                &params,
                &triplets,
                &cfg.objective(),
                step.or(file.extras.step).unwrap_or(1e-6),
                samples.or(file.extras.samples).unwrap_or(200),
                cfg.seed,
            )?;
            emit(&common.out, "grad_check.json", &serde_json::to_string_pretty(&report)?)?;
            if !(report.max_rel_error < tolerance) {
                return Err(Error::Validation(format!(
                    "max relative error {:e} exceeds {tolerance:e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
