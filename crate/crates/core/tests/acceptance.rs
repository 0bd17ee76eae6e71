//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::sync::OnceLock;
use std::time::Instant;

use egoexo_core::apps::{
    self, annotated_seconds, pair_costs, random_selection, segment_features, set_metrics, summary_metrics, CosegConfig,
    Segmenter, Slico, ThresholdPolicy,
};
use egoexo_core::datakit::{
    generate_synthetic, image_to_array, load_manifest, synth, FrameRef, FrameStore, SynthConfig,
    SynthDataset, TripletSampler, View,
};
use egoexo_core::eval::{
    embed_store, evaluate_checkpoints, moment_localization, pairs_discrimination, test_triplets, AblationTable,
    EvalSettings,
};
use egoexo_core::losses::{
    attention_loss, attention_loss_grad, total_loss, triplet_loss_stable, triplet_loss_stable_grad,
    triplet_loss_verbatim, triplet_loss_verbatim_grad, TripletDistances,
};
use egoexo_core::model::{
    apply_attention, channel_attention, embed_filtered, extract_features, roa_heatmap, Checkpoint, FeatureMap, Params,
};
use egoexo_core::trainer::{
    coordinates, gradient_check_at, relative_error, train, untrained, Objective, TrainConfig, TrainReport, Variant,
};
use egoexo_core::{Error, Result};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const TRAIN_PAIRS: usize = 200;
const TEST_PAIRS: usize = 50;
const DRAWS: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const BENCH_SECONDS: f64 = 900.0;
const CHANCE: f64 = 0.5;
const ACC_MARGIN: f64 = 0.25;
const HIT_RATE: f64 = 0.70;
const RANDOM_SEEDS: u64 = 20;
const MAX_CANDIDATES: usize = 50;

struct Bench {
    train: SynthDataset,
    test: SynthDataset,
    test_store: FrameStore,
    trained: Vec<(Checkpoint, TrainReport)>,
    table: AblationTable,
    untrained_error: f64,
    /// Training plus evaluation of the full variant.
    full_seconds: f64,
}

impl Bench {
    fn full(&self) -> &(Checkpoint, TrainReport) {
        self.trained.iter().find(|(c, _)| c.variant == Variant::Full).unwrap()
    }
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let cfg = TrainConfig::benchmark();
        let ds = generate_synthetic(&SynthConfig { pairs: TRAIN_PAIRS + TEST_PAIRS, ..Default::default() }, SEED)
            .unwrap();
        let (tr, te) = ds.split(TRAIN_PAIRS);
        let side = cfg.input_side as u32;
        let (train_store, test_store) = (tr.frame_store(side).unwrap(), te.frame_store(side).unwrap());
        let settings = EvalSettings { seed: SEED, ..Default::default() };

        let mut trained = Vec::new();
        let mut full_seconds = 0.0;
        for v in Variant::ALL {
            let t = Instant::now();
            trained.push(train(&TrainConfig { variant: v, ..cfg.clone() }, &tr.manifest, &train_store).unwrap());
            if v == Variant::Full {
                let ck = &trained.last().unwrap().0;
                evaluate_checkpoints(&te.manifest, &test_store, Some(&te.truths), &settings, &[(v, Some(ck))]).unwrap();
                full_seconds = t.elapsed().as_secs_f64();
            }
        }
        let listed: Vec<_> = trained.iter().map(|(c, _)| (c.variant, Some(c))).collect();
        let table = evaluate_checkpoints(&te.manifest, &test_store, Some(&te.truths), &settings, &listed).unwrap();
        println!("{}", table.to_text());

        let init = untrained(&cfg).unwrap();
        let emb = embed_store(&init.params, Variant::Full, &test_store, te.manifest.len()).unwrap();
        let untrained_error = moment_localization(&emb, &te.manifest).unwrap().value;
        Bench {
            train: tr,
            test: te,
            test_store,
            trained,
            table,
            untrained_error,
            full_seconds,
        }
    })
}

fn report(n: usize, name: &str, pass: bool, detail: String) -> bool {
    println!("{} criterion {n} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(lo..hi))
}

/// Worst relative error of the parameter-gradient check over `DRAWS` random
/// models and batches, restricted to coordinates under `prefix`.
fn model_check(prefix: &str, tv: egoexo_core::losses::TripletVariant, step: f64, per_draw: usize) -> f64 {
    let ds = generate_synthetic(&SynthConfig { pairs: 4, ..Default::default() }, 1).unwrap();
    let store = ds.frame_store(64).unwrap();
    let sampler = TripletSampler::new(&ds.manifest, Default::default()).unwrap();
    let obj = Objective::new(Variant::Full, 2.5, tv, 1e-8);
    let mut worst: f64 = 0.0;
    for draw in 0..DRAWS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let mut params = Params::init(&TrainConfig::default().model(), draw).unwrap();
        for v in params.weight_fc.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let batch: Vec<_> = (0..2).map(|_| store.triplet(&sampler.sample(&mut rng).unwrap())).collect();
        let pool = coordinates(&params, prefix);
        let idx: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), per_draw.min(pool.len()))
            .into_iter()
            .map(|i| pool[i])
            .collect();
        match gradient_check_at(&params, &batch, &obj, step, &idx) {
            Ok(r) => worst = worst.max(r.max_rel_error),
            // A verbatim draw can land on the singular set; that is a refusal, not a wrong gradient.
            Err(Error::Singular { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    worst
}

fn criterion_1() -> bool {
    use egoexo_core::losses::TripletVariant::{Stable, Verbatim};
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let h = 1e-6;

    let mut al: f64 = 0.0;
    for _ in 0..DRAWS {
        let (mx, my) = (random_vec(&mut rng, 16, 0.0, 1.0), random_vec(&mut rng, 16, 0.0, 1.0));
        let (_, gx, gy) = attention_loss_grad(&mx, &my).unwrap();
        for k in 0..mx.len() {
            let fx = |v: f64| {
                let mut m = mx.clone();
                m[k] = v;
                attention_loss(&m, &my).unwrap()
            };
            let fy = |v: f64| {
                let mut m = my.clone();
                m[k] = v;
                attention_loss(&mx, &m).unwrap()
            };
            al = al.max(relative_error(gx[k], central(fx, mx[k], h)));
            al = al.max(relative_error(gy[k], central(fy, my[k], h)));
        }
    }

    let (mut verb, mut stab): (f64, f64) = (0.0, 0.0);
    for _ in 0..DRAWS {
        let (p, n) = loop {
            let (p, n) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
            if (p - n as f64).abs() > 0.05 {
                break (p, n);
            }
        };
        let d = |p, n| TripletDistances { d_pos: p, d_neg: n };
        let (_, gp, gn) = triplet_loss_verbatim_grad(d(p, n), 1e-8).unwrap();
        verb = verb.max(relative_error(gp, central(|v| triplet_loss_verbatim(d(v, n), 1e-8).unwrap(), p, h)));
        verb = verb.max(relative_error(gn, central(|v| triplet_loss_verbatim(d(p, v), 1e-8).unwrap(), n, h)));
        let (_, gp, gn) = triplet_loss_stable_grad(d(p, n));
        stab = stab.max(relative_error(gp, central(|v| triplet_loss_stable(d(v, n)), p, h)));
        stab = stab.max(relative_error(gn, central(|v| triplet_loss_stable(d(p, v)), n, h)));
    }

    // The importance scorer is smooth in its own parameters, so it takes a
    // larger step; paths through the backbone stay below the ReLU kinks.
    let attention = model_check("attention.", Stable, 1e-6, 8);
    let importance = model_check("importance.", Stable, 1e-4, 8);
    let composed_stable = model_check("", Stable, 1e-6, 8);
    let composed_verbatim = model_check("", Verbatim, 1e-6, 8);
    let secs = t.elapsed().as_secs_f64();
    let worst = [al, verb, stab, attention, importance, composed_stable, composed_verbatim]
        .into_iter()
        .fold(0.0, f64::max);
    report(
        1,
        "gradient correctness",
        worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "max rel error L_AL {al:.1e}, verbatim {verb:.1e}, stable {stab:.1e}, attention {attention:.1e}, \
             importance {importance:.1e}, composed {composed_stable:.1e}/{composed_verbatim:.1e} \
             (tol {GRAD_TOL:.0e}); {secs:.1}s (limit {GRAD_SECONDS}s)"
        ),
    )
}

fn criterion_2() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut filt: f64 = 0.0;
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..9), rng.gen_range(1..6), rng.gen_range(1..6));
        let f = FeatureMap::new(Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0)));
        let m = egoexo_core::model::ChannelAttentionVector(random_vec(&mut rng, c, 0.0, 1.0));
        let out = apply_attention(&f, &m).unwrap();
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    filt = filt.max((out.data[[k, i, j]] - m.0[k] * f.data[[k, i, j]]).abs());
                }
            }
        }
        // Pooling the filtered map equals filtering the pooled map.
        let avg = Array1::from_shape_fn(c, |k| f.data.index_axis(ndarray::Axis(0), k).mean().unwrap());
        let pooled = Array1::from_shape_fn(c, |k| out.data.index_axis(ndarray::Axis(0), k).mean().unwrap());
        let direct = embed_filtered(&pooled, None);
        filt = filt.max((&embed_filtered(&avg, Some(&m)).values - &direct.values).fold(0.0, |a, v| a.max(v.abs())));
    }

    let mut verb: f64 = 0.0;
    for _ in 0..100 {
        let (p, n): (f64, f64) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
        if (p.exp() - n.exp()).abs() < 1e-3 {
            continue;
        }
        let got = triplet_loss_verbatim(TripletDistances { d_pos: p, d_neg: n }, 1e-8).unwrap();
        verb = verb.max((got - p.exp() / (p.exp() - n.exp())).abs());
    }
    let near = (1.0f64 + 5e-9).ln();
    let singular = matches!(
        triplet_loss_verbatim(TripletDistances { d_pos: near, d_neg: 0.0 }, 1e-8),
        Err(Error::Singular { .. })
    );
    let far = (1.0f64 + 2e-8).ln();
    let regular = triplet_loss_verbatim(TripletDistances { d_pos: far, d_neg: 0.0 }, 1e-8).is_ok();
    report(
        2,
        "formula oracles",
        filt < 1e-12 && verb < 1e-12 && singular && regular,
        format!("filtering max dev {filt:.1e}, verbatim max dev {verb:.1e}, singular gap refused {singular}, gap above 1e-8 accepted {regular}"),
    )
}

fn criterion_3() -> bool {
    let params = Params::init(&TrainConfig::default().model(), SEED).unwrap();
    let m = channel_attention(&FeatureMap::new(Array3::zeros((64, 8, 8))), &params).unwrap();
    let half = m.0.iter().all(|&v| v == 0.5);
    let v = random_vec(&mut ChaCha8Rng::seed_from_u64(1), 64, 0.0, 1.0);
    let al = attention_loss(&v, &v).unwrap();
    let tl = triplet_loss_stable(TripletDistances { d_pos: 0.7, d_neg: 0.7 });
    let total = total_loss(1.0, 2.0, 1.0, 2.5);
    report(
        3,
        "trivial anchors",
        half && al == 0.0 && (tl - 2f64.ln()).abs() < 1e-15 && total == 6.0,
        format!("zero-input attention all 0.5 {half}; L_AL(M,M) = {al}; stable tie = {tl:.15}; total = {total}"),
    )
}

fn criterion_4() -> bool {
    let b = bench();
    let full = b.table.row(Variant::Full).unwrap();
    let without = b.table.row(Variant::WithoutSa).unwrap();
    let (acc, acc_wo) = (full.accuracy.unwrap(), without.accuracy.unwrap());
    let (hit, hit_wo) = (full.roa_hit_rate.unwrap(), without.roa_hit_rate.unwrap());
    let err = full.moment_error.unwrap();
    let a = acc > CHANCE + ACC_MARGIN && acc > acc_wo;
    let m = err < b.untrained_error;
    let c = hit >= HIT_RATE && hit > hit_wo;
    let t = b.full_seconds <= BENCH_SECONDS;
    report(
        4,
        "synthetic benchmark",
        a && m && c && t,
        format!(
            "(a) accuracy {acc:.4} vs bar {:.2} and without_sa {acc_wo:.4}: {a}; (b) moment error {err:.4}s vs untrained {:.4}s: {m}; \
             (c) hit rate {hit:.4} vs bar {HIT_RATE} and without_sa {hit_wo:.4}: {c}; runtime {:.0}s (limit {BENCH_SECONDS}s)",
            CHANCE + ACC_MARGIN,
            b.untrained_error,
            b.full_seconds
        ),
    )
}

fn criterion_5() -> bool {
    let b = bench();
    let full = b.table.row(Variant::Full).unwrap().accuracy.unwrap();
    let beaten: Vec<String> = b
        .table
        .rows
        .iter()
        .filter(|r| r.variant != Variant::Full && r.accuracy.unwrap() > full)
        .map(|r| format!("{} {:.4}", r.variant, r.accuracy.unwrap()))
        .collect();
    let all: Vec<String> = b.table.rows.iter().map(|r| format!("{} {:.4}", r.variant, r.accuracy.unwrap())).collect();
    report(
        5,
        "ablation ordering",
        beaten.is_empty(),
        format!("accuracies [{}]; variants above full: {beaten:?}", all.join(", ")),
    )
}

fn criterion_6() -> bool {
    let b = bench();
    let ck = &b.full().0;
    let (mut f, mut fr) = (0.0, 0.0);
    for p in 0..b.test.manifest.len() {
        let s = apps::summarize(ck, &b.test.manifest, &b.test_store, p, ThresholdPolicy::default()).unwrap();
        let segs = &b.test.manifest.entries[p].action_segments;
        let ann = annotated_seconds(segs, s.importance.len() as f64);
        f += summary_metrics(&s, segs).f_score;
        fr += (0..RANDOM_SEEDS)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                set_metrics(&random_selection(s.importance.len(), s.selected.len(), &mut rng), &ann).f_score
            })
            .sum::<f64>()
            / RANDOM_SEEDS as f64;
    }
    let n = b.test.manifest.len() as f64;
    let (f, fr) = (f / n, fr / n);
    report(
        6,
        "summarization",
        f > fr,
        format!("joint-attention F {f:.4} vs length-matched random {fr:.4} over {RANDOM_SEEDS} seeds"),
    )
}

fn peak(params: &Params, image: &Array3<f64>) -> (f64, f64) {
    let f = extract_features(params, image).unwrap();
    let m = channel_attention(&f, params).unwrap();
    let (x, y) = roa_heatmap(&f, &m, params.config.backbone.input_side).unwrap().peak();
    (x as f64, y as f64)
}

fn criterion_7() -> bool {
    let b = bench();
    let params = &b.full().0.params;
    let slico = Slico::default();
    let (mut checked, mut mismatches, mut most) = (0, 0, 0);
    for p in 0..b.test.manifest.len().min(12) {
        let n = b.test_store.len(p, View::Third);
        let second = n / 2;
        let first_second = egoexo_core::datakit::corresponding_second(&b.test.manifest, p, second);
        let img = |view, second| image_to_array(b.test_store.image(FrameRef { pair: p, view, second }));
        let (a, c) = (img(View::First, first_second), img(View::Third, second));
        let (s1, s3) = (slico.segment(&a).unwrap(), slico.segment(&c).unwrap());
        most = most.max(s1.count.max(s3.count));
        if s1.count > MAX_CANDIDATES || s3.count > MAX_CANDIDATES {
            continue;
        }
        let peaks = [peak(params, &a), peak(params, &c)];
        let (prox, app) = pair_costs(
            &segment_features(&a, &s1),
            &segment_features(&c, &s3),
            peaks,
            [s1.labels.dim(), s3.labels.dim()],
        );
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let cfg = CosegConfig { alpha };
            let got = apps::cosegment(params, &a, &c, &slico, &cfg).unwrap().scores;
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..s1.count {
                for j in 0..s3.count {
                    let cost = alpha * prox[[i, j]] + (1.0 - alpha) * app[[i, j]];
                    if cost < best.0 {
                        best = (cost, i, j);
                    }
                }
            }
            checked += 1;
            if (got.first_segment, got.third_segment) != (best.1, best.2) || got.cost != best.0 {
                mismatches += 1;
            }
        }
    }
    report(
        7,
        "co-segmentation",
        checked > 0 && mismatches == 0,
        format!("{checked} frame pairs x alpha checked against brute force, {mismatches} mismatches; at most {most} candidates per view"),
    )
}

/// gen-synth, train and eval through files on disk; returns every report.
fn pipeline(root: &std::path::Path) -> Result<Vec<Vec<u8>>> {
    let data = root.join("data");
    let ds = generate_synthetic(&SynthConfig { pairs: 12, ..Default::default() }, SEED)?;
    std::fs::create_dir_all(&data).unwrap();
    synth::write_synthetic(&ds, &data)?;
    let manifest = load_manifest(data.join(synth::MANIFEST_FILE))?;
    let truths = synth::load_ground_truth(&manifest)?;
    let cfg = TrainConfig {
        epochs: 2,
        triplets_per_epoch: Some(32),
        ..TrainConfig::benchmark()
    };
    let store = FrameStore::load(&manifest, cfg.input_side as u32)?;
    let (ck, mut rep) = train(&cfg, &manifest, &store)?;
    // Wall-clock timings are the only nondeterministic fields.
    rep.wall_seconds = 0.0;
    for e in &mut rep.epochs {
        e.wall_seconds = 0.0;
    }
    let ck_path = root.join("model.ckpt");
    ck.save(&ck_path)?;
    let ck = Checkpoint::load(&ck_path)?;
    let table = embed_store(&ck.params, ck.variant, &store, manifest.len())?;
    let pairs = pairs_discrimination(&table, &test_triplets(&manifest, cfg.sampler(), SEED)?)?;
    let moments = moment_localization(&table, &manifest)?;
    let settings = EvalSettings { seed: SEED, ..Default::default() };
    let ablation = evaluate_checkpoints(&manifest, &store, Some(&truths), &settings, &[(ck.variant, Some(&ck))])?;
    Ok(vec![
        std::fs::read(&ck_path).unwrap(),
        rep.to_jsonl()?.into_bytes(),
        pairs.to_json()?.into_bytes(),
        moments.to_json()?.into_bytes(),
        ablation.to_json()?.into_bytes(),
    ])
}

fn criterion_8() -> bool {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()).unwrap(), pipeline(b.path()).unwrap());
    let names = ["checkpoint", "training report", "pairs", "moments", "ablation table"];
    let differing: Vec<&str> = names.iter().zip(ra.iter().zip(&rb)).filter(|(_, (a, b))| a != b).map(|(n, _)| *n).collect();
    let bytes: usize = ra.iter().map(Vec::len).sum();
    report(
        8,
        "determinism",
        differing.is_empty(),
        format!("two on-disk runs, {} reports ({bytes} bytes); differing: {differing:?}", ra.len()),
    )
}

#[test]
fn acceptance() {
    let results = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
    ];
    let failed: Vec<usize> = (1..=8).filter(|i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// The smoothed training loss of the benchmark run trends down.
#[test]
fn benchmark_training_curve_descends() {
    let b = bench();
    let (_, rep) = b.full();
    let ma = rep.moving_average(5);
    let rises = ma.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let (first, last) = (rep.epochs[0].loss, rep.epochs.last().unwrap().loss);
    println!("5-epoch moving average: largest rise {rises:.4}; loss {first:.4} -> {last:.4}");
    assert!(rises < 0.01, "moving average rose by {rises}");
    assert!(last < 0.8 * first);
    assert_eq!(b.train.manifest.len(), TRAIN_PAIRS);
}
