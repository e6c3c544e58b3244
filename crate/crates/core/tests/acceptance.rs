//! Acceptance checks, one per criterion, each printing a single PASS/FAIL
//! line with the measured value against its pinned threshold.
//!
//! Runs without the libtest harness so the lines always appear in
//! `cargo test` output; the process exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use transformhead::dataset::{Dataset, Part, Video};
use transformhead::eval::{
    argmin, effect_gallery, embed_videos, evaluate, fuse_scores, nearest_neighbors, predict_effect,
    ClassFilter,
};
use transformhead::features::{PrefixSums, Stream};
use transformhead::grad::{check_coordinates, finite_diff_check, ParamGroup};
use transformhead::manifest::LabelSpace;
use transformhead::model::{cosine_distance, loss, LatentSegmentation, SiameseParams, DEFAULT_MARGIN};
use transformhead::parallel::Parallelism;
use transformhead::search::{estimate_latents, infer, latent_range, ScoreRow, ScoreTable};
use transformhead::synth::{generate, oracle_params, SynthConfig, SynthDataset};
use transformhead::train::{train, write_metrics, TrainConfig, TrainOutcome};

// Criterion 1
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_CONFIGS: usize = 12;
// Criterion 3
const SEARCH_TOL: f64 = 1e-10;
const SEARCH_INSTANCES: usize = 120;
// Criteria 4 and 5
const TRAIN_ITERS: u64 = 2000;
/// The default schedule's shape (three stages, tenfold decay, momentum 0.9,
/// batch 50) with a base rate sized for unit-scale synthetic features.
const BASE_LR: f64 = 0.05;
const MIN_TRAINED_ACCURACY: f64 = 0.95;
const SEG_SLACK: usize = 1;
const MIN_SEG_WITHIN: f64 = 0.80;
// Criterion 6
const MIN_CROSS_ACCURACY: f64 = 0.85;
// Criterion 7
const PROPERTY_SAMPLES: usize = 1000;
const SCALE_TOL: f64 = 1e-10;
// Criterion 8
const FUSE_TOL: f64 = 1e-12;
// Criterion 9
const PARALLEL_TOL: f64 = 1e-12;
// Criterion 10
const ORACLE_EFFECT_TOL: f64 = 1e-6;
const MIN_SAME_CLASS_TOP1: f64 = 0.80;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Outcome {
    check(
        elapsed < budget,
        format!("runtime {:.2}s < {}s", elapsed.as_secs_f64(), budget.as_secs()),
    )
}

fn all(parts: Vec<Outcome>) -> Outcome {
    Outcome {
        pass: parts.iter().all(|p| p.pass),
        detail: parts
            .iter()
            .map(|p| {
                if p.pass {
                    p.detail.clone()
                } else {
                    format!("[FAILED] {}", p.detail)
                }
            })
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn gaussian_vec(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

fn gaussian_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn random_params(rng: &mut impl Rng, n: usize, d: usize, f: usize) -> SiameseParams {
    let s = 1.0 / (f as f64).sqrt();
    SiameseParams {
        w_pre: gaussian_mat(rng, d, f) * s,
        b_pre: gaussian_vec(rng, d) * 0.1,
        w_eff: gaussian_mat(rng, d, f) * s,
        b_eff: gaussian_vec(rng, d) * 0.1,
        transforms: (0..n).map(|_| gaussian_mat(rng, d, d) * (1.0 / (d as f64).sqrt())).collect(),
    }
}

fn random_frames(rng: &mut impl Rng, t: usize, f: usize) -> Array2<f64> {
    gaussian_mat(rng, t, f) + 0.5
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut with_active_hinge = 0;
    let mut groups_missing = 0;
    for i in 0..GRAD_CONFIGS {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(2..=8);
        let f = rng.random_range(d..=16);
        let t = rng.random_range(6..=30);
        // A wide margin on every other configuration keeps hinges active.
        let margin = if i % 2 == 0 { DEFAULT_MARGIN } else { 1.5 };
        let params = random_params(&mut rng, n, d, f);
        let sums = PrefixSums::new(&random_frames(&mut rng, t, f));
        let segs: Vec<_> = latent_range(t).unwrap().segmentations().collect();
        let seg = segs[rng.random_range(0..segs.len())];
        let y = rng.random_range(0..n);

        let covered: BTreeSet<_> = check_coordinates(&params).into_iter().map(|(g, _)| g).collect();
        if covered != ParamGroup::all(n).into_iter().collect() {
            groups_missing += 1;
        }
        let breakdown = loss(&sums, y, seg, &params, margin).unwrap();
        if breakdown.negatives.iter().any(|&h| h > 0.0) {
            with_active_hinge += 1;
        }
        let report = finite_diff_check(&sums, y, seg, &params, margin, GRAD_STEP).unwrap();
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
        skipped += report.skipped;
    }
    all(vec![
        check(
            worst < GRAD_TOL,
            format!("max rel error {worst:.2e} < {GRAD_TOL:.0e} over {GRAD_CONFIGS} configs ({checked} coords, {skipped} skipped at kinks)"),
        ),
        check(groups_missing == 0, "every parameter group probed in every config"),
        check(with_active_hinge > 0, format!("{with_active_hinge} configs with active hinges")),
        within_budget(start.elapsed(), Duration::from_secs(60)),
    ])
}

// ---------------------------------------------------------------------------
// 2. Latent window

/// Window by direct rational comparison: t/3 <= z_p < t/2 < z_e <= 2t/3.
fn window_by_inequalities(t: usize) -> (Vec<usize>, Vec<usize>) {
    let pre = (1..=t).filter(|&z| 3 * z >= t && 2 * z < t).collect();
    let eff = (1..=t).filter(|&z| 2 * z > t && 3 * z <= 2 * t).collect();
    (pre, eff)
}

fn latent_window() -> Outcome {
    let start = Instant::now();
    let r = latent_range(25).unwrap();
    let exact = r.pre.clone().collect::<Vec<_>>() == vec![9, 10, 11, 12]
        && r.eff.clone().collect::<Vec<_>>() == vec![13, 14, 15, 16];
    let mut mismatches = Vec::new();
    for t in 1..=200 {
        let (pre, eff) = window_by_inequalities(t);
        let oracle_empty = pre.is_empty() || eff.is_empty();
        match latent_range(t) {
            Ok(r) => {
                if oracle_empty || r.pre.collect::<Vec<_>>() != pre || r.eff.collect::<Vec<_>>() != eff {
                    mismatches.push(t);
                }
            }
            Err(_) if oracle_empty => {}
            Err(_) => mismatches.push(t),
        }
    }
    let short_error = (0..3).all(|t| latent_range(t).is_err());
    all(vec![
        check(exact, "latent_range(25) = ({9..12}, {13..16})"),
        check(
            mismatches.is_empty(),
            format!("inequality oracle agrees for t = 1..=200 (mismatches {mismatches:?})"),
        ),
        check(short_error, "t < 3 errors"),
        within_budget(start.elapsed(), Duration::from_secs(1)),
    ])
}

// ---------------------------------------------------------------------------
// 3. Search-oracle equivalence

/// Mean of frames a..=b (one-based) straight from the frames.
fn naive_pool(frames: &Array2<f64>, a: usize, b: usize) -> Vec<f64> {
    let f = frames.ncols();
    let mut out = vec![0.0; f];
    for k in a..=b {
        for j in 0..f {
            out[j] += frames[[k - 1, j]];
        }
    }
    out.iter().map(|v| v / (b - a + 1) as f64).collect()
}

fn naive_affine(w: &Array2<f64>, b: &Array1<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| b[i] + (0..w.ncols()).map(|j| w[[i, j]] * x[j]).sum::<f64>())
        .collect()
}

fn naive_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Per class: the best (z_p, z_e) and distance, by full re-pooling.
fn naive_search(frames: &Array2<f64>, params: &SiameseParams) -> Vec<((usize, usize), f64)> {
    let t = frames.nrows();
    let zero = Array1::zeros(params.embed_dim());
    (0..params.num_classes())
        .map(|y| {
            let mut best: Option<((usize, usize), f64)> = None;
            for z_p in 1..=t {
                for z_e in 1..=t {
                    if !(3 * z_p >= t && 2 * z_p < t && 2 * z_e > t && 3 * z_e <= 2 * t) {
                        continue;
                    }
                    let f_p = naive_affine(&params.w_pre, &params.b_pre, &naive_pool(frames, 1, z_p));
                    let f_e = naive_affine(&params.w_eff, &params.b_eff, &naive_pool(frames, z_e, t));
                    let moved = naive_affine(&params.transforms[y], &zero, &f_p);
                    let dist = naive_distance(&moved, &f_e);
                    if best.is_none_or(|(_, b)| dist < b) {
                        best = Some(((z_p, z_e), dist));
                    }
                }
            }
            best.unwrap()
        })
        .collect()
}

fn search_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut argmin_mismatch = 0;
    let mut worst = 0.0f64;
    for _ in 0..SEARCH_INSTANCES {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=32);
        let f = rng.random_range(1..=64);
        let params = random_params(&mut rng, n, d, f);
        let frames = random_frames(&mut rng, 25, f);
        let sums = PrefixSums::new(&frames);
        let oracle = naive_search(&frames, &params);

        let y = rng.random_range(0..n);
        let est = estimate_latents(&sums, y, &params).unwrap();
        if (est.seg.z_p, est.seg.z_e) != oracle[y].0 {
            argmin_mismatch += 1;
        }
        worst = worst.max((est.distance - oracle[y].1).abs());

        let inf = infer(&sums, &params).unwrap();
        let mut best_class = 0;
        for (c, o) in oracle.iter().enumerate() {
            if o.1 < oracle[best_class].1 {
                best_class = c;
            }
        }
        if inf.class != best_class || (inf.seg.z_p, inf.seg.z_e) != oracle[best_class].0 {
            argmin_mismatch += 1;
        }
        for (c, o) in oracle.iter().enumerate() {
            worst = worst.max((inf.scores[c] - o.1).abs());
            if (inf.segments[c].z_p, inf.segments[c].z_e) != o.0 {
                argmin_mismatch += 1;
            }
        }
    }
    all(vec![
        check(argmin_mismatch == 0, format!("{argmin_mismatch} argmin mismatches over {SEARCH_INSTANCES} instances")),
        check(worst < SEARCH_TOL, format!("max value gap {worst:.1e} < {SEARCH_TOL:.0e}")),
        within_budget(start.elapsed(), Duration::from_secs(60)),
    ])
}

// ---------------------------------------------------------------------------
// Shared planted training run for criteria 4, 5 and 10.

struct Trained {
    synth: SynthDataset,
    dataset: Dataset,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn planted_config() -> SynthConfig {
    SynthConfig {
        classes: 5,
        train_per_class: 40,
        test_per_class: 20,
        t: 25,
        feature_dim: 64,
        embed_dim: 16,
        noise: 0.05,
        seed: 4,
        ..SynthConfig::default()
    }
}

fn train_config(d: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: BASE_LR,
        d,
        seed,
        ..TrainConfig::rgb().scaled_to(TRAIN_ITERS)
    }
}

fn planted_run() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let config = planted_config();
        let synth = generate(&config).unwrap();
        let dataset = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, 25, synth.rgb.clone()).unwrap();
        let examples = dataset.examples("standard", Part::Train).unwrap();
        let outcome = train(
            &examples,
            config.classes,
            &train_config(config.embed_dim, 0),
            &Parallelism::sequential(),
        )
        .unwrap();
        Trained {
            synth,
            dataset,
            outcome,
            elapsed: start.elapsed(),
        }
    })
}

fn noiseless(config: &SynthConfig) -> (SynthDataset, Dataset) {
    let synth = generate(&SynthConfig { noise: 0.0, ..config.clone() }).unwrap();
    let dataset = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, config.t, synth.rgb.clone()).unwrap();
    (synth, dataset)
}

fn planted_segments(synth: &SynthDataset) -> HashMap<String, LatentSegmentation> {
    synth.truth.videos.iter().map(|v| (v.id.clone(), v.seg)).collect()
}

// ---------------------------------------------------------------------------
// 4. Planted recovery: classification

fn planted_classification() -> Outcome {
    let run = planted_run();
    let par = Parallelism::sequential();
    let (report, _) = evaluate(&run.dataset, "standard", &run.outcome.state.params, &par).unwrap();
    let counts = (
        run.dataset.examples("standard", Part::Train).unwrap().len(),
        run.dataset.examples("standard", Part::Test).unwrap().len(),
    );

    let start = Instant::now();
    let (synth0, data0) = noiseless(&planted_config());
    let (oracle, _) = evaluate(&data0, "standard", &oracle_params(&synth0.truth), &par).unwrap();
    all(vec![
        check(counts == (200, 100), format!("{} train / {} test videos", counts.0, counts.1)),
        check(
            report.overall >= MIN_TRAINED_ACCURACY,
            format!("trained accuracy {:.3} >= {MIN_TRAINED_ACCURACY} after {TRAIN_ITERS} iterations", report.overall),
        ),
        check(oracle.overall == 1.0, format!("oracle accuracy at zero noise {:.3} == 1", oracle.overall)),
        within_budget(run.elapsed + start.elapsed(), Duration::from_secs(300)),
    ])
}

// ---------------------------------------------------------------------------
// 5. Planted recovery: segmentation

fn planted_segmentation() -> Outcome {
    let par = Parallelism::sequential();
    let (synth0, data0) = noiseless(&planted_config());
    let truth0 = planted_segments(&synth0);
    let videos: Vec<&Video> = data0.videos().iter().collect();
    let oracle = oracle_params(&synth0.truth);
    let exact = videos
        .iter()
        .filter(|v| {
            let inf = infer(&v.sums, &oracle).unwrap();
            inf.seg == truth0[&v.id]
        })
        .count();

    let run = planted_run();
    let truth = planted_segments(&run.synth);
    let (_, table) = evaluate(&run.dataset, "standard", &run.outcome.state.params, &par).unwrap();
    let near = table
        .rows
        .iter()
        .filter(|r| {
            let s = truth[&r.video_id];
            r.z_p.abs_diff(s.z_p) <= SEG_SLACK && r.z_e.abs_diff(s.z_e) <= SEG_SLACK
        })
        .count();
    let near_frac = near as f64 / table.rows.len() as f64;
    all(vec![
        check(
            exact == videos.len(),
            format!("oracle exact segmentation {exact}/{} at zero noise", videos.len()),
        ),
        check(
            near_frac >= MIN_SEG_WITHIN,
            format!("trained within ±{SEG_SLACK}: {near_frac:.3} >= {MIN_SEG_WITHIN}"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// 6. Cross-category generalization

fn cross_category() -> Outcome {
    let start = Instant::now();
    // Four held-in sub-categories per class, with appearance varying widely
    // inside each, so only the shared transformation explains the data.
    let config = SynthConfig {
        classes: 5,
        sub_categories: 5,
        code_spread: 3.0,
        train_per_class: 40,
        test_per_class: 20,
        noise: 0.05,
        seed: 6,
        ..SynthConfig::default()
    };
    let synth = generate(&config).unwrap();
    let dataset = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, config.t, synth.rgb.clone()).unwrap();
    let examples = dataset.examples("cross", Part::Train).unwrap();
    let held_out_seen = examples
        .iter()
        .any(|e| e.video.class % config.sub_categories == config.sub_categories - 1);
    let par = Parallelism::sequential();
    let outcome = train(&examples, config.classes, &train_config(config.embed_dim, 0), &par).unwrap();
    let (report, _) = evaluate(&dataset, "cross", &outcome.state.params, &par).unwrap();
    all(vec![
        check(!held_out_seen, "held-out sub-category absent from training"),
        check(
            report.overall >= MIN_CROSS_ACCURACY,
            format!("super-class accuracy on held-out sub-category {:.3} >= {MIN_CROSS_ACCURACY}", report.overall),
        ),
        within_budget(start.elapsed(), Duration::from_secs(600)),
    ])
}

// ---------------------------------------------------------------------------
// 7. Loss invariants

fn loss_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut range_ok = true;
    let mut symmetric = true;
    let mut worst_scale = 0.0f64;
    for _ in 0..PROPERTY_SAMPLES {
        let len = rng.random_range(1..=32);
        let a = gaussian_vec(&mut rng, len) * 10f64.powf(rng.random_range(-3.0..3.0));
        let b = gaussian_vec(&mut rng, len) * 10f64.powf(rng.random_range(-3.0..3.0));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let ab = cosine_distance(a.view(), b.view()).unwrap();
        let ba = cosine_distance(b.view(), a.view()).unwrap();
        range_ok &= (0.0..=2.0).contains(&ab) && cosine_distance(a.view(), a.view()).unwrap() >= 0.0;
        range_ok &= (0.0..=2.0).contains(&cosine_distance(a.view(), (-&a).view()).unwrap());
        symmetric &= ab == ba;
        let scaled = cosine_distance((&a * c).view(), b.view()).unwrap();
        worst_scale = worst_scale.max((scaled - ab).abs());
    }

    let mut total_ok = true;
    let mut single_class_ok = true;
    let mut hinge_ok = true;
    for _ in 0..PROPERTY_SAMPLES {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=6);
        let f = rng.random_range(2..=8);
        let t = rng.random_range(6..=25);
        let params = random_params(&mut rng, n, d, f);
        let sums = PrefixSums::new(&random_frames(&mut rng, t, f));
        let segs: Vec<_> = latent_range(t).unwrap().segmentations().collect();
        let seg = segs[rng.random_range(0..segs.len())];
        let y = rng.random_range(0..n);
        let l = loss(&sums, y, seg, &params, DEFAULT_MARGIN).unwrap();
        total_ok &= l.total >= 0.0;
        hinge_ok &= l.negatives.iter().all(|&h| (0.0..=DEFAULT_MARGIN).contains(&h));
        if n == 1 {
            single_class_ok &= l.negatives.is_empty() && l.total == l.positive;
        }
    }
    all(vec![
        check(range_ok, format!("distance within [0, 2] over {PROPERTY_SAMPLES} pairs")),
        check(symmetric, "distance exactly symmetric"),
        check(worst_scale < SCALE_TOL, format!("scale invariance gap {worst_scale:.1e} < {SCALE_TOL:.0e}")),
        check(total_ok, format!("loss total >= 0 over {PROPERTY_SAMPLES} instances")),
        check(single_class_ok, "one-class loss has no negative terms"),
        check(hinge_ok, format!("hinge terms within [0, {DEFAULT_MARGIN}]")),
        within_budget(start.elapsed(), Duration::from_secs(10)),
    ])
}

// ---------------------------------------------------------------------------
// 8. Fusion

fn score_row(id: String, scores: Vec<f64>) -> ScoreRow {
    ScoreRow {
        video_id: id,
        pred: argmin(&scores) + 1,
        scores,
        z_p: 9,
        z_e: 13,
    }
}

fn fusion() -> Outcome {
    let start = Instant::now();
    let rgb = ScoreTable { rows: vec![score_row("v".into(), vec![0.3])] };
    let flow = ScoreTable { rows: vec![score_row("v".into(), vec![0.6])] };
    let fused = fuse_scores(&rgb, &flow, 2.0).unwrap().rows[0].scores[0];

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let table = |rng: &mut ChaCha8Rng| ScoreTable {
        rows: (0..50)
            .map(|i| score_row(format!("v{i}"), (0..7).map(|_| rng.random_range(0.0..2.0)).collect()))
            .collect(),
    };
    let mut identity_ok = true;
    let mut rescale_ok = true;
    for _ in 0..20 {
        let a = table(&mut rng);
        let b = table(&mut rng);
        let same = fuse_scores(&a, &a, 2.0).unwrap();
        identity_ok &= same.rows.iter().zip(&a.rows).all(|(f, r)| f.pred == r.pred);

        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scale = |t: &ScoreTable| ScoreTable {
            rows: t
                .rows
                .iter()
                .map(|r| score_row(r.video_id.clone(), r.scores.iter().map(|s| s * c).collect()))
                .collect(),
        };
        let plain = fuse_scores(&a, &b, 2.0).unwrap();
        let scaled = fuse_scores(&scale(&a), &scale(&b), 2.0).unwrap();
        rescale_ok &= plain.rows.iter().zip(&scaled.rows).all(|(p, s)| p.pred == s.pred);
    }
    all(vec![
        check((fused - 0.5).abs() < FUSE_TOL, format!("fuse(0.3, 0.6; w=2) = {fused}")),
        check(identity_ok, "fusing a table with itself keeps every prediction"),
        check(rescale_ok, "common positive rescaling keeps every prediction"),
        within_budget(start.elapsed(), Duration::from_secs(1)),
    ])
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn determinism() -> Outcome {
    let config = SynthConfig {
        train_per_class: 12,
        test_per_class: 6,
        seed: 9,
        ..SynthConfig::default()
    };
    let synth = generate(&config).unwrap();
    let dataset = Dataset::from_sequences(synth.manifest.clone(), Stream::Rgb, 25, synth.rgb.clone()).unwrap();
    let examples = dataset.examples("standard", Part::Train).unwrap();
    let tc = TrainConfig {
        batch_size: 16,
        ..train_config(config.embed_dim, 3)
    }
    .scaled_to(150);
    let seq = Parallelism::sequential();
    let run = || {
        let out = train(&examples, config.classes, &tc, &seq).unwrap();
        let mut log = Vec::new();
        write_metrics(&out.metrics, &mut log).unwrap();
        (out.state.to_bytes(), log)
    };
    let (ckpt_a, log_a) = run();
    let (ckpt_b, log_b) = run();

    let params = train(&examples, config.classes, &tc, &seq).unwrap().state.params;
    let par = Parallelism::with_threads(4).unwrap();
    let (rep_s, tab_s) = evaluate(&dataset, "standard", &params, &seq).unwrap();
    let (rep_p, tab_p) = evaluate(&dataset, "standard", &params, &par).unwrap();
    let gap = tab_s
        .rows
        .iter()
        .zip(&tab_p.rows)
        .flat_map(|(a, b)| a.scores.iter().zip(&b.scores).map(|(x, y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    let same_rows = tab_s.rows.iter().zip(&tab_p.rows).all(|(a, b)| {
        a.video_id == b.video_id && a.pred == b.pred && (a.z_p, a.z_e) == (b.z_p, b.z_e)
    });
    all(vec![
        check(ckpt_a == ckpt_b, format!("checkpoints bit-identical ({} bytes)", ckpt_a.len())),
        check(log_a == log_b, format!("metrics logs bit-identical ({} bytes)", log_a.len())),
        check(
            gap <= PARALLEL_TOL && same_rows && rep_s == rep_p,
            format!("parallel vs sequential evaluation max gap {gap:.1e} <= {PARALLEL_TOL:.0e}"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// 10. Retrieval and prediction

fn retrieval() -> Outcome {
    let start = Instant::now();
    let par = Parallelism::sequential();
    let (synth0, data0) = noiseless(&planted_config());
    let oracle = oracle_params(&synth0.truth);
    let all_ids: Vec<String> = data0.videos().iter().map(|v| v.id.clone()).collect();
    let gallery = effect_gallery(&data0, &all_ids, &oracle, LabelSpace::Class, &par).unwrap();
    let queries = data0.examples("standard", Part::Test).unwrap();
    let mut worst_effect = 0.0f64;
    let mut effect_self = 0;
    for q in &queries {
        let top = predict_effect(&q.video.sums, &oracle, &gallery, ClassFilter::Any, 1).unwrap();
        worst_effect = worst_effect.max(top[0].distance);
        effect_self += usize::from(top[0].video_id == q.video.id);
    }
    let videos: Vec<&Video> = data0.videos().iter().collect();
    let embeddings = embed_videos(&videos, &oracle, &par).unwrap();
    let self_rank1 = embeddings
        .iter()
        .filter(|e| nearest_neighbors(e, &embeddings, 1).unwrap()[0].video_id == e.video_id)
        .count();

    let run = planted_run();
    let params = &run.outcome.state.params;
    let train_videos: Vec<&Video> = run
        .dataset
        .examples("standard", Part::Train)
        .unwrap()
        .iter()
        .map(|e| e.video)
        .collect();
    let test_videos: Vec<&Video> = run
        .dataset
        .examples("standard", Part::Test)
        .unwrap()
        .iter()
        .map(|e| e.video)
        .collect();
    let train_emb = embed_videos(&train_videos, params, &par).unwrap();
    let test_emb = embed_videos(&test_videos, params, &par).unwrap();
    let same_class = test_videos
        .iter()
        .zip(&test_emb)
        .filter(|(v, e)| {
            let hit = &nearest_neighbors(e, &train_emb, 1).unwrap()[0];
            train_videos[hit.index].class == v.class
        })
        .count();
    let top1 = same_class as f64 / test_videos.len() as f64;
    all(vec![
        check(
            worst_effect < ORACLE_EFFECT_TOL,
            format!(
                "oracle predict_effect top-1 distance {worst_effect:.1e} < {ORACLE_EFFECT_TOL:.0e} ({effect_self}/{} own effect)",
                queries.len()
            ),
        ),
        check(
            self_rank1 == embeddings.len(),
            format!("self-retrieval rank 1 for {self_rank1}/{}", embeddings.len()),
        ),
        check(top1 >= MIN_SAME_CLASS_TOP1, format!("trained same-class top-1 {top1:.3} >= {MIN_SAME_CLASS_TOP1}")),
        within_budget(start.elapsed(), Duration::from_secs(120)),
    ])
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("latent window", latent_window),
        ("search-oracle equivalence", search_equivalence),
        ("planted recovery (classification)", planted_classification),
        ("planted recovery (segmentation)", planted_segmentation),
        ("cross-category generalization", cross_category),
        ("loss invariants", loss_invariants),
        ("fusion", fusion),
        ("determinism", determinism),
        ("retrieval/prediction", retrieval),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {name}: {verdict} — {}", i + 1, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
