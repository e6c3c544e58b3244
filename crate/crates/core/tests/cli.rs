use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_transformhead"));
    cmd.env_remove("TRANSFORMHEAD_THREADS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn json_lines(out: &Output) -> Vec<Value> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("each stdout line is JSON"))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small planted dataset with both streams.
fn synth(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("data");
    json(&run(&[
        "synth", "--out", s(&out), "--classes", "3", "--train-per-class", "6",
        "--test-per-class", "3", "--feature-dim", "12", "--embed-dim", "6", "--flow", "--seed", "5",
    ]));
    out.join("manifest.json")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "train", "--manifest", s(manifest), "--out", s(out), "--d", "6", "--batch-size", "8",
        "--base-lr", "0.05", "--decay-interval", "15",
    ];
    if !extra.contains(&"--max-iters") {
        args.extend_from_slice(&["--max-iters", "40"]);
    }
    args.extend_from_slice(extra);
    json(&run(&args))
}

#[test]
fn synth_is_deterministic_and_counts_videos() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    let args = |out: &Path| {
        run(&["synth", "--out", s(out), "--classes", "4", "--train-per-class", "5", "--test-per-class", "2", "--seed", "9"])
    };
    let summary = json(&args(&a));
    json(&args(&b));
    assert_eq!(summary["videos"], 4 * (5 + 2));
    for name in ["manifest.json", "truth.tfht", "features/v00000.rgb.tfhv", "features/v00027.rgb.tfhv"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn zero_iterations_writes_the_initial_checkpoint_with_default_settings() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ckpt = dir.path().join("init.tfhs");
    let out = json(&run(&["train", "--manifest", s(&manifest), "--out", s(&ckpt), "--max-iters", "0"]));
    assert!(ckpt.exists());
    assert_eq!(out["iteration"], 0);
    assert_eq!(out["iterations_run"], 0);
    let config = &out["config"];
    assert_eq!(config["margin"], 0.5);
    assert_eq!(config["batch_size"], 50);
    assert_eq!(config["t"], 25);
    assert_eq!(config["d"], 512);
    assert_eq!(config["momentum"], 0.9);
    assert_eq!(config["base_lr"], 1e-5);
}

#[test]
fn resumed_training_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let straight = dir.path().join("straight.tfhs");
    let half = dir.path().join("half.tfhs");
    let resumed = dir.path().join("resumed.tfhs");
    train(&manifest, &straight, &[]);
    // Stop inside the second learning-rate stage, then finish.
    train(&manifest, &half, &["--max-iters", "17"]);
    let out = train(&manifest, &resumed, &["--resume", s(&half)]);
    assert_eq!(out["iterations_run"], 40 - 17);
    assert_eq!(std::fs::read(&straight).unwrap(), std::fs::read(&resumed).unwrap());
}

#[test]
fn eval_fuse_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let mut tables = Vec::new();
    for stream in ["rgb", "flow"] {
        let ckpt = dir.path().join(format!("{stream}.tfhs"));
        train(&manifest, &ckpt, &["--stream", stream]);
        let scores = dir.path().join(format!("{stream}.jsonl"));
        let report = json(&run(&[
            "eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--stream", stream, "--scores", s(&scores),
        ]));
        assert!(report["overall"].as_f64().unwrap() >= 0.0);
        tables.push(scores);
    }

    let default = json_lines(&run(&["fuse", "--rgb", s(&tables[0]), "--flow", s(&tables[1])]));
    let explicit = json_lines(&run(&["fuse", "--rgb", s(&tables[0]), "--flow", s(&tables[1]), "--w-flow", "2"]));
    assert_eq!(default, explicit);
    assert_eq!(default.len(), 9);
    let rgb: Vec<Value> = std::fs::read_to_string(&tables[0])
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let flow: Vec<Value> = std::fs::read_to_string(&tables[1])
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for ((f, a), b) in default.iter().zip(&rgb).zip(&flow) {
        for k in 0..3 {
            let expect = (a["scores"][k].as_f64().unwrap() + 2.0 * b["scores"][k].as_f64().unwrap()) / 3.0;
            assert!((f["scores"][k].as_f64().unwrap() - expect).abs() < 1e-12);
        }
    }

    let rows = json_lines(&run(&[
        "infer", "--checkpoint", s(&dir.path().join("rgb.tfhs")),
        s(&dir.path().join("data/features/v00000.rgb.tfhv")), s(&dir.path().join("data/features/v00001.rgb.tfhv")),
    ]));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["video_id"], "v00000");
    let pred = rows[0]["pred"].as_u64().unwrap();
    assert!((1..=3).contains(&pred));
}

#[test]
fn single_class_model_predicts_class_one() {
    use transformhead::features::{save_features, FrameFeatureSequence, Stream};
    use transformhead::model::SiameseParams;

    let dir = tempfile::tempdir().unwrap();
    let mut params = SiameseParams::zeros(1, 3, 4);
    params.b_pre.fill(1.0);
    params.b_eff.fill(1.0);
    params.transforms[0].diag_mut().fill(1.0);
    let model = dir.path().join("one.tfhp");
    params.save(&model).unwrap();
    let frames = ndarray::Array2::from_elem((30, 4), 0.25);
    let clip = dir.path().join("clip.tfhv");
    save_features(&FrameFeatureSequence::new("clip", None, Stream::Rgb, frames).unwrap(), &clip).unwrap();

    let rows = json_lines(&run(&["infer", "--checkpoint", s(&model), s(&clip)]));
    assert_eq!(rows[0]["pred"], 1);
}

#[test]
fn gradcheck_passes_for_seed_one() {
    let out = json(&run(&["gradcheck", "--seed", "1"]));
    assert!(out["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(out["pass"], true);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    for args in [
        vec!["frobnicate"],
        vec!["train", "--out", "x.tfhs"],
        vec!["train", "--manifest", s(&missing), "--out", "x.tfhs"],
        vec!["fuse", "--rgb", "a", "--flow", "b", "--w-flow", "-1"],
        vec!["gradcheck", "--step", "0"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn numeric_failures_exit_with_three() {
    let out = run(&["gradcheck", "--seed", "1", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // An all-zero model embeds everything at the origin.
    use transformhead::model::SiameseParams;
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("zero.tfhp");
    SiameseParams::zeros(2, 3, 12).save(&model).unwrap();
    let out = run(&["infer", "--checkpoint", s(&model), s(&Path::new(env!("CARGO_MANIFEST_DIR")).join("Cargo.toml"))]);
    assert_eq!(out.status.code(), Some(2), "a non-feature file is a usage error");
    let manifest = synth(dir.path());
    let out = run(&["infer", "--checkpoint", s(&model), s(&manifest.with_file_name("features/v00000.rgb.tfhv"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ckpt = dir.path().join("m.tfhs");
    train(&manifest, &ckpt, &[]);
    let eval = |threads: Option<&str>| {
        let mut cmd = bin();
        cmd.args(["eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--t", "25"]);
        if let Some(t) = threads {
            cmd.env("TRANSFORMHEAD_THREADS", t);
        }
        cmd.output().unwrap()
    };
    assert_eq!(json(&eval(None)), json(&eval(Some("4"))));
    let bad = eval(Some("many"));
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("TRANSFORMHEAD_THREADS"));
}

#[test]
fn retrieval_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ckpt = dir.path().join("m.tfhs");
    train(&manifest, &ckpt, &[]);
    let gallery = dir.path().join("gallery.tfhe");
    let first = json(&run(&[
        "retrieve", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--query", "v00006",
        "--k", "3", "--save-gallery", s(&gallery),
    ]));
    assert_eq!(first["results"].as_array().unwrap().len(), 3);
    let cached = json(&run(&[
        "retrieve", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--query", "v00006",
        "--k", "3", "--gallery", s(&gallery),
    ]));
    // The store keeps single precision, so distances agree only to that.
    assert_eq!(first["z_p"], cached["z_p"]);
    for (a, b) in first["results"].as_array().unwrap().iter().zip(cached["results"].as_array().unwrap()) {
        assert_eq!(a["video_id"], b["video_id"]);
        assert!((a["distance"].as_f64().unwrap() - b["distance"].as_f64().unwrap()).abs() < 1e-6);
    }
    let effect = json(&run(&[
        "retrieve", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--query", "v00006",
        "--mode", "effect", "--filter", "different",
    ]));
    let class = &effect["class"];
    assert!(effect["results"].as_array().unwrap().iter().all(|r| &r["class"] != class));
}

#[test]
fn config_file_supplies_settings() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let ckpt = dir.path().join("c.tfhs");
    let config = dir.path().join("train.conf");
    std::fs::write(
        &config,
        format!("# small run\nmanifest = {}\nout = {}\nmax-iters = 5\nd = 4\n", s(&manifest), s(&ckpt)),
    )
    .unwrap();
    let out = json(&run(&["--config", s(&config), "train", "--max-iters", "3"]));
    assert_eq!(out["iteration"], 3);
    assert_eq!(out["config"]["d"], 4);
    std::fs::write(&config, "bogus = 1\n").unwrap();
    assert_eq!(run(&["--config", s(&config), "gradcheck"]).status.code(), Some(2));
}
