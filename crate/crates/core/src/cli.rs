//! The `transformhead` command line, a thin layer over the library.
//!
//! JSON (or JSON lines) goes to stdout and prose to stderr. Exit codes: 0
//! on success, 2 for usage, configuration and input errors, 3 for numeric
//! failures. Settings layer as defaults < `--config` file < flags; the file
//! is flat `key = value` text whose keys are flag names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::dataset::{Dataset, Part, Video};
use crate::error::{Error, Result};
use crate::eval::{
    average_embeddings, embed_video, embed_videos, evaluate, fuse_scores, load_embeddings,
    nearest_neighbors, predict_effect, report_from_scores, save_embeddings, ClassFilter,
    GalleryEffect, VideoEmbedding, DEFAULT_FLOW_WEIGHT,
};
use crate::features::{load_features, PrefixSums, Stream};
use crate::grad::finite_diff_check;
use crate::manifest::LabelSpace;
use crate::model::{SiameseParams, DEFAULT_MARGIN, PARAMS_MAGIC};
use crate::parallel::Parallelism;
use crate::search::{infer, latent_range, ScoreRow, ScoreTable};
use crate::synth::{generate, SynthConfig};
use crate::train::{
    load_checkpoint, save_checkpoint, train_iteration, validate_examples, write_metrics, TrainConfig,
    TrainState, STATE_MAGIC,
};

#[derive(Debug, Parser)]
#[command(name = "transformhead", version, about = "Actions as transformations over per-frame video features")]
pub struct Cli {
    /// Worker threads for per-video work. 1 (the default) is sequential and
    /// bit-deterministic. Falls back to TRANSFORMHEAD_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset.
    Synth(SynthArgs),
    /// Train one stream's model on a split.
    Train(TrainArgs),
    /// Classification accuracy on a split's test videos.
    Eval(EvalArgs),
    /// Per-class distances and prediction for feature files.
    Infer(InferArgs),
    /// Nearest-neighbor retrieval or effect prediction.
    Retrieve(RetrieveArgs),
    /// Weighted two-stream fusion of score tables.
    Fuse(FuseArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub sub_categories: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub code_spread: Option<f64>,
    #[arg(long)]
    pub lift_perturbation: Option<f64>,
    /// Also write flow-stream features.
    #[arg(long)]
    pub flow: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub stream: Option<Stream>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration metrics as JSON lines; appended to when resuming.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// Compress the stream's default schedule into `--max-iters`.
    #[arg(long)]
    pub scale_schedule: bool,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_interval: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Progress line on stderr every this many iterations.
    #[arg(long)]
    pub log_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub stream: Option<Stream>,
    /// Checkpoint or parameter file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub t: Option<usize>,
    /// Also write the per-video score table (JSON lines) for fusion.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub t: Option<usize>,
    /// Feature files (`TFHV`).
    #[arg(required = true)]
    pub features: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrieveMode {
    /// Whole-video embeddings against the gallery.
    Neighbors,
    /// The query's predicted effect against gallery effects.
    Effect,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Flow-stream checkpoint; neighbor embeddings are then averaged over
    /// both streams.
    #[arg(long)]
    pub flow_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub stream: Option<Stream>,
    /// The gallery is this split's training side.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub t: Option<usize>,
    /// Query video id from the manifest.
    #[arg(long)]
    pub query: String,
    #[arg(long, value_enum)]
    pub mode: Option<RetrieveMode>,
    /// Class restriction for effect prediction: same, different or any.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Load gallery embeddings (`TFHE`) instead of computing them.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Write the gallery embeddings used.
    #[arg(long)]
    pub save_gallery: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub rgb: Option<PathBuf>,
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Weight of the flow scores; RGB has weight 1.
    #[arg(long)]
    pub w_flow: Option<f64>,
    /// Write fused scores here and print a summary instead of the rows.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the fused predictions against this manifest's split.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random (params, video, latent, class) configurations.
    #[arg(long)]
    pub configs: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Values from a `--config` file, consumed key by key. Keys left over at
/// the end are an error, so typos do not pass silently.
#[derive(Debug, Default)]
pub struct ConfigFile {
    path: PathBuf,
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Config(format!("{}:{}: {m}", path.display(), i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
            let key = key.trim().replace('-', "_");
            if key.is_empty() {
                return Err(bad("empty key"));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(bad(&format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            values,
            used: BTreeSet::new(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }

    /// The flag value if given, else the file's value for `key`.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!("{}: `{key} = {v}`: {e}", self.path.display()))
            }),
        }
    }

    pub fn pick_or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick(key, flag)?.unwrap_or(default))
    }

    /// A boolean switch: set by the flag, or by `true`/`false` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.pick_or(key, flag.then_some(true), false)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.pick(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required setting --{}", key.replace('_', "-"))))
    }

    pub fn finish(self) -> Result<()> {
        let unknown: Vec<_> = self.values.keys().filter(|k| !self.used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{}: unknown settings for this command: {}",
                self.path.display(),
                unknown.join(", ")
            )))
        }
    }
}

/// Parse arguments, run, and map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut file = ConfigFile::load(cli.config.as_deref())?;
    let threads = file.pick("threads", cli.threads)?;
    let par = Parallelism::resolve(threads)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a, file),
        Command::Train(a) => cmd_train(a, file, &par),
        Command::Eval(a) => cmd_eval(a, file, &par),
        Command::Infer(a) => cmd_infer(a, file, &par),
        Command::Retrieve(a) => cmd_retrieve(a, file, &par),
        Command::Fuse(a) => cmd_fuse(a, file),
        Command::Gradcheck(a) => cmd_gradcheck(a, file),
    }
}

/// Write to stdout; a reader that has gone away (`| head`) is not an error.
fn emit(write: impl FnOnce(&mut std::io::StdoutLock<'_>) -> std::io::Result<()>) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match write(&mut out).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    emit(|out| writeln!(out, "{text}"))
}

/// Parameters from either a training checkpoint or a bare parameter file.
pub fn load_model(path: &Path) -> Result<SiameseParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match bytes.get(..4) {
        Some(m) if m == STATE_MAGIC => Ok(TrainState::from_bytes(&bytes, path)?.params),
        Some(m) if m == PARAMS_MAGIC => SiameseParams::from_bytes(&bytes, path),
        _ => Err(Error::format(path, "neither a checkpoint nor a parameter file")),
    }
}

fn cmd_synth(a: SynthArgs, mut f: ConfigFile) -> Result<()> {
    let d = SynthConfig::default();
    let out: PathBuf = f.required("out", a.out)?;
    let config = SynthConfig {
        classes: f.pick_or("classes", a.classes, d.classes)?,
        sub_categories: f.pick_or("sub_categories", a.sub_categories, d.sub_categories)?,
        train_per_class: f.pick_or("train_per_class", a.train_per_class, d.train_per_class)?,
        test_per_class: f.pick_or("test_per_class", a.test_per_class, d.test_per_class)?,
        t: f.pick_or("t", a.t, d.t)?,
        feature_dim: f.pick_or("feature_dim", a.feature_dim, d.feature_dim)?,
        embed_dim: f.pick_or("embed_dim", a.embed_dim, d.embed_dim)?,
        noise: f.pick_or("noise", a.noise, d.noise)?,
        drift: f.pick_or("drift", a.drift, d.drift)?,
        code_spread: f.pick_or("code_spread", a.code_spread, d.code_spread)?,
        lift_perturbation: f.pick_or("lift_perturbation", a.lift_perturbation, d.lift_perturbation)?,
        flow: f.switch("flow", a.flow)?,
        seed: f.pick_or("seed", a.seed, d.seed)?,
    };
    f.finish()?;
    config.validate()?;

    let data = generate(&config)?;
    data.write(&out)?;
    let per_class = config.train_per_class + config.test_per_class;
    eprintln!(
        "wrote {} videos ({} classes x {per_class}) to {}",
        data.manifest.videos.len(),
        config.fine_classes(),
        out.display()
    );
    let splits: BTreeMap<_, _> = data
        .manifest
        .splits
        .iter()
        .map(|(name, s)| (name.clone(), json!({"train": s.train.len(), "test": s.test.len()})))
        .collect();
    let mut streams = vec!["rgb"];
    if config.flow {
        streams.push("flow");
    }
    print_json(&json!({
        "out": out,
        "manifest": out.join("manifest.json"),
        "videos": data.manifest.videos.len(),
        "classes": config.fine_classes(),
        "transformation_classes": config.classes,
        "per_class": per_class,
        "streams": streams,
        "splits": splits,
    }))?;
    Ok(())
}

fn train_config(a: &TrainArgs, f: &mut ConfigFile, stream: Stream) -> Result<TrainConfig> {
    let mut c = TrainConfig::for_stream(stream);
    if let Some(max) = f.pick("max_iters", a.max_iters)? {
        c = if f.switch("scale_schedule", a.scale_schedule)? {
            c.scaled_to(max)
        } else {
            TrainConfig { max_iters: max, ..c }
        };
    } else if f.switch("scale_schedule", a.scale_schedule)? {
        return Err(Error::Config("--scale-schedule needs --max-iters".into()));
    }
    c.base_lr = f.pick_or("base_lr", a.base_lr, c.base_lr)?;
    c.lr_decay = f.pick_or("lr_decay", a.lr_decay, c.lr_decay)?;
    c.decay_interval = f.pick_or("decay_interval", a.decay_interval, c.decay_interval)?;
    c.batch_size = f.pick_or("batch_size", a.batch_size, c.batch_size)?;
    c.momentum = f.pick_or("momentum", a.momentum, c.momentum)?;
    c.margin = f.pick_or("margin", a.margin, c.margin)?;
    c.seed = f.pick_or("seed", a.seed, c.seed)?;
    c.t = f.pick_or("t", a.t, c.t)?;
    c.d = f.pick_or("d", a.d, c.d)?;
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs, mut f: ConfigFile, par: &Parallelism) -> Result<()> {
    let manifest: PathBuf = f.required("manifest", a.manifest.clone())?;
    let split: String = f.pick_or("split", a.split.clone(), "standard".into())?;
    let stream: Stream = f.pick_or("stream", a.stream, Stream::Rgb)?;
    let out: PathBuf = f.required("out", a.out.clone())?;
    let metrics_path: Option<PathBuf> = f.pick("metrics", a.metrics.clone())?;
    let resume_path: Option<PathBuf> = f.pick("resume", a.resume.clone())?;
    let log_every: u64 = f.pick_or("log_every", a.log_every, 100)?;
    let mut config = train_config(&a, &mut f, stream)?;
    f.finish()?;
    if log_every == 0 {
        return Err(Error::Config("--log-every must be positive".into()));
    }

    let dataset = Dataset::load(&manifest, stream, config.t)?;
    let space = dataset.label_space(&split)?;
    let n = dataset.manifest.num_labels(space);
    let examples = dataset.examples(&split, Part::Train)?;
    let mut state = match &resume_path {
        Some(p) => {
            let state = load_checkpoint(p)?;
            if state.params.num_classes() != n {
                return Err(Error::DimensionMismatch {
                    what: "checkpoint class count vs split labels",
                    expected: n,
                    actual: state.params.num_classes(),
                });
            }
            if a.seed.is_some() && state.seed != config.seed {
                return Err(Error::Config(format!(
                    "--seed {} disagrees with the checkpoint's seed {}",
                    config.seed, state.seed
                )));
            }
            config.seed = state.seed;
            config.d = state.params.embed_dim();
            state
        }
        None => TrainState::init(n, dataset.manifest.feature_dim, &config),
    };
    validate_examples(&examples, &state.params)?;

    let first = state.iteration;
    eprintln!(
        "training {}{} on split `{split}`: {} videos, {n} classes, iterations {first}..{}",
        stream.as_str(),
        if resume_path.is_some() { " (resumed)" } else { "" },
        examples.len(),
        config.max_iters
    );
    let mut metrics = Vec::new();
    while state.iteration < config.max_iters {
        let iter = state.iteration;
        let m = train_iteration(&mut state, &examples, &config, par).inspect_err(|e| {
            if e.is_numeric() {
                eprintln!("numeric failure at iteration {iter}; no checkpoint written");
            }
        })?;
        if (iter + 1) % log_every == 0 || iter + 1 == config.max_iters {
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.4}  (pos {:.4}, neg {:.4})  mean z_p {:.2}  z_e {:.2}",
                iter + 1,
                m.lr,
                m.loss_total,
                m.loss_pos,
                m.loss_neg,
                m.mean_z_p,
                m.mean_z_e
            );
        }
        metrics.push(m);
    }
    save_checkpoint(&state, &out)?;
    if let Some(p) = &metrics_path {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume_path.is_some())
            .truncate(resume_path.is_none())
            .open(p)
            .map_err(|e| Error::io(p, e))?;
        write_metrics(&metrics, std::io::BufWriter::new(file)).map_err(|e| Error::io(p, e))?;
    }
    print_json(&json!({
        "checkpoint": out,
        "stream": stream.as_str(),
        "split": split,
        "classes": n,
        "iterations_run": metrics.len(),
        "iteration": state.iteration,
        "final_loss": metrics.last().map(|m| m.loss_total),
        "config": config,
    }))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, mut f: ConfigFile, par: &Parallelism) -> Result<()> {
    let manifest: PathBuf = f.required("manifest", a.manifest)?;
    let split: String = f.pick_or("split", a.split, "standard".into())?;
    let stream: Stream = f.pick_or("stream", a.stream, Stream::Rgb)?;
    let checkpoint: PathBuf = f.required("checkpoint", a.checkpoint)?;
    let t: usize = f.pick_or("t", a.t, 25)?;
    let scores: Option<PathBuf> = f.pick("scores", a.scores)?;
    f.finish()?;

    let params = load_model(&checkpoint)?;
    let dataset = Dataset::load(&manifest, stream, t)?;
    let (report, table) = evaluate(&dataset, &split, &params, par)?;
    if let Some(p) = &scores {
        table.save(p)?;
    }
    eprintln!(
        "{} accuracy {:.4} on {} test videos of split `{split}`",
        stream.as_str(),
        report.overall,
        table.rows.len()
    );
    print_json(&serde_json::to_value(&report).expect("reports serialize"))?;
    Ok(())
}

/// `v00001.rgb.tfhv` names video `v00001`.
fn video_id_of(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn cmd_infer(a: InferArgs, mut f: ConfigFile, par: &Parallelism) -> Result<()> {
    let checkpoint: PathBuf = f.required("checkpoint", a.checkpoint)?;
    let t: usize = f.pick_or("t", a.t, 25)?;
    f.finish()?;
    latent_range(t)?;

    let params = load_model(&checkpoint)?;
    let mut inputs = Vec::with_capacity(a.features.len());
    for p in &a.features {
        let seq = load_features(p)?;
        inputs.push((video_id_of(p), seq.resample(t).prefix_sums()));
    }
    let rows = par.map(&inputs, |(id, sums)| {
        infer(sums, &params)
            .map(|inf| ScoreRow::from_inference(id, &inf))
            .map_err(|e| e.in_video(id))
    });
    let table = ScoreTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    };
    emit(|out| table.write_jsonl(out))?;
    for r in &table.rows {
        eprintln!("{}: class {} (z_p {}, z_e {})", r.video_id, r.pred, r.z_p, r.z_e);
    }
    Ok(())
}

fn embed_dataset(
    dataset: &Dataset,
    ids: &[String],
    params: &SiameseParams,
    par: &Parallelism,
) -> Result<Vec<VideoEmbedding>> {
    let videos: Vec<&Video> = ids.iter().map(|id| dataset.video(id)).collect::<Result<_>>()?;
    embed_videos(&videos, params, par)
}

fn cmd_retrieve(a: RetrieveArgs, mut f: ConfigFile, par: &Parallelism) -> Result<()> {
    let manifest: PathBuf = f.required("manifest", a.manifest)?;
    let checkpoint: PathBuf = f.required("checkpoint", a.checkpoint)?;
    let flow_checkpoint: Option<PathBuf> = f.pick("flow_checkpoint", a.flow_checkpoint)?;
    let stream: Stream = f.pick_or("stream", a.stream, Stream::Rgb)?;
    let split: String = f.pick_or("split", a.split, "standard".into())?;
    let t: usize = f.pick_or("t", a.t, 25)?;
    let mode: RetrieveMode = match f.pick::<String>("mode", None)? {
        _ if a.mode.is_some() => a.mode.expect("checked"),
        Some(m) => RetrieveMode::from_str(&m, true).map_err(|e| Error::Config(format!("mode: {e}")))?,
        None => RetrieveMode::Neighbors,
    };
    let filter: ClassFilter = f.pick_or::<String>("filter", a.filter, "same".into())?.parse()?;
    let k: usize = f.pick_or("k", a.k, 5)?;
    let gallery_path: Option<PathBuf> = f.pick("gallery", a.gallery)?;
    let save_path: Option<PathBuf> = f.pick("save_gallery", a.save_gallery)?;
    f.finish()?;
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    if flow_checkpoint.is_some() && mode == RetrieveMode::Effect {
        return Err(Error::Config("--flow-checkpoint applies to neighbor retrieval only".into()));
    }

    let params = load_model(&checkpoint)?;
    let dataset = Dataset::load(&manifest, stream, t)?;
    let query = dataset.video(&a.query)?;
    let gallery_ids = dataset.manifest.split(&split)?.train.clone();
    let flow = match &flow_checkpoint {
        Some(p) => Some((load_model(p)?, Dataset::load(&manifest, Stream::Flow, t)?)),
        None => None,
    };

    let gallery = match &gallery_path {
        Some(p) => load_embeddings(p)?,
        None => {
            let rgb = embed_dataset(&dataset, &gallery_ids, &params, par)?;
            match &flow {
                None => rgb,
                Some((fp, fd)) => rgb
                    .iter()
                    .zip(embed_dataset(fd, &gallery_ids, fp, par)?)
                    .map(|(r, fl)| average_embeddings(r, &fl))
                    .collect::<Result<_>>()?,
            }
        }
    };
    if let Some(p) = &save_path {
        save_embeddings(&gallery, p)?;
    }
    let label = |id: &str| -> Result<usize> {
        dataset
            .manifest
            .video(id)
            .map(|v| v.label)
            .ok_or_else(|| Error::Unknown {
                kind: "gallery video",
                name: id.to_string(),
            })
    };

    let mut q = embed_video(&query.id, &query.sums, &params)?;
    let inferred = q.class.expect("set by embed_video");
    let results = match mode {
        RetrieveMode::Neighbors => {
            if let Some((fp, fd)) = &flow {
                let fv = fd.video(&query.id)?;
                q = average_embeddings(&q, &embed_video(&fv.id, &fv.sums, fp)?)?;
            }
            nearest_neighbors(&q, &gallery, k)?
                .into_iter()
                .map(|n| {
                    Ok(json!({
                        "video_id": n.video_id,
                        "class": label(&n.video_id)?,
                        "distance": n.distance,
                    }))
                })
                .collect::<Result<Vec<_>>>()?
        }
        RetrieveMode::Effect => {
            let space = model_label_space(&dataset, &params)?;
            let effects = gallery
                .iter()
                .map(|e| {
                    Ok(GalleryEffect {
                        video_id: e.video_id.clone(),
                        class: dataset.manifest.label_in(label(&e.video_id)? - 1, space),
                        effect: e.halves().1,
                        seg: e.seg,
                        t,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            predict_effect(&query.sums, &params, &effects, filter, k)?
                .into_iter()
                .map(|m| serde_json::to_value(m).expect("matches serialize"))
                .collect()
        }
    };
    eprintln!(
        "query {} inferred class {} (z_p {}, z_e {}); {} results from {} gallery videos",
        query.id,
        inferred + 1,
        q.seg.z_p,
        q.seg.z_e,
        results.len(),
        gallery.len()
    );
    print_json(&json!({
        "query": query.id,
        "class": inferred + 1,
        "z_p": q.seg.z_p,
        "z_e": q.seg.z_e,
        "mode": match mode { RetrieveMode::Neighbors => "neighbors", RetrieveMode::Effect => "effect" },
        "results": results,
    }))?;
    Ok(())
}

/// Label space a model's class indices live in.
fn model_label_space(dataset: &Dataset, params: &SiameseParams) -> Result<LabelSpace> {
    let n = params.num_classes();
    if n == dataset.manifest.num_classes() {
        Ok(LabelSpace::Class)
    } else if n == dataset.manifest.num_super_classes() {
        Ok(LabelSpace::SuperClass)
    } else {
        Err(Error::DimensionMismatch {
            what: "checkpoint class count vs manifest",
            expected: dataset.manifest.num_classes(),
            actual: n,
        })
    }
}

fn cmd_fuse(a: FuseArgs, mut f: ConfigFile) -> Result<()> {
    let rgb: PathBuf = f.required("rgb", a.rgb)?;
    let flow: PathBuf = f.required("flow", a.flow)?;
    let w_flow: f64 = f.pick_or("w_flow", a.w_flow, DEFAULT_FLOW_WEIGHT)?;
    let out: Option<PathBuf> = f.pick("out", a.out)?;
    let manifest: Option<PathBuf> = f.pick("manifest", a.manifest)?;
    let split: String = f.pick_or("split", a.split, "standard".into())?;
    f.finish()?;

    let fused = fuse_scores(&ScoreTable::load(&rgb)?, &ScoreTable::load(&flow)?, w_flow)?;
    let report = match &manifest {
        Some(p) => Some(report_from_scores(&crate::manifest::load_manifest(p)?, &split, &fused)?),
        None => None,
    };
    if let Some(r) = &report {
        eprintln!("fused accuracy {:.4} on split `{split}` (w_flow {w_flow})", r.overall);
    }
    match &out {
        Some(p) => {
            fused.save(p)?;
            print_json(&json!({
                "out": p,
                "rows": fused.rows.len(),
                "w_flow": w_flow,
                "report": report,
            }))?;
        }
        None => {
            emit(|out| fused.write_jsonl(out))?;
        }
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn cmd_gradcheck(a: GradcheckArgs, mut f: ConfigFile) -> Result<()> {
    let seed: u64 = f.pick_or("seed", a.seed, 0)?;
    let configs: usize = f.pick_or("configs", a.configs, 10)?;
    let n: usize = f.pick_or("classes", a.classes, 3)?;
    let d: usize = f.pick_or("embed_dim", a.embed_dim, 8)?;
    let feat: usize = f.pick_or("feature_dim", a.feature_dim, 16)?;
    let t: usize = f.pick_or("t", a.t, 25)?;
    let step: f64 = f.pick_or("step", a.step, 1e-5)?;
    let margin: f64 = f.pick_or("margin", a.margin, DEFAULT_MARGIN)?;
    let tolerance: f64 = f.pick_or("tolerance", a.tolerance, 1e-4)?;
    f.finish()?;
    if configs == 0 || n == 0 || d == 0 || feat == 0 {
        return Err(Error::Config("configs, classes and dimensions must be positive".into()));
    }
    let segs: Vec<_> = latent_range(t)?.segmentations().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for _ in 0..configs {
        let params = SiameseParams {
            w_pre: gaussian(&mut rng, (d, feat), 1.0 / (feat as f64).sqrt()),
            b_pre: Array1::from_shape_simple_fn(d, || 0.1 * rng.sample::<f64, _>(StandardNormal)),
            w_eff: gaussian(&mut rng, (d, feat), 1.0 / (feat as f64).sqrt()),
            b_eff: Array1::from_shape_simple_fn(d, || 0.1 * rng.sample::<f64, _>(StandardNormal)),
            transforms: (0..n).map(|_| gaussian(&mut rng, (d, d), 1.0 / (d as f64).sqrt())).collect(),
        };
        let frames = gaussian(&mut rng, (t, feat), 1.0) + 0.5;
        let seg = segs[rng.random_range(0..segs.len())];
        let y = rng.random_range(0..n);
        let report = finite_diff_check(&PrefixSums::new(&frames), y, seg, &params, margin, step)?;
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
        skipped += report.skipped;
    }
    let pass = worst < tolerance;
    eprintln!(
        "max relative error {worst:.3e} over {configs} configurations ({checked} coordinates, {skipped} skipped at hinge kinks): {}",
        if pass { "ok" } else { "FAILED" }
    );
    print_json(&json!({
        "seed": seed,
        "configs": configs,
        "max_rel_error": worst,
        "checked": checked,
        "skipped": skipped,
        "step": step,
        "tolerance": tolerance,
        "pass": pass,
    }))?;
    if pass {
        Ok(())
    } else {
        Err(Error::GradientMismatch {
            max_rel_error: worst,
            tolerance,
        })
    }
}
