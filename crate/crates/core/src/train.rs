//! EM-style training: every iteration re-estimates the latent segmentation
//! of each batch video under the current parameters, then takes one
//! momentum-SGD step on the batch-mean contrastive loss at those latents.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::features::Stream;
use crate::grad::{backward, Gradients, ParamGroup};
use crate::model::{LatentSegmentation, LossBreakdown, SiameseParams, DEFAULT_MARGIN};
use crate::parallel::Parallelism;
use crate::search::estimate_latents;

pub const STATE_MAGIC: &[u8; 4] = b"TFHS";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub base_lr: f64,
    /// The learning rate is divided by this every `decay_interval` iterations.
    pub lr_decay: f64,
    pub decay_interval: u64,
    pub max_iters: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Frames per video after resampling.
    pub t: usize,
    /// Embedding dimension.
    pub d: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::rgb()
    }
}

impl TrainConfig {
    /// Schedule for the RGB stream: 1e-5, divided by 10 every 10k, stop at 30k.
    pub fn rgb() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            base_lr: 1e-5,
            lr_decay: 10.0,
            decay_interval: 10_000,
            max_iters: 30_000,
            batch_size: 50,
            momentum: 0.9,
            seed: 0,
            t: 25,
            d: 512,
        }
    }

    /// Schedule for the flow stream: 1e-5, divided by 10 every 20k, stop at 50k.
    pub fn flow() -> Self {
        Self {
            decay_interval: 20_000,
            max_iters: 50_000,
            ..Self::rgb()
        }
    }

    pub fn for_stream(stream: Stream) -> Self {
        match stream {
            Stream::Rgb => Self::rgb(),
            Stream::Flow => Self::flow(),
        }
    }

    /// Same three-stage schedule shape compressed to `max_iters` iterations.
    pub fn scaled_to(mut self, max_iters: u64) -> Self {
        self.decay_interval = (max_iters * self.decay_interval / self.max_iters.max(1)).max(1);
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return bad(format!("margin must lie in (0, 2], got {}", self.margin));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr decay must be positive, got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.decay_interval == 0 || self.batch_size == 0 || self.t == 0 || self.d == 0 {
            return bad("decay interval, batch size, t and d must be positive".into());
        }
        Ok(())
    }

    /// `base_lr / decay^floor(iter / decay_interval)`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let stage = (iter / self.decay_interval) as i32;
        self.base_lr / self.lr_decay.powi(stage)
    }
}

/// Glorot-uniform tower weights, zero biases, near-identity transforms.
pub fn init_params(n: usize, d: usize, f: usize, seed: u64) -> SiameseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (6.0 / (f + d) as f64).sqrt();
    let mut p = SiameseParams::zeros(n, d, f);
    p.w_pre.mapv_inplace(|_| rng.random_range(-s..s));
    p.w_eff.mapv_inplace(|_| rng.random_range(-s..s));
    for t in &mut p.transforms {
        *t = Array2::eye(d) + Array2::from_shape_simple_fn((d, d), || rng.random_range(-0.01..0.01));
    }
    p
}

/// Parameters, momentum buffers and position in the sample stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: SiameseParams,
    pub velocity: Gradients,
    pub iteration: u64,
    /// Seed of the batch-order stream; with `iteration` it fixes every
    /// future batch.
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: SiameseParams, seed: u64) -> Self {
        let velocity = Gradients::zeros_like(&params);
        Self {
            params,
            velocity,
            iteration: 0,
            seed,
        }
    }

    pub fn init(n: usize, f: usize, config: &TrainConfig) -> Self {
        Self::new(init_params(n, config.d, f, config.seed), config.seed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(40 + 16 * self.params.values().count());
        w.bytes(STATE_MAGIC);
        w.u32(STATE_VERSION);
        self.params.write_shape(&mut w);
        self.params.write_body(&mut w);
        self.velocity.write_body(&mut w);
        w.u64(self.iteration);
        w.u64(self.seed);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(STATE_MAGIC)?;
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(r.error(format!("unsupported training state version {version}")));
        }
        let (n, d, f) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let params = SiameseParams::read_body(&mut r, n, d, f)?;
        let velocity = Gradients(SiameseParams::read_body(&mut r, n, d, f)?);
        let iteration = r.u64()?;
        let seed = r.u64()?;
        r.finish()?;
        Ok(Self {
            params,
            velocity,
            iteration,
            seed,
        })
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, state.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TrainState::from_bytes(&bytes, path)
}

/// One momentum step: `v <- momentum v + g`, `θ <- θ - lr v`.
pub fn sgd_step(state: &mut TrainState, grads: &Gradients, config: &TrainConfig) -> Result<()> {
    if let Some(group) = grads.non_finite_group() {
        return Err(Error::NonFiniteGradient { group: group.name() });
    }
    let lr = config.lr_at(state.iteration);
    for g in ParamGroup::all(state.params.num_classes()) {
        let vel = state.velocity.group_mut(g);
        let params = state.params.group_mut(g);
        for ((p, v), dg) in params.iter_mut().zip(vel.iter_mut()).zip(grads.group(g)) {
            *v = config.momentum * *v + dg;
            *p -= lr * *v;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Per-iteration record written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub mean_z_p: f64,
    pub mean_z_e: f64,
}

pub fn write_metrics(metrics: &[IterationMetrics], mut w: impl Write) -> std::io::Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<IterationMetrics>,
}

/// Visit order of the training set in one epoch.
fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 belongs to parameter initialization.
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Indices of the batch used at `iteration`. Each epoch is a fresh
/// shuffle; its last batch may be short.
pub fn batch_indices(seed: u64, iteration: u64, len: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = len.div_ceil(batch_size) as u64;
    let epoch = iteration / per_epoch;
    let b = (iteration % per_epoch) as usize;
    let order = epoch_order(seed, epoch, len);
    order[b * batch_size..((b + 1) * batch_size).min(len)].to_vec()
}

struct VideoStep {
    loss: LossBreakdown,
    seg: LatentSegmentation,
    grads: Gradients,
}

fn video_step(ex: &Example<'_>, params: &SiameseParams, margin: f64) -> Result<VideoStep> {
    let run = || {
        let est = estimate_latents(&ex.video.sums, ex.label, params)?;
        let (loss, grads) = backward(&ex.video.sums, ex.label, est.seg, params, margin)?;
        Ok(VideoStep {
            loss,
            seg: est.seg,
            grads,
        })
    };
    run().map_err(|e: Error| e.in_video(&ex.video.id))
}

/// Reject an empty training set, labels beyond the model, and feature
/// dimensions that do not match its towers.
pub fn validate_examples(examples: &[Example<'_>], params: &SiameseParams) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let n = params.num_classes();
    for ex in examples {
        if ex.label >= n {
            return Err(Error::ClassOutOfRange { index: ex.label, n }.in_video(&ex.video.id));
        }
        if ex.video.sums.dim() != params.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: params.feature_dim(),
                actual: ex.video.sums.dim(),
            }
            .in_video(&ex.video.id));
        }
    }
    Ok(())
}

/// Run one training iteration on `state`.
pub fn train_iteration(
    state: &mut TrainState,
    examples: &[Example<'_>],
    config: &TrainConfig,
    par: &Parallelism,
) -> Result<IterationMetrics> {
    let batch: Vec<Example<'_>> =
        batch_indices(state.seed, state.iteration, examples.len(), config.batch_size)
            .into_iter()
            .map(|i| examples[i])
            .collect();
    let params = &state.params;
    let steps = par.map(&batch, |ex| video_step(ex, params, config.margin));

    let mut sum = Gradients::zeros_like(params);
    let (mut total, mut pos, mut neg, mut zp, mut ze) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for step in steps {
        let step = step?;
        sum.accumulate(&step.grads);
        total += step.loss.total;
        pos += step.loss.positive;
        neg += step.loss.negative_sum();
        zp += step.seg.z_p as f64;
        ze += step.seg.z_e as f64;
    }
    let m = batch.len() as f64;
    sum.scale(1.0 / m);

    let metrics = IterationMetrics {
        iter: state.iteration,
        lr: config.lr_at(state.iteration),
        loss_total: total / m,
        loss_pos: pos / m,
        loss_neg: neg / m,
        mean_z_p: zp / m,
        mean_z_e: ze / m,
    };
    sgd_step(state, &sum, config)?;
    Ok(metrics)
}

/// Continue training `state` until `config.max_iters`.
pub fn resume(
    mut state: TrainState,
    examples: &[Example<'_>],
    config: &TrainConfig,
    par: &Parallelism,
) -> Result<TrainOutcome> {
    config.validate()?;
    if state.iteration >= config.max_iters {
        return Ok(TrainOutcome {
            state,
            metrics: Vec::new(),
        });
    }
    validate_examples(examples, &state.params)?;
    let mut metrics = Vec::with_capacity((config.max_iters - state.iteration) as usize);
    while state.iteration < config.max_iters {
        metrics.push(train_iteration(&mut state, examples, config, par)?);
    }
    Ok(TrainOutcome { state, metrics })
}

/// Train `n`-class parameters from a fresh initialization.
pub fn train(
    examples: &[Example<'_>],
    n: usize,
    config: &TrainConfig,
    par: &Parallelism,
) -> Result<TrainOutcome> {
    config.validate()?;
    let f = examples
        .first()
        .map(|e| e.video.sums.dim())
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    resume(TrainState::init(n, f, config), examples, config, par)
}
