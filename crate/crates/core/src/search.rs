//! Exhaustive search over the constrained latent window: per-class
//! segmentation estimates for training and joint class/segmentation
//! inference.
//!
//! Embeddings depend on `z_p` only through the precondition pool and on
//! `z_e` only through the effect pool, so each distinct pool is embedded
//! once and the `|z_p| x |z_e|` grid only costs transforms and distances.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PrefixSums;
use crate::model::{cosine_distance, embed, LatentSegmentation, SiameseParams, Tower};

/// Admissible values of the two latent frame indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentRange {
    pub pre: RangeInclusive<usize>,
    pub eff: RangeInclusive<usize>,
}

impl LatentRange {
    pub fn len(&self) -> usize {
        self.pre.clone().count() * self.eff.clone().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All segmentations in lexicographic order.
    pub fn segmentations(&self) -> impl Iterator<Item = LatentSegmentation> + '_ {
        self.pre
            .clone()
            .flat_map(move |p| self.eff.clone().map(move |e| LatentSegmentation::new(p, e)))
    }
}

/// `z_p` in `[t/3, t/2)` and `z_e` in `(t/2, 2t/3]`, taken as real intervals.
///
/// Empty for `t` in {1, 2, 4}.
pub fn latent_range(t: usize) -> Result<LatentRange> {
    let pre = t.div_ceil(3).max(1)..=t.saturating_sub(1) / 2;
    let eff = t / 2 + 1..=2 * t / 3;
    if pre.is_empty() || eff.is_empty() {
        return Err(Error::EmptyLatentRange { t });
    }
    Ok(LatentRange { pre, eff })
}

/// Tower embeddings of every admissible precondition and effect segment.
#[derive(Debug, Clone)]
pub struct SegmentEmbeddings {
    pub range: LatentRange,
    /// `f_p` for each `z_p` in `range.pre`.
    pub pre: Vec<Array1<f64>>,
    /// `f_e` for each `z_e` in `range.eff`.
    pub eff: Vec<Array1<f64>>,
}

impl SegmentEmbeddings {
    pub fn new(sums: &PrefixSums, params: &SiameseParams) -> Result<Self> {
        if sums.dim() != params.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: params.feature_dim(),
                actual: sums.dim(),
            });
        }
        let t = sums.len();
        let range = latent_range(t)?;
        let pre = range
            .pre
            .clone()
            .map(|z| embed(Tower::Precondition, params, sums.segment_mean(1, z)?.view()))
            .collect::<Result<_>>()?;
        let eff = range
            .eff
            .clone()
            .map(|z| embed(Tower::Effect, params, sums.segment_mean(z, t)?.view()))
            .collect::<Result<_>>()?;
        Ok(Self { range, pre, eff })
    }

    /// Smallest distance for class `y` and its segmentation; ties go to the
    /// lexicographically smallest `(z_p, z_e)`.
    pub fn best_for_class(&self, params: &SiameseParams, y: usize) -> Result<(LatentSegmentation, f64)> {
        let n = params.num_classes();
        let t_y = params
            .transforms
            .get(y)
            .ok_or(Error::ClassOutOfRange { index: y, n })?;
        let mut best: Option<(LatentSegmentation, f64)> = None;
        for (z_p, f_p) in self.range.pre.clone().zip(&self.pre) {
            let moved = t_y.dot(f_p);
            for (z_e, f_e) in self.range.eff.clone().zip(&self.eff) {
                let dist = cosine_distance(moved.view(), f_e.view())?;
                if best.is_none_or(|(_, b)| dist < b) {
                    best = Some((LatentSegmentation::new(z_p, z_e), dist));
                }
            }
        }
        Ok(best.expect("latent range is non-empty"))
    }
}

/// Segmentation minimizing the true-class distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentEstimate {
    pub seg: LatentSegmentation,
    pub distance: f64,
}

/// Best segmentation of a video under its known class `y` (zero-based).
pub fn estimate_latents(sums: &PrefixSums, y: usize, params: &SiameseParams) -> Result<LatentEstimate> {
    let cache = SegmentEmbeddings::new(sums, params)?;
    let (seg, distance) = cache.best_for_class(params, y)?;
    Ok(LatentEstimate { seg, distance })
}

/// Joint minimum over class and segmentation, with every class's own
/// minimum kept for fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Zero-based predicted class.
    pub class: usize,
    pub seg: LatentSegmentation,
    pub distance: f64,
    /// Per-class minimal distance.
    pub scores: Vec<f64>,
    /// Per-class argmin segmentation.
    pub segments: Vec<LatentSegmentation>,
}

/// Classify a video; ties go to the smallest class index, then the
/// lexicographically smallest segmentation.
pub fn infer(sums: &PrefixSums, params: &SiameseParams) -> Result<Inference> {
    let cache = SegmentEmbeddings::new(sums, params)?;
    infer_cached(&cache, params)
}

pub fn infer_cached(cache: &SegmentEmbeddings, params: &SiameseParams) -> Result<Inference> {
    let n = params.num_classes();
    if n == 0 {
        return Err(Error::Config("model has no classes".into()));
    }
    let mut scores = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    let mut class = 0;
    for y in 0..n {
        let (seg, dist) = cache.best_for_class(params, y)?;
        if dist < scores.get(class).copied().unwrap_or(f64::INFINITY) {
            class = y;
        }
        scores.push(dist);
        segments.push(seg);
    }
    Ok(Inference {
        class,
        seg: segments[class],
        distance: scores[class],
        scores,
        segments,
    })
}

/// One video's per-class distances and prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub scores: Vec<f64>,
    /// One-based predicted class.
    pub pred: usize,
    pub z_p: usize,
    pub z_e: usize,
}

impl ScoreRow {
    pub fn from_inference(video_id: &str, inf: &Inference) -> Self {
        Self {
            video_id: video_id.to_string(),
            scores: inf.scores.clone(),
            pred: inf.class + 1,
            z_p: inf.seg.z_p,
            z_e: inf.seg.z_e,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn num_classes(&self) -> Option<usize> {
        self.rows.first().map(|r| r.scores.len())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("score rows serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ScoreRow = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })?;
            rows.push(row);
        }
        Ok(Self { rows })
    }
}
