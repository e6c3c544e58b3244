//! Classification accuracy, two-stream score fusion, and retrieval in the
//! learned embedding space.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::dataset::{Dataset, Part, Video};
use crate::error::{Error, Result};
use crate::features::PrefixSums;
use crate::manifest::{DatasetManifest, LabelSpace};
use crate::model::{cosine_distance, LatentSegmentation, SiameseParams};
use crate::parallel::Parallelism;
use crate::search::{infer_cached, Inference, ScoreRow, ScoreTable, SegmentEmbeddings};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TFHE";

/// Default weight of the flow stream relative to RGB.
pub const DEFAULT_FLOW_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub overall: f64,
    /// Accuracy per label name; `null` for labels absent from the test set.
    pub per_class: BTreeMap<String, Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_predictions(
        split: &str,
        names: &[String],
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let k = names.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let row: u64 = confusion[i].iter().sum();
                let acc = (row > 0).then(|| confusion[i][i] as f64 / row as f64);
                (name.clone(), acc)
            })
            .collect();
        Self {
            split: split.to_string(),
            overall: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class,
            confusion,
        }
    }
}

/// Run inference on every video, in input order.
pub fn score_videos(
    videos: &[&Video],
    params: &SiameseParams,
    par: &Parallelism,
) -> Result<Vec<Inference>> {
    par.map(videos, |v| {
        SegmentEmbeddings::new(&v.sums, params)
            .and_then(|cache| infer_cached(&cache, params))
            .map_err(|e| e.in_video(&v.id))
    })
    .into_iter()
    .collect()
}

/// Map a model's prediction into a label space. Fine-class models are
/// coarsened through the hierarchy; super-class models pass through.
fn prediction_mapper(
    manifest: &DatasetManifest,
    space: LabelSpace,
    n_model: usize,
) -> Result<impl Fn(usize) -> usize + '_> {
    let fine = n_model == manifest.num_classes();
    if !fine && !(space == LabelSpace::SuperClass && n_model == manifest.num_super_classes()) {
        return Err(Error::DimensionMismatch {
            what: "checkpoint class count vs manifest",
            expected: manifest.num_labels(space),
            actual: n_model,
        });
    }
    Ok(move |pred: usize| {
        if fine {
            manifest.label_in(pred, space)
        } else {
            pred
        }
    })
}

/// Score the test side of `split` from a table of per-class distances, such
/// as a fused one. Every test video needs a row; extra rows are ignored.
pub fn report_from_scores(manifest: &DatasetManifest, split: &str, table: &ScoreTable) -> Result<EvalReport> {
    let s = manifest.split(split)?;
    let space = s.kind.label_space();
    let n_model = table
        .num_classes()
        .ok_or_else(|| Error::ScoreMismatch("score table is empty".into()))?;
    let map = prediction_mapper(manifest, space, n_model)?;
    let by_id: HashMap<&str, &ScoreRow> = table.rows.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(s.test.len());
    for id in &s.test {
        let row = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::ScoreMismatch(format!("test video `{id}` has no scores")))?;
        if row.scores.len() != n_model || row.pred == 0 || row.pred > n_model {
            return Err(Error::ScoreMismatch(format!("malformed scores for video `{id}`")));
        }
        let entry = manifest.video(id).expect("split ids are validated");
        pairs.push((manifest.label_in(entry.label - 1, space), map(row.pred - 1)));
    }
    Ok(EvalReport::from_predictions(split, &manifest.label_names(space), pairs))
}

/// Accuracy of `params` on the test side of `split`, plus the raw scores.
///
/// Cross-category splits score at the super-class level: fine-class
/// predictions are coarsened through the hierarchy, and super-class models
/// are scored directly.
pub fn evaluate(
    dataset: &Dataset,
    split: &str,
    params: &SiameseParams,
    par: &Parallelism,
) -> Result<(EvalReport, ScoreTable)> {
    let space = dataset.label_space(split)?;
    // Fail on a class-count mismatch before running inference.
    let _ = prediction_mapper(&dataset.manifest, space, params.num_classes())?;
    let examples = dataset.examples(split, Part::Test)?;
    let videos: Vec<&Video> = examples.iter().map(|e| e.video).collect();
    let inferences = score_videos(&videos, params, par)?;
    let table = ScoreTable {
        rows: videos
            .iter()
            .zip(&inferences)
            .map(|(v, inf)| ScoreRow::from_inference(&v.id, inf))
            .collect(),
    };
    let report = if table.rows.is_empty() {
        EvalReport::from_predictions(split, &dataset.manifest.label_names(space), [])
    } else {
        report_from_scores(&dataset.manifest, split, &table)?
    };
    Ok((report, table))
}

/// Weighted mean `(rgb + w_flow flow) / (1 + w_flow)` of two score tables,
/// matched by video id, in RGB order. Predictions are re-taken as the
/// smallest-index argmin; the segmentation is copied from the
/// more heavily weighted stream.
pub fn fuse_scores(rgb: &ScoreTable, flow: &ScoreTable, w_flow: f64) -> Result<ScoreTable> {
    if !(w_flow >= 0.0 && w_flow.is_finite()) {
        return Err(Error::Config(format!("flow weight must be non-negative, got {w_flow}")));
    }
    if rgb.rows.len() != flow.rows.len() {
        return Err(Error::ScoreMismatch(format!(
            "{} rgb rows vs {} flow rows",
            rgb.rows.len(),
            flow.rows.len()
        )));
    }
    let by_id: HashMap<&str, &ScoreRow> =
        flow.rows.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let norm = 1.0 + w_flow;
    let mut rows = Vec::with_capacity(rgb.rows.len());
    for r in &rgb.rows {
        let f = by_id.get(r.video_id.as_str()).ok_or_else(|| {
            Error::ScoreMismatch(format!("video `{}` has no flow scores", r.video_id))
        })?;
        if f.scores.len() != r.scores.len() {
            return Err(Error::ScoreMismatch(format!(
                "video `{}`: {} rgb classes vs {} flow classes",
                r.video_id,
                r.scores.len(),
                f.scores.len()
            )));
        }
        let scores: Vec<f64> = r
            .scores
            .iter()
            .zip(&f.scores)
            .map(|(a, b)| (a + w_flow * b) / norm)
            .collect();
        let pred = argmin(&scores) + 1;
        let seg_source = if w_flow >= 1.0 { *f } else { r };
        rows.push(ScoreRow {
            video_id: r.video_id.clone(),
            scores,
            pred,
            z_p: seg_source.z_p,
            z_e: seg_source.z_e,
        });
    }
    Ok(ScoreTable { rows })
}

/// Index of the smallest value; the first one on ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Transformed precondition embedding and effect embedding at a video's
/// inferred class and segmentation, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub video_id: String,
    /// Length `2d`: `T_y f_p` then `f_e`.
    pub vector: Array1<f64>,
    pub seg: LatentSegmentation,
    /// Zero-based inferred class; not stored in embedding files.
    pub class: Option<usize>,
}

impl VideoEmbedding {
    pub fn halves(&self) -> (Array1<f64>, Array1<f64>) {
        let d = self.vector.len() / 2;
        (
            self.vector.slice(ndarray::s![..d]).to_owned(),
            self.vector.slice(ndarray::s![d..]).to_owned(),
        )
    }
}

pub fn embed_video(video_id: &str, sums: &PrefixSums, params: &SiameseParams) -> Result<VideoEmbedding> {
    let cache = SegmentEmbeddings::new(sums, params)?;
    let inf = infer_cached(&cache, params)?;
    let pre = &cache.pre[inf.seg.z_p - cache.range.pre.start()];
    let eff = &cache.eff[inf.seg.z_e - cache.range.eff.start()];
    let moved = params.transforms[inf.class].dot(pre);
    Ok(VideoEmbedding {
        video_id: video_id.to_string(),
        vector: concatenate![Axis(0), moved, eff.view()],
        seg: inf.seg,
        class: Some(inf.class),
    })
}

/// Embeddings of several videos, in input order.
pub fn embed_videos(videos: &[&Video], params: &SiameseParams, par: &Parallelism) -> Result<Vec<VideoEmbedding>> {
    par.map(videos, |v| embed_video(&v.id, &v.sums, params).map_err(|e| e.in_video(&v.id)))
        .into_iter()
        .collect()
}

/// Mean of an RGB and a flow embedding of the same video.
pub fn average_embeddings(rgb: &VideoEmbedding, flow: &VideoEmbedding) -> Result<VideoEmbedding> {
    if rgb.vector.len() != flow.vector.len() {
        return Err(Error::DimensionMismatch {
            what: "embedding length",
            expected: rgb.vector.len(),
            actual: flow.vector.len(),
        });
    }
    Ok(VideoEmbedding {
        video_id: rgb.video_id.clone(),
        vector: (&rgb.vector + &flow.vector) * 0.5,
        seg: rgb.seg,
        class: rgb.class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    /// Position in the gallery.
    pub index: usize,
    pub video_id: String,
    pub distance: f64,
}

/// Top `k` gallery entries by cosine distance to the query; ties keep
/// gallery order.
pub fn nearest_neighbors(
    query: &VideoEmbedding,
    gallery: &[VideoEmbedding],
    k: usize,
) -> Result<Vec<Neighbor>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery(""));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut ranked = gallery
        .iter()
        .enumerate()
        .map(|(index, g)| {
            Ok(Neighbor {
                index,
                video_id: g.video_id.clone(),
                distance: cosine_distance(query.vector.view(), g.vector.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    ranked.truncate(k);
    Ok(ranked)
}

/// Which gallery classes an effect query may retrieve from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    Same,
    Different,
    Any,
}

impl std::str::FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(ClassFilter::Same),
            "different" => Ok(ClassFilter::Different),
            "any" => Ok(ClassFilter::Any),
            other => Err(Error::Unknown {
                kind: "class filter",
                name: other.to_string(),
            }),
        }
    }
}

/// A gallery video's effect embedding at its own inferred latents.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEffect {
    pub video_id: String,
    /// Zero-based known label of the gallery video.
    pub class: usize,
    pub effect: Array1<f64>,
    pub seg: LatentSegmentation,
    /// Frame count, so `z_e..=t` bounds the effect segment.
    pub t: usize,
}

/// Effect-gallery entries for `videos` with labels in `space`.
pub fn effect_gallery(
    dataset: &Dataset,
    ids: &[String],
    params: &SiameseParams,
    space: LabelSpace,
    par: &Parallelism,
) -> Result<Vec<GalleryEffect>> {
    let videos: Vec<&Video> = ids.iter().map(|id| dataset.video(id)).collect::<Result<_>>()?;
    let embeddings = embed_videos(&videos, params, par)?;
    Ok(videos
        .iter()
        .zip(embeddings)
        .map(|(v, e)| GalleryEffect {
            video_id: v.id.clone(),
            class: dataset.manifest.label_in(v.class, space),
            effect: e.halves().1,
            seg: e.seg,
            t: v.sums.len(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectMatch {
    pub video_id: String,
    /// One-based label of the gallery video.
    pub class: usize,
    /// First and last frame of the retrieved effect segment.
    pub effect_frames: (usize, usize),
    pub distance: f64,
}

/// Retrieve the gallery effects closest to the query's predicted effect
/// `T_y f_p`, restricted by class relative to the query's inferred class.
pub fn predict_effect(
    query: &PrefixSums,
    params: &SiameseParams,
    gallery: &[GalleryEffect],
    filter: ClassFilter,
    k: usize,
) -> Result<Vec<EffectMatch>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let embedding = embed_video("query", query, params)?;
    let y = embedding.class.expect("set by embed_video");
    let (predicted, _) = embedding.halves();
    let mut ranked = gallery
        .iter()
        .filter(|g| match filter {
            ClassFilter::Same => g.class == y,
            ClassFilter::Different => g.class != y,
            ClassFilter::Any => true,
        })
        .map(|g| {
            Ok(EffectMatch {
                video_id: g.video_id.clone(),
                class: g.class + 1,
                effect_frames: (g.seg.z_e, g.t),
                distance: cosine_distance(predicted.view(), g.effect.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if ranked.is_empty() {
        return Err(Error::EmptyGallery(" after class filtering"));
    }
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    ranked.truncate(k);
    Ok(ranked)
}

/// Encode embeddings as a `TFHE` store. Vectors are narrowed to `f32`.
pub fn embeddings_to_bytes(embeddings: &[VideoEmbedding]) -> Result<Vec<u8>> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut w = Writer::with_capacity(12 + embeddings.len() * (4 * dim + 16));
    w.bytes(EMBEDDING_MAGIC);
    w.u32(embeddings.len() as u32);
    w.u32(dim as u32);
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "embedding length",
                expected: dim,
                actual: e.vector.len(),
            });
        }
        let id = e.video_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Config(format!("video id `{}` is too long", e.video_id)))?;
        w.u16(len);
        w.bytes(id);
        for &v in e.vector.iter() {
            w.f32(v as f32);
        }
        w.u32(e.seg.z_p as u32);
        w.u32(e.seg.z_e as u32);
    }
    Ok(w.into_inner())
}

pub fn embeddings_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<VideoEmbedding>> {
    let mut r = Reader::new(bytes, path);
    r.magic(EMBEDDING_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let video_id = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.error("video id is not UTF-8"))?;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(r.f32()? as f64);
        }
        let z_p = r.u32()? as usize;
        let z_e = r.u32()? as usize;
        out.push(VideoEmbedding {
            video_id,
            vector: Array1::from(v),
            seg: LatentSegmentation::new(z_p, z_e),
            class: None,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_embeddings(embeddings: &[VideoEmbedding], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, embeddings_to_bytes(embeddings)?).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<VideoEmbedding>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    embeddings_from_bytes(&bytes, path)
}
