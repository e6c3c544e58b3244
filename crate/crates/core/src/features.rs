//! Per-frame feature sequences, the `TFHV` feature file format, temporal
//! resampling and prefix sums for constant-time segment pooling.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TFHV";
pub const FEATURE_VERSION: u32 = 1;

/// Which input modality a feature file was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub fn tag(self) -> u8 {
        match self {
            Stream::Rgb => 0,
            Stream::Flow => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stream::Rgb),
            1 => Some(Stream::Flow),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Stream::Rgb),
            "flow" => Ok(Stream::Flow),
            other => Err(Error::Unknown {
                kind: "stream",
                name: other.to_string(),
            }),
        }
    }
}

/// One video as a `t x F` matrix of per-frame features.
///
/// `label` is a zero-based class index; manifests and CLI output use
/// one-based indices and convert at the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: String,
    pub label: Option<usize>,
    pub stream: Stream,
    frames: Array2<f64>,
}

impl FrameFeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        label: Option<usize>,
        stream: Stream,
        frames: Array2<f64>,
    ) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        if let Some(((frame, column), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { frame, column });
        }
        Ok(Self {
            video_id: video_id.into(),
            label,
            stream,
            frames,
        })
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Per-frame feature dimension.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    /// Frame `k`, one-based.
    pub fn frame(&self, k: usize) -> ArrayView1<'_, f64> {
        self.frames.row(k - 1)
    }

    /// Resample to `t_out` frames by nearest-index uniform selection.
    pub fn resample(&self, t_out: usize) -> Self {
        let idx = resample_indices(self.len(), t_out);
        let mut frames = Array2::zeros((t_out, self.dim()));
        for (j, &src) in idx.iter().enumerate() {
            frames.row_mut(j).assign(&self.frames.row(src - 1));
        }
        Self {
            video_id: self.video_id.clone(),
            label: self.label,
            stream: self.stream,
            frames,
        }
    }

    pub fn prefix_sums(&self) -> PrefixSums {
        PrefixSums::new(&self.frames)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(17 + 4 * self.frames.len());
        w.bytes(FEATURE_MAGIC);
        w.u32(FEATURE_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.dim() as u32);
        w.u8(self.stream.tag());
        for &v in self.frames.iter() {
            w.f32(v as f32);
        }
        w.into_inner()
    }

    /// Decode a `TFHV` payload. `path` is used for error context only.
    pub fn from_bytes(bytes: &[u8], video_id: &str, path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(FEATURE_MAGIC)?;
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported feature file version {version}"),
            ));
        }
        let t = r.u32()? as usize;
        let f = r.u32()? as usize;
        let tag = r.u8()?;
        let stream = Stream::from_tag(tag)
            .ok_or_else(|| Error::format(path, format!("unknown stream tag {tag}")))?;
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        let expected = t
            .checked_mul(f)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
        if r.remaining() != expected {
            return Err(Error::format(
                path,
                format!(
                    "truncated payload: header declares {t}x{f} floats ({expected} bytes), found {}",
                    r.remaining()
                ),
            ));
        }
        let mut values = Vec::with_capacity(t * f);
        for _ in 0..t * f {
            values.push(r.f32()? as f64);
        }
        let frames = Array2::from_shape_vec((t, f), values).expect("shape checked above");
        Self::new(video_id, None, stream, frames)
    }
}

/// Write a sequence as a `TFHV` file. Values are narrowed to `f32`.
pub fn save_features(seq: &FrameFeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a `TFHV` file. The video id defaults to the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FrameFeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameFeatureSequence::from_bytes(&bytes, &id, path)
}

/// One-based source indices selected when resampling `t_in` frames to `t_out`.
///
/// Output frame `j` takes input frame `round((j-1)(t_in-1)/(t_out-1)) + 1`
/// with halves rounded up, so both endpoints survive whenever `t_out > 1`.
pub fn resample_indices(t_in: usize, t_out: usize) -> Vec<usize> {
    assert!(t_in >= 1 && t_out >= 1, "resampling needs non-empty lengths");
    if t_out == 1 {
        return vec![1];
    }
    let den = t_out - 1;
    (0..t_out)
        .map(|j| (2 * j * (t_in - 1) + den) / (2 * den) + 1)
        .collect()
}

/// Free-function form of [`FrameFeatureSequence::resample`].
pub fn resample_to_t(seq: &FrameFeatureSequence, t_out: usize) -> FrameFeatureSequence {
    seq.resample(t_out)
}

/// Cumulative frame sums: row `k` holds the sum of frames `1..=k`, row 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixSums {
    cumulative: Array2<f64>,
}

impl PrefixSums {
    pub fn new(frames: &Array2<f64>) -> Self {
        let (t, f) = frames.dim();
        let mut cumulative = Array2::zeros((t + 1, f));
        for k in 0..t {
            let (prev, mut next) = cumulative.multi_slice_mut((s![k, ..], s![k + 1, ..]));
            next.assign(&prev);
            next += &frames.row(k);
        }
        Self { cumulative }
    }

    /// Number of frames summarized.
    pub fn len(&self) -> usize {
        self.cumulative.nrows() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.cumulative.ncols()
    }

    pub fn cumulative(&self) -> &Array2<f64> {
        &self.cumulative
    }

    /// Mean of frames `a..=b` (one-based, inclusive).
    pub fn segment_mean(&self, a: usize, b: usize) -> Result<Array1<f64>> {
        let t = self.len();
        if a < 1 || a > b || b > t {
            return Err(Error::FrameRange { a, b, t });
        }
        let sum = &self.cumulative.row(b) - &self.cumulative.row(a - 1);
        Ok(sum / (b - a + 1) as f64)
    }
}

/// Free-function form of [`FrameFeatureSequence::prefix_sums`].
pub fn prefix_sums(seq: &FrameFeatureSequence) -> PrefixSums {
    seq.prefix_sums()
}
