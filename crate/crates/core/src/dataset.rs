//! A manifest with its feature files loaded for one stream, resampled to a
//! common length and reduced to prefix sums.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{load_features, FrameFeatureSequence, PrefixSums, Stream};
use crate::manifest::{load_manifest, DatasetManifest, LabelSpace, SplitKind};

#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    /// Zero-based fine class.
    pub class: usize,
    pub sums: PrefixSums,
}

/// A video paired with its label in some label space.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub video: &'a Video,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stream: Stream,
    pub t: usize,
    videos: Vec<Video>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Load every video of `manifest_path` for `stream`, resampled to `t` frames.
    /// Feature paths resolve relative to the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>, stream: Stream, t: usize) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(""));
        let mut seqs = Vec::with_capacity(manifest.videos.len());
        for v in &manifest.videos {
            let rel = v.features.get(&stream).ok_or_else(|| {
                Error::Config(format!("video `{}` has no {} features", v.id, stream.as_str()))
            })?;
            let mut seq = load_features(root.join(rel))?;
            seq.video_id = v.id.clone();
            seqs.push(seq);
        }
        Self::from_sequences(manifest, stream, t, seqs)
    }

    /// Build from in-memory sequences, matched to manifest records by id.
    pub fn from_sequences(
        manifest: DatasetManifest,
        stream: Stream,
        t: usize,
        seqs: Vec<FrameFeatureSequence>,
    ) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("t must be positive".into()));
        }
        manifest.validate()?;
        let mut by_id: HashMap<String, FrameFeatureSequence> =
            seqs.into_iter().map(|s| (s.video_id.clone(), s)).collect();
        let mut videos = Vec::with_capacity(manifest.videos.len());
        let mut index = HashMap::with_capacity(manifest.videos.len());
        for entry in &manifest.videos {
            let seq = by_id.remove(&entry.id).ok_or_else(|| {
                Error::Config(format!("video `{}` is missing {} features", entry.id, stream.as_str()))
            })?;
            if seq.dim() != manifest.feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "feature file dimension vs manifest feature_dim",
                    expected: manifest.feature_dim,
                    actual: seq.dim(),
                }
                .in_video(&entry.id));
            }
            index.insert(entry.id.clone(), videos.len());
            videos.push(Video {
                id: entry.id.clone(),
                class: entry.label - 1,
                sums: seq.resample(t).prefix_sums(),
            });
        }
        Ok(Self {
            manifest,
            stream,
            t,
            videos,
            index,
        })
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn video(&self, id: &str) -> Result<&Video> {
        self.index
            .get(id)
            .map(|&i| &self.videos[i])
            .ok_or_else(|| Error::Unknown {
                kind: "video",
                name: id.to_string(),
            })
    }

    pub fn split_kind(&self, split: &str) -> Result<SplitKind> {
        Ok(self.manifest.split(split)?.kind)
    }

    /// Label space a split trains and scores in.
    pub fn label_space(&self, split: &str) -> Result<LabelSpace> {
        Ok(self.split_kind(split)?.label_space())
    }

    /// Videos of one side of a split, labelled in the split's label space.
    pub fn examples(&self, split: &str, part: Part) -> Result<Vec<Example<'_>>> {
        let s = self.manifest.split(split)?;
        let space = s.kind.label_space();
        let ids = match part {
            Part::Train => &s.train,
            Part::Test => &s.test,
        };
        ids.iter()
            .map(|id| {
                let video = self.video(id)?;
                Ok(Example {
                    video,
                    label: self.manifest.label_in(video.class, space),
                })
            })
            .collect()
    }
}
