//! Dataset manifests: classes with their super-class hierarchy, videos with
//! per-stream feature paths, and named train/test splits.
//!
//! Class and super-class indices are one-based in the JSON file, matching
//! how labels are usually written by annotation tools. Accessors that return
//! model label indices are zero-based.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Stream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: usize,
    pub name: String,
    pub super_class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub label: usize,
    /// Feature file per stream, relative to the manifest's directory.
    pub features: BTreeMap<Stream, String>,
}

/// Whether a split scores fine classes or super-classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Standard,
    /// Held-out sub-categories; training and scoring happen at the
    /// super-class level.
    CrossCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    #[serde(default)]
    pub kind: SplitKind,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Label space a model is trained and evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSpace {
    Class,
    SuperClass,
}

impl SplitKind {
    pub fn label_space(self) -> LabelSpace {
        match self {
            SplitKind::Standard => LabelSpace::Class,
            SplitKind::CrossCategory => LabelSpace::SuperClass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub feature_dim: usize,
    pub classes: Vec<ClassEntry>,
    pub videos: Vec<VideoEntry>,
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text).map_err(|e| Error::Manifest {
            context: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_super_classes(&self) -> usize {
        self.classes.iter().map(|c| c.super_class).max().unwrap_or(0)
    }

    pub fn num_labels(&self, space: LabelSpace) -> usize {
        match space {
            LabelSpace::Class => self.num_classes(),
            LabelSpace::SuperClass => self.num_super_classes(),
        }
    }

    /// Zero-based super-class of a zero-based class.
    pub fn super_of(&self, class: usize) -> usize {
        self.classes[class].super_class - 1
    }

    /// Zero-based label of a class in the requested space.
    pub fn label_in(&self, class: usize, space: LabelSpace) -> usize {
        match space {
            LabelSpace::Class => class,
            LabelSpace::SuperClass => self.super_of(class),
        }
    }

    /// Display names for each label of a space.
    pub fn label_names(&self, space: LabelSpace) -> Vec<String> {
        match space {
            LabelSpace::Class => self.classes.iter().map(|c| c.name.clone()).collect(),
            LabelSpace::SuperClass => (1..=self.num_super_classes())
                .map(|k| format!("super-{k}"))
                .collect(),
        }
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits.get(name).ok_or_else(|| Error::Unknown {
            kind: "split",
            name: name.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |context: String, message: String| Error::Manifest { context, message };

        if self.feature_dim == 0 {
            return Err(err("feature_dim".into(), "must be positive".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.index != i + 1 {
                return Err(err(
                    format!("class record {i} (`{}`)", c.name),
                    format!("index {} but classes must be numbered 1..=n in order", c.index),
                ));
            }
            if c.super_class == 0 {
                return Err(err(
                    format!("class record {i} (`{}`)", c.name),
                    "super_class must be >= 1".into(),
                ));
            }
        }
        let used: HashSet<usize> = self.classes.iter().map(|c| c.super_class).collect();
        if let Some(missing) = (1..=self.num_super_classes()).find(|k| !used.contains(k)) {
            return Err(err(
                "classes".into(),
                format!("super-class {missing} has no member classes"),
            ));
        }

        let n = self.num_classes();
        let mut ids: HashMap<&str, usize> = HashMap::new();
        for (i, v) in self.videos.iter().enumerate() {
            let ctx = || format!("video record {i} (`{}`)", v.id);
            if v.label < 1 || v.label > n {
                return Err(err(
                    ctx(),
                    format!("label out of range: {} not in 1..={n}", v.label),
                ));
            }
            if let Some(first) = ids.insert(&v.id, i) {
                return Err(err(
                    ctx(),
                    format!("duplicate video_id (first seen at record {first})"),
                ));
            }
        }

        for (name, split) in &self.splits {
            let mut train = HashSet::new();
            for id in &split.train {
                if !ids.contains_key(id.as_str()) {
                    return Err(err(
                        format!("split `{name}` train"),
                        format!("unknown video_id `{id}`"),
                    ));
                }
                train.insert(id.as_str());
            }
            for id in &split.test {
                if !ids.contains_key(id.as_str()) {
                    return Err(err(
                        format!("split `{name}` test"),
                        format!("unknown video_id `{id}`"),
                    ));
                }
                if train.contains(id.as_str()) {
                    return Err(err(
                        format!("split `{name}`"),
                        format!("video `{id}` is in both train and test"),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json(&text).map_err(|e| match e {
        Error::Manifest { context, message } => Error::Manifest {
            context: format!("{} {context}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_json()).map_err(|e| Error::io(path, e))
}
