//! Planted-transformation datasets.
//!
//! Every class owns a random orthogonal `T*`, and every video draws a unit
//! code `u` near its class's code center. Precondition frames show `P u`,
//! effect frames show `P T* u`, where `P` lifts codes into feature space
//! with orthonormal columns. Precondition and effect frames also carry a
//! zero-mean linear drift orthogonal to their code, and the mid-action
//! frames between them step off the interpolation path, so only the
//! planted window pools back to exactly `u` and `T* u`. Under
//! [`oracle_params`] with no noise the planted class and segmentation are
//! the unique zero-distance solution.
//!
//! Drift directions are drawn from the span of the class code centers (and
//! of their transformed images on the effect side). A trained model has to
//! keep those directions to tell classes apart, so it cannot become blind
//! to the segmentation signal.
//!
//! With `sub_categories > 1`, every transformation class splits into that
//! many fine classes sharing `T*` but with their own code center and a
//! perturbed lift, and a `cross` split holds out the last sub-category of
//! each class.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{save_features, FrameFeatureSequence, Stream};
use crate::manifest::{save_manifest, ClassEntry, DatasetManifest, Split, SplitKind, VideoEntry};
use crate::model::{cosine_distance, LatentSegmentation, SiameseParams};
use crate::search::latent_range;

pub const TRUTH_MAGIC: &[u8; 4] = b"TFHT";
pub const TRUTH_VERSION: u32 = 1;

/// Minimum mean cosine distance between two class transforms of a random code.
pub const MIN_SEPARATION: f64 = 0.3;

/// Minimum cosine distance between the true and any wrong transformation of
/// each video's own code. Matches the default margin, so oracle parameters
/// leave every hinge inactive.
pub const CODE_SEPARATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Transformation classes.
    pub classes: usize,
    /// Fine classes per transformation class.
    pub sub_categories: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub t: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Standard deviation of per-entry Gaussian frame noise.
    pub noise: f64,
    /// Amplitude of the within-segment drift.
    pub drift: f64,
    /// Spread of codes around their class center; large values approach
    /// uniform codes on the sphere.
    pub code_spread: f64,
    /// Size of the per-sub-category lift perturbation.
    pub lift_perturbation: f64,
    /// Also emit a flow stream with independent noise.
    pub flow: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            sub_categories: 1,
            train_per_class: 40,
            test_per_class: 20,
            t: 25,
            feature_dim: 64,
            embed_dim: 16,
            noise: 0.05,
            drift: 6.0,
            code_spread: 0.6,
            lift_perturbation: 0.3,
            flow: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn fine_classes(&self) -> usize {
        self.classes * self.sub_categories
    }

    pub fn num_videos(&self) -> usize {
        self.fine_classes() * (self.train_per_class + self.test_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes == 0 || self.sub_categories == 0 {
            return bad("classes and sub_categories must be positive");
        }
        if self.train_per_class + self.test_per_class == 0 {
            return bad("need at least one video per class");
        }
        if self.embed_dim == 0 || self.feature_dim < self.embed_dim {
            return bad("need 0 < embed_dim <= feature_dim");
        }
        if self.classes > 1 && self.embed_dim < 2 {
            return bad("separating several classes needs embed_dim >= 2");
        }
        if !(self.noise >= 0.0 && self.drift >= 0.0 && self.code_spread >= 0.0) {
            return bad("noise, drift and code_spread must be non-negative");
        }
        if !(self.lift_perturbation >= 0.0) {
            return bad("lift_perturbation must be non-negative");
        }
        latent_range(self.t)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedVideo {
    pub id: String,
    /// Zero-based fine class.
    pub class: usize,
    pub seg: LatentSegmentation,
    /// Unit precondition code.
    pub code: Array1<f64>,
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub sub_categories: usize,
    /// One orthogonal `d x d` matrix per transformation class.
    pub transforms: Vec<Array2<f64>>,
    /// `F x d`, orthonormal columns.
    pub lift: Array2<f64>,
    /// Per fine class lift, present only with sub-categories.
    pub class_lifts: Vec<Array2<f64>>,
    pub videos: Vec<PlantedVideo>,
}

impl PlantedTruth {
    /// Transformation class of a fine class.
    pub fn transform_class(&self, class: usize) -> usize {
        class / self.sub_categories
    }

    pub fn lift_for(&self, class: usize) -> &Array2<f64> {
        self.class_lifts.get(class).unwrap_or(&self.lift)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (f, d) = self.lift.dim();
        let mut w = Writer::with_capacity(64);
        w.bytes(TRUTH_MAGIC);
        w.u32(TRUTH_VERSION);
        w.u32(self.transforms.len() as u32);
        w.u32(d as u32);
        w.u32(f as u32);
        w.u32(self.sub_categories as u32);
        w.u32(self.class_lifts.len() as u32);
        w.u32(self.videos.len() as u32);
        for t in &self.transforms {
            w.f64s(t.iter());
        }
        w.f64s(self.lift.iter());
        for l in &self.class_lifts {
            w.f64s(l.iter());
        }
        for v in &self.videos {
            w.u16(v.id.len() as u16);
            w.bytes(v.id.as_bytes());
            w.u32(v.class as u32);
            w.u32(v.seg.z_p as u32);
            w.u32(v.seg.z_e as u32);
            w.f64s(v.code.iter());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(TRUTH_MAGIC)?;
        let version = r.u32()?;
        if version != TRUTH_VERSION {
            return Err(r.error(format!("unsupported truth file version {version}")));
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let f = r.u32()? as usize;
        let sub_categories = r.u32()? as usize;
        let lifts = r.u32()? as usize;
        let count = r.u32()? as usize;
        let transforms = (0..n).map(|_| r.matrix(d, d)).collect::<Result<_>>()?;
        let lift = r.matrix(f, d)?;
        let class_lifts = (0..lifts).map(|_| r.matrix(f, d)).collect::<Result<_>>()?;
        let mut videos = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.error("video id is not UTF-8"))?;
            let class = r.u32()? as usize;
            let z_p = r.u32()? as usize;
            let z_e = r.u32()? as usize;
            let code = r.vector(d)?;
            videos.push(PlantedVideo {
                id,
                class,
                seg: LatentSegmentation::new(z_p, z_e),
                code,
            });
        }
        r.finish()?;
        Ok(Self {
            sub_categories,
            transforms,
            lift,
            class_lifts,
            videos,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub rgb: Vec<FrameFeatureSequence>,
    pub flow: Option<Vec<FrameFeatureSequence>>,
    pub truth: PlantedTruth,
}

impl SynthDataset {
    pub fn sequences(&self, stream: Stream) -> Option<&[FrameFeatureSequence]> {
        match stream {
            Stream::Rgb => Some(&self.rgb),
            Stream::Flow => self.flow.as_deref(),
        }
    }

    /// Write `manifest.json`, `truth.tfht` and `features/*.tfhv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
        save_manifest(&self.manifest, dir.join("manifest.json"))?;
        self.truth.save(dir.join("truth.tfht"))?;
        for (entry, seq) in self.manifest.videos.iter().zip(&self.rgb) {
            save_features(seq, dir.join(&entry.features[&Stream::Rgb]))?;
        }
        if let Some(flow) = &self.flow {
            for (entry, seq) in self.manifest.videos.iter().zip(flow) {
                save_features(seq, dir.join(&entry.features[&Stream::Flow]))?;
            }
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

fn gaussian_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Modified Gram-Schmidt on the columns of `m`.
fn orthonormalize_columns(mut m: Array2<f64>) -> Array2<f64> {
    for j in 0..m.ncols() {
        for k in 0..j {
            let proj = m.column(k).dot(&m.column(j));
            let prev = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

/// Random unit vector orthogonal to the unit vector `to`, drawn from the
/// span of `basis` when that span reaches outside `to`.
fn orthogonal_unit(rng: &mut impl Rng, to: &Array1<f64>, basis: &[Array1<f64>]) -> Array1<f64> {
    let reject = |mut v: Array1<f64>| {
        let proj = v.dot(to);
        v.scaled_add(-proj, to);
        v
    };
    let mut v = Array1::zeros(to.len());
    for b in basis {
        v.scaled_add(rng.sample::<f64, _>(StandardNormal), b);
    }
    let v = reject(v);
    if v.dot(&v) > 1e-6 {
        return unit(v);
    }
    unit(reject(gaussian_vec(rng, to.len())))
}

fn separation(transforms: &[Array2<f64>], y: usize, code: &Array1<f64>) -> f64 {
    let target = transforms[y].dot(code);
    transforms
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, t)| cosine_distance(t.dot(code).view(), target.view()).unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min)
}

/// Draw orthogonal class transforms whose pairwise mean cosine distance over
/// random codes is at least [`MIN_SEPARATION`].
fn planted_transforms(rng: &mut impl Rng, n: usize, d: usize) -> Result<Vec<Array2<f64>>> {
    const PROBES: usize = 64;
    for _ in 0..100 {
        let transforms: Vec<_> = (0..n)
            .map(|_| orthonormalize_columns(gaussian_mat(rng, d, d)))
            .collect();
        let probes: Vec<_> = (0..PROBES).map(|_| unit(gaussian_vec(rng, d))).collect();
        let separated = (0..n).all(|i| {
            (i + 1..n).all(|j| {
                let mean = probes
                    .iter()
                    .map(|u| {
                        cosine_distance(transforms[i].dot(u).view(), transforms[j].dot(u).view())
                            .unwrap_or(0.0)
                    })
                    .sum::<f64>()
                    / PROBES as f64;
                mean >= MIN_SEPARATION
            })
        });
        if separated {
            return Ok(transforms);
        }
    }
    Err(Error::Config(format!(
        "could not draw {n} well-separated {d}x{d} transformations"
    )))
}

/// Centered ramp weight of position `k` (one-based) among `len` frames; the
/// weights sum to zero.
fn ramp(k: usize, len: usize) -> f64 {
    (k as f64 - (len as f64 + 1.0) / 2.0) / len as f64
}

struct VideoPlan {
    class: usize,
    seg: LatentSegmentation,
    code: Array1<f64>,
    target: Array1<f64>,
    drift_pre: Array1<f64>,
    drift_eff: Array1<f64>,
}

/// Noise-free code-space content of frame `k`, and its noise multiplier.
fn frame_code(plan: &VideoPlan, k: usize, t: usize, drift: f64) -> (Array1<f64>, f64) {
    let (z_p, z_e) = (plan.seg.z_p, plan.seg.z_e);
    if k <= z_p {
        (&plan.code + &(&plan.drift_pre * (drift * ramp(k, z_p))), 1.0)
    } else if k >= z_e {
        let len = t - z_e + 1;
        (&plan.target + &(&plan.drift_eff * (drift * ramp(k - z_e + 1, len))), 1.0)
    } else {
        // Mid-action frames leave the path between the two states, so
        // pooling one into either segment costs distance.
        let alpha = (k - z_p) as f64 / (z_e - z_p) as f64;
        let off_path = (&plan.drift_pre + &plan.drift_eff) * (drift * 0.5);
        (&plan.code * (1.0 - alpha) + &plan.target * alpha + off_path, 3.0)
    }
}

fn render(
    plan: &VideoPlan,
    lift: &Array2<f64>,
    config: &SynthConfig,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let mut frames = Array2::zeros((config.t, config.feature_dim));
    for k in 1..=config.t {
        let (code, scale) = frame_code(plan, k, config.t, config.drift);
        let mut row = lift.dot(&code);
        if config.noise > 0.0 {
            row += &(gaussian_vec(rng, config.feature_dim) * (config.noise * scale));
        }
        frames.row_mut(k - 1).assign(&row);
    }
    frames
}

/// Generate a planted dataset. Pure in `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let (n, d, f, t) = (config.classes, config.embed_dim, config.feature_dim, config.t);
    let fine = config.fine_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rgb_noise = ChaCha8Rng::seed_from_u64(config.seed);
    rgb_noise.set_stream(1);
    let mut flow_noise = ChaCha8Rng::seed_from_u64(config.seed);
    flow_noise.set_stream(2);

    let lift = orthonormalize_columns(gaussian_mat(&mut rng, f, d));
    let transforms = planted_transforms(&mut rng, n, d)?;
    let class_lifts: Vec<Array2<f64>> = if config.sub_categories > 1 {
        (0..fine)
            .map(|_| {
                let noise = gaussian_mat(&mut rng, f, d) * (config.lift_perturbation / (f as f64).sqrt());
                orthonormalize_columns(&lift + &noise)
            })
            .collect()
    } else {
        Vec::new()
    };
    let centers: Vec<Array1<f64>> = (0..fine).map(|_| unit(gaussian_vec(&mut rng, d))).collect();
    // Drift runs along class-discriminative directions, which any model
    // that separates the classes has to keep.
    let moved_centers: Vec<Array1<f64>> = centers
        .iter()
        .enumerate()
        .map(|(c, u)| transforms[c / config.sub_categories].dot(u))
        .collect();
    let range = latent_range(t)?;
    let segs: Vec<LatentSegmentation> = range.segmentations().collect();

    let mut truth = PlantedTruth {
        sub_categories: config.sub_categories,
        transforms,
        lift,
        class_lifts,
        videos: Vec::with_capacity(config.num_videos()),
    };
    let mut classes = Vec::with_capacity(fine);
    for c in 0..fine {
        let sub = c % config.sub_categories;
        let name = if config.sub_categories > 1 {
            format!("a{:02}s{}", c / config.sub_categories + 1, sub + 1)
        } else {
            format!("a{:02}", c + 1)
        };
        classes.push(ClassEntry {
            index: c + 1,
            name,
            super_class: c / config.sub_categories + 1,
        });
    }

    let per_class = config.train_per_class + config.test_per_class;
    let mut videos = Vec::with_capacity(config.num_videos());
    let mut rgb = Vec::with_capacity(config.num_videos());
    let mut flow = config.flow.then(|| Vec::with_capacity(config.num_videos()));
    let mut standard = Split {
        kind: SplitKind::Standard,
        train: Vec::new(),
        test: Vec::new(),
    };
    let mut cross = Split {
        kind: SplitKind::CrossCategory,
        train: Vec::new(),
        test: Vec::new(),
    };

    for c in 0..fine {
        let y = truth.transform_class(c);
        for k in 0..per_class {
            let id = format!("v{:05}", videos.len());
            let code = (0..1000)
                .map(|_| {
                    let jitter = gaussian_vec(&mut rng, d) * (config.code_spread / (d as f64).sqrt());
                    unit(&centers[c] + &jitter)
                })
                .find(|u| n == 1 || separation(&truth.transforms, y, u) >= CODE_SEPARATION)
                .ok_or_else(|| {
                    Error::Config(format!("class {} codes cannot meet the separation floor", c + 1))
                })?;
            let seg = *segs.choose(&mut rng).expect("latent range is non-empty");
            let target = truth.transforms[y].dot(&code);
            let drift_pre = orthogonal_unit(&mut rng, &code, &centers);
            let drift_eff = orthogonal_unit(&mut rng, &unit(target.clone()), &moved_centers);
            let plan = VideoPlan {
                class: c,
                seg,
                code,
                target,
                drift_pre,
                drift_eff,
            };

            let lift = truth.lift_for(c).clone();
            let frames = render(&plan, &lift, config, &mut rgb_noise);
            rgb.push(FrameFeatureSequence::new(&id, Some(c), Stream::Rgb, frames)?);
            let mut features = BTreeMap::from([(Stream::Rgb, format!("features/{id}.rgb.tfhv"))]);
            if let Some(flow) = flow.as_mut() {
                let frames = render(&plan, &lift, config, &mut flow_noise);
                flow.push(FrameFeatureSequence::new(&id, Some(c), Stream::Flow, frames)?);
                features.insert(Stream::Flow, format!("features/{id}.flow.tfhv"));
            }

            if k < config.train_per_class {
                standard.train.push(id.clone());
            } else {
                standard.test.push(id.clone());
            }
            if config.sub_categories > 1 {
                if c % config.sub_categories + 1 == config.sub_categories {
                    cross.test.push(id.clone());
                } else {
                    cross.train.push(id.clone());
                }
            }
            videos.push(VideoEntry {
                id: id.clone(),
                label: c + 1,
                features,
            });
            truth.videos.push(PlantedVideo {
                id,
                class: plan.class,
                seg: plan.seg,
                code: plan.code,
            });
        }
    }

    let mut splits = BTreeMap::from([("standard".to_string(), standard)]);
    if config.sub_categories > 1 {
        splits.insert("cross".to_string(), cross);
    }
    let manifest = DatasetManifest {
        feature_dim: f,
        classes,
        videos,
        splits,
    };
    manifest.validate()?;
    Ok(SynthDataset {
        manifest,
        rgb,
        flow,
        truth,
    })
}

/// Parameters that recover the planted structure exactly at zero noise:
/// both towers project with `Pᵀ`, biases vanish, and `T_i = T*_i`.
pub fn oracle_params(truth: &PlantedTruth) -> SiameseParams {
    let (_, d) = truth.lift.dim();
    let proj = truth.lift.t().as_standard_layout().into_owned();
    SiameseParams {
        w_pre: proj.clone(),
        b_pre: Array1::zeros(d),
        w_eff: proj,
        b_eff: Array1::zeros(d),
        transforms: truth
            .transforms
            .iter()
            .map(|t| t.as_standard_layout().into_owned())
            .collect(),
    }
}
