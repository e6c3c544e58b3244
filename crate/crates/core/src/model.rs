//! Model parameters and the forward pass.
//!
//! A video is split into precondition frames `1..=z_p` and effect frames
//! `z_e..=t`. Each segment is average-pooled, then embedded by its own
//! linear tower. Class `i` is scored by how closely `T_i` maps the
//! precondition embedding onto the effect embedding under cosine distance.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::PrefixSums;

pub const PARAMS_MAGIC: &[u8; 4] = b"TFHP";
pub const PARAMS_VERSION: u32 = 1;

/// Norm floor below which cosine distance is undefined.
pub const NORM_EPS: f64 = 1e-12;

/// Default hinge margin for wrong-class distances.
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Precondition,
    Effect,
}

/// Weights of both towers plus one `d x d` transformation per class.
///
/// The towers never share storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseParams {
    pub w_pre: Array2<f64>,
    pub b_pre: Array1<f64>,
    pub w_eff: Array2<f64>,
    pub b_eff: Array1<f64>,
    pub transforms: Vec<Array2<f64>>,
}

impl SiameseParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(n: usize, d: usize, f: usize) -> Self {
        Self {
            w_pre: Array2::zeros((d, f)),
            b_pre: Array1::zeros(d),
            w_eff: Array2::zeros((d, f)),
            b_eff: Array1::zeros(d),
            transforms: vec![Array2::zeros((d, d)); n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.transforms.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.b_pre.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_pre.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        let f = self.feature_dim();
        let check = |what, expected, actual| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    what,
                    expected,
                    actual,
                })
            }
        };
        check("precondition weight rows", d, self.w_pre.nrows())?;
        check("effect weight rows", d, self.w_eff.nrows())?;
        check("effect weight columns", f, self.w_eff.ncols())?;
        check("effect bias length", d, self.b_eff.len())?;
        for t in &self.transforms {
            check("transformation rows", d, t.nrows())?;
            check("transformation columns", d, t.ncols())?;
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Every parameter in checkpoint order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w_pre
            .iter()
            .chain(self.b_pre.iter())
            .chain(self.w_eff.iter())
            .chain(self.b_eff.iter())
            .chain(self.transforms.iter().flat_map(|t| t.iter()))
    }

    pub(crate) fn write_body(&self, w: &mut Writer) {
        w.f64s(self.values());
    }

    pub(crate) fn read_body(r: &mut Reader<'_>, n: usize, d: usize, f: usize) -> Result<Self> {
        let w_pre = r.matrix(d, f)?;
        let b_pre = r.vector(d)?;
        let w_eff = r.matrix(d, f)?;
        let b_eff = r.vector(d)?;
        let transforms = (0..n).map(|_| r.matrix(d, d)).collect::<Result<_>>()?;
        Ok(Self {
            w_pre,
            b_pre,
            w_eff,
            b_eff,
            transforms,
        })
    }

    pub(crate) fn write_shape(&self, w: &mut Writer) {
        w.u32(self.num_classes() as u32);
        w.u32(self.embed_dim() as u32);
        w.u32(self.feature_dim() as u32);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(20 + 8 * self.values().count());
        w.bytes(PARAMS_MAGIC);
        w.u32(PARAMS_VERSION);
        self.write_shape(&mut w);
        self.write_body(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(PARAMS_MAGIC)?;
        let version = r.u32()?;
        if version != PARAMS_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let (n, d, f) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let params = Self::read_body(&mut r, n, d, f)?;
        r.finish()?;
        Ok(params)
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

/// Last precondition frame and first effect frame, both one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatentSegmentation {
    pub z_p: usize,
    pub z_e: usize,
}

impl LatentSegmentation {
    pub fn new(z_p: usize, z_e: usize) -> Self {
        Self { z_p, z_e }
    }

    /// `t/3 <= z_p < t/2` and `t/2 < z_e <= 2t/3`, compared as reals.
    pub fn is_valid(&self, t: usize) -> bool {
        3 * self.z_p >= t && 2 * self.z_p < t && 2 * self.z_e > t && 3 * self.z_e <= 2 * t
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        if self.is_valid(t) {
            Ok(())
        } else {
            Err(Error::InvalidSegmentation {
                z_p: self.z_p,
                z_e: self.z_e,
                t,
            })
        }
    }
}

/// The positive term and every wrong-class hinge of the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub positive: f64,
    /// One hinge per wrong class, in class order.
    pub negatives: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn negative_sum(&self) -> f64 {
        self.negatives.iter().sum()
    }
}

/// Mean of frames `a..=b`, one-based inclusive.
pub fn pool_segment(sums: &PrefixSums, a: usize, b: usize) -> Result<Array1<f64>> {
    sums.segment_mean(a, b)
}

/// Linear embedding `W x + b` with the selected tower's weights.
pub fn embed(tower: Tower, params: &SiameseParams, pooled: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let (w, b) = match tower {
        Tower::Precondition => (&params.w_pre, &params.b_pre),
        Tower::Effect => (&params.w_eff, &params.b_eff),
    };
    if pooled.len() != w.ncols() {
        return Err(Error::DimensionMismatch {
            what: "pooled feature",
            expected: w.ncols(),
            actual: pooled.len(),
        });
    }
    Ok(w.dot(&pooled) + b)
}

/// `T_y v`, with a zero-based class index.
pub fn transform(params: &SiameseParams, y: usize, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let t = params.transforms.get(y).ok_or(Error::ClassOutOfRange {
        index: y,
        n: params.num_classes(),
    })?;
    if v.len() != t.ncols() {
        return Err(Error::DimensionMismatch {
            what: "embedding",
            expected: t.ncols(),
            actual: v.len(),
        });
    }
    Ok(t.dot(&v))
}

/// `1 - cos(v1, v2)`, in `[0, 2]`.
pub fn cosine_distance(v1: ArrayView1<'_, f64>, v2: ArrayView1<'_, f64>) -> Result<f64> {
    let n1 = v1.dot(&v1).sqrt();
    let n2 = v2.dot(&v2).sqrt();
    for norm in [n1, n2] {
        if norm.is_nan() || norm <= NORM_EPS {
            return Err(Error::DegenerateEmbedding { norm });
        }
    }
    let cos = v1.dot(&v2) / (n1 * n2);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Cosine distance with its gradients with respect to both arguments.
pub(crate) fn cosine_distance_grad(
    u: &Array1<f64>,
    e: &Array1<f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let nu = u.dot(u).sqrt();
    let ne = e.dot(e).sqrt();
    for norm in [nu, ne] {
        if norm.is_nan() || norm <= NORM_EPS {
            return Err(Error::DegenerateEmbedding { norm });
        }
    }
    let dot = u.dot(e);
    let inv = 1.0 / (nu * ne);
    let cos = dot / (nu * ne);
    // d(1 - cos)/du = -(e / (|u||e|) - cos u / |u|^2)
    let du = u * (cos / (nu * nu)) - e * inv;
    let de = e * (cos / (ne * ne)) - u * inv;
    Ok(((1.0 - cos).clamp(0.0, 2.0), du, de))
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pooled_pre: Array1<f64>,
    pub pooled_eff: Array1<f64>,
    pub pre: Array1<f64>,
    pub eff: Array1<f64>,
}

pub fn forward(sums: &PrefixSums, seg: LatentSegmentation, params: &SiameseParams) -> Result<Forward> {
    let t = sums.len();
    seg.validate(t)?;
    if sums.dim() != params.feature_dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: params.feature_dim(),
            actual: sums.dim(),
        });
    }
    let pooled_pre = pool_segment(sums, 1, seg.z_p)?;
    let pooled_eff = pool_segment(sums, seg.z_e, t)?;
    let pre = embed(Tower::Precondition, params, pooled_pre.view())?;
    let eff = embed(Tower::Effect, params, pooled_eff.view())?;
    Ok(Forward {
        pooled_pre,
        pooled_eff,
        pre,
        eff,
    })
}

/// Contrastive loss of a video at a fixed segmentation: the positive
/// distance for the true class plus `max(0, margin - D)` for every other
/// class, summed without normalization.
pub fn loss(
    sums: &PrefixSums,
    y: usize,
    seg: LatentSegmentation,
    params: &SiameseParams,
    margin: f64,
) -> Result<LossBreakdown> {
    let n = params.num_classes();
    if y >= n {
        return Err(Error::ClassOutOfRange { index: y, n });
    }
    let fwd = forward(sums, seg, params)?;
    let mut positive = 0.0;
    let mut negatives = Vec::with_capacity(n - 1);
    for i in 0..n {
        let u = transform(params, i, fwd.pre.view())?;
        let dist = cosine_distance(u.view(), fwd.eff.view())?;
        if i == y {
            positive = dist;
        } else {
            negatives.push((margin - dist).max(0.0));
        }
    }
    let total = positive + negatives.iter().sum::<f64>();
    Ok(LossBreakdown {
        positive,
        negatives,
        total,
    })
}
