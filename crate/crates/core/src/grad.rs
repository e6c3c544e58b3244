//! Hand-derived gradients of the contrastive loss and a central
//! finite-difference checker for them.

use std::ops::{Deref, DerefMut};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::features::PrefixSums;
use crate::model::{
    cosine_distance_grad, forward, loss, transform, LatentSegmentation, LossBreakdown,
    SiameseParams,
};

/// A named slice of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    PreWeight,
    PreBias,
    EffWeight,
    EffBias,
    Transform(usize),
}

impl ParamGroup {
    pub fn all(n: usize) -> Vec<ParamGroup> {
        let mut groups = vec![
            ParamGroup::PreWeight,
            ParamGroup::PreBias,
            ParamGroup::EffWeight,
            ParamGroup::EffBias,
        ];
        groups.extend((0..n).map(ParamGroup::Transform));
        groups
    }

    pub fn name(self) -> String {
        match self {
            ParamGroup::PreWeight => "precondition.weight".into(),
            ParamGroup::PreBias => "precondition.bias".into(),
            ParamGroup::EffWeight => "effect.weight".into(),
            ParamGroup::EffBias => "effect.bias".into(),
            ParamGroup::Transform(i) => format!("transform[{}]", i + 1),
        }
    }
}

impl SiameseParams {
    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::PreWeight => self.w_pre.as_slice(),
            ParamGroup::PreBias => self.b_pre.as_slice(),
            ParamGroup::EffWeight => self.w_eff.as_slice(),
            ParamGroup::EffBias => self.b_eff.as_slice(),
            ParamGroup::Transform(i) => self.transforms[i].as_slice(),
        }
        .expect("parameters are stored in standard layout")
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::PreWeight => self.w_pre.as_slice_mut(),
            ParamGroup::PreBias => self.b_pre.as_slice_mut(),
            ParamGroup::EffWeight => self.w_eff.as_slice_mut(),
            ParamGroup::EffBias => self.b_eff.as_slice_mut(),
            ParamGroup::Transform(i) => self.transforms[i].as_slice_mut(),
        }
        .expect("parameters are stored in standard layout")
    }
}

/// Gradient with the same shape as [`SiameseParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub SiameseParams);

impl Deref for Gradients {
    type Target = SiameseParams;

    fn deref(&self) -> &SiameseParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut SiameseParams {
        &mut self.0
    }
}

impl Gradients {
    pub fn zeros_like(params: &SiameseParams) -> Self {
        Gradients(SiameseParams::zeros(
            params.num_classes(),
            params.embed_dim(),
            params.feature_dim(),
        ))
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for g in ParamGroup::all(self.num_classes()) {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in ParamGroup::all(self.num_classes()) {
            self.group_mut(g).iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// First group holding a non-finite entry.
    pub fn non_finite_group(&self) -> Option<ParamGroup> {
        ParamGroup::all(self.num_classes())
            .into_iter()
            .find(|&g| self.group(g).iter().any(|v| !v.is_finite()))
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Loss and its exact gradient at a fixed segmentation.
///
/// Hinges with `D >= margin` are inactive and contribute nothing, including
/// exactly at the kink.
pub fn backward(
    sums: &PrefixSums,
    y: usize,
    seg: LatentSegmentation,
    params: &SiameseParams,
    margin: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let n = params.num_classes();
    if y >= n {
        return Err(Error::ClassOutOfRange { index: y, n });
    }
    let fwd = forward(sums, seg, params)?;
    let d = params.embed_dim();
    let mut grads = Gradients::zeros_like(params);
    let mut g_pre = Array1::zeros(d);
    let mut g_eff = Array1::zeros(d);
    let mut positive = 0.0;
    let mut negatives = Vec::with_capacity(n - 1);

    for i in 0..n {
        let u = transform(params, i, fwd.pre.view())?;
        let (dist, du, de) = cosine_distance_grad(&u, &fwd.eff)?;
        let coeff = if i == y {
            positive = dist;
            1.0
        } else {
            let hinge = (margin - dist).max(0.0);
            negatives.push(hinge);
            if dist < margin {
                -1.0
            } else {
                continue;
            }
        };
        let g_u = du * coeff;
        grads.transforms[i] = outer(&g_u, &fwd.pre);
        g_pre += &params.transforms[i].t().dot(&g_u);
        g_eff.scaled_add(coeff, &de);
    }

    grads.w_pre = outer(&g_pre, &fwd.pooled_pre);
    grads.w_eff = outer(&g_eff, &fwd.pooled_eff);
    grads.b_pre = g_pre;
    grads.b_eff = g_eff;

    let total = positive + negatives.iter().sum::<f64>();
    Ok((
        LossBreakdown {
            positive,
            negatives,
            total,
        },
        grads,
    ))
}

/// Gradient of each loss term on its own: the positive term first, then
/// one hinge per wrong class in class order (zero when inactive).
///
/// Computed term by term, independently of [`backward`]'s fused
/// accumulation, so the two can be checked against each other.
pub fn term_gradients(
    sums: &PrefixSums,
    y: usize,
    seg: LatentSegmentation,
    params: &SiameseParams,
    margin: f64,
) -> Result<Vec<Gradients>> {
    let n = params.num_classes();
    if y >= n {
        return Err(Error::ClassOutOfRange { index: y, n });
    }
    let fwd = forward(sums, seg, params)?;
    let order = std::iter::once(y).chain((0..n).filter(|&i| i != y));
    let mut out = Vec::with_capacity(n);
    for i in order {
        let mut g = Gradients::zeros_like(params);
        let u = transform(params, i, fwd.pre.view())?;
        let (dist, du, de) = cosine_distance_grad(&u, &fwd.eff)?;
        let coeff = match (i == y, dist < margin) {
            (true, _) => 1.0,
            (false, true) => -1.0,
            (false, false) => 0.0,
        };
        if coeff != 0.0 {
            let g_u = du * coeff;
            let g_pre = params.transforms[i].t().dot(&g_u);
            let g_eff = de * coeff;
            g.transforms[i] = outer(&g_u, &fwd.pre);
            g.w_pre = outer(&g_pre, &fwd.pooled_pre);
            g.w_eff = outer(&g_eff, &fwd.pooled_eff);
            g.b_pre = g_pre;
            g.b_eff = g_eff;
        }
        out.push(g);
    }
    Ok(out)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a hinge kink.
    pub skipped: usize,
}

/// Deterministic coordinate subsample touching every parameter group.
///
/// Uses every coordinate when there are fewer than 256; otherwise each group
/// gets a strided share proportional to its size, at least 16, for a total
/// of at least 256.
pub fn check_coordinates(params: &SiameseParams) -> Vec<(ParamGroup, usize)> {
    const TARGET: usize = 256;
    let groups = ParamGroup::all(params.num_classes());
    let total: usize = groups.iter().map(|&g| params.group(g).len()).sum();
    let mut coords = Vec::new();
    for g in groups {
        let size = params.group(g).len();
        if total <= TARGET {
            coords.extend((0..size).map(|k| (g, k)));
            continue;
        }
        let quota = (TARGET * size).div_ceil(total).max(16).min(size);
        // Strided positions spread over the whole group.
        coords.extend((0..quota).map(|j| (g, (2 * j + 1) * size / (2 * quota))));
    }
    coords
}

fn hinge_pattern(
    sums: &PrefixSums,
    y: usize,
    seg: LatentSegmentation,
    params: &SiameseParams,
    margin: f64,
) -> Result<Vec<bool>> {
    let l = loss(sums, y, seg, params, margin)?;
    Ok(l.negatives.iter().map(|&h| h > 0.0).collect())
}

/// Compare [`backward`] against central differences
/// `(L(θ + h e) - L(θ - h e)) / 2h` on [`check_coordinates`].
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// Coordinates whose perturbation switches any hinge on or off are skipped.
pub fn finite_diff_check(
    sums: &PrefixSums,
    y: usize,
    seg: LatentSegmentation,
    params: &SiameseParams,
    margin: f64,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = backward(sums, y, seg, params, margin)?;
    let base = hinge_pattern(sums, y, seg, params, margin)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (g, k) in check_coordinates(params) {
        let orig = params.group(g)[k];

        probe.group_mut(g)[k] = orig + step;
        let plus = loss(sums, y, seg, &probe, margin)?;
        let plus_pattern: Vec<bool> = plus.negatives.iter().map(|&h| h > 0.0).collect();

        probe.group_mut(g)[k] = orig - step;
        let minus = loss(sums, y, seg, &probe, margin)?;
        let minus_pattern: Vec<bool> = minus.negatives.iter().map(|&h| h > 0.0).collect();

        probe.group_mut(g)[k] = orig;

        if plus_pattern != base || minus_pattern != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.total - minus.total) / (2.0 * step);
        let a = analytic.group(g)[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
