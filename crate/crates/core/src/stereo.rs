//! Stereo-specific kernels: the concatenation cost volume, soft argmin and
//! the disparity losses, plus the backward passes the graph dispatches to.

use crate::error::{Error, Result};
use crate::nn::{check_axis, lanes, softmax_axis};
use crate::tensor::{Scalar, Tensor};

/// Which training objective drives the disparity head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1Regression,
    HardClassification,
    SoftClassification,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1Regression => "l1-regression",
            LossKind::HardClassification => "hard-classification",
            LossKind::SoftClassification => "soft-classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1-regression" | "l1" | "regression" => Some(LossKind::L1Regression),
            "hard-classification" | "hard" => Some(LossKind::HardClassification),
            "soft-classification" | "soft" => Some(LossKind::SoftClassification),
            _ => None,
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, LossKind::L1Regression)
    }
}

/// Standard deviation, in disparity bins, of soft-classification targets.
pub const SOFT_TARGET_SIGMA: f64 = 1.0;

fn hw_f(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, f] => Ok((h, w, f)),
        _ => Err(Error::shape(op, "rank", "3 (H,W,F)", format!("{:?}", t.shape()))),
    }
}

/// Packs left features with right features shifted by each disparity.
///
/// `max_disparity` is counted at full resolution; features live at half
/// resolution, so the volume holds `max_disparity / 2` shifts. Slice `d` at
/// `(y, x)` is `[left[y, x], right[y, x - d]]`, with the right half zero when
/// `x < d`.
pub fn build_cost_volume<T: Scalar>(left: &Tensor<T>, right: &Tensor<T>, max_disparity: usize) -> Result<Tensor<T>> {
    let (h, w, f) = hw_f("build_cost_volume", left)?;
    if left.shape() != right.shape() {
        return Err(Error::shape(
            "build_cost_volume",
            "right features",
            format!("{:?}", left.shape()),
            format!("{:?}", right.shape()),
        ));
    }
    if max_disparity < 2 || max_disparity % 2 != 0 {
        return Err(Error::invalid("build_cost_volume", format!("max disparity {max_disparity} must be even and >= 2")));
    }
    let dh = max_disparity / 2;
    if dh > w {
        return Err(Error::invalid(
            "build_cost_volume",
            format!("max disparity {max_disparity} exceeds image width {}", 2 * w),
        ));
    }
    let (l, r) = (left.data(), right.data());
    let mut out = vec![T::zero(); dh * h * w * 2 * f];
    for d in 0..dh {
        for y in 0..h {
            for x in 0..w {
                let dst = ((d * h + y) * w + x) * 2 * f;
                let src = (y * w + x) * f;
                out[dst..dst + f].copy_from_slice(&l[src..src + f]);
                if x >= d {
                    let s = src - d * f;
                    out[dst + f..dst + 2 * f].copy_from_slice(&r[s..s + f]);
                }
            }
        }
    }
    Tensor::new(&[dh, h, w, 2 * f], out)
}

pub(crate) fn cost_volume_backward<T: Scalar>(feat_shape: &[usize], dv: &Tensor<T>, dh: usize) -> (Tensor<T>, Tensor<T>) {
    let (h, w, f) = (feat_shape[0], feat_shape[1], feat_shape[2]);
    let mut dl = vec![T::zero(); h * w * f];
    let mut dr = vec![T::zero(); h * w * f];
    let g = dv.data();
    for d in 0..dh {
        for y in 0..h {
            for x in 0..w {
                let src = ((d * h + y) * w + x) * 2 * f;
                let dst = (y * w + x) * f;
                for (a, &v) in dl[dst..dst + f].iter_mut().zip(&g[src..src + f]) {
                    *a += v;
                }
                if x >= d {
                    let s = dst - d * f;
                    for (a, &v) in dr[s..s + f].iter_mut().zip(&g[src + f..src + 2 * f]) {
                        *a += v;
                    }
                }
            }
        }
    }
    (
        Tensor::new(feat_shape, dl).expect("feature shape"),
        Tensor::new(feat_shape, dr).expect("feature shape"),
    )
}

/// `Σ_i i · x_i` along `axis`, removing it.
pub fn index_expectation<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("expectation", x.shape(), axis)?;
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for i in 0..n {
            let k = T::from_usize(i).expect("index");
            let src = &x.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += k * v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

pub(crate) fn index_expectation_backward<T: Scalar>(shape: &[usize], dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = lanes(shape, axis);
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let g = &dy.data()[o * inner..(o + 1) * inner];
        for i in 0..n {
            let k = T::from_usize(i).expect("index");
            for (d, &v) in dx[(o * n + i) * inner..(o * n + i + 1) * inner].iter_mut().zip(g) {
                *d = k * v;
            }
        }
    }
    Tensor::new(shape, dx).expect("input shape")
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = lanes(y.shape(), axis);
    let (p, g) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); p.len()];
    let mut dot = vec![T::zero(); inner];
    for o in 0..outer {
        dot.fill(T::zero());
        for i in 0..n {
            let r = (o * n + i) * inner..(o * n + i + 1) * inner;
            for ((s, &pv), &gv) in dot.iter_mut().zip(&p[r.clone()]).zip(&g[r]) {
                *s += pv * gv;
            }
        }
        for i in 0..n {
            let r = (o * n + i) * inner..(o * n + i + 1) * inner;
            for (((d, &pv), &gv), &s) in dx[r.clone()].iter_mut().zip(&p[r.clone()]).zip(&g[r]).zip(&dot) {
                *d = pv * (gv - s);
            }
        }
    }
    Tensor::new(y.shape(), dx).expect("shape")
}

/// Soft argmin over the leading (disparity) axis of `[D, H, W]` costs:
/// `Σ_d d · softmax(-c)_d` per pixel.
pub fn soft_argmin<T: Scalar>(costs: &Tensor<T>) -> Result<Tensor<T>> {
    if costs.rank() != 3 {
        return Err(Error::shape("soft_argmin", "rank", "3 (D,H,W)", costs.rank()));
    }
    let p = softmax_axis(&costs.scale(-T::one()), 0)?;
    index_expectation(&p, 0)
}

/// Integer argmin over the leading axis; ties resolve to the lowest index.
pub fn hard_argmin<T: Scalar>(costs: &Tensor<T>) -> Result<Tensor<T>> {
    if costs.rank() != 3 {
        return Err(Error::shape("hard_argmin", "rank", "3 (D,H,W)", costs.rank()));
    }
    let (d, pixels) = (costs.shape()[0], costs.shape()[1] * costs.shape()[2]);
    let c = costs.data();
    let out = (0..pixels)
        .map(|p| {
            let best = (1..d).fold(0, |b, k| if c[k * pixels + p] < c[b * pixels + p] { k } else { b });
            T::from_usize(best).expect("index")
        })
        .collect();
    Tensor::new(&costs.shape()[1..], out)
}

/// Linear ×2 upsampling along `axis` with half-pixel centers and clamped edges:
/// `out[2k] = ¾x[k] + ¼x[k-1]`, `out[2k+1] = ¾x[k] + ¼x[k+1]`.
pub fn upsample2<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("upsample2", x.shape(), axis)?;
    let (outer, n, inner) = lanes(x.shape(), axis);
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let src = x.data();
    let mut out = vec![T::zero(); src.len() * 2];
    for o in 0..outer {
        for k in 0..n {
            let row = |i: usize| &src[(o * n + i) * inner..(o * n + i + 1) * inner];
            let (prev, cur, next) = (row(k.saturating_sub(1)), row(k), row((k + 1).min(n - 1)));
            for (j, (&c, (&p, &q))) in cur.iter().zip(prev.iter().zip(next)).enumerate() {
                out[(o * 2 * n + 2 * k) * inner + j] = near * c + far * p;
                out[(o * 2 * n + 2 * k + 1) * inner + j] = near * c + far * q;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] *= 2;
    Tensor::new(&shape, out)
}

pub(crate) fn upsample2_backward<T: Scalar>(shape: &[usize], dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = lanes(shape, axis);
    let (near, far) = (T::lit(0.75), T::lit(0.25));
    let g = dy.data();
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for k in 0..n {
            let (prev, next) = (k.saturating_sub(1), (k + 1).min(n - 1));
            for j in 0..inner {
                let ge = g[(o * 2 * n + 2 * k) * inner + j];
                let go = g[(o * 2 * n + 2 * k + 1) * inner + j];
                dx[(o * n + k) * inner + j] += near * (ge + go);
                dx[(o * n + prev) * inner + j] += far * ge;
                dx[(o * n + next) * inner + j] += far * go;
            }
        }
    }
    Tensor::new(shape, dx).expect("input shape")
}

/// Per-pixel weights `mask / N`; rejects an empty mask.
pub(crate) fn mask_weights<T: Scalar>(mask: &[bool], pixels: usize) -> Result<Vec<T>> {
    if mask.len() != pixels {
        return Err(Error::shape("loss", "mask length", pixels, mask.len()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let w = T::one() / T::from_usize(n).expect("count");
    Ok(mask.iter().map(|&m| if m { w } else { T::zero() }).collect())
}

/// Mean absolute disparity error over valid pixels.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &[bool]) -> Result<T> {
    pred.expect_same_shape("l1_loss", gt)?;
    let w = mask_weights::<T>(mask, pred.len())?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(&w)
        .fold(T::zero(), |acc, ((&p, &g), &w)| acc + w * (p - g).abs()))
}

pub(crate) fn cross_entropy<T: Scalar>(costs: &Tensor<T>, targets: &Tensor<T>, weights: &[T]) -> Result<(T, Tensor<T>)> {
    let neg = costs.scale(-T::one());
    let probs = softmax_axis(&neg, 0)?;
    let (d, pixels) = (costs.shape()[0], weights.len());
    let (z, t) = (neg.data(), targets.data());
    let mut loss = T::zero();
    for (p, &w) in weights.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let m = (0..d).fold(T::neg_infinity(), |m, k| m.max(z[k * pixels + p]));
        let lse = m + (0..d).fold(T::zero(), |s, k| s + (z[k * pixels + p] - m).exp()).ln();
        let ce = (0..d).fold(T::zero(), |s, k| s - t[k * pixels + p] * (z[k * pixels + p] - lse));
        loss += w * ce;
    }
    Ok((loss, probs))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>, weights: &[T], g: T) -> Tensor<T> {
    let (d, pixels) = (probs.shape()[0], weights.len());
    let (p, t) = (probs.data(), targets.data());
    let mut dc = vec![T::zero(); p.len()];
    for (px, &w) in weights.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let mass = (0..d).fold(T::zero(), |s, k| s + t[k * pixels + px]);
        for k in 0..d {
            let i = k * pixels + px;
            dc[i] = g * w * (t[i] - p[i] * mass);
        }
    }
    Tensor::new(probs.shape(), dc).expect("shape")
}

/// Target distributions for classification losses.
#[derive(Clone, Debug)]
pub struct ClassTargets<T> {
    /// `[D, H, W]` per-pixel distributions.
    pub targets: Tensor<T>,
    /// Input mask with out-of-range pixels removed.
    pub mask: Vec<bool>,
    /// Pixels dropped because their disparity fell outside `[0, D)`.
    pub excluded: usize,
}

/// One-hot (`hard`) or discretized Gaussian (`soft`) targets around the
/// nearest integer bin of each valid ground-truth disparity.
pub fn classification_targets<T: Scalar>(
    gt: &Tensor<T>,
    mask: &[bool],
    max_disparity: usize,
    kind: LossKind,
) -> Result<ClassTargets<T>> {
    if gt.rank() != 2 {
        return Err(Error::shape("classification_targets", "rank", "2 (H,W)", gt.rank()));
    }
    if mask.len() != gt.len() {
        return Err(Error::shape("classification_targets", "mask length", gt.len(), mask.len()));
    }
    if !kind.is_classification() {
        return Err(Error::invalid("classification_targets", "loss kind is not a classification loss"));
    }
    let pixels = gt.len();
    let mut targets = Tensor::zeros(&[max_disparity, gt.shape()[0], gt.shape()[1]]);
    let mut out_mask = mask.to_vec();
    let mut excluded = 0;
    let t = targets.data_mut();
    for p in 0..pixels {
        if !mask[p] {
            continue;
        }
        let g = gt.data()[p].as_f64();
        let bin = g.round();
        if !(bin >= 0.0 && bin < max_disparity as f64) {
            out_mask[p] = false;
            excluded += 1;
            continue;
        }
        let bin = bin as usize;
        match kind {
            LossKind::HardClassification => t[bin * pixels + p] = T::one(),
            _ => {
                let w: Vec<f64> = (0..max_disparity)
                    .map(|k| {
                        let z = (k as f64 - bin as f64) / SOFT_TARGET_SIGMA;
                        (-0.5 * z * z).exp()
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                for (k, v) in w.into_iter().enumerate() {
                    t[k * pixels + p] = T::lit(v / total);
                }
            }
        }
    }
    Ok(ClassTargets {
        targets,
        mask: out_mask,
        excluded,
    })
}

/// Classification loss value for `[D, H, W]` costs.
pub fn classification_loss<T: Scalar>(costs: &Tensor<T>, gt: &Tensor<T>, mask: &[bool], kind: LossKind) -> Result<(T, usize)> {
    if costs.rank() != 3 {
        return Err(Error::shape("classification_loss", "rank", "3 (D,H,W)", costs.rank()));
    }
    let ct = classification_targets(gt, mask, costs.shape()[0], kind)?;
    let w = mask_weights::<T>(&ct.mask, gt.len())?;
    Ok((cross_entropy(costs, &ct.targets, &w)?.0, ct.excluded))
}
