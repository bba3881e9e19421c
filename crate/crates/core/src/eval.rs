//! Error metrics over labeled pixels and the occlusion saliency probe.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::GcNet;
use crate::tensor::{Scalar, Tensor};

/// Bad-pixel thresholds reported by default, in pixels.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `(threshold, fraction of labeled pixels with |error| > threshold)`.
    pub bad: Vec<(f64, f64)>,
    pub mae: f64,
    pub rms: f64,
    /// Fraction with `|error| > 3` and `|error| > 5%` of the true disparity.
    pub d1: Option<f64>,
    pub count: usize,
}

impl Metrics {
    pub fn bad_rate(&self, threshold: f64) -> Option<f64> {
        self.bad.iter().find(|(t, _)| *t == threshold).map(|&(_, r)| r)
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!("count={}\nmae={:.6}\nrms={:.6}\n", self.count, self.mae, self.rms);
        for (t, r) in &self.bad {
            s += &format!("bad_{t}px={r:.6}\n");
        }
        if let Some(d1) = self.d1 {
            s += &format!("d1={d1:.6}\n");
        }
        s
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10}", "metric", "value")?;
        writeln!(f, "{:<12} {:>10}", "pixels", self.count)?;
        for (t, r) in &self.bad {
            writeln!(f, "{:<12} {:>9.3}%", format!(">{t} px"), 100.0 * r)?;
        }
        if let Some(d1) = self.d1 {
            writeln!(f, "{:<12} {:>9.3}%", "D1", 100.0 * d1)?;
        }
        writeln!(f, "{:<12} {:>10.3}", "MAE (px)", self.mae)?;
        writeln!(f, "{:<12} {:>10.3}", "RMS (px)", self.rms)
    }
}

/// Error statistics of `pred` against `gt` over pixels where `mask` is set.
pub fn compute_metrics<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &[bool],
    thresholds: &[f64],
    d1: bool,
) -> Result<Metrics> {
    pred.expect_same_shape("compute_metrics", gt)?;
    if mask.len() != gt.len() {
        return Err(Error::shape("compute_metrics", "mask length", gt.len(), mask.len()));
    }
    let mut bad = vec![0usize; thresholds.len()];
    let (mut abs, mut sq, mut d1_bad, mut n) = (0.0, 0.0, 0usize, 0usize);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask) {
        if !m {
            continue;
        }
        let e = (p.as_f64() - g.as_f64()).abs();
        n += 1;
        abs += e;
        sq += e * e;
        for (b, &t) in bad.iter_mut().zip(thresholds) {
            if e > t {
                *b += 1;
            }
        }
        if e > 3.0 && e > 0.05 * g.as_f64().abs() {
            d1_bad += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(Metrics {
        bad: thresholds.iter().zip(&bad).map(|(&t, &b)| (t, b as f64 / nf)).collect(),
        mae: abs / nf,
        rms: (sq / nf).sqrt(),
        d1: d1.then(|| d1_bad as f64 / nf),
        count: n,
    })
}

/// Occluder placement for [`occlusion_saliency`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occluder {
    /// Side of the square patch in pixels.
    pub size: usize,
    /// Spacing of patch centers.
    pub stride: usize,
}

impl Default for Occluder {
    fn default() -> Self {
        Occluder { size: 16, stride: 8 }
    }
}

/// Covered `[start, end)` range of a patch centered at `c`, clipped to `[0, n)`.
fn span(c: i64, size: usize, n: usize) -> Option<(usize, usize)> {
    let lo = c - size as i64 / 2;
    let hi = lo + size as i64;
    let (a, b) = (lo.max(0), hi.min(n as i64));
    (a < b).then_some((a as usize, b as usize))
}

fn gray_out<T: Scalar>(img: &mut Tensor<T>, rows: (usize, usize), cols: (usize, usize)) {
    let (w, c) = (img.shape()[1], img.shape()[2]);
    let data = img.data_mut();
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            // mid-gray in the normalized [-1, 1] range
            data[(y * w + x) * c..(y * w + x + 1) * c].fill(T::zero());
        }
    }
}

/// Change in predicted disparity at `point` when a gray square centered at
/// `center` covers the left image and the same square shifted left by
/// `round(base)` covers the right one. Exactly zero when both squares miss
/// their images.
pub fn occluder_response<T: Scalar>(
    net: &GcNet<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    point: (usize, usize),
    base: T,
    center: (i64, i64),
    size: usize,
) -> Result<f64> {
    let (h, w) = (left.shape()[0], left.shape()[1]);
    let shift = base.as_f64().round() as i64;
    let rows = span(center.0, size, h);
    let lcols = span(center.1, size, w);
    let rcols = span(center.1 - shift, size, w);
    let Some(rows) = rows else { return Ok(0.0) };
    if lcols.is_none() && rcols.is_none() {
        return Ok(0.0);
    }
    let mut l = left.clone();
    let mut r = right.clone();
    if let Some(c) = lcols {
        gray_out(&mut l, rows, c);
    }
    if let Some(c) = rcols {
        gray_out(&mut r, rows, c);
    }
    let d = net.predict(&l, &r)?;
    Ok((d.get(&[point.0, point.1]) - base).as_f64().abs())
}

/// Sensitivity of the disparity at `point = (row, col)` to occluding each
/// region of the input pair, normalized to `[0, 1]`. Images are the
/// normalized network inputs.
pub fn occlusion_saliency<T: Scalar>(
    net: &GcNet<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    point: (usize, usize),
    occluder: Occluder,
) -> Result<Tensor<f64>> {
    let (h, w) = (left.shape()[0], left.shape()[1]);
    if point.0 >= h || point.1 >= w {
        return Err(Error::invalid("occlusion_saliency", format!("point {point:?} outside {h}x{w}")));
    }
    if occluder.size == 0 || occluder.stride == 0 {
        return Err(Error::invalid("occlusion_saliency", "occluder size and stride must be positive"));
    }
    let base = net.predict(left, right)?.get(&[point.0, point.1]);
    let mut acc = vec![0.0; h * w];
    let mut hits = vec![0u32; h * w];
    for cy in (0..h).step_by(occluder.stride) {
        for cx in (0..w).step_by(occluder.stride) {
            let center = (cy as i64, cx as i64);
            let v = occluder_response(net, left, right, point, base, center, occluder.size)?;
            let (Some(rows), Some(cols)) = (span(center.0, occluder.size, h), span(center.1, occluder.size, w)) else {
                continue;
            };
            for y in rows.0..rows.1 {
                for x in cols.0..cols.1 {
                    acc[y * w + x] += v;
                    hits[y * w + x] += 1;
                }
            }
        }
    }
    for (a, &n) in acc.iter_mut().zip(&hits) {
        if n > 0 {
            *a /= n as f64;
        }
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|a| *a /= max);
    }
    Tensor::new(&[h, w], acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let gt = Tensor::from_fn(&[2, 4], |i| (i[0] * 4 + i[1]) as f64 + 10.0);
        let all = vec![true; 8];
        let m = compute_metrics(&gt, &gt, &all, &DEFAULT_THRESHOLDS, false).unwrap();
        assert_eq!((m.mae, m.rms, m.bad_rate(1.0)), (0.0, 0.0, Some(0.0)));

        let plus4 = gt.map(|v| v + 4.0);
        let m = compute_metrics(&plus4, &gt, &all, &DEFAULT_THRESHOLDS, false).unwrap();
        assert_eq!((m.bad_rate(3.0), m.bad_rate(5.0), m.mae, m.rms), (Some(1.0), Some(0.0), 4.0, 4.0));

        let half = Tensor::from_fn(&[2, 4], |i| gt.get(i) + if i[1] % 2 == 0 { 0.0 } else { 2.0 });
        let m = compute_metrics(&half, &gt, &all, &DEFAULT_THRESHOLDS, false).unwrap();
        assert_eq!((m.bad_rate(1.0), m.mae), (Some(0.5), 1.0));
        assert!((m.rms - 2f64.sqrt()).abs() < 1e-15);

        assert!(matches!(
            compute_metrics(&gt, &gt, &[false; 8], &DEFAULT_THRESHOLDS, false),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn d1_needs_both_conditions() {
        let gt = Tensor::new(&[1, 2], vec![100.0, 10.0]).unwrap();
        let pred = Tensor::new(&[1, 2], vec![104.0, 14.0]).unwrap();
        let m = compute_metrics(&pred, &gt, &[true, true], &DEFAULT_THRESHOLDS, true).unwrap();
        assert_eq!(m.d1, Some(0.5));
    }
}
