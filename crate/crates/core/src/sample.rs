//! Stereo samples and validity masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rectified pair with (possibly sparse) ground-truth disparity of the left view.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[H, W, C]` with intensities in `[0, 1]`.
    pub left: Tensor<f64>,
    pub right: Tensor<f64>,
    /// `[H, W]`, finite wherever `mask` is set.
    pub gt: Tensor<f64>,
    /// Row-major, `true` marks a labeled pixel.
    pub mask: Vec<bool>,
}

impl StereoSample {
    pub fn new(left: Tensor<f64>, right: Tensor<f64>, gt: Tensor<f64>, mask: Vec<bool>) -> Result<Self> {
        let s = StereoSample { left, right, gt, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.gt.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.left.channels()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.left.rank() != 3 {
            return Err(Error::shape("sample", "left rank", 3, self.left.rank()));
        }
        if self.right.shape() != self.left.shape() {
            return Err(Error::shape(
                "sample",
                "right",
                format!("{:?}", self.left.shape()),
                format!("{:?}", self.right.shape()),
            ));
        }
        if self.gt.shape() != &self.left.shape()[..2] {
            return Err(Error::shape(
                "sample",
                "gt",
                format!("{:?}", &self.left.shape()[..2]),
                format!("{:?}", self.gt.shape()),
            ));
        }
        if self.mask.len() != self.gt.len() {
            return Err(Error::shape("sample", "mask length", self.gt.len(), self.mask.len()));
        }
        let w = self.width();
        for (i, (&m, &d)) in self.mask.iter().zip(self.gt.data()).enumerate() {
            if m && !d.is_finite() {
                return Err(Error::NonFinite {
                    what: "labeled ground truth".into(),
                    location: format!("row {} column {}", i / w, i % w),
                });
            }
        }
        Ok(())
    }

    /// Ground truth with unlabeled pixels set to NaN, as stored on disk.
    pub fn gt_with_holes(&self) -> Tensor<f64> {
        let data = self
            .gt
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&d, &m)| if m { d } else { f64::NAN })
            .collect();
        Tensor::new(self.gt.shape(), data).expect("same shape")
    }
}

/// How invalid pixels are encoded in a ground-truth map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// NaN or infinite values are unlabeled.
    NonFinite,
    /// Additionally, values `<= 0` are unlabeled (sparse LIDAR-style maps).
    NonPositive,
}

impl MaskPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nonfinite" | "non-finite" | "nan" => Some(MaskPolicy::NonFinite),
            "nonpositive" | "non-positive" | "zero" => Some(MaskPolicy::NonPositive),
            _ => None,
        }
    }
}

/// Validity mask of a ground-truth map and its number of labeled pixels.
/// A map without any labeled pixel is rejected.
pub fn sparse_mask_from_gt(gt: &Tensor<f64>, policy: MaskPolicy) -> Result<(Vec<bool>, usize)> {
    let mask: Vec<bool> = gt
        .data()
        .iter()
        .map(|&d| match policy {
            MaskPolicy::NonFinite => d.is_finite(),
            MaskPolicy::NonPositive => d.is_finite() && d > 0.0,
        })
        .collect();
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((mask, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_policies() {
        let gt = Tensor::new(&[2, 2], vec![1.0, f64::NAN, 0.0, 2.5]).unwrap();
        let (m, n) = sparse_mask_from_gt(&gt, MaskPolicy::NonFinite).unwrap();
        assert_eq!((m, n), (vec![true, false, true, true], 3));
        let (m, n) = sparse_mask_from_gt(&gt, MaskPolicy::NonPositive).unwrap();
        assert_eq!((m, n), (vec![true, false, false, true], 2));
        let empty = Tensor::full(&[1, 2], f64::NAN);
        assert!(matches!(sparse_mask_from_gt(&empty, MaskPolicy::NonFinite), Err(Error::EmptyMask)));
    }
}
