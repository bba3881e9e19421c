//! Pointwise and normalization kernels shared by the graph and direct callers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, T> {
    /// Per-channel mean and biased variance of the current input.
    Batch,
    /// Stored running statistics `(mean, variance)`.
    Running(&'a [T], &'a [T]),
}

/// Result of a batch-normalization pass, with what backward needs.
#[derive(Clone, Debug)]
pub struct BnOutput<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, "axis", format!("< {}", shape.len()), axis));
    }
    Ok(())
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax_axis", x.shape(), axis)?;
    let (outer, n, inner) = lanes(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut max = vec![T::zero(); inner];
    let mut sum = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * n * inner;
        max.copy_from_slice(&src[base..base + inner]);
        for i in 1..n {
            for (m, &v) in max.iter_mut().zip(&src[base + i * inner..base + (i + 1) * inner]) {
                *m = m.max(v);
            }
        }
        sum.fill(T::zero());
        for i in 0..n {
            let r = base + i * inner..base + (i + 1) * inner;
            for ((e, &v), (&m, s)) in out[r.clone()].iter_mut().zip(&src[r]).zip(max.iter().zip(sum.iter_mut())) {
                *e = (v - m).exp();
                *s += *e;
            }
        }
        for i in 0..n {
            for (e, &s) in out[base + i * inner..base + (i + 1) * inner].iter_mut().zip(&sum) {
                *e /= s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Per-channel batch normalization over every axis but the last.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: BnStats<'_, T>,
) -> Result<BnOutput<T>> {
    let c = x.channels();
    if x.rank() == 0 {
        return Err(Error::invalid("batch_norm", "input has no channel axis"));
    }
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.shape() != [c] {
            return Err(Error::shape("batch_norm", name, format!("[{c}]"), format!("{:?}", p.shape())));
        }
    }
    let rows = x.len() / c;
    if rows == 0 {
        return Err(Error::invalid("batch_norm", "channel has zero elements"));
    }
    let eps = T::lit(BN_EPSILON);
    let (mean, var) = match stats {
        BnStats::Batch => {
            let n = T::from_usize(rows).expect("row count");
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            (mean, var)
        }
        BnStats::Running(m, v) => {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm", "running stats", c, m.len().min(v.len())));
            }
            (m.to_vec(), v.to_vec())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut output = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            normalized.push(h);
            output.push(gamma.data()[ch] * h + beta.data()[ch]);
        }
    }
    Ok(BnOutput {
        output: Tensor::new(x.shape(), output)?,
        normalized: Tensor::new(x.shape(), normalized)?,
        mean,
        var,
        inv_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::<f32>::full(&[4], -3.0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_large_inputs() {
        let u = softmax_axis(&Tensor::<f64>::full(&[4], 0.3), 0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let big = softmax_axis(&Tensor::new(&[2], vec![1000.0f64, 0.0]).unwrap(), 0).unwrap();
        assert!(big.all_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i[0] + 2 * i[1] + 3 * i[2]) as f64 * 0.1);
        let y = softmax_axis(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..2 {
                let s: f64 = (0..3).map(|b| y.get(&[a, b, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax_axis(&x, 3).is_err());
    }

    #[test]
    fn batch_norm_degenerate_cases() {
        let x = Tensor::<f64>::from_fn(&[4, 2], |i| (i[0] as f64 - 1.5) * if i[1] == 0 { 1.0 } else { 3.0 });
        let zero = Tensor::zeros(&[2]);
        let beta = Tensor::new(&[2], vec![0.25, -0.5]).unwrap();
        let y = batch_norm(&x, &zero, &beta, BnStats::Batch).unwrap().output;
        assert!(y.data().chunks(2).all(|r| r == [0.25, -0.5]));

        let constant = Tensor::<f64>::full(&[5, 2], 7.0);
        let y = batch_norm(&constant, &Tensor::ones(&[2]), &beta, BnStats::Batch).unwrap().output;
        assert!(y.data().chunks(2).all(|r| r == [0.25, -0.5]));

        assert!(batch_norm(&x, &Tensor::ones(&[3]), &beta, BnStats::Batch).is_err());
    }

    #[test]
    fn batch_norm_standardized_input_is_fixed_point() {
        // two channels, each exactly zero-mean with unit biased variance
        let x = Tensor::new(&[4, 2], vec![1.0f64, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let out = batch_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), BnStats::Batch).unwrap();
        let tol = BN_EPSILON;
        assert!(out.output.max_abs_diff(&x).unwrap() < tol);
    }

    #[test]
    fn batch_norm_running_stats() {
        let x = Tensor::new(&[2, 1], vec![3.0f64, 5.0]).unwrap();
        let out = batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), BnStats::Running(&[1.0], &[4.0])).unwrap();
        let s = (4.0 + BN_EPSILON).sqrt();
        assert!((out.output.data()[0] - 2.0 / s).abs() < 1e-15);
        assert!((out.output.data()[1] - 4.0 / s).abs() < 1e-15);
    }
}
