mod common;

use common::*;
use gcnet::conv::{self, ConvSpec};
use gcnet::Tensor;
use rand::Rng;

const TOL: f64 = 1e-12;

#[test]
fn convolutions_match_naive_loops() {
    let (e2, e3, et) = conv_oracle_sweep(120, 1);
    assert!(e2 <= TOL && e3 <= TOL && et <= TOL, "conv2d {e2:e} conv3d {e3:e} transposed {et:e}");
}

#[test]
fn cost_volume_matches_naive_loop() {
    let e = cost_volume_oracle_sweep(150, 2);
    assert!(e <= TOL, "{e:e}");
}

#[test]
fn metrics_match_naive_loop() {
    let e = metrics_oracle_sweep(150, 3);
    assert!(e <= TOL, "{e:e}");
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut r = rng(4);
    for _ in 0..50 {
        let s = r.random_range(1..=2);
        let k = [1, 3][r.random_range(0..2)];
        let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
        let small = [r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4)];
        let big: Vec<usize> = small.iter().map(|n| n * s).collect();
        let x = uniform(&[big[0], big[1], big[2], ci], &mut r);
        let y = uniform(&[small[0], small[1], small[2], co], &mut r);
        let w = uniform(&[k, k, k, ci, co], &mut r);
        let fwd = conv::conv3d(&x, &ConvSpec::conv3d(k, s, co), &w, &Tensor::zeros(&[co])).unwrap();
        let back = conv::conv3d_transposed(&y, &ConvSpec::conv3d_transposed(k, s, ci), &w, &Tensor::zeros(&[ci])).unwrap();
        let (a, b) = (fwd.dot(&y).unwrap(), x.dot(&back).unwrap());
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn odd_extents_follow_same_padding() {
    let x = Tensor::<f64>::ones(&[5, 7, 1]);
    let w = Tensor::ones(&[3, 3, 1, 1]);
    let y = conv::conv2d(&x, &ConvSpec::conv2d(3, 2, 1), &w, &Tensor::zeros(&[1])).unwrap();
    assert_eq!(y.shape(), &[3, 4, 1]);
    // corners see a 2x2 window, interior 3x3
    assert_eq!(y.get(&[0, 0, 0]), 4.0);
    assert_eq!(y.get(&[1, 1, 0]), 9.0);
}
