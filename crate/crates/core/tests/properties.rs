mod common;

use gcnet::eval::compute_metrics;
use gcnet::nn::softmax_axis;
use gcnet::stereo::{build_cost_volume, soft_argmin};
use gcnet::Tensor;
use proptest::prelude::*;

fn map(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_bounded_and_permutation_invariant(
        (gt, pred, mask, perm) in (2usize..60).prop_flat_map(|n| (
            map(n),
            map(n),
            prop::collection::vec(any::<bool>(), n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let n = gt.len();
        let t = |v: Vec<f64>| Tensor::new(&[1, n], v).unwrap();
        let th = [1.0, 3.0, 5.0];
        let m = compute_metrics(&t(pred.clone()), &t(gt.clone()), &mask, &th, true).unwrap();
        prop_assert!(m.mae <= m.rms + 1e-12);
        for &(_, r) in &m.bad {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        let p: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let g: Vec<f64> = perm.iter().map(|&i| gt[i]).collect();
        let k: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let m2 = compute_metrics(&t(p), &t(g), &k, &th, true).unwrap();
        prop_assert_eq!(&m.bad, &m2.bad);
        prop_assert_eq!(m.count, m2.count);
        prop_assert!((m.mae - m2.mae).abs() < 1e-12 && (m.rms - m2.rms).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-300.0f64..300.0, 12)) {
        let x = Tensor::new(&[3, 4], v).unwrap();
        for axis in 0..2 {
            let p = softmax_axis(&x, axis).unwrap();
            prop_assert!(p.data().iter().all(|&q| (0.0..=1.0).contains(&q)));
            let total: f64 = p.sum();
            let lanes = if axis == 0 { 4.0 } else { 3.0 };
            prop_assert!((total - lanes).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_argmin_stays_in_range_and_ignores_offsets(
        v in prop::collection::vec(-20.0f64..20.0, 24),
        c in -100.0f64..100.0,
    ) {
        let costs = Tensor::new(&[6, 2, 2], v).unwrap();
        let d = soft_argmin(&costs).unwrap();
        prop_assert!(d.data().iter().all(|&x| (0.0..=5.0).contains(&x)));
        let shifted = soft_argmin(&costs.map(|x| x + c)).unwrap();
        prop_assert!(d.max_abs_diff(&shifted).unwrap() < 1e-9);
    }

    #[test]
    fn cost_volume_shape_and_left_half(h in 1usize..5, w in 1usize..8, f in 1usize..4, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let l = common::uniform(&[h, w, f], &mut r);
        let rt = common::uniform(&[h, w, f], &mut r);
        let dmax = 2 * w;
        let v = build_cost_volume(&l, &rt, dmax).unwrap();
        prop_assert_eq!(v.shape(), &[w, h, w, 2 * f][..]);
        for d in 0..w {
            for c in 0..f {
                prop_assert_eq!(v.get(&[d, h - 1, w - 1, c]), l.get(&[h - 1, w - 1, c]));
            }
        }
    }
}
