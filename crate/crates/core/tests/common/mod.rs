//! Naive-loop reference implementations and random instance generators
//! shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use gcnet::conv::{self, ConvSpec};
use gcnet::eval::{compute_metrics, Metrics};
use gcnet::stereo::build_cost_volume;
use gcnet::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Padding placed before the data on one axis under the "same" rule.
fn pad_before(n: usize, k: usize, s: usize) -> i64 {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (total / 2) as i64
}

/// Direct cross-correlation over a `[D, H, W, Cin]` volume with weights
/// `[kd, kh, kw, Cin, Cout]`.
pub fn naive_conv(x: &Tensor<f64>, k: [usize; 3], s: [usize; 3], w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, ci) = ([x.shape()[0], x.shape()[1], x.shape()[2]], x.shape()[3]);
    let co = b.len();
    let out: [usize; 3] = std::array::from_fn(|a| n[a].div_ceil(s[a]));
    let pad: [i64; 3] = std::array::from_fn(|a| pad_before(n[a], k[a], s[a]));
    Tensor::from_fn(&[out[0], out[1], out[2], co], |o| {
        let mut acc = b.get(&[o[3]]);
        for a in 0..k[0] {
            for bb in 0..k[1] {
                for c in 0..k[2] {
                    let p = [
                        (o[0] * s[0] + a) as i64 - pad[0],
                        (o[1] * s[1] + bb) as i64 - pad[1],
                        (o[2] * s[2] + c) as i64 - pad[2],
                    ];
                    if (0..3).any(|i| p[i] < 0 || p[i] >= n[i] as i64) {
                        continue;
                    }
                    for i in 0..ci {
                        acc += x.get(&[p[0] as usize, p[1] as usize, p[2] as usize, i]) * w.get(&[a, bb, c, i, o[3]]);
                    }
                }
            }
        }
        acc
    })
}

/// Scatter form of the transposed convolution: every input voxel adds its
/// weighted kernel footprint to the upsampled grid. Weights are
/// `[kd, kh, kw, Cout, Cin]`.
pub fn naive_conv_transposed(x: &Tensor<f64>, k: [usize; 3], s: [usize; 3], w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let n = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let ci = x.shape()[3];
    let co = b.len();
    let big: [usize; 3] = std::array::from_fn(|a| n[a] * s[a]);
    let pad: [i64; 3] = std::array::from_fn(|a| pad_before(big[a], k[a], s[a]));
    let mut out = Tensor::from_fn(&[big[0], big[1], big[2], co], |i| b.get(&[i[3]]));
    for z in 0..n[0] {
        for y in 0..n[1] {
            for xx in 0..n[2] {
                for a in 0..k[0] {
                    for bb in 0..k[1] {
                        for c in 0..k[2] {
                            let p = [
                                (z * s[0] + a) as i64 - pad[0],
                                (y * s[1] + bb) as i64 - pad[1],
                                (xx * s[2] + c) as i64 - pad[2],
                            ];
                            if (0..3).any(|i| p[i] < 0 || p[i] >= big[i] as i64) {
                                continue;
                            }
                            let p = [p[0] as usize, p[1] as usize, p[2] as usize];
                            for o in 0..co {
                                let mut v = out.get(&[p[0], p[1], p[2], o]);
                                for i in 0..ci {
                                    v += x.get(&[z, y, xx, i]) * w.get(&[a, bb, c, o, i]);
                                }
                                out.set(&[p[0], p[1], p[2], o], v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn naive_cost_volume(l: &Tensor<f64>, r: &Tensor<f64>, dmax: usize) -> Tensor<f64> {
    let f = l.shape()[2];
    Tensor::from_fn(&[dmax / 2, l.shape()[0], l.shape()[1], 2 * f], |i| {
        let (d, y, x, c) = (i[0], i[1], i[2], i[3]);
        if c < f {
            l.get(&[y, x, c])
        } else if x >= d {
            r.get(&[y, x - d, c - f])
        } else {
            0.0
        }
    })
}

/// Per-pixel loop computing the same statistics as [`compute_metrics`].
pub fn naive_metrics(pred: &[f64], gt: &[f64], mask: &[bool], thresholds: &[f64]) -> (Vec<f64>, f64, f64, f64, usize) {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    let err = |i: usize| (pred[i] - gt[i]).abs();
    let rates = thresholds
        .iter()
        .map(|&t| idx.iter().filter(|&&i| err(i) > t).count() as f64 / n)
        .collect();
    let mae = idx.iter().map(|&i| err(i)).sum::<f64>() / n;
    let rms = (idx.iter().map(|&i| err(i) * err(i)).sum::<f64>() / n).sqrt();
    let d1 = idx.iter().filter(|&&i| err(i) > 3.0 && err(i) > 0.05 * gt[i].abs()).count() as f64 / n;
    (rates, mae, rms, d1, idx.len())
}

/// Largest deviation scaled by `max(1, |reference|)`.
pub fn max_scaled_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Runs `n` randomized conv instances (2-D, 3-D and transposed in turn) and
/// returns the worst deviation from the naive loops.
pub fn conv_oracle_sweep(n: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let (mut e2, mut e3, mut et) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let k = [1, 3, 5][r.random_range(0..3)];
        let s = r.random_range(1..=2);
        let (ci, co) = (r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
        let x = uniform(&[h, w, ci], &mut r);
        let wt = uniform(&[k, k, ci, co], &mut r);
        let b = uniform(&[co], &mut r);
        let got = conv::conv2d(&x, &ConvSpec::conv2d(k, s, co), &wt, &b).unwrap();
        let x4 = x.clone().reshape(&[1, h, w, ci]).unwrap();
        let w5 = wt.clone().reshape(&[1, k, k, ci, co]).unwrap();
        let want = naive_conv(&x4, [1, k, k], [1, s, s], &w5, &b);
        let want = want.clone().reshape(&want.shape()[1..].to_vec()).unwrap();
        e2 = e2.max(max_scaled_diff(&got, &want));

        let k = [1, 3][r.random_range(0..2)];
        let d = r.random_range(1..=6);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let x = uniform(&[d, h, w, ci], &mut r);
        let wt = uniform(&[k, k, k, ci, co], &mut r);
        let got = conv::conv3d(&x, &ConvSpec::conv3d(k, s, co), &wt, &b).unwrap();
        e3 = e3.max(max_scaled_diff(&got, &naive_conv(&x, [k; 3], [s; 3], &wt, &b)));

        let (d, h, w) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        let x = uniform(&[d, h, w, ci], &mut r);
        let wt = uniform(&[k, k, k, co, ci], &mut r);
        let got = conv::conv3d_transposed(&x, &ConvSpec::conv3d_transposed(k, s, co), &wt, &b).unwrap();
        et = et.max(max_scaled_diff(&got, &naive_conv_transposed(&x, [k; 3], [s; 3], &wt, &b)));
    }
    (e2, e3, et)
}

pub fn cost_volume_oracle_sweep(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w, f) = (r.random_range(1..=6), r.random_range(1..=10), r.random_range(1..=4));
        let dmax = 2 * r.random_range(1..=w);
        let l = uniform(&[h, w, f], &mut r);
        let rt = uniform(&[h, w, f], &mut r);
        let got = build_cost_volume(&l, &rt, dmax).unwrap();
        worst = worst.max(max_scaled_diff(&got, &naive_cost_volume(&l, &rt, dmax)));
    }
    worst
}

pub fn metrics_oracle_sweep(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let thresholds = [0.5, 1.0, 3.0, 5.0];
    let mut worst = 0.0f64;
    for _ in 0..n {
        let len = r.random_range(1..=200);
        let gt: Vec<f64> = (0..len).map(|_| r.random_range(0.0..60.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + r.random_range(-8.0..8.0)).collect();
        let mut mask: Vec<bool> = (0..len).map(|_| r.random_bool(0.7)).collect();
        mask[r.random_range(0..len)] = true;
        let t = |v: &Vec<f64>| Tensor::new(&[1, len], v.clone()).unwrap();
        let m: Metrics = compute_metrics(&t(&pred), &t(&gt), &mask, &thresholds, true).unwrap();
        let (rates, mae, rms, d1, count) = naive_metrics(&pred, &gt, &mask, &thresholds);
        assert_eq!(m.count, count);
        for ((_, a), b) in m.bad.iter().zip(&rates) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((m.mae - mae).abs()).max((m.rms - rms).abs()).max((m.d1.unwrap() - d1).abs());
    }
    worst
}

/// Encodes and decodes `n` random maps (NaN, infinities and signed zeros
/// included) in both byte orders; returns the first mismatch.
pub fn pfm_round_trip_sweep(n: usize, seed: u64) -> Result<(), String> {
    use gcnet::io::pfm::{decode, encode, Endian};
    let mut r = rng(seed);
    let specials = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY, -0.0, 0.0, f32::MIN_POSITIVE, f32::MAX];
    for i in 0..n {
        let (h, w) = (r.random_range(1..=12), r.random_range(1..=12));
        let c = if r.random_bool(0.5) { 1 } else { 3 };
        let data: Vec<f32> = (0..h * w * c)
            .map(|_| {
                if r.random_bool(0.05) {
                    specials[r.random_range(0..specials.len())]
                } else {
                    f32::from_bits(r.random::<u32>() & 0xbfff_ffff)
                }
            })
            .collect();
        let map = Tensor::new(&[h, w, c], data).unwrap();
        let endian = if i % 2 == 0 { Endian::Little } else { Endian::Big };
        let bytes = encode(&map, endian).map_err(|e| e.to_string())?;
        let back = decode(&bytes).map_err(|e| e.to_string())?;
        let same = back.endian == endian
            && back.data.shape() == map.shape()
            && back.data.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("map {i} ({h}x{w}x{c}, {endian:?}) changed"));
        }
    }
    Ok(())
}

/// Worst deviations of the soft argmin from: the direct formula, itself
/// under a constant cost offset, the integer argmin at large cost scale, and
/// the midpoint of a symmetric two-minimum profile.
pub fn soft_argmin_checks(n: usize, seed: u64) -> (f64, f64, f64, f64) {
    use gcnet::stereo::soft_argmin;
    let mut r = rng(seed);
    let (mut direct, mut shift, mut limit, mut bimodal) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let d = r.random_range(2..=24);
        let c: Vec<f64> = (0..d).map(|_| r.random_range(-5.0..5.0)).collect();
        let costs = Tensor::new(&[d, 1, 1], c.clone()).unwrap();
        let got = soft_argmin(&costs).unwrap().item();
        let z: f64 = c.iter().map(|v| (-v).exp()).sum();
        let want: f64 = c.iter().enumerate().map(|(i, v)| i as f64 * (-v).exp() / z).sum();
        direct = direct.max((got - want).abs());
        let off = r.random_range(-500.0..500.0);
        shift = shift.max((soft_argmin(&costs.map(|v| v + off)).unwrap().item() - got).abs());

        // unique minimum with a margin of at least 0.1
        let best = r.random_range(0..d);
        let mut u = c.clone();
        u[best] = c.iter().cloned().fold(f64::INFINITY, f64::min) - 0.1;
        let u = Tensor::new(&[d, 1, 1], u).unwrap();
        limit = limit.max((soft_argmin(&u.scale(500.0)).unwrap().item() - best as f64).abs());

        // two equal minima, costs symmetric about their midpoint
        let m = r.random_range(0..d / 2 + 1);
        let gap = r.random_range(1..=(d - 1 - 2 * m.min((d - 1) / 2)).max(1));
        let (a, b) = (m, (m + gap).min(d - 1));
        let mid = (a + b) as f64 / 2.0;
        let prof: Vec<f64> = (0..d)
            .map(|i| {
                let reflected = 2.0 * mid - i as f64;
                if i == a || i == b {
                    0.0
                } else if reflected >= 0.0 && reflected <= (d - 1) as f64 {
                    3.0 + ((i as f64 - mid).abs() - (b as f64 - mid)).abs()
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let p = Tensor::new(&[d, 1, 1], prof).unwrap();
        bimodal = bimodal.max((soft_argmin(&p).unwrap().item() - mid).abs());
    }
    (direct, shift, limit, bimodal)
}
