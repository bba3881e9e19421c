mod common;

use gcnet::stereo::l1_loss;
use gcnet::synth::{gen_synthetic_pair, interpolate, Field, SynthSpec, Texture};
use gcnet::train::{fit, prepare, PixelRange, TrainConfig};
use gcnet::{Graph, LossKind, ModelConfig, GcNet, Tensor};
use gcnet::model::checkpoint;
use rand::Rng;

#[test]
fn soft_argmin_behaves_as_expectation() {
    let (direct, shift, limit, bimodal) = common::soft_argmin_checks(200, 21);
    assert!(direct <= 1e-6, "{direct:e}");
    assert!(shift <= 1e-9, "{shift:e}");
    assert!(limit <= 1e-6, "{limit:e}");
    assert!(bimodal <= 1e-9, "{bimodal:e}");
}

#[test]
fn fractional_shift_is_linear_interpolation() {
    let s = gen_synthetic_pair(&SynthSpec::new(8, 40, Field::Constant(2.5)).with_seed(2)).unwrap();
    let (l, r) = (&s.left, &s.right);
    for y in 0..8 {
        for x in 0..35 {
            // right(x) samples the scene half way between left(x+2) and left(x+3)
            let want = 0.5 * l.get(&[y, x + 2, 0]) + 0.5 * l.get(&[y, x + 3, 0]);
            assert!((r.get(&[y, x, 0]) - want).abs() < 1e-12);
        }
    }
    assert_eq!(interpolate(&[1.0, 3.0], 2, 0, 0.25), 1.5);
}

#[test]
fn integer_disparity_matches_by_block_distance() {
    let mut rng = common::rng(5);
    for seed in 0..10 {
        let bg = rng.random_range(1.0..6.0f64).round();
        let fg = bg + rng.random_range(3.0..9.0f64).round();
        let spec = SynthSpec::new(24, 64, Field::TwoPlane { background: bg, foreground: fg })
            .with_texture(if seed % 2 == 0 { Texture::RandomDot { density: 0.5 } } else { Texture::SmoothNoise })
            .with_seed(seed);
        let s = gen_synthetic_pair(&spec).unwrap();
        let (h, w) = (s.height(), s.width());
        let (mut hits, mut total) = (0, 0);
        for y in 2..h - 2 {
            for x in 20..w - 2 {
                if !s.mask[y * w + x] {
                    continue;
                }
                let sad = |d: usize| -> f64 {
                    let mut e = 0.0;
                    for dy in 0..5 {
                        for dx in 0..5 {
                            let (yy, xx) = (y + dy - 2, x + dx - 2);
                            e += (s.left.get(&[yy, xx, 0]) - s.right.get(&[yy, xx - d, 0])).abs();
                        }
                    }
                    e
                };
                let best = (0..18).min_by(|&a, &b| sad(a).total_cmp(&sad(b))).unwrap();
                total += 1;
                hits += (best as f64 == s.gt.get(&[y, x])) as usize;
            }
        }
        assert!(hits as f64 > 0.85 * total as f64, "seed {seed}: {hits}/{total}");
    }
}

#[test]
fn masked_pixels_do_not_influence_the_loss() {
    let mut rng = common::rng(8);
    let pred = common::uniform(&[4, 6], &mut rng);
    let gt = common::uniform(&[4, 6], &mut rng);
    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
    let scramble = |t: &Tensor<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = t.clone();
        for i in (0..24).step_by(3) {
            t.data_mut()[i] = rng.random_range(-100.0..100.0);
        }
        t
    };
    let base = l1_loss(&pred, &gt, &mask).unwrap();
    let grads = |p: &Tensor<f64>, g: &Tensor<f64>| {
        let mut graph = Graph::new();
        let x = graph.variable(p.clone());
        let loss = graph.l1_loss(x, g, &mask).unwrap();
        (graph.value(loss).item(), graph.backward(loss).unwrap().wrt(x))
    };
    let (v0, g0) = grads(&pred, &gt);
    assert!((v0 - base).abs() < 1e-15);
    for _ in 0..10 {
        let (p, g) = (scramble(&pred, &mut rng), scramble(&gt, &mut rng));
        assert!((l1_loss(&p, &g, &mask).unwrap() - base).abs() < 1e-15);
        let (v, gr) = grads(&p, &g);
        assert!((v - v0).abs() < 1e-15);
        for i in 0..24 {
            if mask[i] {
                assert_eq!(gr.data()[i], g0.data()[i]);
            } else {
                assert_eq!(gr.data()[i], 0.0);
            }
        }
    }
}

fn tiny_run(seed: u64, loss: LossKind) -> Vec<u8> {
    let s = gen_synthetic_pair(&SynthSpec::new(40, 80, Field::TwoPlane { background: 2.0, foreground: 7.0 }).with_seed(1))
        .unwrap();
    let cfg = ModelConfig::desk(4, 32, 32, 64).with_loss(loss);
    let mut net = GcNet::<f32>::new(cfg.clone(), seed).unwrap();
    let mut tc = TrainConfig::new(cfg, 5, seed);
    tc.batch_size = 2;
    let mut sink = Vec::new();
    fit(&mut net, &[s.clone(), s], &[], &tc, None, &mut sink).unwrap();
    checkpoint::to_bytes(&net)
}

#[test]
fn training_is_deterministic() {
    for loss in [LossKind::L1Regression, LossKind::SoftClassification] {
        assert_eq!(tiny_run(3, loss), tiny_run(3, loss));
    }
    assert_ne!(tiny_run(3, LossKind::L1Regression), tiny_run(4, LossKind::L1Regression));
}

#[test]
fn prediction_shape_and_range() {
    let s = gen_synthetic_pair(&SynthSpec::new(32, 64, Field::Constant(3.0)).with_seed(1)).unwrap();
    let net = GcNet::<f32>::new(ModelConfig::desk(4, 32, 32, 64), 1).unwrap();
    let (l, r, _) = prepare::<f32>(&s, PixelRange::Unit).unwrap();
    let d = net.predict(&l, &r).unwrap();
    assert_eq!(d.shape(), &[32, 64]);
    assert!(d.data().iter().all(|&v| (0.0..=31.0).contains(&v)));
}
