mod common;

use gcnet::io::pfm::{self, Endian};
use gcnet::io::{manifest, raster};
use gcnet::model::checkpoint;
use gcnet::sample::MaskPolicy;
use gcnet::synth::{gen_synthetic_pair, Field, SynthSpec};
use gcnet::{GcNet, ModelConfig, Tensor, Variant};

#[test]
fn pfm_round_trip_is_bit_exact() {
    common::pfm_round_trip_sweep(1000, 11).unwrap();
}

#[test]
fn pfm_header_and_row_order() {
    let map = Tensor::new(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let le = pfm::encode(&map, Endian::Little).unwrap();
    assert!(le.starts_with(b"Pf\n3 2\n-1"));
    let body = &le[le.len() - 24..];
    // bottom row first
    assert_eq!(&body[..4], &4.0f32.to_le_bytes());
    let be = pfm::encode(&map, Endian::Big).unwrap();
    assert!(be.starts_with(b"Pf\n3 2\n1"));
    assert_eq!(&be[be.len() - 24..][..4], &4.0f32.to_be_bytes());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for v in [Variant::Hierarchical, Variant::SingleScale, Variant::UnaryOnly] {
        let net = GcNet::<f32>::new(ModelConfig::desk(4, 32, 32, 64).with_variant(v), 5).unwrap();
        let bytes = checkpoint::to_bytes(&net);
        let back: GcNet<f32> = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(checkpoint::to_bytes(&back), bytes);
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let net = GcNet::<f32>::new(ModelConfig::desk(4, 32, 32, 64), 5).unwrap();
    let bytes = checkpoint::to_bytes(&net);
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::from_bytes::<f32>(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn synthetic_dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen_synthetic_pair(&SynthSpec::new(16, 24, Field::TwoPlane { background: 2.0, foreground: 6.0 }).with_seed(3))
        .unwrap();
    raster::write_image(&s.left, &dir.path().join("l.pgm")).unwrap();
    raster::write_image(&s.right, &dir.path().join("r.pgm")).unwrap();
    pfm::write_map(&s.gt_with_holes(), &dir.path().join("g.pfm")).unwrap();
    std::fs::write(dir.path().join("m.txt"), "left=l.pgm\tright=r.pgm\tgt=g.pfm\n").unwrap();
    let back = manifest::load_dataset(&dir.path().join("m.txt"), MaskPolicy::NonFinite).unwrap();
    assert_eq!(back[0].mask, s.mask);
    assert!(back[0].left.max_abs_diff(&s.left).unwrap() <= 0.5 / 65535.0);
    let gt_err = back[0]
        .gt
        .data()
        .iter()
        .zip(s.gt.data())
        .zip(&s.mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gt_err < 1e-5);
}
