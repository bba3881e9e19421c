use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gcnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcnet"))
        .current_dir(dir)
        .env_remove("GCNET_OUT_DIR")
        .args(args)
        .output()
        .expect("spawn gcnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = "height=32\nwidth=64\nfield=two-plane\nbackground=3\nforeground=9\nmax_disparity=16\n";
const TRAIN: &str = "features=4\nmax_disparity=32\nheight=32\nwidth=64\niterations=3\nlog_every=1\nvalidate_every=0\n";

fn synth(dir: &Path) {
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    let o = gcnet(dir, &["synth", "--spec", "spec.txt", "--count", "2", "--out", "data", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_of_identical_maps_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = gcnet(dir.path(), &["eval", "--pred", "data/gt_0000.pfm", "--gt", "data/gt_0000.pfm", "--d1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("MAE (px)          0.000"), "{out}");
    assert!(out.contains("mae=0.000000") && out.contains("bad_1px=0.000000") && out.contains("d1=0.000000"));
}

#[test]
fn audit_prints_layer_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("full.txt"),
        "features=32\nmax_disparity=192\nheight=256\nwidth=512\nchannels=3\n",
    )
    .unwrap();
    let o = gcnet(dir.path(), &["audit", "--config", "full.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for needle in ["L19", "¼D×¼H×¼W×2F", "L37", "total_params=", "unary-only_params=", "single-scale_params="] {
        assert!(out.contains(needle), "missing {needle}:\n{out}");
    }
    assert!(stderr(&o).contains("features=32"));
}

#[test]
fn rejects_unknown_flags_and_ops() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!gcnet(dir.path(), &["audit", "--config", "x", "--bogus"]).status.success());
    let o = gcnet(dir.path(), &["gradcheck", "--op", "nope"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("known:"));
    let o = gcnet(dir.path(), &["gradcheck", "--op", "relu"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn failures_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("bad.txt"), "features=4\nmax_disparity=17\nheight=32\nwidth=64\n").unwrap();
    let o = gcnet(d, &["train", "--config", "bad.txt", "--data", "data/manifest.txt", "--out", "run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:") || stderr(&o).contains("\nerror:"));
    assert!(!d.join("run").exists());

    let o = gcnet(
        d,
        &["predict", "--left", "data/left_0000.pgm", "--right", "data/right_0000.pgm"],
    );
    assert!(!o.status.success());
    let o = gcnet(
        d,
        &[
            "predict",
            "--left",
            "data/left_0000.pgm",
            "--right",
            "data/right_0000.pgm",
            "--checkpoint",
            "missing.gcn",
            "--out",
            "p.pfm",
        ],
    );
    assert!(!o.status.success());
    assert!(!d.join("p.pfm").exists() && !d.join("p.png").exists());

    fs::write(d.join("bad_spec.txt"), "height=32\nwidth=64\nfield=constant\ndisparity=70\n").unwrap();
    let o = gcnet(d, &["synth", "--spec", "bad_spec.txt", "--out", "s"]);
    assert!(!o.status.success());
    assert!(!d.join("s").exists());
}

#[test]
fn train_predict_saliency_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("train.txt"), TRAIN).unwrap();
    for run in ["a", "b"] {
        let o = gcnet(
            d,
            &[
                "train", "--config", "train.txt", "--data", "data/manifest.txt", "--val", "data/manifest.txt",
                "--out", run, "--seed", "9", "--set", "iterations=2",
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("iterations=2"), "override not echoed");
        assert!(stderr(&o).contains("seed=9"));
        let log = fs::read_to_string(d.join(run).join("train.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
    }
    let ckpt = |r: &str| fs::read(d.join(r).join("final.gcn")).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));

    for out in ["p1.pfm", "p2.pfm"] {
        let o = gcnet(
            d,
            &[
                "predict", "--left", "data/left_0001.pgm", "--right", "data/right_0001.pgm", "--checkpoint",
                "a/final.gcn", "--out", out,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(d.join("p1.pfm")).unwrap(), fs::read(d.join("p2.pfm")).unwrap());
    assert!(d.join("p1.png").exists());

    let o = gcnet(d, &["eval", "--pred", "p1.pfm", "--gt", "data/gt_0001.pfm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("count="));

    let o = gcnet(
        d,
        &[
            "saliency", "--checkpoint", "a/final.gcn", "--left", "data/left_0001.pgm", "--right",
            "data/right_0001.pgm", "--x", "40", "--y", "16", "--out", "sal.pfm", "--stride", "16",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("sal.pfm").exists() && d.join("sal.png").exists());
}

#[test]
fn output_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.txt"), SPEC).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gcnet"))
        .current_dir(d)
        .env("GCNET_OUT_DIR", "from_env")
        .args(["synth", "--spec", "spec.txt"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("from_env/manifest.txt").exists());
}
