//! `gcnet` command-line tool: training, inference, evaluation, gradient
//! checks, architecture audit, synthetic data and saliency maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcnet::eval::{self, Occluder, DEFAULT_THRESHOLDS};
use gcnet::gradcheck;
use gcnet::io::{manifest, pfm, raster, write_atomic};
use gcnet::kv::KeyValues;
use gcnet::model::config::CONFIG_KEYS;
use gcnet::model::{self, checkpoint};
use gcnet::sample::{sparse_mask_from_gt, MaskPolicy};
use gcnet::synth::{self, SynthSpec};
use gcnet::train::{self, normalize_image, PixelRange, TrainConfig};
use gcnet::{GcNet, Tensor, Variant};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "gcnet", version, about = "Stereo disparity regression with 3-D convolutional context")]
struct Cli {
    /// Seed for every random choice; overrides config-file seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config and a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long, env = "GCNET_OUT_DIR")]
        out: PathBuf,
        /// Override a config entry, e.g. `--set iterations=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// How unlabeled pixels are encoded in ground-truth maps.
        #[arg(long, default_value = "nonfinite")]
        mask_policy: String,
    },
    /// Predict a disparity map for one rectified pair.
    Predict {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PFM; a color-mapped PNG is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted disparity map with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also report the D1 rate (>3 px and >5%).
        #[arg(long)]
        d1: bool,
        #[arg(long, default_value = "nonfinite")]
        mask_policy: String,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run one named check.
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        /// Run the whole suite (the default).
        #[arg(long)]
        all: bool,
    },
    /// Print the layer table with output shapes and parameter counts.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate synthetic pairs and a manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, env = "GCNET_OUT_DIR")]
        out: PathBuf,
    },
    /// Occlusion sensitivity of the disparity predicted at one pixel.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        /// Output PFM; a color-mapped PNG is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
    },
}

fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(KeyValues::parse(&text)?)
}

fn policy(s: &str) -> Result<MaskPolicy> {
    MaskPolicy::parse(s).ok_or_else(|| format!("unknown mask policy {s:?}; use nonfinite or nonpositive").into())
}

fn echo(title: &str, kv: &KeyValues) {
    eprintln!("# {title}");
    for (k, v) in kv.iter() {
        eprintln!("#   {k}={v}");
    }
}

fn png_beside(path: &Path) -> PathBuf {
    path.with_extension("png")
}

/// Loads an image pair as normalized network inputs.
fn load_pair(left: &Path, right: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let l = raster::read_image(left)?;
    let r = raster::read_image(right)?;
    if l.shape() != r.shape() {
        return Err(format!("left {:?} and right {:?} differ in shape", l.shape(), r.shape()).into());
    }
    Ok((
        normalize_image(&l, PixelRange::Unit)?.cast(),
        normalize_image(&r, PixelRange::Unit)?.cast(),
    ))
}

fn load_net(path: &Path, h: usize, w: usize) -> Result<GcNet<f32>> {
    let net: GcNet<f32> = checkpoint::load(path)?;
    echo("checkpoint", &net.config.to_kv());
    Ok(net.with_extents(h, w)?)
}

fn train(
    config: &Path,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    overrides: &[String],
    mask_policy: &str,
    seed: Option<u64>,
) -> Result<()> {
    let mut kv = read_kv(config)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    echo("resolved config", &cfg.to_kv());
    let policy = policy(mask_policy)?;
    let train_set = manifest::load_dataset(data, policy)?;
    let val_set = match val {
        Some(v) => manifest::load_dataset(v, policy)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    write_atomic(&out.join("config.txt"), cfg.to_kv().to_string().as_bytes())?;
    let log_path = out.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| format!("{}: {e}", log_path.display()))?);
    let mut net = GcNet::<f32>::new(cfg.model.clone(), cfg.seed)?;
    eprintln!("# parameters={}", net.param_count());
    let records = train::fit(
        &mut net,
        &train_set,
        &val_set,
        &cfg,
        Some(&train::FitOutput { dir: out.to_path_buf() }),
        &mut log,
    )?;
    log.flush()?;
    if let Some(last) = records.last() {
        println!("{last}");
    }
    println!("checkpoint={}", out.join("final.gcn").display());
    Ok(())
}

fn predict(left: &Path, right: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let (l, r) = load_pair(left, right)?;
    let net = load_net(ckpt, l.shape()[0], l.shape()[1])?;
    let d = net.predict(&l, &r)?.cast::<f64>();
    pfm::write_map(&d, out)?;
    raster::write_colormap(&d, Some((0.0, net.config.max_disparity as f64)), &png_beside(out))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, d1: bool, mask_policy: &str) -> Result<()> {
    let p = pfm::read_map(pred)?;
    let g = pfm::read_map(gt)?;
    let (mask, _) = sparse_mask_from_gt(&g, policy(mask_policy)?)?;
    let m = eval::compute_metrics(&p, &g, &mask, &DEFAULT_THRESHOLDS, d1)?;
    print!("{m}");
    print!("{}", m.to_kv());
    Ok(())
}

fn run_gradcheck(op: Option<&str>, seed: u64) -> Result<bool> {
    let cases = match op {
        Some(name) => vec![gradcheck::case(name).ok_or_else(|| {
            let names: Vec<_> = gradcheck::suite().iter().map(|c| c.name).collect();
            format!("unknown op {name:?}; known: {}", names.join(", "))
        })?],
        None => gradcheck::suite(),
    };
    let mut ok = true;
    for c in cases {
        match (c.run)(seed) {
            Ok(r) => {
                ok &= r.pass;
                println!("{r}");
            }
            Err(e) => {
                ok = false;
                println!("{:<24} FAIL  {e}", c.name);
            }
        }
    }
    Ok(ok)
}

fn audit(config: &Path) -> Result<()> {
    let mut kv = read_kv(config)?;
    // training keys may share the file
    let mut model_kv = kv.split_off(CONFIG_KEYS);
    let cfg = model::ModelConfig::from_kv(&mut model_kv)?;
    echo("resolved config", &cfg.to_kv());
    let a = model::audit(&cfg);
    print!("{a}");
    if cfg.variant == Variant::Hierarchical {
        for v in [Variant::SingleScale, Variant::UnaryOnly] {
            println!("{}_params={}", v.name(), model::param_count(&cfg.clone().with_variant(v)));
        }
    }
    Ok(())
}

fn synthesize(spec_path: &Path, count: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut kv = read_kv(spec_path)?;
    let mut spec = SynthSpec::from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if count == 0 {
        return Err("--count must be positive".into());
    }
    let ext = if spec.channels == 3 { "ppm" } else { "pgm" };
    if spec.channels != 1 && spec.channels != 3 {
        return Err(format!("channels must be 1 or 3 to write images, got {}", spec.channels).into());
    }
    eprintln!("# resolved spec: {spec:?}");
    // render everything before touching the output directory
    let samples = (0..count)
        .map(|i| synth::gen_synthetic_pair(&SynthSpec { seed: spec.seed + i as u64, ..spec.clone() }))
        .collect::<gcnet::Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let mut entries = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let e = manifest::Entry {
            left: format!("left_{i:04}.{ext}").into(),
            right: format!("right_{i:04}.{ext}").into(),
            gt: format!("gt_{i:04}.pfm").into(),
        };
        raster::write_image(&s.left, &out.join(&e.left))?;
        raster::write_image(&s.right, &out.join(&e.right))?;
        pfm::write_map(&s.gt_with_holes(), &out.join(&e.gt))?;
        entries.push(e);
    }
    write_atomic(&out.join("manifest.txt"), manifest::render(&entries).as_bytes())?;
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn saliency(ckpt: &Path, left: &Path, right: &Path, x: usize, y: usize, out: &Path, patch: usize, stride: usize) -> Result<()> {
    let (l, r) = load_pair(left, right)?;
    let net = load_net(ckpt, l.shape()[0], l.shape()[1])?;
    let map = eval::occlusion_saliency(&net, &l, &r, (y, x), Occluder { size: patch, stride })?;
    pfm::write_map(&map, out)?;
    raster::write_colormap(&map, Some((0.0, 1.0)), &png_beside(out))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            data,
            val,
            out,
            overrides,
            mask_policy,
        } => train(config, data, val.as_deref(), out, overrides, mask_policy, cli.seed),
        Command::Predict {
            left,
            right,
            checkpoint,
            out,
        } => predict(left, right, checkpoint, out),
        Command::Eval {
            pred,
            gt,
            d1,
            mask_policy,
        } => evaluate(pred, gt, *d1, mask_policy),
        Command::Gradcheck { op, all: _ } => match run_gradcheck(op.as_deref(), cli.seed.unwrap_or(7)) {
            Ok(true) => Ok(()),
            Ok(false) => Err("gradient check failed".into()),
            Err(e) => Err(e),
        },
        Command::Audit { config } => audit(config),
        Command::Synth { spec, count, out } => synthesize(spec, *count, out, cli.seed),
        Command::Saliency {
            checkpoint,
            left,
            right,
            x,
            y,
            out,
            patch,
            stride,
        } => saliency(checkpoint, left, right, *x, *y, out, *patch, *stride),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
