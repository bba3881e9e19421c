//! RMSProp training over cropped, normalized stereo samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::eval::compute_metrics;
use crate::kv::KeyValues;
use crate::model::config::CONFIG_KEYS;
use crate::model::{checkpoint, GcNet, ModelConfig, ModelParams, Mode, ParamKey};
use crate::sample::StereoSample;
use crate::tensor::{Scalar, Tensor};

/// RMSProp hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Mean-squared-gradient accumulators, one per learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub hyper: RmsProp,
    pub acc: BTreeMap<ParamKey, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, hyper: RmsProp) -> Self {
        let acc = params
            .keys()
            .into_iter()
            .map(|k| (k, Tensor::zeros(params.get(k).unwrap().shape())))
            .collect();
        OptimState { hyper, acc, step: 0 }
    }
}

/// One RMSProp update. Every gradient is checked first, so a non-finite
/// value leaves parameters and state untouched.
pub fn rmsprop_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[(ParamKey, Tensor<T>)],
    state: &mut OptimState<T>,
) -> Result<()> {
    for (key, g) in grads {
        if let Some(at) = g.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of layer {} ({key})", key.layer),
                location: format!("{at:?}"),
            });
        }
        let p = params.get(*key).ok_or_else(|| Error::Config(format!("no parameter {key}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "rmsprop_step",
                key.to_string(),
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    let RmsProp {
        learning_rate,
        decay,
        epsilon,
    } = state.hyper;
    let (lr, rho, eps) = (T::lit(learning_rate), T::lit(decay), T::lit(epsilon));
    let keep = T::one() - rho;
    for (key, g) in grads {
        let acc = state
            .acc
            .entry(*key)
            .or_insert_with(|| Tensor::zeros(g.shape()))
            .data_mut();
        let p = params.get_mut(*key).unwrap().data_mut();
        for ((p, a), &g) in p.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
            *a = rho * *a + keep * g * g;
            *p = *p - lr * g / (a.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Declared intensity range of raw pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRange {
    /// `[0, 1]`
    Unit,
    /// `[0, 255]`
    Byte,
}

impl PixelRange {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unit" | "0-1" => Ok(PixelRange::Unit),
            "byte" | "0-255" => Ok(PixelRange::Byte),
            _ => Err(Error::Config(format!("undeclared pixel range {s:?}; use unit or byte"))),
        }
    }

    fn max(self) -> f64 {
        match self {
            PixelRange::Unit => 1.0,
            PixelRange::Byte => 255.0,
        }
    }
}

/// Maps raw pixels affinely onto `[-1, 1]`; values outside the declared range are rejected.
pub fn normalize_image(raw: &Tensor<f64>, range: PixelRange) -> Result<Tensor<f64>> {
    let max = range.max();
    if let Some(i) = raw.data().iter().position(|&v| !(0.0..=max).contains(&v)) {
        return Err(Error::invalid(
            "normalize_image",
            format!("pixel {:?} = {} outside [0, {max}]", raw.unravel(i), raw.data()[i]),
        ));
    }
    Ok(raw.map(|v| 2.0 * v / max - 1.0))
}

pub fn denormalize_image(x: &Tensor<f64>, range: PixelRange) -> Tensor<f64> {
    let max = range.max();
    x.map(|v| (v + 1.0) * max / 2.0)
}

/// Cuts the same window out of both views, the ground truth and the mask.
pub fn crop(sample: &StereoSample, top: usize, left: usize, h: usize, w: usize) -> Result<StereoSample> {
    let (sh, sw, c) = (sample.height(), sample.width(), sample.channels());
    if h == 0 || w == 0 || top + h > sh || left + w > sw {
        return Err(Error::invalid(
            "crop",
            format!("{h}x{w} window at ({top}, {left}) does not fit a {sh}x{sw} sample"),
        ));
    }
    let cut = |t: &Tensor<f64>, ch: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w * ch);
        for y in top..top + h {
            let row = (y * sw + left) * ch;
            out.extend_from_slice(&t.data()[row..row + w * ch]);
        }
        out
    };
    let mut mask = Vec::with_capacity(h * w);
    for y in top..top + h {
        mask.extend_from_slice(&sample.mask[y * sw + left..y * sw + left + w]);
    }
    StereoSample::new(
        Tensor::new(&[h, w, c], cut(&sample.left, c))?,
        Tensor::new(&[h, w, c], cut(&sample.right, c))?,
        Tensor::new(&[h, w], cut(&sample.gt, 1))?,
        mask,
    )
}

/// A uniformly placed `h × w` crop; the corner comes from `rng` only.
pub fn sample_crop<R: Rng + ?Sized>(sample: &StereoSample, h: usize, w: usize, rng: &mut R) -> Result<StereoSample> {
    let (sh, sw) = (sample.height(), sample.width());
    if h > sh || w > sw {
        return Err(Error::invalid("sample_crop", format!("crop {h}x{w} larger than sample {sh}x{sw}")));
    }
    let top = rng.random_range(0..=sh - h);
    let left = rng.random_range(0..=sw - w);
    crop(sample, top, left, h, w)
}

/// Centered crop, used for validation.
pub fn center_crop(sample: &StereoSample, h: usize, w: usize) -> Result<StereoSample> {
    let (sh, sw) = (sample.height(), sample.width());
    if h > sh || w > sw {
        return Err(Error::invalid("center_crop", format!("crop {h}x{w} larger than sample {sh}x{sw}")));
    }
    crop(sample, (sh - h) / 2, (sw - w) / 2, h, w)
}

/// Model architecture plus optimization schedule. The model's height and
/// width are the crop extents.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Steps between validation passes (0 disables).
    pub validate_every: u64,
    /// Steps between checkpoints (0 writes only the final one).
    pub checkpoint_every: u64,
    /// Steps between log records.
    pub log_every: u64,
    pub optimizer: RmsProp,
    pub pixel_range: PixelRange,
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "iterations",
    "seed",
    "validate_every",
    "checkpoint_every",
    "log_every",
    "learning_rate",
    "rms_decay",
    "rms_epsilon",
    "pixel_range",
];

impl TrainConfig {
    pub fn new(model: ModelConfig, iterations: u64, seed: u64) -> Self {
        TrainConfig {
            model,
            batch_size: 1,
            iterations,
            seed,
            validate_every: 250,
            checkpoint_every: 0,
            log_every: 10,
            optimizer: RmsProp::default(),
            pixel_range: PixelRange::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        let o = self.optimizer;
        if !(o.learning_rate >= 0.0 && (0.0..1.0).contains(&o.decay) && o.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let model = ModelConfig::from_kv(kv)?;
        let d = TrainConfig::new(model, 0, 0);
        let cfg = TrainConfig {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            iterations: kv.take_or("iterations", d.iterations)?,
            seed: kv.take_or("seed", d.seed)?,
            validate_every: kv.take_or("validate_every", d.validate_every)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            log_every: kv.take_or("log_every", d.log_every)?,
            optimizer: RmsProp {
                learning_rate: kv.take_or("learning_rate", d.optimizer.learning_rate)?,
                decay: kv.take_or("rms_decay", d.optimizer.decay)?,
                epsilon: kv.take_or("rms_epsilon", d.optimizer.epsilon)?,
            },
            pixel_range: match kv.take::<String>("pixel_range")? {
                None => d.pixel_range,
                Some(s) => PixelRange::parse(&s)?,
            },
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("batch_size", self.batch_size);
        kv.set("iterations", self.iterations);
        kv.set("seed", self.seed);
        kv.set("validate_every", self.validate_every);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("log_every", self.log_every);
        kv.set("learning_rate", self.optimizer.learning_rate);
        kv.set("rms_decay", self.optimizer.decay);
        kv.set("rms_epsilon", self.optimizer.epsilon);
        kv.set(
            "pixel_range",
            match self.pixel_range {
                PixelRange::Unit => "unit",
                PixelRange::Byte => "byte",
            },
        );
        kv
    }

    /// Every key this config understands.
    pub fn keys() -> Vec<&'static str> {
        CONFIG_KEYS.iter().chain(TRAIN_KEYS).copied().collect()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub val_mae: Option<f64>,
    pub val_bad1: Option<f64>,
}

impl std::fmt::Display for LogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "step={} loss={:.6} val_mae={} val_gt1px={}",
            self.step,
            self.loss,
            opt(self.val_mae),
            opt(self.val_bad1)
        )
    }
}

/// Network inputs and targets of a sample at the model's precision.
pub fn prepare<T: Scalar>(s: &StereoSample, range: PixelRange) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((
        normalize_image(&s.left, range)?.cast(),
        normalize_image(&s.right, range)?.cast(),
        // unlabeled pixels may hold NaN; the mask keeps them out of the loss
        s.gt.map(|d| if d.is_finite() { d } else { 0.0 }).cast(),
    ))
}

/// Mean absolute error and >1 px rate over validation samples, center-cropped
/// to the model extents.
pub fn validate<T: Scalar>(net: &GcNet<T>, val: &[StereoSample], range: PixelRange) -> Result<(f64, f64)> {
    let (h, w) = (net.config.height, net.config.width);
    let (mut abs, mut bad, mut n) = (0.0, 0.0, 0usize);
    for s in val {
        let s = center_crop(s, h, w)?;
        let (l, r, gt) = prepare::<T>(&s, range)?;
        let pred = net.predict(&l, &r)?;
        let m = compute_metrics(&pred, &gt, &s.mask, &[1.0], false)?;
        abs += m.mae * m.count as f64;
        bad += m.bad[0].1 * m.count as f64;
        n += m.count;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((abs / n as f64, bad / n as f64))
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub dir: PathBuf,
}

impl FitOutput {
    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.gcn")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.gcn")
    }
}

/// Optimizer state, sampling stream and step counter of one training run.
pub struct Trainer<T> {
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    state: OptimState<T>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: &GcNet<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if net.config != cfg.model {
            return Err(Error::Config("network and training configuration disagree".into()));
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            state: OptimState::new(&net.params, cfg.optimizer),
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One RMSProp update on a batch of random crops; returns the mean loss.
    pub fn step(&mut self, net: &mut GcNet<T>, train: &[StereoSample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = &self.cfg;
        let (h, w) = (cfg.model.height, cfg.model.width);
        self.step += 1;
        let mut total: Option<Vec<(ParamKey, Tensor<T>)>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = self.rng.random_range(0..train.len());
            let s = sample_crop(&train[idx], h, w, &mut self.rng)?;
            if s.valid_count() == 0 {
                continue;
            }
            let (l, r, gt) = prepare::<T>(&s, cfg.pixel_range)?;
            let mut g = Graph::new();
            let fp = net.forward(&mut g, &l, &r, Mode::Train)?;
            let loss = net.loss(&mut g, &fp, &gt, &s.mask)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    location: format!("step {}", self.step),
                });
            }
            loss_sum += lv;
            let mut grads = g.backward(loss)?;
            let batch: Vec<(ParamKey, Tensor<T>)> = fp.params.iter().map(|&(k, id)| (k, grads.take(id))).collect();
            net.update_running_stats(&g, &fp)?;
            match &mut total {
                None => total = Some(batch),
                Some(t) => {
                    for ((_, a), (_, b)) in t.iter_mut().zip(&batch) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let Some(mut grads) = total else {
            return Err(Error::EmptyMask);
        };
        if cfg.batch_size > 1 {
            let scale = T::lit(1.0 / cfg.batch_size as f64);
            for (_, g) in &mut grads {
                *g = g.scale(scale);
            }
        }
        rmsprop_step(&mut net.params, &grads, &mut self.state)?;
        Ok(loss_sum / cfg.batch_size as f64)
    }
}

/// Trains `net` in place. Log records go to `log`; checkpoints go to `out`
/// when given. A non-finite loss or gradient halts training with an error,
/// leaving the last written checkpoint untouched.
pub fn fit<T: Scalar>(
    net: &mut GcNet<T>,
    train: &[StereoSample],
    val: &[StereoSample],
    cfg: &TrainConfig,
    out: Option<&FitOutput>,
    log: &mut dyn Write,
) -> Result<Vec<LogRecord>> {
    let mut trainer = Trainer::new(net, cfg)?;
    let mut records = Vec::new();
    for step in 1..=cfg.iterations {
        let loss = trainer.step(net, train)?;
        let validate_now = cfg.validate_every > 0 && step % cfg.validate_every == 0 && !val.is_empty();
        if step % cfg.log_every == 0 || validate_now || step == cfg.iterations {
            let (val_mae, val_bad1) = if validate_now {
                let (m, b) = validate(net, val, cfg.pixel_range)?;
                (Some(m), Some(b))
            } else {
                (None, None)
            };
            let rec = LogRecord {
                step,
                loss,
                val_mae,
                val_bad1,
            };
            writeln!(log, "{rec}").map_err(|e| Error::io("training log", e))?;
            records.push(rec);
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                checkpoint::save(net, &o.latest())?;
            }
        }
    }
    if let Some(o) = out {
        checkpoint::save(net, &o.final_checkpoint())?;
    }
    Ok(records)
}
