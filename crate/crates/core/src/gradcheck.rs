//! Central finite-difference checks of analytic gradients.
//!
//! A check rebuilds a scalar-valued graph around perturbed copies of its
//! inputs and compares `(f(x+h) - f(x-h)) / 2h` against the reverse-mode
//! gradient using the relative error `|a - n| / max(|a|, |n|, 1e-8)`.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::model::{GcNet, ModelConfig, ModelParams, Mode, ParamKey, Slot};
use crate::stereo::LossKind;
use crate::tensor::{DType, Scalar, Tensor};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Per-op tolerance in double precision.
pub const TOL_F64: f64 = 1e-4;
/// Per-op tolerance in single precision.
pub const TOL_F32: f64 = 1e-2;
/// Tolerance for the end-to-end network check.
pub const TOL_END_TO_END: f64 = 1e-3;

const REL_FLOOR: f64 = 1e-8;

/// Default tolerance for a precision.
pub fn default_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => TOL_F64,
        DType::F32 => TOL_F32,
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Input index and coordinate of the worst error.
    pub worst: Option<(usize, Vec<usize>)>,
    pub coordinates: usize,
    /// Coordinates whose probes crossed a ReLU or L1 kink and were not scored.
    pub kinks_skipped: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>4}  max_rel_error={:.3e}  tol={:.0e}  coords={}  kinks_skipped={}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.coordinates,
            self.kinks_skipped
        )?;
        if let (false, Some((i, c))) = (self.pass, &self.worst) {
            write!(f, "  worst=input{i}{c:?}")?;
        }
        Ok(())
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(dtype: DType) -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            tolerance: default_tolerance(dtype),
            sample: None,
            seed: 0,
        }
    }

    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn step(mut self, h: f64) -> Self {
        self.step = h;
        self
    }

    pub fn sample(mut self, per_input: usize, seed: u64) -> Self {
        self.sample = Some(per_input);
        self.seed = seed;
        self
    }
}

fn eval<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(T, Vec<u64>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    Ok((g.value(loss).item(), g.kink_signature()))
}

/// Checks the gradient of the scalar built by `f` with respect to every input.
pub fn grad_check<T, F>(name: &str, f: F, inputs: &[Tensor<T>], opts: &GradCheck) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite {
            what: format!("{name} loss"),
            location: "unperturbed inputs".into(),
        });
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = ids.iter().map(|&id| grads.wrt(id)).collect();
    let base = g.kink_signature();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = T::lit(opts.step);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    let mut kinks_skipped = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        // visiting order; in sampled mode, later entries replace coordinates
        // whose probes straddle a kink
        let (order, mut wanted) = match opts.sample {
            Some(k) if k < n => {
                let v = index::sample(&mut rng, n, n.min(k * 8)).into_vec();
                (v, k)
            }
            _ => ((0..n).collect(), n),
        };
        for c in order {
            if wanted == 0 {
                break;
            }
            let x0 = inputs[i].data()[c];
            work[i].data_mut()[c] = x0 + h;
            let (fp, sp) = eval(&f, &work)?;
            work[i].data_mut()[c] = x0 - h;
            let (fm, sm) = eval(&f, &work)?;
            work[i].data_mut()[c] = x0;
            let location = || format!("input {i} {:?}", inputs[i].unravel(c));
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("{name} perturbed loss"),
                    location: location(),
                });
            }
            let a = analytic[i].data()[c].as_f64();
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("{name} gradient"),
                    location: location(),
                });
            }
            if sp != base || sm != base {
                kinks_skipped += 1;
                continue;
            }
            wanted -= 1;
            // divide by the step actually representable in T
            let step = ((x0 + h) - (x0 - h)).as_f64();
            let numeric = (fp - fm).as_f64() / step;
            let rel = relative_error(a, numeric);
            coordinates += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((i, inputs[i].unravel(c)));
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        worst,
        coordinates,
        kinks_skipped,
        tolerance: opts.tolerance,
        pass: max_rel <= opts.tolerance,
    })
}

/// Weighted sum `Σ y·r` with a fixed random `r`, so every output coordinate
/// contributes a distinct gradient.
pub fn probe<T: Scalar>(g: &mut Graph<T>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type CaseFn = fn(u64) -> Result<GradCheckReport>;

/// One named check of the built-in suite.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub run: CaseFn,
}

impl fmt::Debug for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

fn conv_case(name: &str, input: &[usize], spec: ConvSpec, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = *input.last().unwrap();
    let wshape = spec.weight_shape(cin, input.len() - 1);
    let inputs = vec![
        uniform(input, -1.0, 1.0, &mut rng),
        uniform(&wshape, -1.0, 1.0, &mut rng),
        uniform(&[spec.out_channels], -1.0, 1.0, &mut rng),
    ];
    grad_check(
        name,
        |g, x| {
            let y = g.conv(x[0], x[1], x[2], &spec)?;
            probe(g, y, seed)
        },
        &inputs,
        &GradCheck::new(DType::F64),
    )
}

fn unary_case(
    name: &str,
    x: Tensor<f64>,
    seed: u64,
    op: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    grad_check(
        name,
        |g, ids| {
            let y = op(g, ids[0])?;
            probe(g, y, seed)
        },
        &[x],
        &GradCheck::new(DType::F64),
    )
}

fn case_conv2d(seed: u64) -> Result<GradCheckReport> {
    conv_case("conv2d", &[5, 6, 2], ConvSpec::conv2d(3, 1, 3), seed)
}

fn case_conv2d_stride2(seed: u64) -> Result<GradCheckReport> {
    conv_case("conv2d_stride2", &[7, 6, 2], ConvSpec::conv2d(5, 2, 2), seed)
}

fn case_conv3d(seed: u64) -> Result<GradCheckReport> {
    conv_case("conv3d", &[3, 4, 4, 2], ConvSpec::conv3d(3, 1, 2), seed)
}

fn case_conv3d_stride2(seed: u64) -> Result<GradCheckReport> {
    conv_case("conv3d_stride2", &[4, 5, 4, 2], ConvSpec::conv3d(3, 2, 3), seed)
}

fn case_conv3d_transposed(seed: u64) -> Result<GradCheckReport> {
    conv_case("conv3d_transposed", &[2, 3, 2, 3], ConvSpec::conv3d_transposed(3, 2, 2), seed)
}

fn bn_case(name: &str, seed: u64, running: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        uniform(&[3, 4, 3], -2.0, 2.0, &mut rng),
        uniform(&[3], 0.5, 1.5, &mut rng),
        uniform(&[3], -0.5, 0.5, &mut rng),
    ];
    let mean = [0.1, -0.2, 0.3];
    let var = [0.8, 1.2, 0.5];
    grad_check(
        name,
        |g, x| {
            let stats = running.then_some((&mean[..], &var[..]));
            let y = g.batch_norm(x[0], x[1], x[2], stats)?;
            probe(g, y, seed)
        },
        &inputs,
        &GradCheck::new(DType::F64),
    )
}

fn case_batch_norm_train(seed: u64) -> Result<GradCheckReport> {
    bn_case("batch_norm_train", seed, false)
}

fn case_batch_norm_eval(seed: u64) -> Result<GradCheckReport> {
    bn_case("batch_norm_eval", seed, true)
}

fn case_relu(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("relu", away_from_zero(&[4, 5], &mut rng), seed, |g, x| Ok(g.relu(x)))
}

fn binary_case(name: &str, seed: u64, mul: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![uniform(&[3, 4], -1.0, 1.0, &mut rng), uniform(&[3, 4], -1.0, 1.0, &mut rng)];
    grad_check(
        name,
        |g, x| {
            let y = if mul { g.mul(x[0], x[1])? } else { g.add(x[0], x[1])? };
            probe(g, y, seed)
        },
        &inputs,
        &GradCheck::new(DType::F64),
    )
}

fn case_add(seed: u64) -> Result<GradCheckReport> {
    binary_case("add", seed, false)
}

fn case_mul(seed: u64) -> Result<GradCheckReport> {
    binary_case("mul", seed, true)
}

fn case_scale(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("scale", uniform(&[6], -1.0, 1.0, &mut rng), seed, |g, x| Ok(g.scale(x, -1.75)))
}

fn case_sum(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("sum", uniform(&[2, 3, 2], -1.0, 1.0, &mut rng), seed, |g, x| Ok(g.sum(x)))
}

fn case_reshape(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("reshape", uniform(&[2, 3, 2], -1.0, 1.0, &mut rng), seed, |g, x| {
        g.reshape(x, &[3, 4])
    })
}

fn case_softmax(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("softmax_axis", uniform(&[5, 3, 2], -2.0, 2.0, &mut rng), seed, |g, x| {
        g.softmax(x, 1)
    })
}

fn case_expectation(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("index_expectation", uniform(&[6, 3, 2], 0.0, 1.0, &mut rng), seed, |g, x| {
        g.expectation(x, 0)
    })
}

fn case_soft_argmin(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("soft_argmin", uniform(&[8, 3, 4], -2.0, 2.0, &mut rng), seed, |g, x| {
        let n = g.scale(x, -1.0);
        let p = g.softmax(n, 0)?;
        g.expectation(p, 0)
    })
}

fn case_cost_volume(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![uniform(&[3, 5, 2], -1.0, 1.0, &mut rng), uniform(&[3, 5, 2], -1.0, 1.0, &mut rng)];
    grad_check(
        "cost_volume",
        |g, x| {
            let v = g.cost_volume(x[0], x[1], 8)?;
            probe(g, v, seed)
        },
        &inputs,
        &GradCheck::new(DType::F64),
    )
}

fn case_upsample2(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unary_case("upsample2", uniform(&[3, 4, 2], -1.0, 1.0, &mut rng), seed, |g, x| {
        let y = g.upsample2(x, 0)?;
        g.upsample2(y, 1)
    })
}

fn case_l1_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = uniform(&[4, 5], 0.0, 8.0, &mut rng);
    // keep |pred - gt| away from the kink at zero
    let signs: Vec<f64> = (0..20).map(|_| if rng.random_bool(0.5) { 0.5 } else { -0.5 }).collect();
    let gt = pred.zip_map(&Tensor::new(&[4, 5], signs)?, |p, s| p + s)?;
    let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
    grad_check(
        "l1_loss",
        |g, x| g.l1_loss(x[0], &gt, &mask),
        &[pred.clone()],
        &GradCheck::new(DType::F64),
    )
}

fn ce_case(name: &str, seed: u64, kind: LossKind) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let costs = uniform(&[8, 3, 4], -2.0, 2.0, &mut rng);
    let gt = uniform(&[3, 4], 0.0, 7.0, &mut rng);
    let mask: Vec<bool> = (0..12).map(|i| i != 5).collect();
    let ct = crate::stereo::classification_targets(&gt, &mask, 8, kind)?;
    grad_check(
        name,
        |g, x| g.cross_entropy(x[0], &ct.targets, &ct.mask),
        &[costs.clone()],
        &GradCheck::new(DType::F64),
    )
}

fn case_ce_hard(seed: u64) -> Result<GradCheckReport> {
    ce_case("cross_entropy_hard", seed, LossKind::HardClassification)
}

fn case_ce_soft(seed: u64) -> Result<GradCheckReport> {
    ce_case("cross_entropy_soft", seed, LossKind::SoftClassification)
}

/// Whole network at `F = 4`, 32 disparities, 64×64 gray input; the loss is a
/// random projection of the predicted disparity map and one coordinate of
/// each parameter tensor is probed. The coarsest level then still holds four
/// positions per channel, so its batch statistics are not degenerate.
fn case_end_to_end(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk(4, 32, 64, 64);
    let mut params = ModelParams::<f64>::init(&cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    // random scale and shift keep ReLU inputs off the kink at zero
    for l in params.layers.values_mut() {
        if let Some(bn) = &mut l.bn {
            bn.gamma = uniform(bn.gamma.shape(), 0.5, 1.5, &mut rng);
            bn.beta = uniform(bn.beta.shape(), -0.5, 0.5, &mut rng);
        }
    }
    // Biases feeding a training-mode batch norm, and the final bias under
    // the shift-invariant softmax, have an exactly zero gradient that a
    // relative metric cannot score; leave them fixed.
    let keys: Vec<ParamKey> = params
        .keys()
        .into_iter()
        .filter(|k| k.slot != Slot::Bias || (k.layer != 37 && params.layer(k.layer).is_ok_and(|l| l.bn.is_none())))
        .collect();
    let inputs: Vec<Tensor<f64>> = keys.iter().map(|&k| params.get(k).unwrap().clone()).collect();
    let left = uniform(&[64, 64, 1], -1.0, 1.0, &mut rng);
    let right = uniform(&[64, 64, 1], -1.0, 1.0, &mut rng);
    let net = GcNet::from_params(cfg, params)?;
    grad_check(
        "end_to_end",
        |g, ids| {
            let nodes: Vec<_> = keys.iter().copied().zip(ids.iter().copied()).collect();
            let fp = net.forward_with(g, &left, &right, Mode::Train, &nodes)?;
            probe(g, fp.disparity, seed)
        },
        &inputs,
        &GradCheck::new(DType::F64).tolerance(TOL_END_TO_END).sample(1, seed),
    )
}

/// Every differentiable op plus the end-to-end network.
pub fn suite() -> Vec<GradCase> {
    vec![
        GradCase { name: "conv2d", run: case_conv2d },
        GradCase { name: "conv2d_stride2", run: case_conv2d_stride2 },
        GradCase { name: "conv3d", run: case_conv3d },
        GradCase { name: "conv3d_stride2", run: case_conv3d_stride2 },
        GradCase { name: "conv3d_transposed", run: case_conv3d_transposed },
        GradCase { name: "batch_norm_train", run: case_batch_norm_train },
        GradCase { name: "batch_norm_eval", run: case_batch_norm_eval },
        GradCase { name: "relu", run: case_relu },
        GradCase { name: "add", run: case_add },
        GradCase { name: "mul", run: case_mul },
        GradCase { name: "scale", run: case_scale },
        GradCase { name: "sum", run: case_sum },
        GradCase { name: "reshape", run: case_reshape },
        GradCase { name: "softmax_axis", run: case_softmax },
        GradCase { name: "index_expectation", run: case_expectation },
        GradCase { name: "soft_argmin", run: case_soft_argmin },
        GradCase { name: "cost_volume", run: case_cost_volume },
        GradCase { name: "upsample2", run: case_upsample2 },
        GradCase { name: "l1_loss", run: case_l1_loss },
        GradCase { name: "cross_entropy_hard", run: case_ce_hard },
        GradCase { name: "cross_entropy_soft", run: case_ce_soft },
        GradCase { name: "end_to_end", run: case_end_to_end },
    ]
}

pub fn case(name: &str) -> Option<GradCase> {
    suite().into_iter().find(|c| c.name == name)
}
