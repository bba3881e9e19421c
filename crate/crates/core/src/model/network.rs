//! Graph construction for the full stereo network and its ablations.

use std::collections::BTreeMap;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::stereo::{self, LossKind};
use crate::tensor::{Scalar, Tensor};

use super::config::{ModelConfig, Variant};
use super::layers::{layer_table, LayerSpec, RESIDUAL_BLOCKS, UNARY_HEAD};
use super::params::{ModelParams, ParamKey, Slot};

/// Training mode uses batch statistics and tracks parameter gradients;
/// evaluation mode uses running statistics and treats parameters as constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Records layers of one model instance onto a graph, registering each
/// parameter tensor once so both unary towers share the same nodes.
pub struct Builder<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    cfg: &'a ModelConfig,
    params: &'a ModelParams<T>,
    specs: BTreeMap<u8, LayerSpec>,
    mode: Mode,
    param_nodes: BTreeMap<ParamKey, NodeId>,
    batch_norms: Vec<(u8, NodeId)>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, cfg: &'a ModelConfig, params: &'a ModelParams<T>, mode: Mode) -> Self {
        let specs = layer_table(cfg).into_iter().map(|s| (s.id, s)).collect();
        Builder {
            graph,
            cfg,
            params,
            specs,
            mode,
            param_nodes: BTreeMap::new(),
            batch_norms: Vec::new(),
        }
    }

    fn param(&mut self, key: ParamKey) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(&key) {
            return Ok(id);
        }
        let t = self
            .params
            .get(key)
            .ok_or_else(|| Error::Config(format!("parameter {key} missing")))?
            .clone();
        let id = match self.mode {
            Mode::Train => self.graph.variable(t),
            Mode::Eval => self.graph.constant(t),
        };
        self.param_nodes.insert(key, id);
        Ok(id)
    }

    /// Convolution, then batch norm if the layer has it, then optional ReLU.
    pub fn layer(&mut self, id: u8, x: NodeId, relu: bool) -> Result<NodeId> {
        let spec = self
            .specs
            .get(&id)
            .ok_or_else(|| Error::Config(format!("layer {id} not part of the {} variant", self.cfg.variant.name())))?
            .clone();
        let w = self.param(ParamKey { layer: id, slot: Slot::Weight })?;
        let b = self.param(ParamKey { layer: id, slot: Slot::Bias })?;
        let mut y = self.graph.conv(x, w, b, &spec.conv)?;
        if spec.batch_norm {
            let gamma = self.param(ParamKey { layer: id, slot: Slot::Gamma })?;
            let beta = self.param(ParamKey { layer: id, slot: Slot::Beta })?;
            let bn = self.params.layer(id)?.bn.as_ref().expect("batch norm params");
            y = match self.mode {
                Mode::Train => self.graph.batch_norm(y, gamma, beta, None)?,
                Mode::Eval => self.graph.batch_norm(
                    y,
                    gamma,
                    beta,
                    Some((bn.running_mean.data(), bn.running_var.data())),
                )?,
            };
            if self.mode == Mode::Train {
                self.batch_norms.push((id, y));
            }
        }
        if relu {
            y = self.graph.relu(y);
        }
        Ok(y)
    }

    /// Shared 2-D feature tower: `[H, W, C]` → `[H/2, W/2, F]`.
    pub fn unary_tower(&mut self, image: NodeId) -> Result<NodeId> {
        let shape = self.graph.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] % 2 != 0 || shape[1] % 2 != 0 {
            return Err(Error::shape("unary_tower", "image extents", "[even H, even W, C]", format!("{shape:?}")));
        }
        let mut x = self.layer(1, image, true)?;
        for block in 0..RESIDUAL_BLOCKS {
            let first = 2 + 2 * block;
            let a = self.layer(first, x, true)?;
            let b = self.layer(first + 1, a, false)?;
            x = self.graph.add(b, x)?;
        }
        self.layer(18, x, false)
    }

    /// Cost volume `[D/2, H/2, W/2, 2F]` → costs `[D, H, W]` for the configured variant.
    pub fn regularize(&mut self, volume: NodeId) -> Result<NodeId> {
        let vshape = self.graph.value(volume).shape().to_vec();
        let m = self.cfg.variant.extent_multiple() / 2;
        if vshape.len() != 4 || vshape[..3].iter().any(|&e| e % m != 0) {
            return Err(Error::shape(
                "regularize",
                "volume extents",
                format!("multiples of {m}"),
                format!("{vshape:?}"),
            ));
        }
        let out = match self.cfg.variant {
            Variant::Hierarchical => {
                let l19 = self.layer(19, volume, true)?;
                let l20 = self.layer(20, l19, true)?;
                let l21 = self.layer(21, volume, true)?;
                let l22 = self.layer(22, l21, true)?;
                let l23 = self.layer(23, l22, true)?;
                let l24 = self.layer(24, l21, true)?;
                let l25 = self.layer(25, l24, true)?;
                let l26 = self.layer(26, l25, true)?;
                let l27 = self.layer(27, l24, true)?;
                let l28 = self.layer(28, l27, true)?;
                let l29 = self.layer(29, l28, true)?;
                let l30 = self.layer(30, l27, true)?;
                let l31 = self.layer(31, l30, true)?;
                let l32 = self.layer(32, l31, true)?;
                let mut x = l32;
                for (id, skip) in [(33, l29), (34, l26), (35, l23), (36, l20)] {
                    let up = self.layer(id, x, true)?;
                    x = self.graph.add(up, skip)?;
                }
                self.layer(37, x, false)?
            }
            Variant::SingleScale => {
                let l19 = self.layer(19, volume, true)?;
                let l20 = self.layer(20, l19, true)?;
                self.layer(37, l20, false)?
            }
            Variant::UnaryOnly => {
                let mut x = self.layer(UNARY_HEAD, volume, false)?;
                for axis in 0..3 {
                    x = self.graph.upsample2(x, axis)?;
                }
                x
            }
        };
        let s = self.graph.value(out).shape().to_vec();
        self.graph.reshape(out, &s[..3])
    }

    /// Soft argmin over the disparity axis of `[D, H, W]` costs.
    pub fn soft_argmin(&mut self, costs: NodeId) -> Result<NodeId> {
        let neg = self.graph.scale(costs, -T::one());
        let p = self.graph.softmax(neg, 0)?;
        self.graph.expectation(p, 0)
    }
}

/// Node handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub left_features: NodeId,
    pub right_features: NodeId,
    pub volume: NodeId,
    /// Regularized costs `[D, H, W]`.
    pub costs: NodeId,
    /// Soft-argmin disparity `[H, W]`.
    pub disparity: NodeId,
    /// Learnable tensors registered on the graph.
    pub params: Vec<(ParamKey, NodeId)>,
    /// Batch-norm nodes (training mode) whose statistics update running stats.
    pub batch_norms: Vec<(u8, NodeId)>,
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GcNet<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> GcNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(GcNet { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        for spec in layer_table(&config) {
            let l = params.layer(spec.id)?;
            if l.weight.shape() != spec.weight_shape().as_slice() || l.bn.is_some() != spec.batch_norm {
                return Err(Error::Config(format!("parameters of {} do not match the configuration", spec.name())));
            }
        }
        Ok(GcNet { config, params })
    }

    /// Same parameters, configured for inputs of a different size.
    pub fn with_extents(&self, height: usize, width: usize) -> Result<Self> {
        let config = ModelConfig {
            height,
            width,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(GcNet {
            config,
            params: self.params.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records the forward pass for normalized `[H, W, C]` images.
    pub fn forward(&self, g: &mut Graph<T>, left: &Tensor<T>, right: &Tensor<T>, mode: Mode) -> Result<ForwardPass> {
        self.forward_with(g, left, right, mode, &[])
    }

    /// Like [`GcNet::forward`], but parameters listed in `existing` are read
    /// from nodes already on the graph instead of from `self.params`.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        left: &Tensor<T>,
        right: &Tensor<T>,
        mode: Mode,
        existing: &[(ParamKey, NodeId)],
    ) -> Result<ForwardPass> {
        self.config.check_image(left.shape())?;
        self.config.check_image(right.shape())?;
        let mut b = Builder::new(g, &self.config, &self.params, mode);
        b.param_nodes.extend(existing.iter().copied());
        let l = b.graph.constant(left.clone());
        let r = b.graph.constant(right.clone());
        let left_features = b.unary_tower(l)?;
        let right_features = b.unary_tower(r)?;
        let volume = b.graph.cost_volume(left_features, right_features, self.config.max_disparity)?;
        let costs = b.regularize(volume)?;
        let disparity = b.soft_argmin(costs)?;
        Ok(ForwardPass {
            left_features,
            right_features,
            volume,
            costs,
            disparity,
            params: b.param_nodes.into_iter().collect(),
            batch_norms: b.batch_norms,
        })
    }

    /// Adds the configured training loss against `gt` over `mask`.
    pub fn loss(&self, g: &mut Graph<T>, fp: &ForwardPass, gt: &Tensor<T>, mask: &[bool]) -> Result<NodeId> {
        match self.config.loss {
            LossKind::L1Regression => g.l1_loss(fp.disparity, gt, mask),
            kind => {
                let ct = stereo::classification_targets(gt, mask, self.config.max_disparity, kind)?;
                g.cross_entropy(fp.costs, &ct.targets, &ct.mask)
            }
        }
    }

    /// Folds the batch statistics seen in a training pass into running stats.
    pub fn update_running_stats(&mut self, g: &Graph<T>, fp: &ForwardPass) -> Result<()> {
        for &(layer, node) in &fp.batch_norms {
            if let Some((mean, var)) = g.batch_stats(node) {
                self.params.update_running_stats(layer, mean, var)?;
            }
        }
        Ok(())
    }

    /// Disparity map `[H, W]` in inference mode. Regression models use the
    /// soft argmin; classification models take the per-pixel argmin bin.
    pub fn predict(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let fp = self.forward(&mut g, left, right, Mode::Eval)?;
        if self.config.loss.is_classification() {
            stereo::hard_argmin(g.value(fp.costs))
        } else {
            Ok(g.value(fp.disparity).clone())
        }
    }
}
