use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::BN_MOMENTUM;
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;
use super::layers::{layer_table, LayerSpec};

/// Learned scale/shift plus running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BnParams<T>>,
}

/// Which learnable tensor of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Weight => "weight",
            Slot::Bias => "bias",
            Slot::Gamma => "gamma",
            Slot::Beta => "beta",
        }
    }
}

/// Address of one learnable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: u8,
    pub slot: Slot,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{:02}.{}", self.layer, self.slot.name())
    }
}

/// All learnable and running-statistic tensors, keyed by layer id.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layers: BTreeMap<u8, LayerParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled normal weights (gain 2), zero biases, unit BN scale.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_table(cfg)
            .iter()
            .map(|spec| (spec.id, LayerParams::init(spec, &mut rng)))
            .collect();
        ModelParams { layers }
    }

    /// Every parameter tensor set to zero and BN scale left at one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(cfg, 0);
        for layer in p.layers.values_mut() {
            layer.weight = Tensor::zeros(layer.weight.shape());
        }
        p
    }

    pub fn layer(&self, id: u8) -> Result<&LayerParams<T>> {
        self.layers
            .get(&id)
            .ok_or_else(|| Error::Config(format!("parameters for layer {id} missing")))
    }

    /// Learnable tensors in a fixed order.
    pub fn keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (&layer, p) in &self.layers {
            keys.push(ParamKey { layer, slot: Slot::Weight });
            keys.push(ParamKey { layer, slot: Slot::Bias });
            if p.bn.is_some() {
                keys.push(ParamKey { layer, slot: Slot::Gamma });
                keys.push(ParamKey { layer, slot: Slot::Beta });
            }
        }
        keys
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor<T>> {
        let l = self.layers.get(&key.layer)?;
        match key.slot {
            Slot::Weight => Some(&l.weight),
            Slot::Bias => Some(&l.bias),
            Slot::Gamma => l.bn.as_ref().map(|b| &b.gamma),
            Slot::Beta => l.bn.as_ref().map(|b| &b.beta),
        }
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        let l = self.layers.get_mut(&key.layer)?;
        match key.slot {
            Slot::Weight => Some(&mut l.weight),
            Slot::Bias => Some(&mut l.bias),
            Slot::Gamma => l.bn.as_mut().map(|b| &mut b.gamma),
            Slot::Beta => l.bn.as_mut().map(|b| &mut b.beta),
        }
    }

    /// Learnable scalar count.
    pub fn count(&self) -> usize {
        self.keys().iter().filter_map(|&k| self.get(k)).map(Tensor::len).sum()
    }

    /// Blends batch statistics into a layer's running statistics.
    pub fn update_running_stats(&mut self, layer: u8, mean: &[T], var: &[T]) -> Result<()> {
        let bn = self
            .layers
            .get_mut(&layer)
            .and_then(|l| l.bn.as_mut())
            .ok_or_else(|| Error::Config(format!("layer {layer} has no batch norm")))?;
        let m = T::lit(BN_MOMENTUM);
        let k = T::one() - m;
        for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(mean) {
            *r = m * *r + k * b;
        }
        for (r, &b) in bn.running_var.data_mut().iter_mut().zip(var) {
            *r = m * *r + k * b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|(&id, l)| {
                    (
                        id,
                        LayerParams {
                            weight: l.weight.cast(),
                            bias: l.bias.cast(),
                            bn: l.bn.as_ref().map(|b| BnParams {
                                gamma: b.gamma.cast(),
                                beta: b.beta.cast(),
                                running_mean: b.running_mean.cast(),
                                running_var: b.running_var.cast(),
                            }),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<T: Scalar> LayerParams<T> {
    fn init(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let shape = spec.weight_shape();
        let fan_in = spec.conv.taps() * spec.in_channels;
        let std = (2.0 / fan_in as f64).sqrt();
        let c = spec.conv.out_channels;
        LayerParams {
            weight: Tensor::randn(&shape, std, rng),
            bias: Tensor::zeros(&[c]),
            bn: spec.batch_norm.then(|| BnParams {
                gamma: Tensor::ones(&[c]),
                beta: Tensor::zeros(&[c]),
                running_mean: Tensor::zeros(&[c]),
                running_var: Tensor::ones(&[c]),
            }),
        }
    }
}
