use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::stereo::LossKind;

/// How much of the 3-D regularization network is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full encoder-decoder, layers 19-37.
    Hierarchical,
    /// Layers 19, 20 and 37 only.
    SingleScale,
    /// No 3-D convolutions: a 1×1×1 projection of the volume and ×2 upsampling.
    UnaryOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hierarchical => "hierarchical",
            Variant::SingleScale => "single-scale",
            Variant::UnaryOnly => "unary-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hierarchical" | "full" | "full-hierarchical" => Some(Variant::Hierarchical),
            "single-scale" | "single" => Some(Variant::SingleScale),
            "unary-only" | "unary" => Some(Variant::UnaryOnly),
            _ => None,
        }
    }

    /// Every spatial extent and the disparity range must be a multiple of this.
    pub fn extent_multiple(self) -> usize {
        match self {
            Variant::Hierarchical => 32,
            Variant::SingleScale | Variant::UnaryOnly => 2,
        }
    }
}

/// Architecture hyperparameters and input extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Unary feature count `F`.
    pub features: usize,
    /// Number of disparity bins; disparities lie in `[0, max_disparity)`.
    pub max_disparity: usize,
    pub height: usize,
    pub width: usize,
    /// Image channels (1 gray, 3 color).
    pub channels: usize,
    pub variant: Variant,
    pub loss: LossKind,
}

pub const CONFIG_KEYS: &[&str] = &["features", "max_disparity", "height", "width", "channels", "variant", "loss"];

impl ModelConfig {
    /// Full-scale architecture: `F = 32`, 192 disparities, color input.
    pub fn full_size(height: usize, width: usize) -> Self {
        ModelConfig {
            features: 32,
            max_disparity: 192,
            height,
            width,
            channels: 3,
            variant: Variant::Hierarchical,
            loss: LossKind::L1Regression,
        }
    }

    /// Small configuration suited to CPU experiments on synthetic data.
    pub fn desk(features: usize, max_disparity: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            features,
            max_disparity,
            height,
            width,
            channels: 1,
            variant: Variant::Hierarchical,
            loss: LossKind::L1Regression,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.channels == 0 {
            return Err(Error::Config("features and channels must be positive".into()));
        }
        let m = self.variant.extent_multiple();
        for (name, v) in [
            ("height", self.height),
            ("width", self.width),
            ("max_disparity", self.max_disparity),
        ] {
            if v == 0 || v % m != 0 {
                return Err(Error::Config(format!(
                    "{name}={v} must be a positive multiple of {m} for the {} variant",
                    self.variant.name()
                )));
            }
        }
        if self.max_disparity > self.width {
            return Err(Error::Config(format!(
                "max_disparity={} exceeds width={}",
                self.max_disparity, self.width
            )));
        }
        Ok(())
    }

    /// Checks that an input image matches the configured extents.
    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        let expected = [self.height, self.width, self.channels];
        if shape != expected {
            return Err(Error::shape(
                "forward",
                "image",
                format!("{expected:?}"),
                format!("{shape:?}"),
            ));
        }
        Ok(())
    }

    /// Reads model keys from `kv`, leaving other keys in place.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut need = |k: &str| -> Result<usize> {
            kv.take(k)?.ok_or_else(|| Error::Config(format!("missing key {k}")))
        };
        let features = need("features")?;
        let max_disparity = need("max_disparity")?;
        let height = need("height")?;
        let width = need("width")?;
        let channels = kv.take_or("channels", 1)?;
        let variant = match kv.take::<String>("variant")? {
            None => Variant::Hierarchical,
            Some(v) => Variant::parse(&v).ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))?,
        };
        let loss = match kv.take::<String>("loss")? {
            None => LossKind::L1Regression,
            Some(v) => LossKind::parse(&v).ok_or_else(|| Error::Config(format!("unknown loss {v:?}")))?,
        };
        let cfg = ModelConfig {
            features,
            max_disparity,
            height,
            width,
            channels,
            variant,
            loss,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("features", self.features);
        kv.set("max_disparity", self.max_disparity);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("channels", self.channels);
        kv.set("variant", self.variant.name());
        kv.set("loss", self.loss.name());
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_depends_on_variant() {
        let cfg = ModelConfig::desk(8, 32, 48, 64);
        assert!(cfg.validate().is_err());
        assert!(cfg.clone().with_variant(Variant::SingleScale).validate().is_ok());
        assert!(ModelConfig::desk(8, 32, 64, 128).validate().is_ok());
        assert!(ModelConfig::desk(8, 96, 64, 64).validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::desk(4, 32, 32, 64).with_loss(LossKind::SoftClassification);
        let mut kv = KeyValues::parse(&cfg.to_kv().to_string()).unwrap();
        assert_eq!(ModelConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }
}
