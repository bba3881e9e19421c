//! The layer table: every learned layer with its kernel geometry and widths.
//!
//! Layers are numbered as in the reference architecture table, 1-37. The
//! unary-only variant adds one projection layer, [`UNARY_HEAD`].

use crate::conv::ConvSpec;

use super::config::{ModelConfig, Variant};

/// Id of the 1×1×1 projection used by the unary-only variant.
pub const UNARY_HEAD: u8 = 38;
/// Last layer of the 2-D unary tower; later layers work on the cost volume.
pub const LAST_UNARY: u8 = 18;
/// Residual blocks in each unary tower.
pub const RESIDUAL_BLOCKS: u8 = 8;

/// Output width of a layer in units of `F`, or a literal channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    Features(usize),
    Literal(usize),
}

impl Width {
    pub fn channels(self, features: usize) -> usize {
        match self {
            Width::Features(k) => k * features,
            Width::Literal(n) => n,
        }
    }

    pub fn symbol(self) -> String {
        match self {
            Width::Features(1) => "F".into(),
            Width::Features(k) => format!("{k}F"),
            Width::Literal(n) => n.to_string(),
        }
    }
}

/// Static description of one learned layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: u8,
    pub conv: ConvSpec,
    pub in_channels: usize,
    pub width: Width,
    /// Followed by batch normalization (and usually ReLU).
    pub batch_norm: bool,
    pub description: String,
}

impl LayerSpec {
    pub fn name(&self) -> String {
        format!("L{:02}", self.id)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let dims = if self.id <= LAST_UNARY { 2 } else { 3 };
        self.conv.weight_shape(self.in_channels, dims)
    }

    /// Learnable scalars: weights, bias and batch-norm scale/shift.
    pub fn param_count(&self) -> usize {
        let bn = if self.batch_norm { 2 * self.conv.out_channels } else { 0 };
        self.conv.param_count(self.in_channels) + bn
    }
}

fn layer(id: u8, conv: ConvSpec, in_channels: usize, width: Width, batch_norm: bool, description: String) -> LayerSpec {
    LayerSpec {
        id,
        conv,
        in_channels,
        width,
        batch_norm,
        description,
    }
}

/// Ids of the layers a variant uses, in evaluation order.
pub fn layer_ids(variant: Variant) -> Vec<u8> {
    match variant {
        Variant::Hierarchical => (1..=37).collect(),
        Variant::SingleScale => (1..=20).chain([37]).collect(),
        Variant::UnaryOnly => (1..=LAST_UNARY).chain([UNARY_HEAD]).collect(),
    }
}

/// The full layer table for a configuration.
pub fn layer_table(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let f = cfg.features;
    let fw = |k| Width::Features(k);
    let mut out = Vec::new();
    for id in layer_ids(cfg.variant) {
        let spec = match id {
            1 => layer(
                1,
                ConvSpec::conv2d(5, 2, f),
                cfg.channels,
                fw(1),
                true,
                format!("5x5 conv, {f} features, stride 2"),
            ),
            2..=17 => layer(id, ConvSpec::conv2d(3, 1, f), f, fw(1), true, format!("3x3 conv, {f} features")),
            18 => layer(
                18,
                ConvSpec::conv2d(3, 1, f),
                f,
                fw(1),
                false,
                format!("3x3 conv, {f} features (no ReLU or BN)"),
            ),
            19 => layer(19, ConvSpec::conv3d(3, 1, f), 2 * f, fw(1), true, format!("3-D conv, 3x3x3, {f} features")),
            20 => layer(20, ConvSpec::conv3d(3, 1, f), f, fw(1), true, format!("3-D conv, 3x3x3, {f} features")),
            21 => layer(
                21,
                ConvSpec::conv3d(3, 2, 2 * f),
                2 * f,
                fw(2),
                true,
                format!("from cost volume: 3-D conv, 3x3x3, {} features, stride 2", 2 * f),
            ),
            24 | 27 | 30 => {
                let (cin, k) = if id == 30 { (2 * f, 4) } else { (2 * f, 2) };
                layer(
                    id,
                    ConvSpec::conv3d(3, 2, k * f),
                    cin,
                    fw(k),
                    true,
                    format!("from {}: 3-D conv, 3x3x3, {} features, stride 2", id - 3, k * f),
                )
            }
            22 | 23 | 25 | 26 | 28 | 29 => layer(
                id,
                ConvSpec::conv3d(3, 1, 2 * f),
                2 * f,
                fw(2),
                true,
                format!("3-D conv, 3x3x3, {} features", 2 * f),
            ),
            31 | 32 => layer(
                id,
                ConvSpec::conv3d(3, 1, 4 * f),
                4 * f,
                fw(4),
                true,
                format!("3-D conv, 3x3x3, {} features", 4 * f),
            ),
            33 => layer(
                33,
                ConvSpec::conv3d_transposed(3, 2, 2 * f),
                4 * f,
                fw(2),
                true,
                format!("3x3x3 3-D transposed conv, {} features, stride 2, + layer 29", 2 * f),
            ),
            34 | 35 => layer(
                id,
                ConvSpec::conv3d_transposed(3, 2, 2 * f),
                2 * f,
                fw(2),
                true,
                format!(
                    "3x3x3 3-D transposed conv, {} features, stride 2, + layer {}",
                    2 * f,
                    if id == 34 { 26 } else { 23 }
                ),
            ),
            36 => layer(
                36,
                ConvSpec::conv3d_transposed(3, 2, f),
                2 * f,
                fw(1),
                true,
                format!("3x3x3 3-D transposed conv, {f} features, stride 2, + layer 20"),
            ),
            37 => layer(
                37,
                ConvSpec::conv3d_transposed(3, 2, 1),
                f,
                Width::Literal(1),
                false,
                "3x3x3 3-D transposed conv, 1 feature (no ReLU or BN)".into(),
            ),
            UNARY_HEAD => layer(
                UNARY_HEAD,
                ConvSpec::conv3d(1, 1, 1),
                2 * f,
                Width::Literal(1),
                false,
                "1x1x1 3-D conv, 1 feature, then linear x2 upsampling".into(),
            ),
            _ => unreachable!("layer id {id}"),
        };
        out.push(spec);
    }
    out
}

/// Total learnable parameters for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layer_table(cfg).iter().map(LayerSpec::param_count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shapes_chain() {
        let cfg = ModelConfig::full_size(256, 512);
        let t = layer_table(&cfg);
        assert_eq!(t.len(), 37);
        assert_eq!(t[0].weight_shape(), vec![5, 5, 3, 32]);
        assert_eq!(t[18].weight_shape(), vec![3, 3, 3, 64, 32]);
        assert_eq!(t[29].weight_shape(), vec![3, 3, 3, 64, 128]);
        // transposed: [k, k, k, Cout, Cin]
        assert_eq!(t[32].weight_shape(), vec![3, 3, 3, 64, 128]);
        assert_eq!(t[36].weight_shape(), vec![3, 3, 3, 1, 32]);
        let head = layer_table(&cfg.with_variant(Variant::UnaryOnly));
        assert_eq!(head[18].weight_shape(), vec![1, 1, 1, 64, 1]);
        assert!(!t[17].batch_norm && !t[36].batch_norm);
    }

    #[test]
    fn unary_only_has_head() {
        let cfg = ModelConfig::desk(8, 32, 32, 64).with_variant(Variant::UnaryOnly);
        let t = layer_table(&cfg);
        assert_eq!(t.last().unwrap().id, UNARY_HEAD);
        assert_eq!(t.last().unwrap().param_count(), 16 + 1);
    }
}
