//! Per-layer output shapes and parameter counts without running the network.

use std::fmt;

use super::config::{ModelConfig, Variant};
use super::layers::{layer_table, UNARY_HEAD};

/// One line of the architecture audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub name: String,
    pub description: String,
    /// Shape in terms of `D`, `H`, `W`, `F`, e.g. `¼D×¼H×¼W×2F`.
    pub symbolic: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Audit {
    pub config: ModelConfig,
    pub rows: Vec<AuditRow>,
}

impl Audit {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn row(&self, name: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn fraction(div: usize) -> String {
    match div {
        1 => String::new(),
        2 => "½".into(),
        4 => "¼".into(),
        8 => "⅛".into(),
        n => format!("1/{n}"),
    }
}

fn channels_symbol(k: Option<usize>, literal: usize) -> String {
    match k {
        Some(1) => "F".into(),
        Some(k) => format!("{k}F"),
        None => literal.to_string(),
    }
}

/// Output geometry of a layer: spatial divisor, whether it is 3-D, and its
/// channel multiple of `F` (`None` for a literal width of 1).
fn geometry(id: u8) -> (usize, bool, Option<usize>) {
    match id {
        1..=18 => (2, false, Some(1)),
        19 | 20 => (2, true, Some(1)),
        21..=23 => (4, true, Some(2)),
        24..=26 => (8, true, Some(2)),
        27..=29 => (16, true, Some(2)),
        30..=32 => (32, true, Some(4)),
        33 => (16, true, Some(2)),
        34 => (8, true, Some(2)),
        35 => (4, true, Some(2)),
        36 => (2, true, Some(1)),
        37 => (1, true, None),
        UNARY_HEAD => (2, true, None),
        _ => unreachable!("layer id {id}"),
    }
}

fn shape_row(cfg: &ModelConfig, div: usize, volume: bool, k: Option<usize>) -> (String, Vec<usize>) {
    let fr = fraction(div);
    let c = k.map_or(1, |k| k * cfg.features);
    let cs = channels_symbol(k, 1);
    if volume {
        (
            format!("{fr}D×{fr}H×{fr}W×{cs}"),
            vec![cfg.max_disparity / div, cfg.height / div, cfg.width / div, c],
        )
    } else {
        (format!("{fr}H×{fr}W×{cs}"), vec![cfg.height / div, cfg.width / div, c])
    }
}

fn extra(name: &str, description: &str, symbolic: String, shape: Vec<usize>) -> AuditRow {
    AuditRow {
        name: name.into(),
        description: description.into(),
        symbolic,
        shape,
        params: 0,
    }
}

/// Walks the layer table, producing input, per-layer and output rows.
pub fn audit(cfg: &ModelConfig) -> Audit {
    let mut rows = vec![extra(
        "input",
        "left and right images",
        "H×W×C".into(),
        vec![cfg.height, cfg.width, cfg.channels],
    )];
    for spec in layer_table(cfg) {
        let (div, volume, k) = geometry(spec.id);
        let (symbolic, shape) = shape_row(cfg, div, volume, k);
        rows.push(AuditRow {
            name: spec.name(),
            description: spec.description.clone(),
            symbolic,
            shape,
            params: spec.param_count(),
        });
        if spec.id == 18 {
            let (s, v) = shape_row(cfg, 2, true, Some(2));
            rows.push(extra("volume", "cost volume", s, v));
        }
    }
    if cfg.variant == Variant::UnaryOnly {
        let (s, v) = shape_row(cfg, 1, true, None);
        rows.push(extra("upsample", "linear x2 upsampling on D, H, W", s, v));
    }
    rows.push(extra(
        "soft_argmin",
        "soft argmin over disparities",
        "H×W".into(),
        vec![cfg.height, cfg.width],
    ));
    Audit {
        config: cfg.clone(),
        rows,
    }
}

impl fmt::Display for Audit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "variant={} F={} D={} H={} W={} C={}",
            c.variant.name(),
            c.features,
            c.max_disparity,
            c.height,
            c.width,
            c.channels
        )?;
        writeln!(f, "{:<12} {:<22} {:<24} {:>10}  description", "layer", "shape", "extents", "params")?;
        for r in &self.rows {
            let dims = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            writeln!(
                f,
                "{:<12} {:<22} {:<24} {:>10}  {}",
                r.name, r.symbolic, dims, r.params, r.description
            )?;
        }
        writeln!(f, "total_params={}", self.total_params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::param_count;

    #[test]
    fn symbolic_shapes() {
        let a = audit(&ModelConfig::full_size(256, 512));
        assert_eq!(a.row("L01").unwrap().symbolic, "½H×½W×F");
        assert_eq!(a.row("volume").unwrap().shape, vec![96, 128, 256, 64]);
        assert_eq!(a.row("L27").unwrap().symbolic, "1/16D×1/16H×1/16W×2F");
        assert_eq!(a.row("L32").unwrap().shape, vec![6, 8, 16, 128]);
        assert_eq!(a.row("L37").unwrap().symbolic, "D×H×W×1");
        assert_eq!(a.total_params(), param_count(&a.config));
    }
}
