//! The network: layer table, parameters, graph wiring, audit and checkpoints.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use audit::{audit, Audit, AuditRow};
pub use config::{ModelConfig, Variant};
pub use layers::{layer_table, param_count, LayerSpec, Width, UNARY_HEAD};
pub use network::{Builder, ForwardPass, GcNet, Mode};
pub use params::{BnParams, LayerParams, ModelParams, ParamKey, Slot};
