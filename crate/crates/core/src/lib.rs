//! Gradient-based meta-learning engine: MAML with three extensions —
//! task-adaptive initialization selection, contrast-loss weight generation,
//! and homoscedastic-uncertainty loss weighting — on a from-scratch
//! higher-order reverse-mode autodiff.

pub mod engine;
pub mod fd;
pub mod graph;
pub mod models;
pub mod opt;
pub mod pool;
pub mod taskgen;
pub mod tensor;
pub mod uncertainty;
pub mod verify;
pub mod weightgen;

pub use engine::{LossKind, MetaConfig, MetricsRow, Mode, Order};
pub use graph::{Graph, NodeId};
pub use models::{MlpSpec, ParamVector};
pub use tensor::Tensor;
