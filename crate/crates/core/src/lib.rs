//! Channel gating for small convolutional networks.
//!
//! The crate trains CNNs whose channels are multiplied by stochastic
//! binary gates (straight-through Gumbel argmax over two logits), under
//! activation-rate or FLOPs losses. Polarized data-independent gates can
//! be exported as a smaller dense network; data-dependent gates skip
//! work per input at inference time.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod gating;
pub mod graph;
pub mod infer;
pub mod losses;
pub mod network;
pub mod ops;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod telemetry;
pub mod tensor;
pub mod train;

pub use config::{DatasetConfig, TrainConfig};
pub use error::{Error, Result};
pub use flops::FlopsModel;
pub use graph::{Graph, MaskLayout, StBackward, StConfig};
pub use losses::{ActivationRecord, LossKind};
pub use network::{
    BuildArgs, Forward, ForwardCfg, GateKind, GateSource, GatedBlockSpec, GatedNetwork,
    Granularity, NetworkSpec,
};
pub use optim::ParamStore;
pub use prune::{
    export_pruned_network, load_pruned, save_pruned, verify_pruned_equivalence, EquivalenceReport,
    PrunedNetwork,
};
pub use telemetry::{emit_telemetry, GateTelemetry, Summary};
pub use tensor::{NodeId, Tensor};
pub use train::{evaluate, train, EpochMetrics, EvalMetrics, TrainOutcome};
