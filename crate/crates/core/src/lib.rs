//! Iterative structured pruning with threshold-gated fine-tuning, one-shot
//! layer freezing and a pruning-aware learning-rate cap, plus an exhaustive
//! hyperparameter search that tunes the three on a data subsample.
//!
//! The network substrate is a small CPU implementation of dense/conv layers
//! with per-structure masks; pruning never reshapes tensors.

pub mod autotune;
pub mod checkpoint;
pub mod data;
mod error;
pub(crate) mod floatser;
pub mod freezing;
pub mod layer;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod scheduler;
pub mod tensor;

pub use autotune::{grid_search, objective, HyperParams, SearchSpace, TuneResult};
pub use data::{Dataset, SubsampleSpec};
pub use error::{Error, Result};
pub use freezing::{FreezeSet, LayerDelta};
pub use layer::{Layer, LayerKind, LayerSpec};
pub use network::{Gradients, Network};
pub use optim::{sgd_step, OptimizerState};
pub use pipeline::{
    baseline_pipeline, ice_pipeline, pft, test, DataSplits, FineTuneConfig, PipelineToggles, RunReport, StepRecord,
};
pub use pruning::{alpha, param_count, Criterion, PruneAction, PruneSchedule};
pub use scheduler::{max_lr, LrHyper};
pub use tensor::Tensor;

/// Reference desk-scale CNN: two conv/ReLU/pool stages and a three-layer
/// classifier, giving four prunable layers ahead of the output layer.
pub fn reference_cnn(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { filters: 8, kernel: 3, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Conv2d { filters: 16, kernel: 3, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: 32 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: classes },
    ]
}
