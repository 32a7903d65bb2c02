//! Decoder-only transformer with a component-decomposed residual stream.

mod checkpoint;
mod component;
mod config;
mod forward;
pub mod reference;
mod train;

pub use checkpoint::{param_layout, Checkpoint, LayerWeights, Weights};
pub use component::{all_components, kind_counts, validate_set, ComponentId, ComponentKind, ComponentSet};
pub use config::{ModelConfig, Nonlinearity, Norm};
pub use forward::{
    ActivationRecord, ComponentRecord, ForwardOutput, GradientRecord, Interventions, Model, Override,
    PassCounters,
};
pub use train::{train, CurvePoint, TaskMixture, TrainConfig, TrainingRun};
