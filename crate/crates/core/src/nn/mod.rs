//! Numerical substrate: tensors on a gradient tape, models, losses, Adam.

pub mod augment;
pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;

pub use augment::label_augment;
pub use graph::{Gradients, Graph, Var};
pub use loss::Reduction;
pub use model::{classify, encode, BoundParams, EncoderArch, GradientSet, ModelArch, ModelParams, NamedTensor};
pub use optim::{adam_step, AdamConfig, LrSchedule, OptimizerState};
