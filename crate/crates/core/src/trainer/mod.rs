//! Desk-scale networks trained with or without DP-SGD.

pub mod dp;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use dp::{clip_and_noise, privatize};
pub use loss::{batch_gradient, per_sample_gradients, Loss};
pub use model::{LayerSpec, Model, ModelSpec, ParamSet, Task};
pub use optim::{OptimizerKind, OptimizerState};
pub use train::{evaluate, train, Augmentation, DpSettings, EarlyStopping, TrainConfig, TrainOutcome};
