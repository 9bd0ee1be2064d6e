//! Distributionally robust training of small neural networks with SGD and
//! hardness weighted sampling.
//!
//! * [`phi_divergence`]: the inner maximisation (hardness weights, robust loss
//!   and its gradient) for KL and Pearson χ².
//! * [`sampler`]: stale per-example loss store, minibatch sampling,
//!   importance weights.
//! * [`tinynet`]: fully connected ReLU network with hand-written backprop.
//! * [`trainer`]: the DRO/ERM training loop, SGD with (Nesterov) momentum,
//!   metrics and checkpoints.
//! * [`harness`]: synthetic imbalanced data, experiment driver, config files,
//!   summaries and the sampler overhead benchmark.

pub mod error;
pub mod harness;
pub mod phi_divergence;
pub mod sampler;
pub mod tinynet;
pub mod trainer;

pub use error::{CheckpointError, DroError, Result};
pub use phi_divergence::{
    hardness_weights, hardness_weights_generic, hardness_weights_kl, kl_divergence, robust_loss,
    robust_loss_gradient, DivergenceKind, DualSolution, HardnessDistribution, PhiDivergence,
    RobustnessParam,
};
pub use sampler::{SamplerConfig, StaleLossStore, Staleness};
pub use tinynet::{Dataset, LossKind, MlpModel, PerExampleGrad, Target};
pub use trainer::{MetricsRecord, Objective, TrainConfig, TrainState};
