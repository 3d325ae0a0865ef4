//! Wasserstein adversarial active learning at desk scale.
//!
//! * [`net`]: a small MLP with feature extractor, classifier head and critic
//!   head; analytic gradients and SGD with momentum.
//! * [`divergence`]: exact 1-D Wasserstein distances between piecewise
//!   uniform laws, threshold-classifier risk, and an assignment-based OT
//!   oracle for small point clouds.
//! * [`train`]: prediction plus min-max adversarial training with labeled
//!   resampling, and the BCE discriminator ablation.
//! * [`query`]: uncertainty/diversity batch selection and baselines.
//! * [`experiment`]: the interaction loop, with simulated or interactive
//!   oracles from [`oracle`].

// `!(x > 0.0)` style checks deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod pool;
pub mod query;
pub mod train;

pub use error::{Error, Result};
pub use experiment::{run_experiment, Experiment, ExperimentConfig, RoundRecord};
pub use net::{Architecture, NetworkParams};
pub use pool::Pool;
pub use query::Strategy;
pub use train::{HyperParams, TrainingMode};
