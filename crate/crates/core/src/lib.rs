//! Fairness-oriented multi-exit classification.
//!
//! A small dense network with an internal classifier after every block is
//! trained under a weighted sum of per-exit cross-entropy and fairness
//! penalties (HSIC, teacher–student MMD, or gradient-reversal adversary).
//! At inference, each instance leaves at the first exit whose softmax
//! confidence reaches θ. Equalized odds and demographic parity measure the
//! result.
//!
//! ```no_run
//! use fairexit::prelude::*;
//!
//! let split = generate_synthetic(&DatasetSpec::default())?;
//! let net = MultiExitNet::init(ModelConfig::default())?;
//! let config = TrainConfig {
//!     method: FairnessMethod::Hsic { bandwidth: Bandwidth::Median },
//!     weights: LossWeights::for_exits(4, 1.0),
//!     ..TrainConfig::default()
//! };
//! let trained = train(net, &split, &config)?;
//! let report = evaluate_policy(&trained.net, &split.test, 2, &EarlyExitPolicy::earliest(0.85))?;
//! println!("acc {:.2} eo {:.2}", report.report.accuracy, report.report.eo);
//! # Ok::<(), fairexit::Error>(())
//! ```

pub mod cli;
pub mod dataset;
mod error;
pub mod fairloss;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod trainer;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::dataset::{generate_synthetic, DatasetSpec, LabeledInstance, LeakEncoding, Split};
    pub use crate::fairloss::{Bandwidth, FairnessMethod, LossWeights};
    pub use crate::inference::{evaluate_policy, sweep_theta, EarlyExitPolicy, DEFAULT_THETA};
    pub use crate::metrics::{equalized_odds, per_exit_report, EoVariant, FairnessReport};
    pub use crate::model::{probe_frozen_backbone, ModelConfig, MultiExitNet, ProbeConfig};
    pub use crate::trainer::{train, train_adversarial, train_distillation, TrainConfig};
    pub use crate::{Error, Result};
}
