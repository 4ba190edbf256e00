//! Deep BSDE solvers with asymptotic-expansion priors for option pricing
//! under nonlinear drivers, plus the reference oracles used to check them.

pub mod ae_prior;
pub mod experiments;
pub mod market;
pub mod neuralnet;
pub mod oracles;
pub mod report;
pub mod solver;

pub use ae_prior::{leading_order_price, z_ae, PriorError};
pub use market::{build_correlation_root, sample_paths, CorrelationRoot, Measure, ModelSpec, PathBatch, PayoffKind};
pub use neuralnet::{Mode, NetConfig, OptimizerState, SubnetParams};
pub use solver::{
    train, BsdeProblem, DriverKind, RolloutConfig, SolverError, SolverParams, TrainError, TrainHistory, TrainRecord,
    Variant,
};
