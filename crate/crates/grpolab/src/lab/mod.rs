//! Experiment procedures and the oracles they check against.
//!
//! Each experiment is a pure function of its settings and seed, producing an
//! [`ExperimentReport`] whose checks compare a measured quantity against an
//! independently computed prediction at a pinned tolerance.

mod experiments;
mod fd;
mod report;
mod reward;
mod training;

pub use experiments::{
    gradient_oracle_experiment, loss_proxy_experiment, mu1_inertness_experiment,
    prefix_bias_experiment, scaling_invariance_experiment, overshoot_experiment,
    OvershootSettings, ScalingSettings,
};
pub use fd::{finite_difference_gradient, relative_gradient_error};
pub use report::{fingerprint, CheckResult, ExperimentReport, Observation, Verdict};
pub use reward::SyntheticReward;
pub use training::{
    run_training, write_training_csv, InnerStepLog, OuterIterLog, TrainingSettings,
    TrainingTrajectory,
};

use thiserror::Error;

use crate::adamw::AdamWError;
use crate::group::GroupError;
use crate::policy::PolicyError;
use crate::surrogate::SurrogateError;
use crate::zoo::ZooError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("finite-difference step must be positive (got {0})")]
    BadStep(f64),
    #[error("non-finite objective value at perturbed point")]
    NonFiniteObjective,
    #[error("experiment construction failed: {0}")]
    Construction(String),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    AdamW(#[from] AdamWError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}
