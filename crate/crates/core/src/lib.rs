pub mod cli_io;
pub mod dynamics;
pub mod error;
pub mod gp_ssm;
pub mod integrator;
pub mod kfrts;
pub mod nlp;
pub mod ose;
pub mod scalar;
pub mod scenarios;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations of the generic core.
pub type AugmentedModel = dynamics::AugmentedModel<f64>;
pub type ContinuousModel = dynamics::ContinuousModel<f64>;
pub type ConstraintSet = dynamics::ConstraintSet<f64>;
pub type GpPrior = gp_ssm::GpPrior<f64>;
pub type Grid = integrator::Grid<f64>;
pub type PiecewiseSignal = integrator::PiecewiseSignal<f64>;
pub type BaselineSetup = kfrts::BaselineSetup<f64>;
pub type SolverOptions = nlp::SolverOptions<f64>;
pub type SolveReport = nlp::SolveReport<f64>;
pub type EstimationConfig = ose::EstimationConfig<f64>;
pub type EstimateResult = ose::EstimateResult<f64>;
