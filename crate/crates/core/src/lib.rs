//! Instrumental-variable estimation of early-treatment effects in randomized cancer
//! screening trials.
//!
//! Trial subjects move through a four-state process: healthy (1), cancer detected (2),
//! cancer death (3) and other-cause death (4). Screening changes when cancers are
//! detected; the parameter of interest `θ` scales the post-detection cancer-death
//! hazard for delayed treatment. The crate simulates such trials, estimates the
//! transition hazards nonparametrically, recovers `log θ` from the randomized contrast,
//! and provides bootstrap inference and Monte Carlo study drivers.
//!
//! All numerical types are generic over [`Real`] (`f32` or `f64`). The aliases at the
//! crate root fix the scalar to `f64`.

pub mod data;
pub mod estimators;
pub mod inference;
pub mod iv;
pub mod model;
pub mod num;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod solve;
pub mod truth;

pub use data::{read_dataset_csv, validate_dataset, write_dataset_csv, Arm, EventType, ValidationError};
pub use estimators::{cumulative_incidence, model_control_cif, nelson_aalen, EstimationError, PreparedTrial};
pub use inference::{bootstrap_se, hr_curve, run_sim_study, select_timepoint, InferenceError, Selection};
pub use iv::{
    acfr_estimate, its_estimates, maximize_likelihood, pcfr_estimate, solve_estimating_equation, solve_two_equations,
    Estimand,
};
pub use model::{cumulative_hazard, TransitionId};
pub use num::Real;
pub use simulate::{reference_model, simulate_trial, Referral};
pub use truth::{
    marginal_true_loghr, marginal_true_loghr_with, structural_incidences, true_marginal_quantities,
    true_subgroup_quantities, RiskSetEntry,
};

pub type HazardFn = model::HazardFn<f64>;
pub type HazardForm = model::HazardForm<f64>;
pub type IntensityModel = model::IntensityModel<f64>;
pub type SubjectRecord = data::SubjectRecord<f64>;
pub type TrialDataset = data::TrialDataset<f64>;
pub type HazardEstimate = estimators::HazardEstimate<f64>;
pub type ScreeningHazards = estimators::ScreeningHazards<f64>;
pub type ScenarioConfig = simulate::ScenarioConfig<f64>;
pub type Confounder = simulate::Confounder<f64>;
pub type EstimateResult = iv::EstimateResult<f64>;
pub type TwoParameterEstimate = iv::TwoParameterEstimate<f64>;
pub type SubgroupQuantities = truth::SubgroupQuantities<f64>;
pub type BootstrapResult = inference::BootstrapResult<f64>;
pub type HrCurve = inference::HrCurve<f64>;
pub type StudyResult = inference::StudyResult<f64>;
