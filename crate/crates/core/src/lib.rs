//! Sensitivity-aware output caching for probability-flow ODE samplers.
//!
//! A denoiser's local sensitivities to its latent input and to time are
//! calibrated once ([`sensitivity::calibrate`]), then used during sampling to
//! decide when a cached velocity can stand in for a fresh evaluation
//! ([`policy::SensitivityPolicy`]). Analytic velocity fields with exact
//! Jacobians ([`field`]) make every estimate checkable.

pub mod error;
pub mod experiment;
pub mod field;
mod fingerprint;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sensitivity;

pub use error::{Error, ErrorClass, Result};
pub use field::{
    Condition, ConstantField, GaussianField, GaussianMixtureField, MixtureComponent, StiffSyntheticField,
    VelocityField,
};
pub use metrics::{compare_runs, consecutive_step_mae, psnr, Fidelity, RunReport, StepDecision};
pub use policy::{
    plan_schedule, sencache_decide, uniform_skip_policy, CachePolicy, CachePolicyConfig, CacheState, Decision,
    PolicySpec, ScoreKind, SensitivityPolicy,
};
pub use sampler::{sample_reference, sample_with_policy, TimestepGrid, Trajectory, TrajectoryState};
pub use schedule::{InterpolantSchedule, ScheduleKind};
pub use sensitivity::{calibrate, estimate_jt, estimate_jx, CalibrationConfig, SensitivityProfile};
