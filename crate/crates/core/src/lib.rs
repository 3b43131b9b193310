//! Highway driving risk toolkit: ellipse-based collision severity with
//! Gaussian observation noise, closed-form CVaR risk, counterfactual risk
//! maps, a courteous model predictive controller, and a deterministic
//! closed-loop highway simulator with IDM and dataset-replay neighbors.

pub mod config;
pub mod mpc;
pub mod risk;
pub mod riskmap;
pub mod sim;
pub mod trace;
pub mod trajectory;
pub mod vehicle;

pub use risk::{
    aggregate_risk, check_safety_constraint, cvar_gaussian, eval_h, eval_h_dot, pair_params,
    pairwise_risk, severity_gradient, severity_mean, severity_moments, severity_variance,
    trajectory_safety_bound, NoisyAgentState, PairBuffers, RiskParams,
};
pub use vehicle::{
    bicycle_step, bicycle_step_rk4, idm_accel, slip_angle, ControlInput, EgoState, IdmParams,
    VehicleGeometry,
};
