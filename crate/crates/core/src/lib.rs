//! Time-varying control barrier functions built from a shiftable barrier, an
//! equivariance of the dynamics and a time-varying offset.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cbf;
pub mod comparison;
pub mod config;
pub mod dynamics;
pub mod equivariance;
pub mod error;
pub mod field;
pub mod filter;
pub mod qp;
pub mod report;
pub mod scenarios;
pub mod sim;
pub mod trajectory;
pub mod tv;
pub mod verify;

pub use cbf::{
    cbf_condition_margin, dini_directional, estimate_lipschitz, verify_shiftable, InputProbe, LipschitzEstimate,
    LipschitzMode, LipschitzRegion, ShiftableCbf,
};
pub use comparison::{
    c_alpha, compose_beta, sigmoid_eval, verify_alpha_p, verify_class_ke, ConvexityTag, ExtendedKeFn,
};
pub use config::{RunConfig, ScenarioRef, ScenarioSpec};
pub use dynamics::{step_rk4, DynamicsModel, InputBox, ModelKind};
pub use equivariance::{transform_cbf, verify_equivariance, DiffeoFamily, EquivarianceReport};
pub use error::{Error, Result};
pub use field::{Domain, FieldRef, ScalarField};
pub use filter::{filter_input, linearize_cbf_constraint, Linearization};
pub use qp::{kkt_residual, solve_box_qp, FilterResult, FilterStatus, LinearConstraint};
pub use report::CheckReport;
pub use sim::{
    estimate_rate_online, generate_waypoint_path, run_scenario, ReferenceLaw, Scenario, SimFailure, Summary,
    TrajectoryRecord,
};
pub use trajectory::{OffsetTrajectory, ParamTrajectory, PathFn, ScalarPath};
pub use tv::{
    check_rate_thm1, check_rate_thm2, check_underapprox, eval_b, p_margin, rescale_time, TimeVaryingCbf, TvConstraint,
};
pub use verify::{verify_scenario, VerifyReport};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
