//! Built-in scenarios.

use crate::comparison::ExtendedKeFn;
use crate::config::{CbfSpec, ConstraintSpec, FieldSpec, ModelSpec, OffsetSpec, ScenarioSpec, TrajSpec};
use crate::config::{DEFAULT_DT_CONTROL, DEFAULT_DT_SIM};
use crate::dynamics::{InputBox, ModelKind};
use crate::equivariance::DiffeoFamily;
use crate::error::{Error, Result};
use crate::field::{Annulus, Domain};
use crate::sim::{ObstaclePath, ReferenceLaw};

pub const BUILTIN_NAMES: [&str; 7] = [
    "waypoint_si",
    "waypoint_di",
    "obstacles_const_radius_si",
    "obstacles_tv_radius_si",
    "obstacles_unicycle",
    "obstacles_bicycle_b1",
    "obstacles_bicycle_b2",
];

/// Square of side 2 traversed twice.
pub fn square_waypoints() -> Vec<Vec<f64>> {
    let sq = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        pts.extend(sq.iter().map(|p| p.to_vec()));
    }
    pts.push(vec![0.0, 0.0]);
    pts
}

fn sigmoid(c1: f64, c2: f64) -> ExtendedKeFn {
    ExtendedKeFn::Sigmoid { c1, c2 }
}

pub const SI_LAMBDA: f64 = 0.25;
pub const SI_PATH_SPEED: f64 = 0.75;
pub const DI_RADIUS: f64 = 0.4;
pub const DI_RATE_BOUND: f64 = 0.75;
pub const DI_ANNULUS_HALF_WIDTH: f64 = 0.1;
/// Velocity box half-width of the `b_DI` verification region.
pub const DI_VELOCITY_RANGE: f64 = 1.0;

pub fn builtin(name: &str) -> Result<ScenarioSpec> {
    match name {
        "waypoint_si" => Ok(waypoint_si()),
        "waypoint_di" => Ok(waypoint_di()),
        "obstacles_const_radius_si" => Ok(obstacles(ObstacleModel::Single, false)),
        "obstacles_tv_radius_si" => Ok(obstacles(ObstacleModel::Single, true)),
        "obstacles_unicycle" => Ok(obstacles(ObstacleModel::Unicycle, true)),
        "obstacles_bicycle_b1" => Ok(obstacles(ObstacleModel::Bicycle(20.0), true)),
        "obstacles_bicycle_b2" => Ok(obstacles(ObstacleModel::Bicycle(45.0), true)),
        other => Err(Error::Config(format!("unknown scenario {other}; built-ins are {}", BUILTIN_NAMES.join(", ")))),
    }
}

/// Keep-in disk of radius 0.25 around waypoints, `u_ref ≡ 0`.
pub fn waypoint_si() -> ScenarioSpec {
    let family = DiffeoFamily::TranslateFull { n: 2 };
    ScenarioSpec {
        name: "waypoint_si".into(),
        model: ModelSpec { kind: ModelKind::SingleIntegrator { n: 2 }, input_box: None },
        cbfs: vec![CbfSpec {
            label: "keep_in".into(),
            field: FieldSpec::NegNorm { dim: 2, start: 0, len: None },
            alpha: sigmoid(1.0, 8.0),
            alpha_p: None,
            capacity: SI_LAMBDA,
            domain: Some(Domain::cube(2.0 * SI_LAMBDA, 2)),
            family: family.clone(),
            p: TrajSpec::Waypoints {
                points: square_waypoints(),
                rate_bound: None,
                speed: Some(SI_PATH_SPEED),
                dwell: 1.0,
            },
            offset: OffsetSpec::Constant { value: SI_LAMBDA },
            ell_b: None,
            ell_d: None,
            rate_bound: None,
            active_annulus: None,
            equivariance_family: None,
            rescale_to: None,
        }],
        constraints: vec![ConstraintSpec {
            label: "tracking_radius".into(),
            field: FieldSpec::NegNorm { dim: 2, start: 0, len: None },
            family,
            q: None,
            gamma: None,
            cbf: Some("keep_in".into()),
            underapprox: true,
        }],
        reference: ReferenceLaw::Zero,
        x0: vec![0.0, 0.0],
        dt_sim: DEFAULT_DT_SIM,
        dt_control: DEFAULT_DT_CONTROL,
        horizon: 30.0,
        online_rate: false,
    }
}

/// Double integrator tracking the square with the backstepped barrier on
/// the error annulus and a velocity cap.
pub fn waypoint_di() -> ScenarioSpec {
    let alpha_di = sigmoid(3.0, 6.0);
    let pos = DiffeoFamily::TranslatePosition { state_dim: 4, param_dim: 2 };
    let annulus = Annulus::new(0, 2, DI_RADIUS - DI_ANNULUS_HALF_WIDTH, DI_RADIUS + DI_ANNULUS_HALF_WIDTH);
    let (e, v) = (DI_RADIUS + DI_ANNULUS_HALF_WIDTH, DI_VELOCITY_RANGE);
    let domain = Domain { lo: vec![-e, -e, -v, -v], hi: vec![e, e, v, v], annulus: Some(annulus.clone()) };
    let smooth = |augmented| TrajSpec::SmoothWaypoints {
        points: square_waypoints(),
        rate_bound: Some(DI_RATE_BOUND),
        dwell: 0.5,
        augmented,
    };
    ScenarioSpec {
        name: "waypoint_di".into(),
        model: ModelSpec { kind: ModelKind::DoubleIntegrator { n: 2 }, input_box: None },
        cbfs: vec![
            CbfSpec {
                label: "tracking".into(),
                field: FieldSpec::BackstepDi { n: 2, inner: sigmoid(1.0, 8.0), r: DI_RADIUS },
                alpha: alpha_di.clone(),
                alpha_p: None,
                capacity: DI_RADIUS,
                domain: Some(domain),
                family: DiffeoFamily::TranslateDi { n: 2 },
                p: smooth(true),
                offset: OffsetSpec::Constant { value: DI_RADIUS },
                ell_b: None,
                ell_d: None,
                rate_bound: Some(DI_RATE_BOUND),
                active_annulus: Some(annulus),
                equivariance_family: Some(pos.clone()),
                rescale_to: None,
            },
            CbfSpec {
                label: "velocity".into(),
                field: FieldSpec::VelCap { n: 2, cap: 1.0 },
                alpha: alpha_di,
                alpha_p: None,
                capacity: 0.1,
                domain: Some(Domain::cube(2.0, 4)),
                family: pos.clone(),
                p: TrajSpec::Constant { p: vec![0.0, 0.0] },
                offset: OffsetSpec::Constant { value: 0.0 },
                ell_b: None,
                ell_d: None,
                rate_bound: None,
                active_annulus: None,
                equivariance_family: None,
                rescale_to: None,
            },
        ],
        constraints: vec![
            ConstraintSpec {
                label: "tracking_radius".into(),
                field: FieldSpec::NegNorm { dim: 4, start: 0, len: Some(2) },
                family: pos.clone(),
                q: Some(smooth(false)),
                gamma: Some(OffsetSpec::Constant { value: DI_RADIUS }),
                cbf: None,
                underapprox: false,
            },
            ConstraintSpec {
                label: "speed".into(),
                field: FieldSpec::VelCap { n: 2, cap: 1.0 },
                family: pos,
                q: None,
                gamma: None,
                cbf: Some("velocity".into()),
                underapprox: true,
            },
        ],
        reference: ReferenceLaw::Zero,
        x0: vec![0.0; 4],
        dt_sim: DEFAULT_DT_SIM,
        dt_control: DEFAULT_DT_CONTROL,
        horizon: 30.0,
        online_rate: false,
    }
}

#[derive(Debug, Clone, Copy)]
enum ObstacleModel {
    Single,
    Unicycle,
    /// Steering limit in degrees.
    Bicycle(f64),
}

/// Barrier radius `R`; the offset is `λ(t) = R - r(t)` so that
/// `B = ‖x - q(t)‖ - r(t)`.
pub const OBSTACLE_FIELD_RADIUS: f64 = 3.25;
pub const OBSTACLE_CONST_RADIUS: f64 = 2.0;
pub const OBSTACLE_SPEED: f64 = 0.3;
pub const OBSTACLE_AMPLITUDE: f64 = 1.0;
pub const OBSTACLE_FREQ_HZ: f64 = 0.05;
/// Lookahead of the heuristic pose barrier.
pub const LOOKAHEAD: f64 = 2.0;
const REFERENCE_Y: f64 = -20.0;

pub fn obstacle_paths() -> Vec<ObstaclePath> {
    [(15.0, REFERENCE_Y), (32.0, REFERENCE_Y + 0.5)]
        .iter()
        .map(|&(x, y)| ObstaclePath {
            start: vec![x, y],
            velocity: vec![-OBSTACLE_SPEED, 0.0],
            amplitude: OBSTACLE_AMPLITUDE,
            freq_hz: OBSTACLE_FREQ_HZ,
        })
        .collect()
}

/// `r(t) = 2 + sin(0.2 t)` as `λ(t) = R - r(t)`, or constant `r = 2` with
/// `R = 2.5`.
fn obstacle_offset(tv: bool) -> (f64, OffsetSpec) {
    if tv {
        let off = OffsetSpec::Sinusoid { offset: OBSTACLE_FIELD_RADIUS - 2.0, amplitude: -1.0, omega: 0.2, phase: 0.0 };
        (OBSTACLE_FIELD_RADIUS, off)
    } else {
        let r_field = OBSTACLE_CONST_RADIUS + 0.5;
        (r_field, OffsetSpec::Constant { value: r_field - OBSTACLE_CONST_RADIUS })
    }
}

fn obstacles(kind: ObstacleModel, tv: bool) -> ScenarioSpec {
    let (r_field, offset) = obstacle_offset(tv);
    let capacity = OBSTACLE_FIELD_RADIUS - 1.0;
    let (model, family, dim, name) = match kind {
        ObstacleModel::Single => (
            ModelSpec { kind: ModelKind::SingleIntegrator { n: 2 }, input_box: None },
            DiffeoFamily::TranslateFull { n: 2 },
            2,
            if tv { "obstacles_tv_radius_si" } else { "obstacles_const_radius_si" }.to_string(),
        ),
        ObstacleModel::Unicycle => (
            ModelSpec { kind: ModelKind::Unicycle, input_box: None },
            DiffeoFamily::TranslatePoseXy,
            3,
            "obstacles_unicycle".to_string(),
        ),
        ObstacleModel::Bicycle(deg) => {
            let z = deg.to_radians();
            (
                ModelSpec {
                    kind: ModelKind::Bicycle { wheelbase: 1.0, lr_ratio: 0.5 },
                    input_box: Some(InputBox { lo: vec![1.0, -z], hi: vec![2.0, z] }),
                },
                DiffeoFamily::TranslatePoseXy,
                3,
                if deg <= 20.0 { "obstacles_bicycle_b1" } else { "obstacles_bicycle_b2" }.to_string(),
            )
        }
    };
    let pose = dim == 3;
    let (field, alpha) = if pose {
        (FieldSpec::LookaheadDist { lookahead: LOOKAHEAD, radius: r_field + LOOKAHEAD }, sigmoid(1.0, 8.0))
    } else {
        (FieldSpec::DiskDist { dim, center: vec![0.0, 0.0], radius: r_field }, sigmoid(1.0, 8.0))
    };
    let mut cbfs = Vec::new();
    let mut constraints = Vec::new();
    for (i, path) in obstacle_paths().into_iter().enumerate() {
        let label = format!("obstacle_{i}");
        cbfs.push(CbfSpec {
            label: label.clone(),
            field: field.clone(),
            alpha: alpha.clone(),
            alpha_p: Some(sigmoid(1.0, 8.0)),
            capacity,
            domain: None,
            family: family.clone(),
            p: TrajSpec::Obstacle(path),
            offset: offset.clone(),
            ell_b: None,
            ell_d: None,
            rate_bound: None,
            active_annulus: None,
            equivariance_family: None,
            rescale_to: None,
        });
        constraints.push(ConstraintSpec {
            label: format!("clearance_{i}"),
            field: FieldSpec::DiskDist { dim, center: vec![0.0, 0.0], radius: r_field },
            family: family.clone(),
            q: None,
            gamma: None,
            cbf: Some(label),
            underapprox: true,
        });
    }
    let reference = if pose {
        ReferenceLaw::PurePursuit { line_y: REFERENCE_Y, lookahead: 5.0, speed: 1.5, gain: 1.0 }
    } else {
        ReferenceLaw::TrackTarget { target: vec![80.0, REFERENCE_Y], gain: 1.0 }
    };
    let mut x0 = vec![0.0, REFERENCE_Y];
    if pose {
        x0.push(0.0);
    }
    ScenarioSpec {
        name,
        model,
        cbfs,
        constraints,
        reference,
        x0,
        dt_sim: DEFAULT_DT_SIM,
        dt_control: DEFAULT_DT_CONTROL,
        horizon: 60.0,
        online_rate: true,
    }
}
