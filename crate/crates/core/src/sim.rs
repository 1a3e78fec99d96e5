//! Path generation, reference laws and the closed-loop scenario runner.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_rk4, DynamicsModel, ModelKind};
use crate::error::{Error, Result};
use crate::filter::filter_input;
use crate::qp::FilterStatus;
use crate::report::CheckReport;
use crate::trajectory::{ParamTrajectory, PathFn};
use crate::tv::{TimeVaryingCbf, TvConstraint};

/// Fraction of a rate bound used by generated paths.
pub const PATH_SPEED_FRACTION: f64 = 0.99;

/// Waypoints joined by straight segments at constant speed
/// `min(0.99 · rate_bound, speed)`, pausing `dwell` seconds at every waypoint
/// after the first. All-equal waypoints give a constant path.
pub fn generate_waypoint_path(
    waypoints: &[DVector<f64>],
    rate_bound: f64,
    speed: Option<f64>,
    dwell: f64,
) -> Result<ParamTrajectory> {
    let first = waypoints.first().ok_or_else(|| Error::InvalidArgument("at least one waypoint is required".into()))?;
    if !(rate_bound > 0.0) || !rate_bound.is_finite() {
        return Err(Error::InvalidArgument(format!("rate bound must be positive, got {rate_bound}")));
    }
    if !(dwell >= 0.0) {
        return Err(Error::InvalidArgument(format!("dwell must be non-negative, got {dwell}")));
    }
    if waypoints.iter().any(|w| w.len() != first.len()) {
        return Err(Error::InvalidArgument("waypoints differ in dimension".into()));
    }
    let v = match speed {
        Some(s) if !(s > 0.0) => return Err(Error::InvalidArgument(format!("speed must be positive, got {s}"))),
        Some(s) => s.min(PATH_SPEED_FRACTION * rate_bound),
        None => PATH_SPEED_FRACTION * rate_bound,
    };
    if waypoints.windows(2).all(|w| w[0] == w[1]) {
        return Ok(ParamTrajectory::constant(first.clone()));
    }
    let mut knots = vec![(0.0, first.clone())];
    let mut t = 0.0;
    for w in waypoints.windows(2) {
        let d = (&w[1] - &w[0]).norm();
        if d == 0.0 {
            continue;
        }
        t += d / v;
        knots.push((t, w[1].clone()));
        if dwell > 0.0 {
            t += dwell;
            knots.push((t, w[1].clone()));
        }
    }
    ParamTrajectory::piecewise_linear(knots)
}

/// Rest-to-rest trapezoidal-velocity path through waypoints. Evaluates to
/// the augmented parameter `(p, ṗ)` for the double integrator unless
/// [`SmoothWaypointPath::positions`] was applied.
#[derive(Debug, Clone)]
pub struct SmoothWaypointPath {
    n: usize,
    augmented: bool,
    segments: Vec<Segment>,
    end: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    from: DVector<f64>,
    dir: DVector<f64>,
    accel: f64,
    /// Peak speed actually reached on this segment.
    peak: f64,
    t_acc: f64,
    t_cruise: f64,
    /// Dwell at the far end.
    dwell: f64,
}

impl Segment {
    fn moving_time(&self) -> f64 {
        2.0 * self.t_acc + self.t_cruise
    }

    fn duration(&self) -> f64 {
        self.moving_time() + self.dwell
    }

    /// Arc length, speed and signed acceleration at local time `s`.
    fn profile(&self, s: f64) -> (f64, f64, f64) {
        let (a, vp, ta, tc) = (self.accel, self.peak, self.t_acc, self.t_cruise);
        let d_acc = 0.5 * a * ta * ta;
        if s < ta {
            (0.5 * a * s * s, a * s, a)
        } else if s < ta + tc {
            (d_acc + vp * (s - ta), vp, 0.0)
        } else if s < 2.0 * ta + tc {
            let r = s - ta - tc;
            (d_acc + vp * tc + vp * r - 0.5 * a * r * r, vp - a * r, -a)
        } else {
            (2.0 * d_acc + vp * tc, 0.0, 0.0)
        }
    }
}

impl SmoothWaypointPath {
    /// Cruise speed `speed` and acceleration `accel`; the augmented rate
    /// satisfies `‖ṗ‖ + ‖p̈‖ <= speed + accel`.
    pub fn new(waypoints: &[DVector<f64>], speed: f64, accel: f64, dwell: f64) -> Result<Self> {
        let first =
            waypoints.first().ok_or_else(|| Error::InvalidArgument("at least one waypoint is required".into()))?;
        if !(speed > 0.0 && accel > 0.0 && dwell >= 0.0) {
            return Err(Error::InvalidArgument("speed and accel must be positive, dwell non-negative".into()));
        }
        let n = first.len();
        let mut segments = Vec::new();
        let mut t0 = 0.0;
        for w in waypoints.windows(2) {
            if w[1].len() != n {
                return Err(Error::InvalidArgument("waypoints differ in dimension".into()));
            }
            let delta = &w[1] - &w[0];
            let d = delta.norm();
            if d == 0.0 {
                continue;
            }
            // triangular profile when the segment is too short to reach `speed`
            let peak = speed.min((accel * d).sqrt());
            let t_acc = peak / accel;
            let t_cruise = (d - peak * t_acc) / peak;
            let seg = Segment {
                t0,
                from: w[0].clone(),
                dir: delta / d,
                accel,
                peak,
                t_acc,
                t_cruise: t_cruise.max(0.0),
                dwell,
            };
            t0 += seg.duration();
            segments.push(seg);
        }
        Ok(SmoothWaypointPath { n, augmented: true, segments, end: waypoints.last().expect("non-empty").clone() })
    }

    /// Splits `0.99 · rate_bound` between cruise speed and acceleration
    /// (60/40).
    pub fn within_bound(waypoints: &[DVector<f64>], rate_bound: f64, dwell: f64) -> Result<Self> {
        let budget = PATH_SPEED_FRACTION * rate_bound;
        Self::new(waypoints, 0.6 * budget, 0.4 * budget, dwell)
    }

    /// The same motion as a path of positions only.
    pub fn positions(mut self) -> Self {
        self.augmented = false;
        self
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t0 + s.duration())
    }

    fn locate(&self, t: f64) -> Option<&Segment> {
        self.segments.iter().rev().find(|s| t >= s.t0).filter(|s| t < s.t0 + s.duration())
    }

    /// `(p, ṗ, p̈)` at `t` (right-continuous acceleration).
    pub fn kinematics(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let z = DVector::zeros(self.n);
        match self.locate(t) {
            Some(s) => {
                let (d, v, a) = s.profile(t - s.t0);
                (&s.from + &s.dir * d, &s.dir * v, &s.dir * a)
            }
            None if self.segments.is_empty() || t >= self.end_time() => (self.end.clone(), z.clone(), z),
            None => (self.segments[0].from.clone(), z.clone(), z),
        }
    }
}

impl PathFn for SmoothWaypointPath {
    fn dim(&self) -> usize {
        if self.augmented {
            2 * self.n
        } else {
            self.n
        }
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        let (p, v, _) = self.kinematics(t);
        if !self.augmented {
            return p;
        }
        let mut out = DVector::zeros(2 * self.n);
        out.rows_mut(0, self.n).copy_from(&p);
        out.rows_mut(self.n, self.n).copy_from(&v);
        out
    }

    fn right_derivative(&self, t: f64) -> DVector<f64> {
        let (_, v, a) = self.kinematics(t);
        if !self.augmented {
            return v;
        }
        let mut out = DVector::zeros(2 * self.n);
        out.rows_mut(0, self.n).copy_from(&v);
        out.rows_mut(self.n, self.n).copy_from(&a);
        out
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut ts = Vec::new();
        for s in &self.segments {
            ts.extend([s.t0, s.t0 + s.t_acc, s.t0 + s.t_acc + s.t_cruise, s.t0 + s.moving_time()]);
        }
        ts.push(self.end_time());
        ts.dedup();
        ts
    }
}

/// Obstacle centre `start + velocity · t + amplitude · sin(2π freq t) · ê_2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePath {
    pub start: Vec<f64>,
    pub velocity: Vec<f64>,
    pub amplitude: f64,
    pub freq_hz: f64,
}

impl PathFn for ObstaclePath {
    fn dim(&self) -> usize {
        self.start.len()
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        let mut p = DVector::from_iterator(self.dim(), self.start.iter().zip(&self.velocity).map(|(s, v)| s + v * t));
        p[1] += self.amplitude * (2.0 * PI * self.freq_hz * t).sin();
        p
    }

    fn right_derivative(&self, t: f64) -> DVector<f64> {
        let mut v = DVector::from_column_slice(&self.velocity);
        let w = 2.0 * PI * self.freq_hz;
        v[1] += self.amplitude * w * (w * t).cos();
        v
    }
}

/// First-order rate estimate from the last two samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub rate: DVector<f64>,
    /// `false` when fewer than two samples were available.
    pub valid: bool,
}

/// `(p₂ - p₁)/(t₂ - t₁)` from the last two `(t, p)` samples.
pub fn estimate_rate_online(history: &[(f64, DVector<f64>)]) -> Result<RateEstimate> {
    match history {
        [] => Err(Error::NoSamples),
        [(_, p)] => Ok(RateEstimate { rate: DVector::zeros(p.len()), valid: false }),
        [.., (t1, p1), (t2, p2)] => {
            if !(t2 > t1) {
                return Err(Error::UnorderedGrid(history.len() - 1));
            }
            if p1.len() != p2.len() {
                return Err(Error::DimensionMismatch { expected: p1.len(), got: p2.len() });
            }
            Ok(RateEstimate { rate: (p2 - p1) / (t2 - t1), valid: true })
        }
    }
}

/// How the reference input `u_ref(t, x)` is produced. The result is clipped
/// to the input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ReferenceLaw {
    #[default]
    Zero,
    Constant {
        u: Vec<f64>,
    },
    /// `gain · (target - x)` on the leading coordinates.
    TrackTarget {
        target: Vec<f64>,
        gain: f64,
    },
    /// Follow the horizontal line `y = line_y` in the `+x` direction:
    /// heading error towards a point `lookahead` ahead on the line, constant
    /// speed.
    PurePursuit {
        line_y: f64,
        lookahead: f64,
        speed: f64,
        gain: f64,
    },
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl ReferenceLaw {
    pub fn eval(&self, model: &DynamicsModel, x: &DVector<f64>) -> DVector<f64> {
        let m = model.input_dim();
        let raw = match self {
            ReferenceLaw::Zero => DVector::zeros(m),
            ReferenceLaw::Constant { u } => DVector::from_column_slice(u),
            ReferenceLaw::TrackTarget { target, gain } => {
                let mut u = DVector::zeros(m);
                for i in 0..m.min(target.len()) {
                    u[i] = gain * (target[i] - x[i]);
                }
                u
            }
            ReferenceLaw::PurePursuit { line_y, lookahead, speed, gain } => {
                let heading = (line_y - x[1]).atan2(*lookahead);
                let omega = gain * wrap_angle(heading - x[2]);
                let steer = match model.kind {
                    ModelKind::Bicycle { wheelbase, .. } => (wheelbase * omega / speed).atan(),
                    _ => omega,
                };
                DVector::from_vec(vec![*speed, steer])
            }
        };
        model.input_box.clamp(&raw)
    }
}

/// A closed-loop experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: DynamicsModel,
    pub cbfs: Vec<TimeVaryingCbf>,
    pub constraints: Vec<TvConstraint>,
    pub reference: ReferenceLaw,
    pub x0: DVector<f64>,
    pub dt_sim: f64,
    pub dt_control: f64,
    pub horizon: f64,
    /// Estimate `dp`, `dλ` from sampled configurations instead of reading the
    /// analytic derivatives.
    pub online_rate: bool,
}

impl Scenario {
    /// Integration substeps per control tick.
    pub fn substeps(&self) -> Result<usize> {
        if !(self.dt_sim > 0.0 && self.dt_control > 0.0) {
            return Err(Error::Config("dt_sim and dt_control must be positive".into()));
        }
        let k = (self.dt_control / self.dt_sim).round();
        if k < 1.0 || ((k * self.dt_sim - self.dt_control).abs() > 1e-9 * self.dt_control) {
            return Err(Error::Config(format!(
                "dt_control = {} is not an integer multiple of dt_sim = {}",
                self.dt_control, self.dt_sim
            )));
        }
        Ok(k as usize)
    }

    pub fn ticks(&self) -> Result<usize> {
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        Ok((self.horizon / self.dt_control + 1e-9).floor() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.substeps()?;
        self.ticks()?;
        if self.x0.len() != self.model.state_dim() {
            return Err(Error::DimensionMismatch { expected: self.model.state_dim(), got: self.x0.len() });
        }
        for b in &self.cbfs {
            if b.state_dim() != self.model.state_dim() {
                return Err(Error::DimensionMismatch { expected: self.model.state_dim(), got: b.state_dim() });
            }
            let v = b.eval(0.0, &self.x0);
            if v < 0.0 {
                return Err(Error::Config(format!("x0 violates {} (B(0, x0) = {v:.4e})", b.label)));
            }
        }
        Ok(())
    }

    /// Runs every barrier's rate certificate on `grid`.
    pub fn certify(&mut self, grid: &[f64]) -> Result<Vec<CheckReport>> {
        self.cbfs.iter_mut().map(|b| b.certify(grid).cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub u: Vec<f64>,
    pub status: FilterStatus,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
    pub margin: f64,
    /// `‖dp‖` estimate of the barrier with the smallest rate margin.
    pub rate_est: f64,
    /// Smallest `admissible rate - ‖dp‖` over barriers at this tick.
    pub rate_margin: f64,
    pub violations: Vec<f64>,
}

/// Both one-sided values of a barrier across an offset jump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpEvent {
    pub cbf: String,
    pub t: f64,
    pub b_left: f64,
    pub b_right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub scenario: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub cbf_labels: Vec<String>,
    pub constraint_labels: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
    /// Minima over every integration step, not only control ticks.
    pub min_b: f64,
    pub min_b_time: f64,
    pub min_h: f64,
    pub jumps: Vec<JumpEvent>,
}

impl TrajectoryRecord {
    fn new(s: &Scenario) -> Self {
        TrajectoryRecord {
            scenario: s.name.clone(),
            state_dim: s.model.state_dim(),
            input_dim: s.model.input_dim(),
            cbf_labels: s.cbfs.iter().map(|b| b.label.clone()).collect(),
            constraint_labels: s.constraints.iter().map(|c| c.label.clone()).collect(),
            rows: Vec::new(),
            min_b: f64::INFINITY,
            min_b_time: 0.0,
            min_h: f64::INFINITY,
            jumps: Vec::new(),
        }
    }

    pub fn worst_status(&self) -> FilterStatus {
        self.rows.iter().map(|r| r.status).max().unwrap_or(FilterStatus::Optimal)
    }

    pub fn count_status(&self, status: FilterStatus) -> usize {
        self.rows.iter().filter(|r| r.status == status).count()
    }

    pub fn all_optimal(&self) -> bool {
        self.rows.iter().all(|r| r.status == FilterStatus::Optimal)
    }

    pub fn min_rate_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.rate_margin).fold(f64::INFINITY, f64::min)
    }

    fn observe(&mut self, s: &Scenario, t: f64, x: &DVector<f64>) {
        for b in &s.cbfs {
            let v = b.eval(t, x);
            if v < self.min_b {
                self.min_b = v;
                self.min_b_time = t;
            }
        }
        for c in &s.constraints {
            self.min_h = self.min_h.min(c.eval(t, x));
        }
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..self.state_dim).map(|i| format!("x_{i}")));
        h.extend((0..self.input_dim).map(|i| format!("u_ref_{i}")));
        h.extend((0..self.input_dim).map(|i| format!("u_{i}")));
        h.push("status".into());
        h.extend((0..self.cbf_labels.len()).map(|i| format!("B_{i}")));
        h.extend((0..self.constraint_labels.len()).map(|i| format!("h_{i}")));
        h.extend(["margin", "rate_est", "rate_margin"].map(String::from));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.csv_header())?;
        for r in &self.rows {
            let mut rec: Vec<String> = vec![r.t.to_string()];
            rec.extend(r.x.iter().chain(&r.u_ref).chain(&r.u).map(f64::to_string));
            rec.push(r.status.as_str().into());
            rec.extend(r.b.iter().chain(&r.h).map(f64::to_string));
            rec.extend([r.margin, r.rate_est, r.rate_margin].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, certificates: &[CheckReport], tol_b: f64) -> Summary {
        let worst = self.worst_status();
        let infeasible = self.count_status(FilterStatus::InfeasibleBestEffort);
        Summary {
            scenario: self.scenario.clone(),
            rows: self.rows.len(),
            cbf_labels: self.cbf_labels.clone(),
            constraint_labels: self.constraint_labels.clone(),
            min_b: finite_or_none(self.min_b),
            min_b_time: self.min_b_time,
            min_h: finite_or_none(self.min_h),
            worst_status: worst,
            clipped_rows: self.count_status(FilterStatus::Clipped),
            infeasible_rows: infeasible,
            min_rate_margin: finite_or_none(self.min_rate_margin()),
            certificates: certificates.to_vec(),
            jumps: self.jumps.clone(),
            tol_b,
            pass: self.min_b >= -tol_b && infeasible == 0,
        }
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Run summary written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub rows: usize,
    pub cbf_labels: Vec<String>,
    pub constraint_labels: Vec<String>,
    pub min_b: Option<f64>,
    pub min_b_time: f64,
    pub min_h: Option<f64>,
    pub worst_status: FilterStatus,
    pub clipped_rows: usize,
    pub infeasible_rows: usize,
    pub min_rate_margin: Option<f64>,
    pub certificates: Vec<CheckReport>,
    pub jumps: Vec<JumpEvent>,
    pub tol_b: f64,
    pub pass: bool,
}

impl Summary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// A run that stopped early, with everything recorded up to that point.
#[derive(Debug, thiserror::Error)]
#[error("simulation of {} failed: {error}", record.scenario)]
pub struct SimFailure {
    pub error: Error,
    pub record: Box<TrajectoryRecord>,
}

struct RateTracker {
    p_hist: Vec<(f64, DVector<f64>)>,
    l_hist: Vec<(f64, DVector<f64>)>,
}

impl RateTracker {
    fn push(&mut self, t: f64, p: DVector<f64>, lambda: f64) {
        for (h, v) in [(&mut self.p_hist, p), (&mut self.l_hist, DVector::from_element(1, lambda))] {
            h.push((t, v));
            if h.len() > 2 {
                h.remove(0);
            }
        }
    }
}

/// `(‖dp‖, admissible - ‖dp‖)` for one barrier at a control tick.
fn rate_status(b: &TimeVaryingCbf, t: f64, online: bool, tracker: &RateTracker) -> Result<(f64, f64)> {
    let (dp, dl) = if online {
        let p = estimate_rate_online(&tracker.p_hist)?;
        let l = estimate_rate_online(&tracker.l_hist)?;
        (p.rate.norm(), l.rate[0])
    } else {
        (b.p_traj.right_derivative(t).norm(), b.offset.right_derivative(t))
    };
    let admissible = match b.rate_bound_override {
        Some(bound) => bound,
        None => {
            // a jump only relaxes the condition
            let dl = if dl.is_finite() { dl } else { 0.0 };
            (b.alpha_p.eval(b.offset.eval(t)) + dl) / (b.ell_b * b.ell_d)
        }
    };
    Ok((dp, admissible - dp))
}

/// Closed-loop simulation: filter at every control tick, hold the input and
/// integrate with RK4 at `dt_sim`.
pub fn run_scenario(s: &Scenario) -> std::result::Result<TrajectoryRecord, SimFailure> {
    let mut record = TrajectoryRecord::new(s);
    match run_into(s, &mut record) {
        Ok(()) => Ok(record),
        Err(error) => Err(SimFailure { error, record: Box::new(record) }),
    }
}

fn run_into(s: &Scenario, record: &mut TrajectoryRecord) -> Result<()> {
    s.validate()?;
    let substeps = s.substeps()?;
    let ticks = s.ticks()?;
    let jump_times: Vec<(usize, f64)> =
        s.cbfs.iter().enumerate().flat_map(|(i, b)| b.offset.jumps().into_iter().map(move |t| (i, t))).collect();
    let mut trackers: Vec<RateTracker> =
        s.cbfs.iter().map(|_| RateTracker { p_hist: Vec::new(), l_hist: Vec::new() }).collect();
    let mut x = s.x0.clone();
    let mut u_lin = s.model.input_box.clamp(&DVector::zeros(s.model.input_dim()));
    record.observe(s, 0.0, &x);
    for k in 0..=ticks {
        let t = k as f64 * s.dt_control;
        let u_ref = s.reference.eval(&s.model, &x);
        if !s.model.is_input_affine() && k == 0 {
            u_lin = u_ref.clone();
        }
        let step = filter_input(&s.cbfs, &s.model, t, &x, &u_ref, &u_lin)?;
        let u = step.result.u.clone();
        let (mut rate_est, mut rate_margin) = (0.0, f64::INFINITY);
        for (b, tr) in s.cbfs.iter().zip(trackers.iter_mut()) {
            tr.push(t, b.p_traj.eval(t), b.offset.eval(t));
            let (est, m) = rate_status(b, t, s.online_rate, tr)?;
            if m < rate_margin {
                rate_margin = m;
                rate_est = est;
            }
        }
        record.rows.push(TrajectoryRow {
            t,
            x: x.iter().copied().collect(),
            u_ref: u_ref.iter().copied().collect(),
            u: u.iter().copied().collect(),
            status: step.result.status,
            b: s.cbfs.iter().map(|b| b.eval(t, &x)).collect(),
            h: s.constraints.iter().map(|c| c.eval(t, &x)).collect(),
            margin: step.result.margin,
            rate_est,
            rate_margin,
            violations: step.result.violations.clone(),
        });
        if k == ticks {
            break;
        }
        u_lin = u.clone();
        for j in 0..substeps {
            let t0 = t + j as f64 * s.dt_sim;
            let t1 = t + (j + 1) as f64 * s.dt_sim;
            x = step_rk4(&s.model, &x, &u, s.dt_sim).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged(t1),
                other => other,
            })?;
            for &(i, tj) in &jump_times {
                if tj > t0 && tj <= t1 {
                    let (b_left, b_right) = s.cbfs[i].eval_one_sided(tj, &x);
                    record.jumps.push(JumpEvent { cbf: s.cbfs[i].label.clone(), t: tj, b_left, b_right });
                }
            }
            record.observe(s, t1, &x);
        }
    }
    Ok(())
}
