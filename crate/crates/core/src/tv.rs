//! `B(t, x) = b(D(x; p(t))) + λ(t)`, its rate certificates, time rescaling
//! and time-varying constraints.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cbf::ShiftableCbf;
use crate::comparison::ExtendedKeFn;
use crate::equivariance::DiffeoFamily;
use crate::error::{Error, Result};
use crate::field::{Annulus, FieldRef};
use crate::report::CheckReport;
use crate::trajectory::{OffsetTrajectory, ParamTrajectory, PiecewiseLinear};

pub const RATE_TOL: f64 = 1e-12;
pub const UNDERAPPROX_STATE_TOL: f64 = 1e-9;
pub const UNDERAPPROX_TIME_TOL: f64 = 1e-12;
const MIN_RATE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TimeVaryingCbf {
    pub label: String,
    pub base: ShiftableCbf,
    pub family: DiffeoFamily,
    pub p_traj: ParamTrajectory,
    pub offset: OffsetTrajectory,
    pub alpha_p: ExtendedKeFn,
    pub ell_b: f64,
    pub ell_d: f64,
    /// Replaces `α_p(λ)/(ℓ_b ℓ_D)` as the admissible rate when set.
    pub rate_bound_override: Option<f64>,
    /// Only enforce the filter constraint while `D(x; p(t))` lies in this
    /// ring (transformed coordinates).
    pub active_region: Option<Annulus>,
    /// `false` for heuristic barriers that carry no shiftability guarantee.
    pub certified_field: bool,
    pub certificate: Option<CheckReport>,
}

impl TimeVaryingCbf {
    pub fn new(
        label: impl Into<String>,
        base: ShiftableCbf,
        family: DiffeoFamily,
        p_traj: ParamTrajectory,
        offset: OffsetTrajectory,
        alpha_p: ExtendedKeFn,
    ) -> Result<Self> {
        if family.state_dim() != base.dim() {
            return Err(Error::DimensionMismatch { expected: base.dim(), got: family.state_dim() });
        }
        if p_traj.dim() != family.param_dim() {
            return Err(Error::DimensionMismatch { expected: family.param_dim(), got: p_traj.dim() });
        }
        if let OffsetTrajectory::Constant(l) = offset {
            if !(0.0..=base.capacity).contains(&l) {
                return Err(Error::OutOfRange { value: l, lo: 0.0, hi: base.capacity });
            }
        }
        let ell_d = family.lipschitz_p().unwrap_or(1.0);
        Ok(TimeVaryingCbf {
            label: label.into(),
            base,
            family,
            p_traj,
            offset,
            alpha_p,
            ell_b: 1.0,
            ell_d,
            rate_bound_override: None,
            active_region: None,
            certified_field: true,
            certificate: None,
        })
    }

    pub fn with_lipschitz(mut self, ell_b: f64, ell_d: f64) -> Self {
        self.ell_b = ell_b;
        self.ell_d = ell_d;
        self
    }

    pub fn with_rate_bound(mut self, bound: f64) -> Self {
        self.rate_bound_override = Some(bound);
        self
    }

    pub fn with_active_region(mut self, region: Annulus) -> Self {
        self.active_region = Some(region);
        self
    }

    pub fn uncertified(mut self) -> Self {
        self.certified_field = false;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.base.dim()
    }

    /// `D(x; p(t))`.
    pub fn transformed_state(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.family.apply(x, &self.p_traj.eval(t))
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.base.eval(&self.transformed_state(t, x)) + self.offset.eval(t)
    }

    /// `(B(t⁻, x), B(t⁺, x))` using the one-sided offset limits.
    pub fn eval_one_sided(&self, t: f64, x: &DVector<f64>) -> (f64, f64) {
        let b = self.base.eval(&self.transformed_state(t, x));
        let (l, r) = self.offset.one_sided(t);
        (b + l, b + r)
    }

    pub fn is_active(&self, t: f64, x: &DVector<f64>) -> bool {
        self.active_region.as_ref().is_none_or(|a| a.contains(&self.transformed_state(t, x)))
    }

    /// Admissible `‖dp‖` at time `t`.
    pub fn rate_bound(&self, t: f64) -> f64 {
        self.rate_bound_override.unwrap_or_else(|| self.alpha_p.eval(self.offset.eval(t)) / (self.ell_b * self.ell_d))
    }

    /// Runs the applicable rate check on `grid` and stores the result.
    pub fn certify(&mut self, grid: &[f64]) -> Result<&CheckReport> {
        let mut report = if let Some(bound) = self.rate_bound_override {
            check_rate_bound(&self.p_traj, bound, grid)
        } else if let OffsetTrajectory::Constant(l) = self.offset {
            check_rate_thm1(&self.p_traj, l, &self.alpha_p, self.ell_b, self.ell_d, grid)?
        } else {
            self.offset.check_assumption(Some(self.base.capacity), grid)?;
            check_rate_thm2(&self.p_traj, &self.offset, &self.alpha_p, self.ell_b, self.ell_d, grid)?
        };
        if !self.certified_field {
            report.message = format!("rate check only; barrier field is heuristic. {}", report.message);
        }
        report.check = format!("{}:{}", self.label, report.check);
        self.certificate = Some(report);
        Ok(self.certificate.as_ref().expect("just set"))
    }

    pub fn is_certified(&self) -> bool {
        self.certified_field && self.certificate.as_ref().is_some_and(|c| c.pass)
    }
}

/// `B(t, x)` as a free function.
pub fn eval_b(b: &TimeVaryingCbf, t: f64, x: &DVector<f64>) -> f64 {
    b.eval(t, x)
}

fn merged_times(grid: &[f64], extra: &[f64]) -> Vec<f64> {
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let mut ts: Vec<f64> = grid.to_vec();
    ts.extend(extra.iter().copied().filter(|t| *t >= lo && *t <= hi));
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

fn rate_report(check: &str, ts: &[f64], margins: &[f64]) -> CheckReport {
    let mut report = CheckReport::new(check);
    if ts.is_empty() {
        return report;
    }
    let (iw, &worst) = margins.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    if worst < -RATE_TOL {
        report.fail(worst, vec![ts[iw]], format!("rate condition violated at t = {:.4} (margin {worst:.4e})", ts[iw]));
    } else {
        report.worst_margin = worst;
        report.witness = vec![ts[iw]];
        report.message = format!("{} times checked", ts.len());
    }
    report
}

/// `‖dp(t; 1)‖ <= bound` on the grid plus every breakpoint inside it.
pub fn check_rate_bound(p: &ParamTrajectory, bound: f64, grid: &[f64]) -> CheckReport {
    let ts = merged_times(grid, &p.breakpoints());
    let margins: Vec<f64> = ts.par_iter().map(|&t| bound - p.right_derivative(t).norm()).collect();
    rate_report("check_rate_thm1", &ts, &margins)
}

/// `‖dp(t; 1)‖ <= α_p(λ) / (ℓ_b ℓ_D)`. Margins are in rate units.
pub fn check_rate_thm1(
    p: &ParamTrajectory,
    lambda: f64,
    alpha_p: &ExtendedKeFn,
    ell_b: f64,
    ell_d: f64,
    grid: &[f64],
) -> Result<CheckReport> {
    if !(ell_b > 0.0 && ell_d > 0.0) {
        return Err(Error::InvalidArgument("Lipschitz constants must be positive".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::OutOfRange { value: lambda, lo: 0.0, hi: f64::INFINITY });
    }
    Ok(check_rate_bound(p, alpha_p.eval(lambda) / (ell_b * ell_d), grid))
}

/// `(α_p(λ(t)) + dλ(t; 1)) / (ℓ_b ℓ_D)`, the admissible `‖dp‖` at `t`.
pub fn p_margin(alpha_p: &ExtendedKeFn, offset: &OffsetTrajectory, ell_b: f64, ell_d: f64, t: f64) -> Result<f64> {
    if offset.is_jump(t) {
        return Err(Error::OffsetAssumption { time: t, reason: "p-margin is undefined at a jump".into() });
    }
    Ok((alpha_p.eval(offset.eval(t)) + offset.right_derivative(t)) / (ell_b * ell_d))
}

/// `ℓ_b ℓ_D ‖dp‖ - dλ <= α_p(λ)`, reported as `p_margin - ‖dp‖` so margins
/// match [`check_rate_thm1`] when the offset is constant. Jump times pass
/// automatically. The offset's jump structure is checked first.
pub fn check_rate_thm2(
    p: &ParamTrajectory,
    offset: &OffsetTrajectory,
    alpha_p: &ExtendedKeFn,
    ell_b: f64,
    ell_d: f64,
    grid: &[f64],
) -> Result<CheckReport> {
    if !(ell_b > 0.0 && ell_d > 0.0) {
        return Err(Error::InvalidArgument("Lipschitz constants must be positive".into()));
    }
    offset.check_assumption(None, grid)?;
    let mut extra = p.breakpoints();
    extra.extend(offset.breakpoints());
    let ts = merged_times(grid, &extra);
    let margins: Vec<f64> = ts
        .par_iter()
        .map(|&t| {
            if offset.is_jump(t) {
                f64::INFINITY
            } else {
                (alpha_p.eval(offset.eval(t)) + offset.right_derivative(t)) / (ell_b * ell_d)
                    - p.right_derivative(t).norm()
            }
        })
        .collect();
    Ok(rate_report("check_rate_thm2", &ts, &margins))
}

/// Direct time parameterisation: `D(x; t)` with `‖∂D/∂t‖ <= α_p(λ)/ℓ_b`, no
/// `ℓ_D` involved. `dd_dt` returns `sup_x ‖∂D/∂t(x; t)‖`.
pub fn check_rate_direct_time(
    dd_dt: &(dyn Fn(f64) -> f64 + Sync),
    lambda: f64,
    alpha_p: &ExtendedKeFn,
    ell_b: f64,
    grid: &[f64],
) -> Result<CheckReport> {
    if !(ell_b > 0.0) {
        return Err(Error::InvalidArgument("ell_b must be positive".into()));
    }
    let bound = alpha_p.eval(lambda) / ell_b;
    let margins: Vec<f64> = grid.par_iter().map(|&t| bound - dd_dt(t)).collect();
    Ok(rate_report("check_rate_direct_time", grid, &margins))
}

/// Slows `p` down so that `‖d(p∘τ)‖ <= bound`, integrating
/// `dτ/dt = min(1, bound / ‖dp(τ)‖)`.
///
/// For piecewise-linear paths the rate is constant between knots, so `τ` is
/// built exactly with a knot at every path knot. Other paths are integrated
/// on `time_grid`'s spacing using the larger of the two end-point rates of
/// each step. Returns `τ` (as a 1-d path) and the rescaled trajectory.
pub fn rescale_time(p: &ParamTrajectory, bound: f64, time_grid: &[f64]) -> Result<(PiecewiseLinear, ParamTrajectory)> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::InvalidArgument(format!("rescale bound must be positive, got {bound}")));
    }
    let slope = |rate: f64| (bound / rate.max(MIN_RATE)).min(1.0);
    let mut knots: Vec<(f64, DVector<f64>)> = vec![(0.0, DVector::from_element(1, 0.0))];
    let (mut t, mut tau) = (0.0f64, 0.0f64);
    fn push(t: f64, tau: f64, knots: &mut Vec<(f64, DVector<f64>)>) {
        if t > knots.last().expect("non-empty").0 {
            knots.push((t, DVector::from_element(1, tau)));
        }
    }
    match p {
        ParamTrajectory::PiecewiseLinear(pl) => {
            let t_first = pl.knots()[0].0;
            if t_first > 0.0 {
                // p is held before its first knot
                t = t_first;
                tau = t_first;
                push(t, tau, &mut knots);
            }
            for w in pl.knots().windows(2) {
                let (t0, t1) = (w[0].0, w[1].0);
                if t1 <= tau {
                    continue;
                }
                let start = tau.max(t0);
                let k = slope(pl.right_derivative(start).norm());
                t += (t1 - start) / k;
                tau = t1;
                push(t, tau, &mut knots);
            }
        }
        _ => {
            let horizon = time_grid.iter().copied().fold(0.0, f64::max);
            let n = time_grid.len().max(2);
            let h = horizon / (n - 1) as f64;
            if h > 0.0 {
                let mut breaks = p.breakpoints();
                breaks.sort_by(f64::total_cmp);
                while tau < horizon {
                    // never step across a breakpoint of p
                    let mut dt_tau = h.min(horizon - tau);
                    if let Some(&b) = breaks.iter().find(|&&b| b > tau && b < tau + dt_tau) {
                        dt_tau = b - tau;
                    }
                    let r0 = p.right_derivative(tau).norm();
                    let r1 = p.right_derivative(tau + dt_tau * (1.0 - 1e-9)).norm();
                    let rmid = p.right_derivative(tau + 0.5 * dt_tau).norm();
                    let k = slope(r0.max(r1).max(rmid));
                    t += dt_tau / k;
                    tau += dt_tau;
                    push(t, tau, &mut knots);
                }
            }
        }
    }
    // identity beyond the end of the original path
    let tail = t + 1.0;
    push(tail, tau + 1.0, &mut knots);
    let tau_map = PiecewiseLinear::new(knots)?;
    let tau_extended = extend_identity(tau_map);
    let rescaled = ParamTrajectory::Rescaled { inner: Box::new(p.clone()), tau: tau_extended.clone() };
    Ok((tau_extended, rescaled))
}

// PiecewiseLinear holds its last value; τ must keep growing with slope 1.
fn extend_identity(tau: PiecewiseLinear) -> PiecewiseLinear {
    let mut knots = tau.knots().to_vec();
    let (t_end, v_end) = (knots.last().expect("non-empty").0, knots.last().expect("non-empty").1[0]);
    let far = 1e9;
    knots.push((t_end + far, DVector::from_element(1, v_end + far)));
    PiecewiseLinear::new(knots).expect("increasing by construction")
}

/// `h(t, x) = h̄(D(x; q(t))) + γ(t)`.
#[derive(Debug, Clone)]
pub struct TvConstraint {
    pub label: String,
    pub hbar: FieldRef,
    pub family: DiffeoFamily,
    pub q_traj: ParamTrajectory,
    pub gamma: OffsetTrajectory,
}

impl TvConstraint {
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.hbar.eval(&self.family.apply(x, &self.q_traj.eval(t))) + self.gamma.eval(t)
    }
}

/// `b <= h̄` on samples of `b`'s domain and `λ <= γ` on `time_grid`.
pub fn check_underapprox(
    b: &ShiftableCbf,
    constraint: &TvConstraint,
    offset: &OffsetTrajectory,
    samples: usize,
    time_grid: &[f64],
    seed: u64,
) -> Result<CheckReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    if constraint.hbar.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: b.dim(), got: constraint.hbar.dim() });
    }
    let mut report = CheckReport::new("check_underapprox");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<DVector<f64>> = (0..samples).map(|_| b.domain.sample_box(&mut rng)).collect();
    let state_margins: Vec<f64> = xs.par_iter().map(|x| constraint.hbar.eval(x) - b.eval(x)).collect();
    let mut worst = f64::INFINITY;
    for (x, &m) in xs.iter().zip(&state_margins) {
        worst = worst.min(m);
        if m < -UNDERAPPROX_STATE_TOL {
            report.fail(m, x.iter().copied().collect(), format!("b exceeds h̄ by {:.3e}", -m));
        }
    }
    let mut ts = time_grid.to_vec();
    ts.extend(offset.breakpoints());
    ts.extend(constraint.gamma.breakpoints());
    for &t in &ts {
        let m = constraint.gamma.eval(t) - offset.eval(t);
        worst = worst.min(m);
        if m < -UNDERAPPROX_TIME_TOL {
            report.fail(m, vec![t], format!("λ exceeds γ at t = {t}"));
        }
    }
    if report.pass {
        report.worst_margin = worst;
    }
    Ok(report)
}
