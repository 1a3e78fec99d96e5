//! Parameter paths `p(t)` and offsets `λ(t)` with one-sided derivatives.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A smooth (or piecewise smooth) vector path given in closed form.
pub trait PathFn: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64) -> DVector<f64>;
    /// Right derivative `dp(t; 1)`.
    fn right_derivative(&self, t: f64) -> DVector<f64>;
    /// Times where the derivative may jump; rate checks always visit them.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

type VecFn = dyn Fn(f64) -> DVector<f64> + Send + Sync;

/// A [`PathFn`] made of two closures.
#[derive(Clone)]
pub struct FnPath {
    dim: usize,
    p: Arc<VecFn>,
    dp: Arc<VecFn>,
}

impl FnPath {
    pub fn new(
        dim: usize,
        p: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
        dp: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        FnPath { dim, p: Arc::new(p), dp: Arc::new(dp) }
    }
}

impl fmt::Debug for FnPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPath").field("dim", &self.dim).finish()
    }
}

impl PathFn for FnPath {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        (self.p)(t)
    }

    fn right_derivative(&self, t: f64) -> DVector<f64> {
        (self.dp)(t)
    }
}

/// Knot index `i` with `t_i <= t < t_{i+1}`, or `None` before the first knot.
fn segment_of(times: impl Fn(usize) -> f64, len: usize, t: f64) -> Option<usize> {
    if len == 0 || t < times(0) {
        return None;
    }
    let (mut lo, mut hi) = (0, len);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if times(mid) <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Piecewise-linear vector path, held constant outside its knot range.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, DVector<f64>)>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::InvalidArgument("piecewise-linear path needs a knot".into()));
        }
        let dim = knots[0].1.len();
        for (i, (t, p)) in knots.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if !t.is_finite() || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("path knot"));
            }
            if i > 0 && !(knots[i - 1].0 < *t) {
                return Err(Error::UnorderedGrid(i));
            }
        }
        Ok(PiecewiseLinear { knots })
    }

    pub fn knots(&self) -> &[(f64, DVector<f64>)] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots[0].1.len()
    }

    fn seg(&self, t: f64) -> Option<usize> {
        segment_of(|i| self.knots[i].0, self.knots.len(), t)
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self.seg(t) {
            None => self.knots[0].1.clone(),
            Some(i) if i + 1 == self.knots.len() => self.knots[i].1.clone(),
            Some(i) => {
                let (t0, p0) = &self.knots[i];
                let (t1, p1) = &self.knots[i + 1];
                p0 + (p1 - p0) * ((t - t0) / (t1 - t0))
            }
        }
    }

    pub fn right_derivative(&self, t: f64) -> DVector<f64> {
        match self.seg(t) {
            Some(i) if i + 1 < self.knots.len() => {
                let (t0, p0) = &self.knots[i];
                let (t1, p1) = &self.knots[i + 1];
                (p1 - p0) / (t1 - t0)
            }
            _ => DVector::zeros(self.dim()),
        }
    }

    pub fn end_time(&self) -> f64 {
        self.knots.last().expect("non-empty").0
    }
}

/// `p(t)`. `Rescaled` is `inner(τ(t))` for a piecewise-linear, strictly
/// increasing `τ` (stored as a one-dimensional path).
#[derive(Debug, Clone)]
pub enum ParamTrajectory {
    Constant(DVector<f64>),
    PiecewiseLinear(PiecewiseLinear),
    Analytic(Arc<dyn PathFn>),
    Rescaled { inner: Box<ParamTrajectory>, tau: PiecewiseLinear },
}

impl ParamTrajectory {
    pub fn constant(p: DVector<f64>) -> Self {
        ParamTrajectory::Constant(p)
    }

    pub fn piecewise_linear(knots: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        PiecewiseLinear::new(knots).map(ParamTrajectory::PiecewiseLinear)
    }

    pub fn analytic(path: impl PathFn + 'static) -> Self {
        ParamTrajectory::Analytic(Arc::new(path))
    }

    pub fn dim(&self) -> usize {
        match self {
            ParamTrajectory::Constant(p) => p.len(),
            ParamTrajectory::PiecewiseLinear(pl) => pl.dim(),
            ParamTrajectory::Analytic(f) => f.dim(),
            ParamTrajectory::Rescaled { inner, .. } => inner.dim(),
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            ParamTrajectory::Constant(p) => p.clone(),
            ParamTrajectory::PiecewiseLinear(pl) => pl.eval(t),
            ParamTrajectory::Analytic(f) => f.eval(t),
            ParamTrajectory::Rescaled { inner, tau } => inner.eval(tau.eval(t)[0]),
        }
    }

    /// `dp(t; 1)`.
    pub fn right_derivative(&self, t: f64) -> DVector<f64> {
        match self {
            ParamTrajectory::Constant(p) => DVector::zeros(p.len()),
            ParamTrajectory::PiecewiseLinear(pl) => pl.right_derivative(t),
            ParamTrajectory::Analytic(f) => f.right_derivative(t),
            ParamTrajectory::Rescaled { inner, tau } => {
                inner.right_derivative(tau.eval(t)[0]) * tau.right_derivative(t)[0]
            }
        }
    }

    /// Times where `dp` may be discontinuous.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            ParamTrajectory::Constant(_) => Vec::new(),
            ParamTrajectory::PiecewiseLinear(pl) => pl.knots().iter().map(|k| k.0).collect(),
            ParamTrajectory::Analytic(f) => f.breakpoints(),
            ParamTrajectory::Rescaled { tau, .. } => tau.knots().iter().map(|k| k.0).collect(),
        }
    }
}

/// A scalar offset given in closed form. The value must already be upper
/// semi-continuous at the listed jumps.
pub trait ScalarPath: Send + Sync + fmt::Debug {
    fn eval(&self, t: f64) -> f64;
    fn right_derivative(&self, t: f64) -> f64;
    fn left_limit(&self, t: f64) -> f64 {
        self.eval(t)
    }
    fn jumps(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// `offset + amplitude · sin(omega t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub offset: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl ScalarPath for Sinusoid {
    fn eval(&self, t: f64) -> f64 {
        self.offset + self.amplitude * (self.omega * t + self.phase).sin()
    }

    fn right_derivative(&self, t: f64) -> f64 {
        self.amplitude * self.omega * (self.omega * t + self.phase).cos()
    }
}

/// `λ(t)`. Piecewise-linear offsets encode a jump at `t0` by two knots with
/// the same time: the left limit first, then the right limit.
#[derive(Debug, Clone)]
pub enum OffsetTrajectory {
    Constant(f64),
    PiecewiseLinear { knots: Vec<(f64, f64)> },
    Analytic(Arc<dyn ScalarPath>),
}

impl OffsetTrajectory {
    pub fn constant(v: f64) -> Self {
        OffsetTrajectory::Constant(v)
    }

    /// Validates knot order; at most two knots may share a time.
    pub fn piecewise_linear(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::InvalidArgument("offset needs a knot".into()));
        }
        for i in 0..knots.len() {
            if !knots[i].0.is_finite() || !knots[i].1.is_finite() {
                return Err(Error::NonFinite("offset knot"));
            }
            if i > 0 && knots[i].0 < knots[i - 1].0 {
                return Err(Error::UnorderedGrid(i));
            }
            if i > 1 && knots[i].0 == knots[i - 2].0 {
                return Err(Error::OffsetAssumption {
                    time: knots[i].0,
                    reason: "more than two knots at one time".into(),
                });
            }
        }
        Ok(OffsetTrajectory::PiecewiseLinear { knots })
    }

    pub fn analytic(path: impl ScalarPath + 'static) -> Self {
        OffsetTrajectory::Analytic(Arc::new(path))
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, OffsetTrajectory::Constant(_))
    }

    /// Jump set `Ω`.
    pub fn jumps(&self) -> Vec<f64> {
        match self {
            OffsetTrajectory::Constant(_) => Vec::new(),
            OffsetTrajectory::PiecewiseLinear { knots } => {
                knots.windows(2).filter(|w| w[0].0 == w[1].0).map(|w| w[0].0).collect()
            }
            OffsetTrajectory::Analytic(f) => f.jumps(),
        }
    }

    pub fn is_jump(&self, t: f64) -> bool {
        self.jumps().contains(&t)
    }

    /// Knot times (including jumps); rate checks always visit them.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            OffsetTrajectory::PiecewiseLinear { knots } => {
                let mut ts: Vec<f64> = knots.iter().map(|k| k.0).collect();
                ts.dedup();
                ts
            }
            _ => self.jumps(),
        }
    }

    /// `(left limit, right limit)` at `t`.
    pub fn one_sided(&self, t: f64) -> (f64, f64) {
        match self {
            OffsetTrajectory::Constant(v) => (*v, *v),
            OffsetTrajectory::PiecewiseLinear { knots } => pl_one_sided(knots, t),
            OffsetTrajectory::Analytic(f) => (f.left_limit(t), f.eval(t)),
        }
    }

    /// Upper semi-continuous value: the larger one-sided limit at a jump.
    pub fn eval(&self, t: f64) -> f64 {
        let (l, r) = self.one_sided(t);
        l.max(r)
    }

    /// `dλ(t; 1)`; `+∞` at a jump.
    pub fn right_derivative(&self, t: f64) -> f64 {
        match self {
            OffsetTrajectory::Constant(_) => 0.0,
            OffsetTrajectory::PiecewiseLinear { knots } => {
                if self.is_jump(t) {
                    return f64::INFINITY;
                }
                // last knot with time <= t, then the segment leaving it
                let i = match knots.iter().rposition(|k| k.0 <= t) {
                    Some(i) => i,
                    None => return 0.0,
                };
                if i + 1 >= knots.len() {
                    return 0.0;
                }
                (knots[i + 1].1 - knots[i].1) / (knots[i + 1].0 - knots[i].0)
            }
            OffsetTrajectory::Analytic(f) => {
                if f.jumps().contains(&t) {
                    f64::INFINITY
                } else {
                    f.right_derivative(t)
                }
            }
        }
    }

    /// Assumption 2: only upward jumps, value at a jump equal to the larger
    /// one-sided limit, and (when `capacity` is given) values in `[0, Λ]` on
    /// the knots and the supplied grid.
    pub fn check_assumption(&self, capacity: Option<f64>, time_grid: &[f64]) -> Result<()> {
        for t0 in self.jumps() {
            let (l, r) = self.one_sided(t0);
            if !(l < r) {
                return Err(Error::OffsetAssumption {
                    time: t0,
                    reason: format!("jump from {l} to {r} is not upward"),
                });
            }
            if self.eval(t0) < l.max(r) {
                return Err(Error::OffsetAssumption {
                    time: t0,
                    reason: "value at jump is not upper semi-continuous".into(),
                });
            }
        }
        if let Some(cap) = capacity {
            let mut ts: Vec<f64> = time_grid.to_vec();
            ts.extend(self.breakpoints());
            for t in ts {
                let (l, r) = self.one_sided(t);
                for v in [l, r] {
                    if v < -1e-12 || v > cap + 1e-12 {
                        return Err(Error::OffsetAssumption {
                            time: t,
                            reason: format!("value {v} outside [0, {cap}]"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn pl_one_sided(knots: &[(f64, f64)], t: f64) -> (f64, f64) {
    let first = knots[0];
    let last = *knots.last().expect("non-empty");
    if t < first.0 {
        return (first.1, first.1);
    }
    if t >= last.0 {
        // the last knot holds; a jump at the final time has a left knot too
        let n = knots.len();
        if n >= 2 && knots[n - 2].0 == last.0 && t == last.0 {
            return (knots[n - 2].1, last.1);
        }
        return (last.1, last.1);
    }
    // first knot with time >= t gives the left limit, last with time <= t the right
    let left = {
        let j = knots.iter().position(|k| k.0 >= t).expect("t < last");
        if knots[j].0 == t {
            knots[j].1
        } else {
            let (a, b) = (knots[j - 1], knots[j]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        }
    };
    let right = {
        let i = knots.iter().rposition(|k| k.0 <= t).expect("t >= first");
        if knots[i].0 == t {
            knots[i].1
        } else {
            let (a, b) = (knots[i], knots[i + 1]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        }
    };
    (left, right)
}

/// `n` evenly spaced times on `[t0, t1]`.
pub fn time_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    if n <= 1 || t1 <= t0 {
        return vec![t0];
    }
    (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect()
}
