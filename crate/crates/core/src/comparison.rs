//! Class-K and extended class-K_e comparison functions.
//!
//! [`ExtendedKeFn`] covers the scalar gains that appear in barrier
//! conditions: the sigmoid-like `σ(ξ; c1, c2) = 2 c1 (1/(1 + e^{-c2 ξ}) - 1/2)`,
//! linear gains, and tabulated functions (used for the composite bound β).
//! Grid-based verifiers accept any [`ComparisonFn`], so ill-formed candidates
//! can be checked without first being forced into a valid representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::CheckReport;

/// Tolerance on `|f(0)|` for class-K membership.
pub const ZERO_TOL: f64 = 1e-12;
/// Tolerance on second differences when classifying convexity.
pub const CONVEXITY_TOL: f64 = 1e-9;
/// Default number of points for grid verifications.
pub const DEFAULT_GRID: usize = 1001;

/// Anything that maps a real number to a real number.
pub trait ComparisonFn {
    fn value(&self, xi: f64) -> f64;
}

impl<F: Fn(f64) -> f64> ComparisonFn for F {
    fn value(&self, xi: f64) -> f64 {
        self(xi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtendedKeFn {
    Sigmoid {
        c1: f64,
        c2: f64,
    },
    Linear {
        slope: f64,
    },
    /// Piecewise-linear through `(ξ, value)` knots, extended beyond the
    /// outermost knots with the boundary secant slope.
    Tabulated {
        knots: Vec<(f64, f64)>,
    },
}

impl ExtendedKeFn {
    pub fn sigmoid(c1: f64, c2: f64) -> Result<Self> {
        let f = ExtendedKeFn::Sigmoid { c1, c2 };
        f.validate()?;
        Ok(f)
    }

    pub fn linear(slope: f64) -> Result<Self> {
        let f = ExtendedKeFn::Linear { slope };
        f.validate()?;
        Ok(f)
    }

    pub fn tabulated(knots: Vec<(f64, f64)>) -> Result<Self> {
        let f = ExtendedKeFn::Tabulated { knots };
        f.validate()?;
        Ok(f)
    }

    /// Structural checks; deserialized values should pass through here.
    pub fn validate(&self) -> Result<()> {
        match self {
            ExtendedKeFn::Sigmoid { c1, c2 } => {
                if !c1.is_finite() || !c2.is_finite() {
                    return Err(Error::NonFinite("sigmoid parameters"));
                }
                if *c1 <= 0.0 || *c2 <= 0.0 {
                    return Err(Error::InvalidArgument(format!("sigmoid requires c1 > 0 and c2 > 0 (got {c1}, {c2})")));
                }
            }
            ExtendedKeFn::Linear { slope } => {
                if !slope.is_finite() || *slope <= 0.0 {
                    return Err(Error::InvalidArgument(format!("linear gain requires a positive slope (got {slope})")));
                }
            }
            ExtendedKeFn::Tabulated { knots } => {
                if knots.len() < 2 {
                    return Err(Error::InvalidArgument("tabulated function needs at least two knots".into()));
                }
                for (i, w) in knots.windows(2).enumerate() {
                    let ((x0, v0), (x1, v1)) = (w[0], w[1]);
                    if !(x0.is_finite() && v0.is_finite() && x1.is_finite() && v1.is_finite()) {
                        return Err(Error::NonFinite("tabulated knot"));
                    }
                    if x1 <= x0 {
                        return Err(Error::UnorderedGrid(i + 1));
                    }
                    if v1 <= v0 {
                        return Err(Error::InvalidArgument(format!(
                            "tabulated values must be strictly increasing (knot {})",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, xi: f64) -> f64 {
        match self {
            ExtendedKeFn::Sigmoid { c1, c2 } => sigmoid_formula(xi, *c1, *c2),
            ExtendedKeFn::Linear { slope } => slope * xi,
            ExtendedKeFn::Tabulated { knots } => {
                let (i, j) = bracket(knots, xi);
                let (x0, v0) = knots[i];
                let (x1, v1) = knots[j];
                v0 + (v1 - v0) * (xi - x0) / (x1 - x0)
            }
        }
    }

    /// Right derivative.
    pub fn slope(&self, xi: f64) -> f64 {
        match self {
            ExtendedKeFn::Sigmoid { c1, c2 } => {
                let t = (0.5 * c2 * xi).tanh();
                0.5 * c1 * c2 * (1.0 - t * t)
            }
            ExtendedKeFn::Linear { slope } => *slope,
            ExtendedKeFn::Tabulated { knots } => {
                let (i, j) = bracket(knots, xi);
                (knots[j].1 - knots[i].1) / (knots[j].0 - knots[i].0)
            }
        }
    }

    /// Interval on which the function is normally exercised.
    pub fn domain_hint(&self) -> (f64, f64) {
        match self {
            ExtendedKeFn::Sigmoid { .. } => (-2.0, 2.0),
            ExtendedKeFn::Linear { .. } => (-1.0, 1.0),
            ExtendedKeFn::Tabulated { knots } => (knots[0].0, knots[knots.len() - 1].0),
        }
    }

    pub fn knots(&self) -> Option<&[(f64, f64)]> {
        match self {
            ExtendedKeFn::Tabulated { knots } => Some(knots),
            _ => None,
        }
    }
}

impl ComparisonFn for ExtendedKeFn {
    fn value(&self, xi: f64) -> f64 {
        self.eval(xi)
    }
}

// Index pair of the segment used for `xi`; right-continuous at interior knots.
fn bracket(knots: &[(f64, f64)], xi: f64) -> (usize, usize) {
    let n = knots.len();
    if xi <= knots[0].0 {
        return (0, 1);
    }
    if xi >= knots[n - 1].0 {
        return (n - 2, n - 1);
    }
    let k = knots.partition_point(|(x, _)| *x <= xi);
    (k - 1, k)
}

// 2 c1 (1/(1+e^{-c2 ξ}) - 1/2) == c1 tanh(c2 ξ / 2); the tanh form is exactly odd.
fn sigmoid_formula(xi: f64, c1: f64, c2: f64) -> f64 {
    c1 * (0.5 * c2 * xi).tanh()
}

/// `σ(ξ; c1, c2)`.
pub fn sigmoid_eval(xi: f64, c1: f64, c2: f64) -> Result<f64> {
    if !xi.is_finite() || !c1.is_finite() || !c2.is_finite() {
        return Err(Error::NonFinite("sigmoid_eval"));
    }
    if c1 <= 0.0 || c2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigmoid requires c1 > 0 and c2 > 0 (got {c1}, {c2})")));
    }
    Ok(sigmoid_formula(xi, c1, c2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityTag {
    ConvexOnNonneg,
    ConcaveOnNonneg,
    Neither,
}

impl ConvexityTag {
    /// Second-difference sign test. Differences within [`CONVEXITY_TOL`]
    /// count toward whichever sign dominates; a purely linear sample is
    /// reported as convex.
    pub fn classify<F: ComparisonFn + ?Sized>(f: &F, grid: &[f64]) -> ConvexityTag {
        let (mut pos, mut neg) = (0usize, 0usize);
        for w in grid.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            let (fa, fb, fc) = (f.value(a), f.value(b), f.value(c));
            // divided second difference handles non-uniform grids
            let d = (fc - fb) / (c - b) - (fb - fa) / (b - a);
            if d > CONVEXITY_TOL {
                pos += 1;
            } else if d < -CONVEXITY_TOL {
                neg += 1;
            }
        }
        match (pos, neg) {
            (_, 0) => ConvexityTag::ConvexOnNonneg,
            (0, _) => ConvexityTag::ConcaveOnNonneg,
            _ => ConvexityTag::Neither,
        }
    }
}

/// `n` evenly spaced points on `[lo, hi]`, endpoints included.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| if i == n - 1 { hi } else { lo + step * i as f64 }).collect()
        }
    }
}

/// Grid over `[lo, hi]` (with `lo < 0 < hi`) that contains 0 exactly.
pub fn grid_through_zero(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(3);
    let frac = -lo / (hi - lo);
    let n_neg = ((frac * (n - 1) as f64).round() as usize).clamp(1, n - 2) + 1;
    let n_pos = n - n_neg + 1;
    let mut grid = uniform_grid(lo, 0.0, n_neg);
    grid.pop();
    grid.extend(uniform_grid(0.0, hi, n_pos));
    grid
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("grid needs at least two points".into()));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("grid"));
    }
    for (i, w) in grid.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::UnorderedGrid(i + 1));
        }
    }
    Ok(())
}

/// Strict monotonicity over `grid` and `|f(0)| <= 1e-12`.
pub fn verify_class_ke<F: ComparisonFn + ?Sized>(f: &F, grid: &[f64]) -> Result<CheckReport> {
    check_grid(grid)?;
    if !grid.contains(&0.0) {
        return Err(Error::InvalidArgument("grid must contain 0".into()));
    }
    let mut report = CheckReport::new("verify_class_ke");
    let at_zero = f.value(0.0);
    if at_zero.abs() > ZERO_TOL {
        report.fail(-at_zero.abs(), vec![0.0, at_zero], format!("f(0) = {at_zero:e}"));
    }
    let mut min_increase = f64::INFINITY;
    let mut first: Option<(f64, f64)> = None;
    for w in grid.windows(2) {
        let inc = f.value(w[1]) - f.value(w[0]);
        min_increase = min_increase.min(inc);
        if !(inc > 0.0) && first.is_none() {
            first = Some((w[0], w[1]));
        }
    }
    if let Some((a, b)) = first {
        report.fail(min_increase, vec![a, b], format!("not strictly increasing between {a} and {b}"));
    } else if report.pass {
        report.worst_margin = min_increase;
    }
    Ok(report)
}

/// Premise on the pair (α, α_p) for shifting by up to `capacity`:
/// `α(-ξ) <= -α_p(ξ)` on `[0, capacity]`, α_p class-K there, and α_p convex
/// or concave.
pub fn verify_alpha_p<A, P>(alpha: &A, alpha_p: &P, capacity: f64, grid_size: usize) -> Result<CheckReport>
where
    A: ComparisonFn + ?Sized,
    P: ComparisonFn + ?Sized,
{
    if !capacity.is_finite() || capacity <= 0.0 {
        return Err(Error::InvalidArgument(format!("capacity must be positive (got {capacity})")));
    }
    if grid_size < 3 {
        return Err(Error::InvalidArgument("grid_size must be at least 3".into()));
    }
    let grid = uniform_grid(0.0, capacity, grid_size);
    let mut report = CheckReport::new("verify_alpha_p");

    let mut worst = f64::INFINITY;
    let mut worst_xi = 0.0;
    for &xi in &grid {
        let m = -alpha_p.value(xi) - alpha.value(-xi);
        if m < worst {
            worst = m;
            worst_xi = xi;
        }
    }
    report.worst_margin = worst;
    report.witness = vec![worst_xi];
    if worst < -ZERO_TOL {
        report.fail(worst, vec![worst_xi], format!("alpha(-xi) > -alpha_p(xi) at xi = {worst_xi}"));
    }

    let class_k = verify_class_ke(alpha_p, &grid)?;
    if !class_k.pass {
        report.fail(
            class_k.worst_margin,
            class_k.witness.clone(),
            format!("alpha_p is not class K: {}", class_k.message),
        );
    }
    if ConvexityTag::classify(alpha_p, &grid) == ConvexityTag::Neither {
        report.fail(report.worst_margin, vec![], "alpha_p is neither convex nor concave".to_string());
    }
    Ok(report)
}

/// Tabulated β(s) = sup { α(x1) + α_p(x2) : x1 + x2 = s, x2 ∈ [0, A], x1 >= -A }.
///
/// Knots cover `[-A, hint_hi(α) + A]` and always include `s = 0`, where the
/// value is exactly 0. Every other knot is lifted by a curvature bound
/// estimated from the knot data so the piecewise-linear interpolant stays
/// above the true supremum between knots.
pub fn compose_beta(
    alpha: &ExtendedKeFn,
    alpha_p: &ExtendedKeFn,
    a: f64,
    decomposition_grid: usize,
) -> Result<ExtendedKeFn> {
    let premise = verify_alpha_p(alpha, alpha_p, a, DEFAULT_GRID)?;
    if !premise.pass {
        return Err(Error::AlphaPremise(premise.message));
    }
    let n = decomposition_grid.max(8);
    let s_hi = alpha.domain_hint().1.max(0.0) + a;
    let s_grid = grid_through_zero(-a, s_hi, n);

    let raw: Vec<f64> =
        s_grid.iter().map(|&s| if s == 0.0 { 0.0 } else { decomposition_sup(alpha, alpha_p, a, s, n) }).collect();

    let mut curvature: f64 = 0.0;
    let mut h_max: f64 = 0.0;
    for i in 1..s_grid.len() - 1 {
        // β has a kink at 0 that sits on a knot; it does not affect
        // interpolation error on either side
        if s_grid[i] == 0.0 {
            continue;
        }
        let (h0, h1) = (s_grid[i] - s_grid[i - 1], s_grid[i + 1] - s_grid[i]);
        let d = ((raw[i + 1] - raw[i]) / h1 - (raw[i] - raw[i - 1]) / h0) / (0.5 * (h0 + h1));
        curvature = curvature.max(d.abs());
        h_max = h_max.max(h0).max(h1);
    }
    let lift = curvature * h_max * h_max + 1e-12;

    let mut knots = Vec::with_capacity(s_grid.len());
    for (&s, &r) in s_grid.iter().zip(&raw) {
        let v = if s == 0.0 { 0.0 } else { r + lift };
        if s < 0.0 && v >= 0.0 {
            return Err(Error::InvalidArgument("decomposition grid too coarse for a monotone bound near 0".into()));
        }
        knots.push((s, v));
    }
    for i in 1..knots.len() {
        if knots[i].1 <= knots[i - 1].1 {
            // β is nondecreasing; flat stretches are nudged up to keep the
            // tabulated representation strictly increasing.
            knots[i].1 = knots[i - 1].1 + f64::EPSILON * knots[i - 1].1.abs().max(1.0);
        }
    }
    ExtendedKeFn::tabulated(knots)
}

// sup over x2 in [0, min(A, s + A)] of α(s - x2) + α_p(x2): grid scan, then
// golden-section refinement around the best grid point.
fn decomposition_sup(alpha: &ExtendedKeFn, alpha_p: &ExtendedKeFn, a: f64, s: f64, n: usize) -> f64 {
    let hi = a.min(s + a);
    if hi <= 0.0 {
        return alpha.eval(s) + alpha_p.eval(0.0);
    }
    let g = |x2: f64| alpha.eval(s - x2) + alpha_p.eval(x2);
    let xs = uniform_grid(0.0, hi, n);
    let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
    for (i, &x2) in xs.iter().enumerate() {
        let v = g(x2);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let lo_b = xs[best_i.saturating_sub(1)];
    let hi_b = xs[(best_i + 1).min(xs.len() - 1)];
    best.max(golden_max(&g, lo_b, hi_b, 60))
}

fn golden_max<G: Fn(f64) -> f64>(g: &G, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..iters {
        if gc > gd {
            hi = d;
            d = c;
            gd = gc;
            c = hi - INV_PHI * (hi - lo);
            gc = g(c);
        } else {
            lo = c;
            c = d;
            gc = gd;
            d = lo + INV_PHI * (hi - lo);
            gd = g(d);
        }
    }
    gc.max(gd).max(g(lo)).max(g(hi))
}

/// `c_α = α_p(λ)` for `λ ∈ [0, capacity]`.
pub fn c_alpha<P: ComparisonFn + ?Sized>(alpha_p: &P, lambda: f64, capacity: f64) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(Error::NonFinite("lambda"));
    }
    if lambda < 0.0 || lambda > capacity {
        return Err(Error::OutOfRange { value: lambda, lo: 0.0, hi: capacity });
    }
    Ok(alpha_p.value(lambda))
}
