//! Exact least-distance QP over a box with a few half-space constraints.
//!
//! Every candidate active set (box faces and linear constraints taken as
//! equalities, at most `m` of them, linearly independent) is solved in closed
//! form; the nearest feasible candidate is the minimiser.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::InputBox;
use crate::error::{Error, Result};

pub const FEAS_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-10;
const OBJ_TIE: f64 = 1e-12;
pub const MAX_INPUT_DIM: usize = 4;
pub const MAX_CONSTRAINTS: usize = 8;

/// `aᵀu >= b0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub a: Vec<f64>,
    pub b0: f64,
}

impl LinearConstraint {
    pub fn new(a: DVector<f64>, b0: f64) -> Result<Self> {
        if !b0.is_finite() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear constraint"));
        }
        Ok(LinearConstraint { a: a.iter().copied().collect(), b0 })
    }

    pub fn normal(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.a)
    }

    /// `aᵀu - b0`.
    pub fn slack(&self, u: &DVector<f64>) -> f64 {
        self.a.iter().zip(u.iter()).map(|(a, u)| a * u).sum::<f64>() - self.b0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Optimal,
    /// Feasible; only box faces are active and `u_ref` lay outside the box.
    Clipped,
    InfeasibleBestEffort,
}

impl FilterStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterStatus::Optimal => "optimal",
            FilterStatus::Clipped => "clipped",
            FilterStatus::InfeasibleBestEffort => "infeasible_best_effort",
        }
    }

    pub fn is_feasible(&self) -> bool {
        !matches!(self, FilterStatus::InfeasibleBestEffort)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u: DVector<f64>,
    pub status: FilterStatus,
    /// Indices of linear constraints with `|aᵀu - b0| <= 1e-9`.
    pub active_constraints: Vec<usize>,
    /// `min_i aᵀu - b0`, `+∞` with no constraints.
    pub margin: f64,
    /// Per-constraint `max(0, b0 - aᵀu)`.
    pub violations: Vec<f64>,
}

// Row of the combined system: normal · u >= rhs.
#[derive(Debug, Clone)]
struct Row {
    normal: DVector<f64>,
    rhs: f64,
    // box coordinate for face rows, used to skip opposite-face pairs
    coord: Option<usize>,
}

fn rows_of(bx: &InputBox, constraints: &[LinearConstraint]) -> Vec<Row> {
    let m = bx.dim();
    let mut rows = Vec::with_capacity(2 * m + constraints.len());
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        rows.push(Row { normal: e.clone(), rhs: bx.lo[j], coord: Some(j) });
        rows.push(Row { normal: -e, rhs: -bx.hi[j], coord: Some(j) });
    }
    for c in constraints {
        rows.push(Row { normal: c.normal(), rhs: c.b0, coord: None });
    }
    rows
}

/// Projection of `u_ref` onto `{u : N u = r}` for the rows in `subset`, or
/// `None` when the normals are dependent.
fn project(u_ref: &DVector<f64>, rows: &[Row], subset: &[usize]) -> Option<DVector<f64>> {
    if subset.is_empty() {
        return Some(u_ref.clone());
    }
    let m = u_ref.len();
    let k = subset.len();
    let n = DMatrix::from_fn(k, m, |i, j| rows[subset[i]].normal[j]);
    let r = DVector::from_fn(k, |i, _| rows[subset[i]].rhs);
    let svd = n.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return None;
    }
    let gram = &n * n.transpose();
    let z = gram.lu().solve(&(r - &n * u_ref))?;
    Some(u_ref + n.transpose() * z)
}

fn feasible(u: &DVector<f64>, rows: &[Row]) -> bool {
    rows.iter().all(|row| row.normal.dot(u) - row.rhs >= -FEAS_TOL * (1.0 + row.rhs.abs()))
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

// All index subsets of 0..n with size <= k and no two face rows of the same
// coordinate, in increasing bitmask order.
fn subsets(rows: &[Row], k: usize, exact: bool) -> Vec<Vec<usize>> {
    let n = rows.len();
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size > k || (exact && size != k) {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut seen = [false; MAX_INPUT_DIM];
        let clash = idx.iter().any(|&i| match rows[i].coord {
            Some(j) => std::mem::replace(&mut seen[j], true),
            None => false,
        });
        if !clash {
            out.push(idx);
        }
    }
    out
}

fn better(cand: (f64, &DVector<f64>), best: Option<(f64, &DVector<f64>)>) -> bool {
    match best {
        None => true,
        Some((bv, bu)) => {
            let tie = OBJ_TIE * bv.abs();
            cand.0 < bv - tie || (cand.0 <= bv + tie && lex_cmp(cand.1, bu) == Ordering::Less)
        }
    }
}

/// `argmin ‖u - u_ref‖²` over the box and the half-spaces. Falls back to the
/// least total violation over the box when the feasible set is empty.
pub fn solve_box_qp(u_ref: &DVector<f64>, bx: &InputBox, constraints: &[LinearConstraint]) -> Result<FilterResult> {
    let m = bx.dim();
    if u_ref.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: u_ref.len() });
    }
    if m == 0 || m > MAX_INPUT_DIM {
        return Err(Error::InvalidArgument(format!("input dimension {m} outside 1..={MAX_INPUT_DIM}")));
    }
    if constraints.len() > MAX_CONSTRAINTS {
        return Err(Error::InvalidArgument(format!("at most {MAX_CONSTRAINTS} constraints supported")));
    }
    if u_ref.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("u_ref"));
    }
    for c in constraints {
        if c.a.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: c.a.len() });
        }
    }
    let rows = rows_of(bx, constraints);
    if bx.contains(u_ref) && constraints.iter().all(|c| c.slack(u_ref) >= 0.0) {
        return Ok(finish(u_ref.clone(), FilterStatus::Optimal, constraints));
    }

    let mut best: Option<(f64, DVector<f64>)> = None;
    for s in subsets(&rows, m, false) {
        let Some(u) = project(u_ref, &rows, &s) else { continue };
        if !feasible(&u, &rows) {
            continue;
        }
        let obj = (&u - u_ref).norm_squared();
        if better((obj, &u), best.as_ref().map(|(v, u)| (*v, u))) {
            best = Some((obj, u));
        }
    }

    let (u, status) = match best {
        Some((_, u)) => {
            // snap onto the box; candidates are feasible only up to FEAS_TOL
            let u = bx.clamp(&u);
            let any_linear_active = constraints.iter().any(|c| c.slack(&u).abs() <= FEAS_TOL * (1.0 + c.b0.abs()));
            let status =
                if !bx.contains(u_ref) && !any_linear_active { FilterStatus::Clipped } else { FilterStatus::Optimal };
            (u, status)
        }
        None => (least_violation(u_ref, bx, constraints, &rows), FilterStatus::InfeasibleBestEffort),
    };
    Ok(finish(u, status, constraints))
}

fn total_violation(u: &DVector<f64>, constraints: &[LinearConstraint]) -> f64 {
    constraints.iter().map(|c| (-c.slack(u)).max(0.0)).sum()
}

// The violation is convex piecewise linear, so its minimisers over the box
// form a union of faces of the arrangement of box faces and constraint
// planes. Projecting u_ref onto every such face's affine hull (vertices
// included) yields both the minimum and the minimiser nearest u_ref.
fn least_violation(
    u_ref: &DVector<f64>,
    bx: &InputBox,
    constraints: &[LinearConstraint],
    rows: &[Row],
) -> DVector<f64> {
    let m = bx.dim();
    let face_rows: Vec<Row> = rows.iter().filter(|r| r.coord.is_some()).cloned().collect();
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    for s in subsets(rows, m, false) {
        let Some(u) = project(u_ref, rows, &s) else { continue };
        if !feasible(&u, &face_rows) {
            continue;
        }
        let u = bx.clamp(&u);
        let v = total_violation(&u, constraints);
        let d = (&u - u_ref).norm_squared();
        let take = match &best {
            None => true,
            Some((bv, bd, bu)) => {
                let tie = 1e-12 * (1.0 + bv.abs());
                if v < bv - tie {
                    true
                } else if v <= bv + tie {
                    let dtie = OBJ_TIE * bd.abs();
                    d < bd - dtie || (d <= bd + dtie && lex_cmp(&u, bu) == Ordering::Less)
                } else {
                    false
                }
            }
        };
        if take {
            best = Some((v, d, u));
        }
    }
    best.map(|b| b.2).unwrap_or_else(|| bx.clamp(u_ref))
}

fn finish(u: DVector<f64>, status: FilterStatus, constraints: &[LinearConstraint]) -> FilterResult {
    let slacks: Vec<f64> = constraints.iter().map(|c| c.slack(&u)).collect();
    let active_constraints = constraints
        .iter()
        .zip(&slacks)
        .enumerate()
        .filter(|(_, (c, s))| s.abs() <= FEAS_TOL * (1.0 + c.b0.abs()))
        .map(|(i, _)| i)
        .collect();
    let margin = slacks.iter().copied().fold(f64::INFINITY, f64::min);
    let violations = slacks.iter().map(|s| (-s).max(0.0)).collect();
    FilterResult { u, status, active_constraints, margin, violations }
}

/// Smallest `‖2(u - u_ref) - Σ μ_i n_i‖` over `μ >= 0`, where `n_i` ranges
/// over the normals of active box faces and active linear constraints.
/// Zero at an exact optimum.
pub fn kkt_residual(u: &DVector<f64>, u_ref: &DVector<f64>, bx: &InputBox, constraints: &[LinearConstraint]) -> f64 {
    let g = (u - u_ref) * 2.0;
    let tol = 1e-7;
    let active: Vec<DVector<f64>> = rows_of(bx, constraints)
        .into_iter()
        .filter(|r| (r.normal.dot(u) - r.rhs).abs() <= tol * (1.0 + r.rhs.abs()))
        .map(|r| r.normal)
        .collect();
    let mut best = g.norm();
    let n = active.len().min(12);
    for mask in 1u32..(1u32 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() > u.len() {
            continue;
        }
        let a = DMatrix::from_fn(u.len(), idx.len(), |i, j| active[idx[j]][i]);
        let ata = a.transpose() * &a;
        let Some(mu) = ata.lu().solve(&(a.transpose() * &g)) else { continue };
        if mu.iter().any(|&v| v < -1e-12 || !v.is_finite()) {
            continue;
        }
        best = best.min((&g - &a * mu).norm());
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn unit_box(m: usize) -> InputBox {
        InputBox::symmetric(1.0, m)
    }

    fn lc(a: &[f64], b0: f64) -> LinearConstraint {
        LinearConstraint::new(v(a), b0).unwrap()
    }

    #[test]
    fn unconstrained_interior_and_clipping() {
        let r = solve_box_qp(&v(&[0.3, -0.2]), &unit_box(2), &[]).unwrap();
        assert_eq!(r.u, v(&[0.3, -0.2]));
        assert_eq!(r.status, FilterStatus::Optimal);
        assert_eq!(r.margin, f64::INFINITY);
        let r = solve_box_qp(&v(&[2.0, 0.0]), &unit_box(2), &[]).unwrap();
        assert_eq!(r.u, v(&[1.0, 0.0]));
        assert_eq!(r.status, FilterStatus::Clipped);
    }

    #[test]
    fn single_halfspace_projection() {
        let r = solve_box_qp(&v(&[0.0, 0.0]), &unit_box(2), &[lc(&[1.0, 1.0], 1.0)]).unwrap();
        assert!((&r.u - v(&[0.5, 0.5])).amax() < 1e-12);
        assert_eq!(r.active_constraints, vec![0]);
        assert!(r.margin.abs() < 1e-12);
        assert!(kkt_residual(&r.u, &v(&[0.0, 0.0]), &unit_box(2), &[lc(&[1.0, 1.0], 1.0)]) < 1e-9);
    }

    #[test]
    fn satisfied_reference_is_returned_exactly() {
        let u_ref = v(&[0.2, 0.4, -0.1]);
        let cs = [lc(&[1.0, 0.0, 0.0], -0.5), lc(&[0.3, 0.3, 0.3], 0.0)];
        let r = solve_box_qp(&u_ref, &unit_box(3), &cs).unwrap();
        assert_eq!(r.u, u_ref);
    }

    #[test]
    fn corner_solution_with_box_and_constraint() {
        // u1 + u2 >= 1.8 from the origin: projection (0.9, 0.9) is inside the box
        let r = solve_box_qp(&v(&[0.0, 0.0]), &unit_box(2), &[lc(&[1.0, 1.0], 1.8)]).unwrap();
        assert!((r.u - v(&[0.9, 0.9])).amax() < 1e-12);
        // u1 + 3 u2 >= 3.5 forces u2 to the upper face
        let cs = [lc(&[1.0, 3.0], 3.5)];
        let r = solve_box_qp(&v(&[0.0, 0.0]), &unit_box(2), &cs).unwrap();
        assert!((&r.u - v(&[0.5, 1.0])).amax() < 1e-12, "{:?}", r.u);
        assert!(kkt_residual(&r.u, &v(&[0.0, 0.0]), &unit_box(2), &cs) < 1e-9);
    }

    #[test]
    fn infeasible_returns_least_violation() {
        // u1 >= 0.5 and u1 <= -0.5 cannot both hold; any u1 in [-0.5, 0.5]
        // violates by 1 in total; the nearest such point to u_ref is kept
        let cs = [lc(&[1.0, 0.0], 0.5), lc(&[-1.0, 0.0], 0.5)];
        let r = solve_box_qp(&v(&[0.0, 0.3]), &unit_box(2), &cs).unwrap();
        assert_eq!(r.status, FilterStatus::InfeasibleBestEffort);
        assert!(unit_box(2).contains(&r.u));
        assert!((r.violations.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((&r.u - v(&[0.0, 0.3])).amax() < 1e-12);
        // constraint outside the box entirely: u1 >= 2 is best approached at u1 = 1
        let r = solve_box_qp(&v(&[0.0, 0.0]), &unit_box(2), &[lc(&[1.0, 0.0], 2.0)]).unwrap();
        assert_eq!(r.status, FilterStatus::InfeasibleBestEffort);
        assert!((r.u - v(&[1.0, 0.0])).amax() < 1e-12);
        assert!((r.margin + 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_corner_case() {
        // both constraints are out of reach; the violation is least at the corner
        let cs = [lc(&[1.0, 0.0], 2.0), lc(&[0.0, 1.0], 2.0)];
        let r = solve_box_qp(&v(&[5.0, 5.0]), &unit_box(2), &cs).unwrap();
        assert_eq!(r.u, v(&[1.0, 1.0]));
        assert_eq!(r.status, FilterStatus::InfeasibleBestEffort);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(solve_box_qp(&v(&[0.0]), &unit_box(2), &[]).is_err());
        assert!(solve_box_qp(&v(&[f64::NAN, 0.0]), &unit_box(2), &[]).is_err());
        assert!(LinearConstraint::new(v(&[f64::INFINITY]), 0.0).is_err());
        assert!(solve_box_qp(&v(&[0.0; 5]), &unit_box(5), &[]).is_err());
    }
}
