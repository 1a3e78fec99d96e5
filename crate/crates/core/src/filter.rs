//! Linearised barrier conditions and the QP safety filter.

use nalgebra::DVector;

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::field::{gradient_or_numeric, step_off_locus};
use crate::qp::{solve_box_qp, FilterResult, LinearConstraint};
use crate::tv::TimeVaryingCbf;

/// Where the drift and input matrix are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Linearization {
    /// `f` at `y = D(x; p(t))`: `a = G(y)ᵀ∇b(y)`,
    /// `b0 = -α(b(y)) - ∇b(y)·g0(y)`.
    #[default]
    Transformed,
    /// `f` at `x`, pushed through `J_x`: `a = G(x)ᵀJ_xᵀ∇b(y)`,
    /// `b0 = -α(b(y)) - (J_xᵀ∇b(y))·g0(x)`.
    Original,
}

/// The time-invariant condition `∇b(y)·f ≥ -α(b(y))` at `y = D(x; p(t))`
/// as a half-space in `u`. `u_lin` is the expansion point for models that
/// are not input-affine and is ignored otherwise.
pub fn linearize_cbf_constraint(
    b: &TimeVaryingCbf,
    model: &DynamicsModel,
    t: f64,
    x: &DVector<f64>,
    u_lin: &DVector<f64>,
    mode: Linearization,
) -> Result<LinearConstraint> {
    if x.len() != model.state_dim() || x.len() != b.state_dim() {
        return Err(Error::DimensionMismatch { expected: model.state_dim(), got: x.len() });
    }
    let p = b.p_traj.eval(t);
    let field = b.base.field.as_ref();
    let y = b.family.apply(x, &p);
    let grad = gradient_or_numeric(field, &step_off_locus(field, &y));
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Gradient(y.iter().copied().collect()));
    }
    let alpha_term = b.base.alpha.eval(field.eval(&y));
    let (a, drift_term) = match mode {
        Linearization::Transformed => {
            let aff = model.affine_view(&y, u_lin);
            (aff.input_matrix.transpose() * &grad, grad.dot(&aff.drift))
        }
        Linearization::Original => {
            let gx = b.family.jac_x(x, &p).transpose() * &grad;
            let aff = model.affine_view(x, u_lin);
            (aff.input_matrix.transpose() * &gx, gx.dot(&aff.drift))
        }
    };
    LinearConstraint::new(a, -alpha_term - drift_term)
}

/// Filter output plus which barriers were enforced.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub result: FilterResult,
    /// For each barrier, the index of its row in the QP, or `None` when it
    /// was outside its active region.
    pub rows: Vec<Option<usize>>,
    pub constraints: Vec<LinearConstraint>,
}

/// Linearises every active barrier and solves the joint QP.
pub fn filter_input(
    cbfs: &[TimeVaryingCbf],
    model: &DynamicsModel,
    t: f64,
    x: &DVector<f64>,
    u_ref: &DVector<f64>,
    u_lin: &DVector<f64>,
) -> Result<FilterStep> {
    let mut constraints = Vec::with_capacity(cbfs.len());
    let mut rows = Vec::with_capacity(cbfs.len());
    for b in cbfs {
        if b.is_active(t, x) {
            rows.push(Some(constraints.len()));
            constraints.push(linearize_cbf_constraint(b, model, t, x, u_lin, Linearization::Transformed)?);
        } else {
            rows.push(None);
        }
    }
    let result = solve_box_qp(u_ref, &model.input_box, &constraints)?;
    Ok(FilterStep { result, rows, constraints })
}
