//! Parameterised diffeomorphism families, equivariance checks and the
//! transformation `b_p(x) = b(D(x; p))`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbf::ShiftableCbf;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::field::{gradient_or_numeric, Domain, FieldRef, ScalarField};
use crate::report::CheckReport;

pub const JACOBIAN_STEP: f64 = 1e-6;
pub const EQUIVARIANCE_TOL: f64 = 1e-9;
pub const EQUIVARIANCE_TOL_NUMERIC: f64 = 1e-5;
const TRANSLATION_RANGE: f64 = 1e3;

/// Built-in families. Translations subtract the parameter from a prefix of
/// the state; `ScaleTest` multiplies the whole state by a scalar and is not
/// an equivariance of any shipped model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DiffeoFamily {
    /// `D(x; p) = x - p`, `x, p ∈ R^n`.
    TranslateFull { n: usize },
    /// `D((x, y, ψ); p) = (x - p1, y - p2, ψ)`.
    TranslatePoseXy,
    /// `D((x, ẋ); (p, ṗ)) = (x - p, ẋ - ṗ)` on the `2n`-dimensional
    /// double-integrator state.
    TranslateDi { n: usize },
    /// `D(x; p) = x - [p; 0]` with `p ∈ R^param_dim`.
    TranslatePosition { state_dim: usize, param_dim: usize },
    /// `D(x; s) = s x`, `s ∈ [0.5, 2]`.
    ScaleTest { n: usize },
}

impl DiffeoFamily {
    pub fn name(&self) -> &'static str {
        match self {
            DiffeoFamily::TranslateFull { .. } => "translate_full",
            DiffeoFamily::TranslatePoseXy => "translate_pose_xy",
            DiffeoFamily::TranslateDi { .. } => "translate_di",
            DiffeoFamily::TranslatePosition { .. } => "translate_position",
            DiffeoFamily::ScaleTest { .. } => "scale_test",
        }
    }

    pub fn state_dim(&self) -> usize {
        match *self {
            DiffeoFamily::TranslateFull { n } | DiffeoFamily::ScaleTest { n } => n,
            DiffeoFamily::TranslatePoseXy => 3,
            DiffeoFamily::TranslateDi { n } => 2 * n,
            DiffeoFamily::TranslatePosition { state_dim, .. } => state_dim,
        }
    }

    pub fn param_dim(&self) -> usize {
        match *self {
            DiffeoFamily::TranslateFull { n } => n,
            DiffeoFamily::TranslatePoseXy => 2,
            DiffeoFamily::TranslateDi { n } => 2 * n,
            DiffeoFamily::TranslatePosition { param_dim, .. } => param_dim,
            DiffeoFamily::ScaleTest { .. } => 1,
        }
    }

    /// Number of leading state coordinates shifted by a translation.
    fn translated_prefix(&self) -> Option<usize> {
        match self {
            DiffeoFamily::ScaleTest { .. } => None,
            _ => Some(self.param_dim()),
        }
    }

    pub fn is_translation(&self) -> bool {
        self.translated_prefix().is_some()
    }

    /// The parameter set `P` as a box.
    pub fn param_set(&self) -> Domain {
        match self {
            DiffeoFamily::ScaleTest { .. } => Domain { lo: vec![0.5], hi: vec![2.0], annulus: None },
            _ => Domain::cube(TRANSLATION_RANGE, self.param_dim()),
        }
    }

    /// Global Lipschitz constant of `p ↦ D(x; p)` where one is known in
    /// closed form (`‖J_p‖ = 1` for every translation).
    pub fn lipschitz_p(&self) -> Option<f64> {
        self.is_translation().then_some(1.0)
    }

    fn check(&self, x: &DVector<f64>, p: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch { expected: self.state_dim(), got: x.len() });
        }
        if p.len() != self.param_dim() {
            return Err(Error::DimensionMismatch { expected: self.param_dim(), got: p.len() });
        }
        if x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("diffeomorphism argument"));
        }
        Ok(())
    }

    pub fn apply(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        match self.translated_prefix() {
            Some(k) => {
                let mut y = x.clone();
                for i in 0..k {
                    y[i] -= p[i];
                }
                y
            }
            None => x * p[0],
        }
    }

    pub fn inverse(&self, y: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        match self.translated_prefix() {
            Some(k) => {
                let mut x = y.clone();
                for i in 0..k {
                    x[i] += p[i];
                }
                x
            }
            None => y / p[0],
        }
    }

    pub fn input_iso(&self, u: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }

    pub fn jac_x(&self, _x: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        match self.translated_prefix() {
            Some(_) => DMatrix::identity(n, n),
            None => DMatrix::identity(n, n) * p[0],
        }
    }

    pub fn jac_p(&self, x: &DVector<f64>, _p: &DVector<f64>) -> DMatrix<f64> {
        let (n, k) = (self.state_dim(), self.param_dim());
        match self.translated_prefix() {
            Some(_) => {
                let mut j = DMatrix::zeros(n, k);
                for i in 0..k {
                    j[(i, i)] = -1.0;
                }
                j
            }
            None => DMatrix::from_column_slice(n, 1, x.as_slice()),
        }
    }

    /// Parameter space direction matching a state offset, used to move
    /// verification regions along with the transform.
    fn padded_offset(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut o = DVector::zeros(self.state_dim());
        for i in 0..self.param_dim().min(o.len()) {
            o[i] = p[i];
        }
        o
    }
}

/// Analytic `(J_x, J_p)` after validating dimensions.
pub fn jacobians(family: &DiffeoFamily, x: &DVector<f64>, p: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    family.check(x, p)?;
    Ok((family.jac_x(x, p), family.jac_p(x, p)))
}

/// Central-difference `(J_x, J_p)`.
pub fn numeric_jacobians(
    family: &DiffeoFamily,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    family.check(x, p)?;
    let h = JACOBIAN_STEP;
    let n = family.state_dim();
    let mut jx = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        jx.set_column(j, &((family.apply(&xp, p) - family.apply(&xm, p)) / (2.0 * h)));
    }
    let k = family.param_dim();
    let mut jp = DMatrix::zeros(n, k);
    for j in 0..k {
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp[j] += h;
        pm[j] -= h;
        jp.set_column(j, &((family.apply(x, &pp) - family.apply(x, &pm)) / (2.0 * h)));
    }
    Ok((jx, jp))
}

/// Largest `‖f(D(x;p), D_u(u;p)) - J_x f(x,u)‖` over random triples and the
/// triple attaining it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub family: String,
    pub model: String,
    pub pass: bool,
    pub max_residual: f64,
    pub tolerance: f64,
    pub worst_x: Vec<f64>,
    pub worst_u: Vec<f64>,
    pub worst_p: Vec<f64>,
    pub samples: usize,
}

impl EquivarianceReport {
    pub fn to_check(&self) -> CheckReport {
        let mut r = CheckReport::new("equivariance");
        let margin = self.tolerance - self.max_residual;
        let witness = self.worst_x.iter().chain(&self.worst_u).chain(&self.worst_p).copied().collect();
        if self.pass {
            r.worst_margin = margin;
            r.witness = witness;
            r.message = format!("{} / {}: max residual {:.3e}", self.family, self.model, self.max_residual);
        } else {
            r.fail(
                margin,
                witness,
                format!("{} / {}: max residual {:.3e}", self.family, self.model, self.max_residual),
            );
        }
        r
    }
}

/// States are drawn from `[-5, 5]^n`, inputs from the model's box and
/// parameters from `P ∩ [-5, 5]^k`.
pub fn verify_equivariance(
    model: &DynamicsModel,
    family: &DiffeoFamily,
    samples: usize,
    seed: u64,
) -> Result<EquivarianceReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    if model.state_dim() != family.state_dim() {
        return Err(Error::DimensionMismatch { expected: model.state_dim(), got: family.state_dim() });
    }
    let pset = family.param_set();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples: Vec<_> = (0..samples)
        .map(|_| {
            let x = DVector::from_fn(family.state_dim(), |_, _| rng.random_range(-5.0..=5.0));
            let u = model.input_box.sample(&mut rng);
            let p = DVector::from_fn(family.param_dim(), |i, _| {
                rng.random_range(pset.lo[i].max(-5.0)..=pset.hi[i].min(5.0))
            });
            (x, u, p)
        })
        .collect();
    let residuals: Vec<f64> = triples
        .par_iter()
        .map(|(x, u, p)| {
            let lhs = model.eval(&family.apply(x, p), &family.input_iso(u, p));
            let rhs = family.jac_x(x, p) * model.eval(x, u);
            (lhs - rhs).norm()
        })
        .collect();
    let (iw, &worst) = residuals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    let (x, u, p) = &triples[iw];
    Ok(EquivarianceReport {
        family: family.name().into(),
        model: model.name().into(),
        pass: worst <= EQUIVARIANCE_TOL,
        max_residual: worst,
        tolerance: EQUIVARIANCE_TOL,
        worst_x: x.iter().copied().collect(),
        worst_u: u.iter().copied().collect(),
        worst_p: p.iter().copied().collect(),
        samples,
    })
}

/// `x ↦ φ(D(x; p))` for a fixed parameter.
#[derive(Debug, Clone)]
pub struct TransformedField {
    pub base: FieldRef,
    pub family: DiffeoFamily,
    pub p: DVector<f64>,
}

impl ScalarField for TransformedField {
    fn dim(&self) -> usize {
        self.family.state_dim()
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.base.eval(&self.family.apply(x, &self.p))
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let y = self.family.apply(x, &self.p);
        let g = self.base.gradient(&y)?;
        Some(self.family.jac_x(x, &self.p).transpose() * g)
    }

    fn nondifferentiable_at(&self, x: &DVector<f64>) -> bool {
        self.base.nondifferentiable_at(&self.family.apply(x, &self.p))
    }

    fn name(&self) -> String {
        format!("{}∘{}", self.base.name(), self.family.name())
    }
}

/// Gradient of `φ ∘ D(·; p)` at `x`, analytic when the base field has one.
pub fn transformed_gradient(
    base: &dyn ScalarField,
    family: &DiffeoFamily,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> DVector<f64> {
    let y = family.apply(x, p);
    family.jac_x(x, p).transpose() * gradient_or_numeric(base, &y)
}

/// `b_p = b ∘ D(·; p)` with the same `α` and `Λ`. The verification region is
/// carried along: `D(·; p)^{-1}` of the original box.
pub fn transform_cbf(b: &ShiftableCbf, family: &DiffeoFamily, p: &DVector<f64>) -> Result<ShiftableCbf> {
    if p.len() != family.param_dim() {
        return Err(Error::DimensionMismatch { expected: family.param_dim(), got: p.len() });
    }
    if !family.param_set().contains(p) {
        return Err(Error::ParameterOutOfSet(p.iter().copied().collect()));
    }
    if b.dim() != family.state_dim() {
        return Err(Error::DimensionMismatch { expected: b.dim(), got: family.state_dim() });
    }
    let domain = match family {
        DiffeoFamily::ScaleTest { .. } => {
            let s = p[0];
            Domain {
                lo: b.domain.lo.iter().map(|v| v / s).collect(),
                hi: b.domain.hi.iter().map(|v| v / s).collect(),
                annulus: None,
            }
        }
        _ => b.domain.translated(&family.padded_offset(p)),
    };
    let field = TransformedField { base: b.field.clone(), family: family.clone(), p: p.clone() };
    ShiftableCbf::new(Arc::new(field), b.alpha.clone(), b.capacity, domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::verify_shiftable;
    use crate::comparison::ExtendedKeFn;
    use crate::field::{BackstepDi, NegNorm};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn translation_jacobians() {
        let f = DiffeoFamily::TranslateFull { n: 2 };
        let (jx, jp) = jacobians(&f, &v(&[1.0, 2.0]), &v(&[0.5, 0.5])).unwrap();
        assert_eq!(jx, DMatrix::identity(2, 2));
        assert_eq!(jp, -DMatrix::identity(2, 2));

        let di = DiffeoFamily::TranslateDi { n: 2 };
        let (jx, jp) = jacobians(&di, &v(&[1.0, 2.0, 3.0, 4.0]), &v(&[0.0; 4])).unwrap();
        assert_eq!(jx, DMatrix::identity(4, 4));
        assert_eq!(jp, -DMatrix::identity(4, 4));

        assert!(matches!(jacobians(&f, &v(&[1.0]), &v(&[0.0, 0.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fams = [
            DiffeoFamily::TranslateFull { n: 3 },
            DiffeoFamily::TranslatePoseXy,
            DiffeoFamily::TranslateDi { n: 2 },
            DiffeoFamily::TranslatePosition { state_dim: 4, param_dim: 2 },
            DiffeoFamily::ScaleTest { n: 3 },
        ];
        for f in &fams {
            for _ in 0..20 {
                let x = DVector::from_fn(f.state_dim(), |_, _| rng.random_range(-3.0..3.0));
                let p = DVector::from_fn(f.param_dim(), |_, _| rng.random_range(0.5..2.0));
                let (ax, ap) = jacobians(f, &x, &p).unwrap();
                let (nx, np) = numeric_jacobians(f, &x, &p).unwrap();
                assert!((ax - nx).amax() < 1e-5, "{}", f.name());
                assert!((ap - np).amax() < 1e-5, "{}", f.name());
            }
        }
        // planar pose: J_p = [-I2; 0]
        let (_, jp) =
            numeric_jacobians(&DiffeoFamily::TranslatePoseXy, &v(&[1.0, 1.0, 0.3]), &v(&[0.2, -0.1])).unwrap();
        let expect = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        assert!((jp - expect).amax() < 1e-8);
    }

    #[test]
    fn inverse_round_trips_and_translations_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = DiffeoFamily::TranslatePoseXy;
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let p1 = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let p2 = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            assert!((f.inverse(&f.apply(&x, &p1), &p1) - &x).amax() < 1e-9);
            let twice = f.apply(&f.apply(&x, &p1), &p2);
            assert!((twice - f.apply(&x, &(&p1 + &p2))).amax() < 1e-12);
        }
        let s = DiffeoFamily::ScaleTest { n: 2 };
        let x = v(&[1.5, -0.5]);
        assert!((s.inverse(&s.apply(&x, &v(&[1.7])), &v(&[1.7])) - &x).amax() < 1e-12);
    }

    #[test]
    fn equivariance_examples() {
        let r =
            verify_equivariance(&DynamicsModel::single_integrator(2), &DiffeoFamily::TranslateFull { n: 2 }, 500, 1)
                .unwrap();
        assert_eq!(r.max_residual, 0.0);
        let r = verify_equivariance(&DynamicsModel::unicycle(), &DiffeoFamily::TranslatePoseXy, 500, 1).unwrap();
        assert!(r.pass && r.max_residual <= 1e-9);
        let r = verify_equivariance(&DynamicsModel::unicycle(), &DiffeoFamily::ScaleTest { n: 3 }, 500, 1).unwrap();
        assert!(!r.pass && r.max_residual > 1e-3);
        assert!(!r.to_check().pass);
    }

    #[test]
    fn scaling_residual_at_origin() {
        // f(D(0), u) = (1, 0, 0) while J_x f(0, u) = (2, 0, 0)
        let m = DynamicsModel::unicycle();
        let f = DiffeoFamily::ScaleTest { n: 3 };
        let (x, u, p) = (v(&[0.0, 0.0, 0.0]), v(&[1.0, 0.0]), v(&[2.0]));
        let res = (m.eval(&f.apply(&x, &p), &u) - f.jac_x(&x, &p) * m.eval(&x, &u)).norm();
        assert!((res - 1.0).abs() < 1e-15);
    }

    #[test]
    fn velocity_translation_is_not_a_double_integrator_symmetry() {
        let r = verify_equivariance(&DynamicsModel::double_integrator(2), &DiffeoFamily::TranslateDi { n: 2 }, 200, 2)
            .unwrap();
        assert!(!r.pass);
        // residual is exactly the velocity offset ‖ṗ‖
        let pv = v(&r.worst_p[2..]);
        assert!((r.max_residual - pv.norm()).abs() < 1e-12);
        let pos = DiffeoFamily::TranslatePosition { state_dim: 4, param_dim: 2 };
        let r = verify_equivariance(&DynamicsModel::double_integrator(2), &pos, 200, 2).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn transform_cbf_examples() {
        let alpha = ExtendedKeFn::sigmoid(1.0, 8.0).unwrap();
        let b = ShiftableCbf::new(Arc::new(NegNorm::new(2)), alpha, 0.25, Domain::cube(0.5, 2)).unwrap();
        let f = DiffeoFamily::TranslateFull { n: 2 };
        let id = transform_cbf(&b, &f, &v(&[0.0, 0.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            assert_eq!(id.eval(&x), b.eval(&x));
        }
        let shifted = transform_cbf(&b, &f, &v(&[1.0, 0.0])).unwrap();
        assert_eq!(shifted.eval(&v(&[1.0, 0.0])), 0.0);

        let model = DynamicsModel::single_integrator(2);
        for _ in 0..5 {
            let p = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
            let bp = transform_cbf(&b, &f, &p).unwrap();
            let r = verify_shiftable(&bp, &model, 4000, 3).unwrap();
            assert!(r.pass && r.worst_margin >= -1e-5, "{r:?}");
        }
        let out = transform_cbf(&b, &f, &v(&[5e3, 0.0]));
        assert!(matches!(out, Err(Error::ParameterOutOfSet(_))));
    }

    #[test]
    fn transformed_gradient_uses_jacobian() {
        let f = DiffeoFamily::ScaleTest { n: 2 };
        let base: FieldRef = Arc::new(NegNorm::new(2));
        let tf = TransformedField { base: base.clone(), family: f.clone(), p: v(&[2.0]) };
        let x = v(&[0.3, -0.4]);
        let g = tf.gradient(&x).unwrap();
        let n = crate::field::numeric_gradient(&tf, &x, 1e-6);
        assert!((&g - n).amax() < 1e-8);
        assert!((transformed_gradient(base.as_ref(), &f, &x, &v(&[2.0])) - g).amax() < 1e-12);
    }

    #[test]
    fn transformed_domain_follows_annulus() {
        let sig = ExtendedKeFn::sigmoid(1.0, 8.0).unwrap();
        let di = BackstepDi::new(2, sig.clone(), 0.4);
        let dom = Domain::cube(1.0, 4).with_annulus(di.annulus(0.1));
        let b = ShiftableCbf::new(Arc::new(di), sig, 0.4, dom).unwrap();
        let f = DiffeoFamily::TranslatePosition { state_dim: 4, param_dim: 2 };
        let bp = transform_cbf(&b, &f, &v(&[3.0, 0.0])).unwrap();
        assert!(bp.domain.contains(&v(&[3.4, 0.0, 0.0, 0.0])));
        assert!(!bp.domain.contains(&v(&[0.4, 0.0, 0.0, 0.0])));
    }
}
