//! Dynamics models and fixed-step integration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-coordinate input bounds `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument("input box needs finite lo <= hi".into()));
        }
        Ok(InputBox { lo, hi })
    }

    pub fn symmetric(bound: f64, m: usize) -> Self {
        InputBox { lo: vec![-bound; m], hi: vec![bound; m] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim() && u.iter().enumerate().all(|(i, &v)| v >= self.lo[i] && v <= self.hi[i])
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim(), u.iter().enumerate().map(|(i, &v)| v.clamp(self.lo[i], self.hi[i])))
    }

    /// All `2^m` corners, in binary counting order.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| {
                DVector::from_iterator(m, (0..m).map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] }))
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                if self.hi[i] > self.lo[i] {
                    rng.random_range(self.lo[i]..=self.hi[i])
                } else {
                    self.lo[i]
                }
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelKind {
    /// `ẋ = u`, `x ∈ R^n`.
    SingleIntegrator { n: usize },
    /// State `(x, ẋ) ∈ R^{2n}`, `ẍ = u`.
    DoubleIntegrator { n: usize },
    /// State `(x, y, ψ)`, input `(v, ω)`.
    Unicycle,
    /// State `(x, y, ψ)`, input `(v, ζ)` with sideslip `β(ζ) = atan(lr_ratio tan ζ)`.
    Bicycle { wheelbase: f64, lr_ratio: f64 },
    /// `ẋ = A x + B u`; rows of `a` and `b`.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

/// Drift and input matrix of `f(x, u) = g0(x) + G(x) u` at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineInputDynamics {
    pub drift: DVector<f64>,
    pub input_matrix: DMatrix<f64>,
}

impl AffineInputDynamics {
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.drift + &self.input_matrix * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_box: InputBox,
}

impl DynamicsModel {
    pub fn single_integrator(n: usize) -> Self {
        DynamicsModel { kind: ModelKind::SingleIntegrator { n }, input_box: InputBox::symmetric(1.0, n) }
    }

    pub fn double_integrator(n: usize) -> Self {
        DynamicsModel { kind: ModelKind::DoubleIntegrator { n }, input_box: InputBox::symmetric(7.5, n) }
    }

    pub fn unicycle() -> Self {
        DynamicsModel { kind: ModelKind::Unicycle, input_box: InputBox { lo: vec![1.0, -0.9], hi: vec![2.0, 0.9] } }
    }

    /// Bicycle with speed in `[1, 2]` and steering within `±max_steer_deg`.
    pub fn bicycle(wheelbase: f64, lr_ratio: f64, max_steer_deg: f64) -> Self {
        let z = max_steer_deg * PI / 180.0;
        DynamicsModel {
            kind: ModelKind::Bicycle { wheelbase, lr_ratio },
            input_box: InputBox { lo: vec![1.0, -z], hi: vec![2.0, z] },
        }
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, input_box: InputBox) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() || b.ncols() != input_box.dim() {
            return Err(Error::InvalidArgument("linear model shapes are inconsistent".into()));
        }
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        Ok(DynamicsModel { kind: ModelKind::Linear { a: rows(&a), b: rows(&b) }, input_box })
    }

    pub fn with_input_box(mut self, input_box: InputBox) -> Self {
        self.input_box = input_box;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::SingleIntegrator { .. } => "single_integrator",
            ModelKind::DoubleIntegrator { .. } => "double_integrator",
            ModelKind::Unicycle => "unicycle",
            ModelKind::Bicycle { .. } => "bicycle",
            ModelKind::Linear { .. } => "linear",
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            ModelKind::SingleIntegrator { n } => *n,
            ModelKind::DoubleIntegrator { n } => 2 * n,
            ModelKind::Unicycle | ModelKind::Bicycle { .. } => 3,
            ModelKind::Linear { a, .. } => a.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    /// Whether `f` is exactly affine in `u`.
    pub fn is_input_affine(&self) -> bool {
        !matches!(self.kind, ModelKind::Bicycle { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let m = match &self.kind {
            ModelKind::SingleIntegrator { n } | ModelKind::DoubleIntegrator { n } => *n,
            ModelKind::Unicycle | ModelKind::Bicycle { .. } => 2,
            ModelKind::Linear { a, b } => {
                let n = a.len();
                if a.iter().any(|r| r.len() != n) || b.len() != n {
                    return Err(Error::Config("linear model: A must be square and B must have n rows".into()));
                }
                b.first().map_or(0, |r| r.len())
            }
        };
        if let ModelKind::Bicycle { wheelbase, .. } = self.kind {
            if !(wheelbase > 0.0) {
                return Err(Error::Config("bicycle wheelbase must be positive".into()));
            }
        }
        if self.input_box.dim() != m {
            return Err(Error::DimensionMismatch { expected: m, got: self.input_box.dim() });
        }
        InputBox::new(self.input_box.lo.clone(), self.input_box.hi.clone()).map(|_| ())
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch { expected: self.state_dim(), got: x.len() });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: u.len() });
        }
        Ok(())
    }

    /// `f(x, u)`. Dimensions are assumed to match; see [`Self::try_eval`].
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ModelKind::SingleIntegrator { .. } => u.clone(),
            ModelKind::DoubleIntegrator { n } => {
                let mut dx = DVector::zeros(2 * n);
                dx.rows_mut(0, *n).copy_from(&x.rows(*n, *n));
                dx.rows_mut(*n, *n).copy_from(u);
                dx
            }
            ModelKind::Unicycle => {
                let (v, w, psi) = (u[0], u[1], x[2]);
                DVector::from_vec(vec![v * psi.cos(), v * psi.sin(), w])
            }
            ModelKind::Bicycle { wheelbase, lr_ratio } => {
                let (v, zeta, psi) = (u[0], u[1], x[2]);
                let beta = (lr_ratio * zeta.tan()).atan();
                DVector::from_vec(vec![
                    v * (psi + beta).cos(),
                    v * (psi + beta).sin(),
                    v * beta.cos() * zeta.tan() / wheelbase,
                ])
            }
            ModelKind::Linear { a, b } => {
                let n = a.len();
                DVector::from_iterator(
                    n,
                    (0..n).map(|i| {
                        a[i].iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>()
                            + b[i].iter().zip(u.iter()).map(|(p, q)| p * q).sum::<f64>()
                    }),
                )
            }
        }
    }

    pub fn try_eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        Ok(self.eval(x, u))
    }

    /// `(g0(x), G(x))`. Exact for input-affine models; for the bicycle it is
    /// the first-order expansion of `f(x, ·)` around `u_lin`.
    pub fn affine_view(&self, x: &DVector<f64>, u_lin: &DVector<f64>) -> AffineInputDynamics {
        let n = self.state_dim();
        let m = self.input_dim();
        match &self.kind {
            ModelKind::SingleIntegrator { .. } => {
                AffineInputDynamics { drift: DVector::zeros(n), input_matrix: DMatrix::identity(n, n) }
            }
            ModelKind::DoubleIntegrator { n: k } => {
                let mut drift = DVector::zeros(n);
                drift.rows_mut(0, *k).copy_from(&x.rows(*k, *k));
                let mut g = DMatrix::zeros(n, *k);
                g.view_mut((*k, 0), (*k, *k)).fill_with_identity();
                AffineInputDynamics { drift, input_matrix: g }
            }
            ModelKind::Unicycle => {
                let psi = x[2];
                let g = DMatrix::from_row_slice(3, 2, &[psi.cos(), 0.0, psi.sin(), 0.0, 0.0, 1.0]);
                AffineInputDynamics { drift: DVector::zeros(3), input_matrix: g }
            }
            ModelKind::Bicycle { wheelbase, lr_ratio } => {
                let (v, zeta, psi) = (u_lin[0], u_lin[1], x[2]);
                let tz = zeta.tan();
                let beta = (lr_ratio * tz).atan();
                let sec2 = 1.0 + tz * tz;
                let dbeta = lr_ratio * sec2 / (1.0 + lr_ratio * lr_ratio * tz * tz);
                let (c, s) = ((psi + beta).cos(), (psi + beta).sin());
                let d_v = DVector::from_vec(vec![c, s, beta.cos() * tz / wheelbase]);
                let d_zeta = DVector::from_vec(vec![
                    -v * s * dbeta,
                    v * c * dbeta,
                    v / wheelbase * (-beta.sin() * dbeta * tz + beta.cos() * sec2),
                ]);
                let mut g = DMatrix::zeros(3, 2);
                g.set_column(0, &d_v);
                g.set_column(1, &d_zeta);
                let f0 = self.eval(x, u_lin);
                let drift = f0 - &g * u_lin;
                AffineInputDynamics { drift, input_matrix: g }
            }
            ModelKind::Linear { a, b } => {
                let am = DMatrix::from_fn(n, n, |i, j| a[i][j]);
                let bm = DMatrix::from_fn(n, m, |i, j| b[i][j]);
                AffineInputDynamics { drift: am * x, input_matrix: bm }
            }
        }
    }
}

/// One classical Runge–Kutta step with the input held constant.
pub fn step_rk4(model: &DynamicsModel, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive (got {dt})")));
    }
    model.check_dims(x, u)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    let k1 = model.eval(x, u);
    let k2 = model.eval(&(x + &k1 * (0.5 * dt)), u);
    let k3 = model.eval(&(x + &k2 * (0.5 * dt)), u);
    let k4 = model.eval(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state after integration step"));
    }
    Ok(next)
}
