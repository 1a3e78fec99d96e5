//! Scalar barrier fields and the regions they are verified on.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comparison::ExtendedKeFn;
use crate::error::{Error, Result};

/// A locally Lipschitz map `R^n -> R` with an optional analytic gradient.
pub trait ScalarField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> f64;

    /// Analytic gradient, where one exists. `None` at points of the
    /// nondifferentiable locus or when the field has no closed form.
    fn gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn nondifferentiable_at(&self, _x: &DVector<f64>) -> bool {
        false
    }

    fn name(&self) -> String;
}

pub type FieldRef = Arc<dyn ScalarField>;

/// Central-difference gradient.
pub fn numeric_gradient(phi: &dyn ScalarField, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = phi.eval(&xp);
        xp[i] = xi - h;
        let fm = phi.eval(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

const FD_STEP: f64 = 1e-6;

/// Analytic gradient when available, central differences otherwise.
pub fn gradient_or_numeric(phi: &dyn ScalarField, x: &DVector<f64>) -> DVector<f64> {
    phi.gradient(x).unwrap_or_else(|| numeric_gradient(phi, x, FD_STEP))
}

fn block_norm(x: &DVector<f64>, start: usize, len: usize) -> f64 {
    x.rows(start, len).norm()
}

/// `-‖x[start..start+len]‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegNorm {
    pub dim: usize,
    pub start: usize,
    pub len: usize,
}

impl NegNorm {
    pub fn new(dim: usize) -> Self {
        NegNorm { dim, start: 0, len: dim }
    }

    pub fn on_block(dim: usize, start: usize, len: usize) -> Self {
        NegNorm { dim, start, len }
    }
}

impl ScalarField for NegNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        -block_norm(x, self.start, self.len)
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let r = block_norm(x, self.start, self.len);
        if r == 0.0 {
            return None;
        }
        let mut g = DVector::zeros(self.dim);
        g.rows_mut(self.start, self.len).copy_from(&(-x.rows(self.start, self.len) / r));
        Some(g)
    }

    fn nondifferentiable_at(&self, x: &DVector<f64>) -> bool {
        block_norm(x, self.start, self.len) == 0.0
    }

    fn name(&self) -> String {
        "neg_norm".into()
    }
}

/// Backstepped single-integrator barrier for the double integrator:
/// with state `(e, v)`, `b(e, v) = -êᵀv + α_inner(-‖e‖)`.
///
/// `r` is the nominal constraint radius; it sets the annulus
/// `‖e‖ ∈ [r - width, r + width]` on which the field is verified. The field
/// jumps at `e = 0`, where it is defined as `α_inner(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackstepDi {
    pub n: usize,
    pub alpha_inner: ExtendedKeFn,
    pub r: f64,
}

impl BackstepDi {
    pub fn new(n: usize, alpha_inner: ExtendedKeFn, r: f64) -> Self {
        BackstepDi { n, alpha_inner, r }
    }

    /// Position-error annulus of half-width `width` around `r`.
    pub fn annulus(&self, width: f64) -> Annulus {
        Annulus::new(0, self.n, (self.r - width).max(0.0), self.r + width)
    }
}

impl ScalarField for BackstepDi {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let e = x.rows(0, self.n);
        let v = x.rows(self.n, self.n);
        let r = e.norm();
        if r == 0.0 {
            return self.alpha_inner.eval(0.0);
        }
        -e.dot(&v) / r + self.alpha_inner.eval(-r)
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.n;
        let e = x.rows(0, n).into_owned();
        let v = x.rows(n, n).into_owned();
        let r = e.norm();
        if r == 0.0 {
            return None;
        }
        let eh = &e / r;
        let radial = eh.dot(&v);
        let perp = &v - &eh * radial;
        let ge = -perp / r - &eh * self.alpha_inner.slope(-r);
        let mut g = DVector::zeros(2 * n);
        g.rows_mut(0, n).copy_from(&ge);
        g.rows_mut(n, n).copy_from(&(-eh));
        Some(g)
    }

    fn nondifferentiable_at(&self, x: &DVector<f64>) -> bool {
        x.rows(0, self.n).norm() == 0.0
    }

    fn name(&self) -> String {
        "backstep_di".into()
    }
}

/// `cap - ‖ẋ‖` on the velocity half of a double-integrator state.
#[derive(Debug, Clone, PartialEq)]
pub struct VelCap {
    pub n: usize,
    pub cap: f64,
}

impl ScalarField for VelCap {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.cap - block_norm(x, self.n, self.n)
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let s = block_norm(x, self.n, self.n);
        if s == 0.0 {
            return None;
        }
        let mut g = DVector::zeros(2 * self.n);
        g.rows_mut(self.n, self.n).copy_from(&(-x.rows(self.n, self.n) / s));
        Some(g)
    }

    fn nondifferentiable_at(&self, x: &DVector<f64>) -> bool {
        block_norm(x, self.n, self.n) == 0.0
    }

    fn name(&self) -> String {
        "vel_cap".into()
    }
}

/// `‖x[..k] - c‖ - r` where `k = center.len()`; positive outside the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskDist {
    pub dim: usize,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl DiskDist {
    fn offset(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.center.len();
        DVector::from_iterator(k, (0..k).map(|i| x[i] - self.center[i]))
    }
}

impl ScalarField for DiskDist {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.offset(x).norm() - self.radius
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let d = self.offset(x);
        let r = d.norm();
        if r == 0.0 {
            return None;
        }
        let mut g = DVector::zeros(self.dim);
        g.rows_mut(0, d.len()).copy_from(&(d / r));
        Some(g)
    }

    fn nondifferentiable_at(&self, x: &DVector<f64>) -> bool {
        self.offset(x).norm() == 0.0
    }

    fn name(&self) -> String {
        "disk_dist".into()
    }
}

/// Distance of a point `lookahead` ahead of a planar pose `(x, y, ψ)` to the
/// origin, minus `radius`. A heuristic avoidance barrier for the unicycle
/// and bicycle; it carries no shiftability guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadDist {
    pub lookahead: f64,
    pub radius: f64,
}

impl LookaheadDist {
    fn point(&self, x: &DVector<f64>) -> (f64, f64) {
        (x[0] + self.lookahead * x[2].cos(), x[1] + self.lookahead * x[2].sin())
    }
}

impl ScalarField for LookaheadDist {
    fn dim(&self) -> usize {
        3
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let (px, py) = self.point(x);
        px.hypot(py) - self.radius
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let (px, py) = self.point(x);
        let r = px.hypot(py);
        if r == 0.0 {
            return None;
        }
        let (ux, uy) = (px / r, py / r);
        let l = self.lookahead;
        let dpsi = ux * (-l * x[2].sin()) + uy * (l * x[2].cos());
        Some(DVector::from_vec(vec![ux, uy, dpsi]))
    }

    fn nondifferentiable_at(&self, x: &DVector<f64>) -> bool {
        let (px, py) = self.point(x);
        px == 0.0 && py == 0.0
    }

    fn name(&self) -> String {
        "lookahead_dist".into()
    }
}

/// `aᵀx + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    pub a: DVector<f64>,
    pub c: f64,
}

impl ScalarField for LinearField {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.a.dot(x) + self.c
    }

    fn gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.a.clone())
    }

    fn name(&self) -> String {
        "linear".into()
    }
}

type EvalFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// A field built from closures.
#[derive(Clone)]
pub struct FnField {
    pub dim: usize,
    pub label: String,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
}

impl FnField {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        eval: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnField { dim, label: label.into(), eval: Arc::new(eval), grad: None }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField").field("dim", &self.dim).field("label", &self.label).finish()
    }
}

impl ScalarField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.eval)(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.grad.as_ref().map(|g| g(x))
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Ring `inner <= ‖x[start..start+len] - center‖ <= outer`. An empty
/// `center` means the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub start: usize,
    pub len: usize,
    pub inner: f64,
    pub outer: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub center: Vec<f64>,
}

impl Annulus {
    pub fn new(start: usize, len: usize, inner: f64, outer: f64) -> Self {
        Annulus { start, len, inner, outer, center: Vec::new() }
    }

    pub fn radius(&self, x: &DVector<f64>) -> f64 {
        if self.center.is_empty() {
            return block_norm(x, self.start, self.len);
        }
        (0..self.len).map(|i| (x[self.start + i] - self.center[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        let r = self.radius(x);
        r >= self.inner && r <= self.outer
    }
}

/// Axis-aligned box, optionally intersected with an annulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annulus: Option<Annulus>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidArgument("domain box needs lo <= hi".into()));
        }
        Ok(Domain { lo, hi, annulus: None })
    }

    pub fn cube(half_width: f64, dim: usize) -> Self {
        Domain { lo: vec![-half_width; dim], hi: vec![half_width; dim], annulus: None }
    }

    pub fn with_annulus(mut self, annulus: Annulus) -> Self {
        self.annulus = Some(annulus);
        self
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(i, &v)| v >= self.lo[i] && v <= self.hi[i])
            && self.annulus.as_ref().is_none_or(|a| a.contains(x))
    }

    /// Uniform draw from the box (the annulus is not applied).
    pub fn sample_box<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
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

    /// The domain moved by `offset` (padded with zeros to full dimension).
    pub fn translated(&self, offset: &DVector<f64>) -> Domain {
        let mut d = self.clone();
        for i in 0..self.dim().min(offset.len()) {
            d.lo[i] += offset[i];
            d.hi[i] += offset[i];
        }
        if let Some(a) = d.annulus.as_mut() {
            if a.center.is_empty() {
                a.center = vec![0.0; a.len];
            }
            for i in 0..a.len {
                if let Some(o) = offset.get(a.start + i) {
                    a.center[i] += o;
                }
            }
        }
        d
    }
}

/// Unit vector used to step off a nondifferentiable point.
pub fn perturbation_direction(dim: usize) -> DVector<f64> {
    // fixed irrational-ish weights keep runs deterministic
    let v = DVector::from_fn(dim, |i, _| ((i as f64 + 1.0) * 0.754_877_666).sin() + 0.1);
    let n = v.norm();
    v / n
}

pub const NONDIFF_PERTURBATION: f64 = 1e-9;

/// `x` itself, or `x` nudged by 1e-9 along [`perturbation_direction`] when it
/// sits on the field's nondifferentiable locus.
pub fn step_off_locus(phi: &dyn ScalarField, x: &DVector<f64>) -> DVector<f64> {
    if phi.nondifferentiable_at(x) {
        x + perturbation_direction(x.len()) * NONDIFF_PERTURBATION
    } else {
        x.clone()
    }
}
