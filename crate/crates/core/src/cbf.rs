//! Dini derivatives, the CBF gradient condition, shiftability checks and
//! sampled Lipschitz constants.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparison::ExtendedKeFn;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::field::{gradient_or_numeric, step_off_locus, Domain, FieldRef, ScalarField};
use crate::report::CheckReport;

pub const DINI_STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
pub const MARGIN_TOL: f64 = 1e-6;
pub const LIPSCHITZ_SAFETY: f64 = 1.05;
pub const DEFAULT_INPUT_SAMPLES: usize = 512;

/// A barrier field with its comparison function, shift capacity `Λ` and the
/// box (optionally intersected with an annulus) it is verified on.
#[derive(Debug, Clone)]
pub struct ShiftableCbf {
    pub field: FieldRef,
    pub alpha: ExtendedKeFn,
    pub capacity: f64,
    pub domain: Domain,
}

impl ShiftableCbf {
    pub fn new(field: FieldRef, alpha: ExtendedKeFn, capacity: f64, domain: Domain) -> Result<Self> {
        if !(capacity > 0.0) || !capacity.is_finite() {
            return Err(Error::InvalidArgument(format!("capacity must be positive, got {capacity}")));
        }
        if domain.dim() != field.dim() {
            return Err(Error::DimensionMismatch { expected: field.dim(), got: domain.dim() });
        }
        alpha.validate()?;
        Ok(ShiftableCbf { field, alpha, capacity, domain })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.field.eval(x)
    }

    /// `x ∈ C_λ`, i.e. `b(x) >= -λ`.
    pub fn in_superlevel(&self, x: &DVector<f64>, lambda: f64) -> bool {
        self.field.eval(x) >= -lambda
    }
}

/// Lower Dini derivative of `phi` at `x` in direction `v`.
pub fn dini_directional(phi: &dyn ScalarField, x: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    if x.len() != phi.dim() {
        return Err(Error::DimensionMismatch { expected: phi.dim(), got: x.len() });
    }
    if v.len() != phi.dim() {
        return Err(Error::DimensionMismatch { expected: phi.dim(), got: v.len() });
    }
    if x.iter().chain(v.iter()).any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("dini_directional"));
    }
    Ok(dini_unchecked(phi, x, v))
}

fn dini_unchecked(phi: &dyn ScalarField, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
    if !phi.nondifferentiable_at(x) {
        if let Some(g) = phi.gradient(x) {
            return g.dot(v);
        }
    }
    let f0 = phi.eval(x);
    DINI_STEPS.iter().map(|&eps| (phi.eval(&(x + v * eps)) - f0) / eps).fold(f64::INFINITY, f64::min)
}

/// How `sup_u` over the input set is approximated.
#[derive(Debug, Clone, PartialEq)]
pub enum InputProbe {
    /// Box vertices for input-affine models, uniform samples otherwise.
    Auto,
    Vertices,
    Uniform(usize),
    Explicit(Vec<DVector<f64>>),
}

fn probe_inputs(model: &DynamicsModel, probe: &InputProbe, nondiff: bool) -> Result<Vec<DVector<f64>>> {
    let bx = &model.input_box;
    let uniform = |k: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        (0..k).map(|_| bx.sample(&mut rng)).collect::<Vec<_>>()
    };
    let mut inputs = match probe {
        InputProbe::Auto if model.is_input_affine() => bx.vertices(),
        InputProbe::Auto => {
            let mut v = bx.vertices();
            v.extend(uniform(DEFAULT_INPUT_SAMPLES));
            v
        }
        InputProbe::Vertices => bx.vertices(),
        InputProbe::Uniform(k) => uniform(*k),
        InputProbe::Explicit(us) => us.clone(),
    };
    // at a kink the Dini derivative is not affine in the input, so the
    // maximiser can sit inside the box
    if nondiff && !matches!(probe, InputProbe::Explicit(_)) {
        let centre = DVector::from_iterator(bx.dim(), bx.lo.iter().zip(&bx.hi).map(|(l, h)| 0.5 * (l + h)));
        inputs.push(centre);
        inputs.extend(uniform(DEFAULT_INPUT_SAMPLES));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty input probe".into()));
    }
    Ok(inputs)
}

/// `sup_u db(x; f(x, u)) + α(b(x))`, with the maximising input.
pub fn condition_margin_with_input(
    phi: &dyn ScalarField,
    alpha: &ExtendedKeFn,
    model: &DynamicsModel,
    x: &DVector<f64>,
    probe: &InputProbe,
) -> Result<(f64, DVector<f64>)> {
    if x.len() != model.state_dim() || x.len() != phi.dim() {
        return Err(Error::DimensionMismatch { expected: model.state_dim(), got: x.len() });
    }
    let inputs = probe_inputs(model, probe, phi.nondifferentiable_at(x))?;
    let mut best = f64::NEG_INFINITY;
    let mut arg = inputs[0].clone();
    for u in inputs {
        if u.len() != model.input_dim() {
            return Err(Error::DimensionMismatch { expected: model.input_dim(), got: u.len() });
        }
        let d = dini_unchecked(phi, x, &model.eval(x, &u));
        if d > best {
            best = d;
            arg = u;
        }
    }
    Ok((best + alpha.eval(phi.eval(x)), arg))
}

pub fn cbf_condition_margin(
    b: &ShiftableCbf,
    model: &DynamicsModel,
    x: &DVector<f64>,
    probe: &InputProbe,
) -> Result<f64> {
    condition_margin_with_input(b.field.as_ref(), &b.alpha, model, x, probe).map(|(m, _)| m)
}

/// Rejection-samples `C_Λ ∩ domain` and checks the gradient condition at
/// every accepted state. Fails with [`Error::NoSamples`] if nothing lands in
/// the region.
pub fn verify_shiftable(b: &ShiftableCbf, model: &DynamicsModel, n_samples: usize, seed: u64) -> Result<CheckReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if model.state_dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: b.dim(), got: model.state_dim() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<DVector<f64>> = (0..n_samples)
        .map(|_| b.domain.sample_box(&mut rng))
        .filter(|x| b.domain.contains(x) && b.in_superlevel(x, b.capacity))
        .collect();
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let margins: Vec<f64> =
        samples.par_iter().map(|x| cbf_condition_margin(b, model, x, &InputProbe::Auto)).collect::<Result<_>>()?;
    let mut report = CheckReport::new("shiftable");
    let (iw, &worst) = margins.iter().enumerate().min_by(|a, c| a.1.total_cmp(c.1)).expect("non-empty");
    let witness: Vec<f64> = samples[iw].iter().copied().collect();
    if worst < -MARGIN_TOL {
        report.fail(worst, witness, format!("condition margin {worst:.3e} over {} samples", samples.len()));
    } else {
        report.worst_margin = worst;
        report.witness = witness;
        report.message = format!("{} samples in C_Λ", samples.len());
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LipschitzMode {
    Global,
    Boundary { lambda: f64, epsilon: f64 },
}

/// Where gradients are sampled. `Boundary` keeps only states with
/// `|ψ(x) + λ| <= ε`, where `ψ` is `level` if given and the sampled field
/// itself otherwise.
#[derive(Debug, Clone)]
pub enum LipschitzRegion {
    Domain(Domain),
    Boundary { domain: Domain, lambda: f64, epsilon: f64, level: Option<FieldRef> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// `raw * 1.05`.
    pub value: f64,
    pub raw: f64,
    pub mode: LipschitzMode,
    pub samples_used: usize,
}

pub fn estimate_lipschitz(
    phi: &dyn ScalarField,
    region: &LipschitzRegion,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("n_samples must be at least 2".into()));
    }
    let (domain, mode) = match region {
        LipschitzRegion::Domain(d) => (d, LipschitzMode::Global),
        LipschitzRegion::Boundary { domain, lambda, epsilon, .. } => {
            if !(*epsilon > 0.0) {
                return Err(Error::InvalidArgument("epsilon must be positive".into()));
            }
            (domain, LipschitzMode::Boundary { lambda: *lambda, epsilon: *epsilon })
        }
    };
    if domain.dim() != phi.dim() {
        return Err(Error::DimensionMismatch { expected: phi.dim(), got: domain.dim() });
    }
    let level: &dyn ScalarField = match region {
        LipschitzRegion::Boundary { level: Some(l), .. } => l.as_ref(),
        _ => phi,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<DVector<f64>> = (0..n_samples)
        .map(|_| domain.sample_box(&mut rng))
        .filter(|x| {
            domain.contains(x)
                && match mode {
                    LipschitzMode::Global => true,
                    LipschitzMode::Boundary { lambda, epsilon } => (level.eval(x) + lambda).abs() <= epsilon,
                }
        })
        .collect();
    if samples.len() < 2 {
        return Err(Error::NoSamples);
    }
    let raw =
        samples.par_iter().map(|x| gradient_or_numeric(phi, &step_off_locus(phi, x)).norm()).reduce(|| 0.0, f64::max);
    if !raw.is_finite() {
        return Err(Error::NonFinite("lipschitz estimate"));
    }
    Ok(LipschitzEstimate { value: raw * LIPSCHITZ_SAFETY, raw, mode, samples_used: samples.len() })
}
