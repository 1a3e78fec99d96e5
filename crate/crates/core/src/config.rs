//! JSON scenario descriptions and their conversion into runnable scenarios.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cbf::ShiftableCbf;
use crate::comparison::ExtendedKeFn;
use crate::dynamics::{DynamicsModel, InputBox, ModelKind};
use crate::equivariance::DiffeoFamily;
use crate::error::{Error, Result};
use crate::field::{Annulus, BackstepDi, DiskDist, Domain, FieldRef, LinearField, LookaheadDist, NegNorm, VelCap};
use crate::sim::{generate_waypoint_path, ObstaclePath, ReferenceLaw, Scenario, SmoothWaypointPath};
use crate::trajectory::{time_grid, OffsetTrajectory, ParamTrajectory, Sinusoid};
use crate::tv::{rescale_time, TimeVaryingCbf, TvConstraint};

pub const DEFAULT_DT_SIM: f64 = 1e-3;
pub const DEFAULT_DT_CONTROL: f64 = 1e-2;
pub const DEFAULT_TOL_B: f64 = 1e-3;
const MIN_GRID: usize = 2001;
const DEFAULT_DOMAIN_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case")]
pub enum FieldSpec {
    /// `-‖x[start..start+len]‖`; the whole state by default.
    NegNorm {
        dim: usize,
        #[serde(default)]
        start: usize,
        #[serde(default)]
        len: Option<usize>,
    },
    BackstepDi {
        n: usize,
        inner: ExtendedKeFn,
        r: f64,
    },
    VelCap {
        n: usize,
        cap: f64,
    },
    DiskDist {
        dim: usize,
        center: Vec<f64>,
        radius: f64,
    },
    LookaheadDist {
        lookahead: f64,
        radius: f64,
    },
    Linear {
        a: Vec<f64>,
        c: f64,
    },
}

impl FieldSpec {
    pub fn build(&self) -> Result<FieldRef> {
        let f: FieldRef = match self {
            FieldSpec::NegNorm { dim, start, len } => {
                let len = len.unwrap_or(dim.saturating_sub(*start));
                if len == 0 || start + len > *dim {
                    return Err(Error::Config(format!("neg_norm block {start}+{len} does not fit dimension {dim}")));
                }
                Arc::new(NegNorm::on_block(*dim, *start, len))
            }
            FieldSpec::BackstepDi { n, inner, r } => {
                inner.validate()?;
                Arc::new(BackstepDi::new(*n, inner.clone(), *r))
            }
            FieldSpec::VelCap { n, cap } => Arc::new(VelCap { n: *n, cap: *cap }),
            FieldSpec::DiskDist { dim, center, radius } => {
                if center.len() > *dim {
                    return Err(Error::Config("disk_dist centre is longer than the state".into()));
                }
                Arc::new(DiskDist { dim: *dim, center: center.clone(), radius: *radius })
            }
            FieldSpec::LookaheadDist { lookahead, radius } => {
                Arc::new(LookaheadDist { lookahead: *lookahead, radius: *radius })
            }
            FieldSpec::Linear { a, c } => Arc::new(LinearField { a: DVector::from_column_slice(a), c: *c }),
        };
        Ok(f)
    }

    fn is_heuristic(&self) -> bool {
        matches!(self, FieldSpec::LookaheadDist { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajSpec {
    Constant {
        p: Vec<f64>,
    },
    PiecewiseLinear {
        knots: Vec<(f64, Vec<f64>)>,
    },
    /// Constant-speed polyline; `rate_bound` defaults to the barrier's
    /// admissible rate.
    Waypoints {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        rate_bound: Option<f64>,
        #[serde(default)]
        speed: Option<f64>,
        #[serde(default)]
        dwell: f64,
    },
    /// Rest-to-rest trapezoidal profile; augmented `(p, ṗ)` unless
    /// `augmented` is false.
    SmoothWaypoints {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        rate_bound: Option<f64>,
        #[serde(default)]
        dwell: f64,
        #[serde(default = "yes")]
        augmented: bool,
    },
    Obstacle(ObstaclePath),
}

fn yes() -> bool {
    true
}

fn points(raw: &[Vec<f64>]) -> Vec<DVector<f64>> {
    raw.iter().map(|p| DVector::from_column_slice(p)).collect()
}

impl TrajSpec {
    /// `default_bound` fills in a missing `rate_bound`.
    pub fn build(&self, default_bound: Option<f64>) -> Result<ParamTrajectory> {
        let bound = |b: &Option<f64>| {
            b.or(default_bound).ok_or_else(|| Error::Config("waypoint path needs a rate_bound".into()))
        };
        match self {
            TrajSpec::Constant { p } => Ok(ParamTrajectory::constant(DVector::from_column_slice(p))),
            TrajSpec::PiecewiseLinear { knots } => ParamTrajectory::piecewise_linear(
                knots.iter().map(|(t, p)| (*t, DVector::from_column_slice(p))).collect(),
            ),
            TrajSpec::Waypoints { points: pts, rate_bound, speed, dwell } => {
                generate_waypoint_path(&points(pts), bound(rate_bound)?, *speed, *dwell)
            }
            TrajSpec::SmoothWaypoints { points: pts, rate_bound, dwell, augmented } => {
                let path = SmoothWaypointPath::within_bound(&points(pts), bound(rate_bound)?, *dwell)?;
                Ok(ParamTrajectory::analytic(if *augmented { path } else { path.positions() }))
            }
            TrajSpec::Obstacle(o) => {
                if o.start.len() < 2 || o.start.len() != o.velocity.len() {
                    return Err(Error::Config("obstacle start/velocity must have the same length >= 2".into()));
                }
                Ok(ParamTrajectory::analytic(o.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetSpec {
    Constant {
        value: f64,
    },
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
    },
    Sinusoid {
        offset: f64,
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl OffsetSpec {
    pub fn build(&self) -> Result<OffsetTrajectory> {
        match self {
            OffsetSpec::Constant { value } => Ok(OffsetTrajectory::constant(*value)),
            OffsetSpec::PiecewiseLinear { knots } => OffsetTrajectory::piecewise_linear(knots.clone()),
            OffsetSpec::Sinusoid { offset, amplitude, omega, phase } => Ok(OffsetTrajectory::analytic(Sinusoid {
                offset: *offset,
                amplitude: *amplitude,
                omega: *omega,
                phase: *phase,
            })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfSpec {
    pub label: String,
    pub field: FieldSpec,
    pub alpha: ExtendedKeFn,
    /// Defaults to `alpha`.
    #[serde(default)]
    pub alpha_p: Option<ExtendedKeFn>,
    pub capacity: f64,
    /// Verification region; a cube of half-width 10 by default.
    #[serde(default)]
    pub domain: Option<Domain>,
    pub family: DiffeoFamily,
    pub p: TrajSpec,
    pub offset: OffsetSpec,
    #[serde(default)]
    pub ell_b: Option<f64>,
    #[serde(default)]
    pub ell_d: Option<f64>,
    /// Fixed admissible `‖dp‖` replacing `α_p(λ)/(ℓ_b ℓ_D)`.
    #[serde(default)]
    pub rate_bound: Option<f64>,
    #[serde(default)]
    pub active_annulus: Option<Annulus>,
    /// Family whose equivariance is verified, when it differs from
    /// `family`.
    #[serde(default)]
    pub equivariance_family: Option<DiffeoFamily>,
    /// Rescale `p` in time so that it satisfies this rate bound.
    #[serde(default)]
    pub rescale_to: Option<f64>,
}

impl CbfSpec {
    pub fn alpha_p(&self) -> &ExtendedKeFn {
        self.alpha_p.as_ref().unwrap_or(&self.alpha)
    }

    /// Admissible rate when it does not depend on time.
    fn static_bound(&self) -> Option<f64> {
        self.rate_bound.or_else(|| match self.offset {
            OffsetSpec::Constant { value } => {
                let ell_d = self.ell_d.or_else(|| self.family.lipschitz_p()).unwrap_or(1.0);
                Some(self.alpha_p().eval(value) / (self.ell_b.unwrap_or(1.0) * ell_d))
            }
            _ => None,
        })
    }

    pub fn build(&self, dim: usize, grid: &[f64]) -> Result<TimeVaryingCbf> {
        self.alpha.validate()?;
        self.alpha_p().validate()?;
        let field = self.field.build()?;
        if field.dim() != dim {
            return Err(Error::Config(format!(
                "barrier {} has dimension {}, model has {dim}",
                self.label,
                field.dim()
            )));
        }
        let domain = self.domain.clone().unwrap_or_else(|| Domain::cube(DEFAULT_DOMAIN_HALF_WIDTH, dim));
        let base = ShiftableCbf::new(field, self.alpha.clone(), self.capacity, domain)?;
        let mut p = self.p.build(self.static_bound())?;
        if let Some(bound) = self.rescale_to {
            p = rescale_time(&p, bound, grid)?.1;
        }
        let mut b = TimeVaryingCbf::new(
            &self.label,
            base,
            self.family.clone(),
            p,
            self.offset.build()?,
            self.alpha_p().clone(),
        )?;
        if self.ell_b.is_some() || self.ell_d.is_some() {
            let (ell_b, ell_d) = (self.ell_b.unwrap_or(b.ell_b), self.ell_d.unwrap_or(b.ell_d));
            b = b.with_lipschitz(ell_b, ell_d);
        }
        if let Some(r) = self.rate_bound {
            b = b.with_rate_bound(r);
        }
        if let Some(a) = &self.active_annulus {
            b = b.with_active_region(a.clone());
        }
        if self.field.is_heuristic() {
            b = b.uncertified();
        }
        Ok(b)
    }
}

/// `h(t, x) = h̄(D(x; q(t))) + γ(t)`. `q` and `γ` default to the path and
/// offset of the barrier named by `cbf`; when `underapprox` is set,
/// verification checks that this barrier under-approximates the constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub label: String,
    pub field: FieldSpec,
    pub family: DiffeoFamily,
    #[serde(default)]
    pub q: Option<TrajSpec>,
    #[serde(default)]
    pub gamma: Option<OffsetSpec>,
    #[serde(default)]
    pub cbf: Option<String>,
    #[serde(default = "yes")]
    pub underapprox: bool,
}

impl ConstraintSpec {
    pub fn build(&self, cbfs: &[TimeVaryingCbf]) -> Result<TvConstraint> {
        let paired =
            match &self.cbf {
                Some(label) => Some(cbfs.iter().find(|b| &b.label == label).ok_or_else(|| {
                    Error::Config(format!("constraint {} names unknown barrier {label}", self.label))
                })?),
                None => None,
            };
        let missing = |what: &str| Error::Config(format!("constraint {} needs {what} or a paired barrier", self.label));
        let q_traj = match (&self.q, paired) {
            (Some(q), _) => q.build(None)?,
            (None, Some(b)) => b.p_traj.clone(),
            (None, None) => return Err(missing("q")),
        };
        let gamma = match (&self.gamma, paired) {
            (Some(g), _) => g.build()?,
            (None, Some(b)) => b.offset.clone(),
            (None, None) => return Err(missing("gamma")),
        };
        let hbar = self.field.build()?;
        if hbar.dim() != self.family.state_dim() || q_traj.dim() != self.family.param_dim() {
            return Err(Error::Config(format!("constraint {} does not match its family's dimensions", self.label)));
        }
        Ok(TvConstraint { label: self.label.clone(), hbar, family: self.family.clone(), q_traj, gamma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    /// Model default when omitted.
    #[serde(default)]
    pub input_box: Option<InputBox>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<DynamicsModel> {
        let mut m = match &self.kind {
            ModelKind::SingleIntegrator { n } => DynamicsModel::single_integrator(*n),
            ModelKind::DoubleIntegrator { n } => DynamicsModel::double_integrator(*n),
            ModelKind::Unicycle => DynamicsModel::unicycle(),
            ModelKind::Bicycle { wheelbase, lr_ratio } => DynamicsModel::bicycle(*wheelbase, *lr_ratio, 20.0),
            ModelKind::Linear { a, b } => {
                let bx =
                    self.input_box.clone().ok_or_else(|| Error::Config("linear model needs an input_box".into()))?;
                let n = a.len();
                let m = b.first().map_or(0, Vec::len);
                let am = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i].get(j).copied().unwrap_or(f64::NAN));
                let bm = nalgebra::DMatrix::from_fn(n, m, |i, j| {
                    b.get(i).and_then(|r| r.get(j)).copied().unwrap_or(f64::NAN)
                });
                DynamicsModel::linear(am, bm, bx)?
            }
        };
        if let Some(bx) = &self.input_box {
            m = m.with_input_box(bx.clone());
        }
        m.validate()?;
        Ok(m)
    }
}

fn default_dt_sim() -> f64 {
    DEFAULT_DT_SIM
}

fn default_dt_control() -> f64 {
    DEFAULT_DT_CONTROL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub model: ModelSpec,
    pub cbfs: Vec<CbfSpec>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default)]
    pub reference: ReferenceLaw,
    pub x0: Vec<f64>,
    #[serde(default = "default_dt_sim")]
    pub dt_sim: f64,
    #[serde(default = "default_dt_control")]
    pub dt_control: f64,
    pub horizon: f64,
    #[serde(default)]
    pub online_rate: bool,
}

impl ScenarioSpec {
    /// Times at which rate certificates are checked.
    pub fn certificate_grid(&self) -> Vec<f64> {
        let n = ((self.horizon / self.dt_control).ceil() as usize + 1).max(MIN_GRID);
        time_grid(0.0, self.horizon, n)
    }

    pub fn build(&self) -> Result<Scenario> {
        let model = self.model.build()?;
        let n = model.state_dim();
        if self.x0.len() != n {
            return Err(Error::Config(format!("x0 has length {}, model state has {n}", self.x0.len())));
        }
        let grid = self.certificate_grid();
        let cbfs = self.cbfs.iter().map(|c| c.build(n, &grid)).collect::<Result<Vec<_>>>()?;
        let constraints = self.constraints.iter().map(|c| c.build(&cbfs)).collect::<Result<Vec<_>>>()?;
        let s = Scenario {
            name: self.name.clone(),
            model,
            cbfs,
            constraints,
            reference: self.reference.clone(),
            x0: DVector::from_column_slice(&self.x0),
            dt_sim: self.dt_sim,
            dt_control: self.dt_control,
            horizon: self.horizon,
            online_rate: self.online_rate,
        };
        s.substeps()?;
        s.ticks()?;
        Ok(s)
    }

    /// Applies `key = value` overrides. Known keys: `path_speed`, `horizon`,
    /// `dt_sim`, `dt_control`, `online_rate`.
    pub fn apply_overrides(&mut self, overrides: &BTreeMap<String, serde_json::Value>) -> Result<()> {
        for (key, value) in overrides {
            let num = || value.as_f64().ok_or_else(|| Error::Config(format!("override {key} must be a number")));
            match key.as_str() {
                "path_speed" => {
                    let v = num()?;
                    if !(v > 0.0) {
                        return Err(Error::Config(format!("path_speed must be positive, got {v}")));
                    }
                    // the generator caps speed at 0.99 · rate_bound
                    let paths = self
                        .cbfs
                        .iter_mut()
                        .map(|c| &mut c.p)
                        .chain(self.constraints.iter_mut().filter_map(|c| c.q.as_mut()));
                    for p in paths {
                        if let TrajSpec::Waypoints { rate_bound, speed, .. } = p {
                            *speed = Some(v);
                            *rate_bound = Some(v / crate::sim::PATH_SPEED_FRACTION);
                        }
                    }
                }
                "horizon" => self.horizon = num()?,
                "dt_sim" => self.dt_sim = num()?,
                "dt_control" => self.dt_control = num()?,
                "online_rate" => {
                    self.online_rate =
                        value.as_bool().ok_or_else(|| Error::Config("override online_rate must be a boolean".into()))?
                }
                other => return Err(Error::Config(format!("unknown override {other}"))),
            }
        }
        Ok(())
    }
}

/// A scenario given by built-in name or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Named(String),
    Inline(Box<ScenarioSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioRef,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub overrides: BTreeMap<String, serde_json::Value>,
}

impl RunConfig {
    pub fn named(name: impl Into<String>) -> Self {
        RunConfig { scenario: ScenarioRef::Named(name.into()), output_dir: None, seed: 0, overrides: BTreeMap::new() }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            // the untagged scenario field hides the real error; re-parse it alone
            let detail = serde_json::from_str::<serde_json::Value>(text)
                .ok()
                .and_then(|v| v.get("scenario").filter(|s| s.is_object()).cloned())
                .and_then(|s| serde_json::from_value::<ScenarioSpec>(s).err());
            match detail {
                Some(d) => Error::Config(format!("scenario: {d}")),
                None => Error::Config(e.to_string()),
            }
        })
    }

    /// The scenario with overrides applied.
    pub fn resolve(&self) -> Result<ScenarioSpec> {
        let mut spec = match &self.scenario {
            ScenarioRef::Named(name) => crate::scenarios::builtin(name)?,
            ScenarioRef::Inline(spec) => (**spec).clone(),
        };
        spec.apply_overrides(&self.overrides)?;
        Ok(spec)
    }
}
