//! Static verification of a scenario: comparison functions, equivariance,
//! shiftability, rate certificates and constraint under-approximation.

use std::path::Path;

use serde::Serialize;

use crate::cbf::verify_shiftable;
use crate::comparison::{grid_through_zero, verify_alpha_p, verify_class_ke, ExtendedKeFn, DEFAULT_GRID};
use crate::config::ScenarioSpec;
use crate::equivariance::{verify_equivariance, EquivarianceReport};
use crate::error::Result;
use crate::report::CheckReport;
use crate::tv::check_underapprox;

pub const EQUIVARIANCE_SAMPLES: usize = 10_000;
pub const SHIFTABLE_SAMPLES: usize = 20_000;
pub const UNDERAPPROX_SAMPLES: usize = 5_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<CheckReport>,
    pub equivariance: Vec<EquivarianceReport>,
    /// Checks that do not apply, with the reason.
    pub skipped: Vec<String>,
}

impl VerifyReport {
    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.check.as_str()).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn ke_grid(f: &ExtendedKeFn) -> Vec<f64> {
    let (lo, hi) = f.domain_hint();
    grid_through_zero(lo, hi, DEFAULT_GRID)
}

fn labelled(mut r: CheckReport, label: &str) -> CheckReport {
    r.check = format!("{label}:{}", r.check);
    r
}

/// Runs every applicable check. Deterministic for a given `seed`.
pub fn verify_scenario(spec: &ScenarioSpec, seed: u64) -> Result<VerifyReport> {
    let mut scenario = spec.build()?;
    let grid = spec.certificate_grid();
    let mut checks = Vec::new();
    let mut equivariance = Vec::new();
    let mut skipped = Vec::new();

    for (cs, b) in spec.cbfs.iter().zip(scenario.cbfs.iter_mut()) {
        let label = &cs.label;
        checks.push(labelled(verify_class_ke(&cs.alpha, &ke_grid(&cs.alpha))?, &format!("{label}:alpha")));
        if cs.alpha_p() != &cs.alpha {
            checks.push(labelled(verify_class_ke(cs.alpha_p(), &ke_grid(cs.alpha_p()))?, &format!("{label}:alpha_p")));
        }
        checks.push(labelled(verify_alpha_p(&cs.alpha, cs.alpha_p(), cs.capacity, DEFAULT_GRID)?, label));

        let fam = cs.equivariance_family.as_ref().unwrap_or(&cs.family);
        let eq = verify_equivariance(&scenario.model, fam, EQUIVARIANCE_SAMPLES, seed)?;
        checks.push(labelled(eq.to_check(), label));
        equivariance.push(eq);
        if cs.equivariance_family.is_some() {
            skipped.push(format!(
                "{label}: equivariance checked for {} instead of {}; the remaining parameter components enter through the rate bound",
                fam.name(),
                cs.family.name()
            ));
        }

        if b.certified_field {
            checks.push(labelled(verify_shiftable(&b.base, &scenario.model, SHIFTABLE_SAMPLES, seed)?, label));
        } else {
            skipped.push(format!("{label}: shiftable check skipped, {} is a heuristic barrier", b.base.field.name()));
        }
        checks.push(b.certify(&grid)?.clone());
    }

    for (cs, c) in spec.constraints.iter().zip(&scenario.constraints) {
        let Some(b) = cs.cbf.as_ref().and_then(|l| scenario.cbfs.iter().find(|b| &b.label == l)) else {
            skipped.push(format!("{}: no paired barrier, under-approximation not checked", cs.label));
            continue;
        };
        if !cs.underapprox {
            skipped.push(format!("{}: under-approximation disabled", cs.label));
            continue;
        }
        if c.family != b.family {
            skipped.push(format!("{}: family differs from {}, under-approximation not checked", cs.label, b.label));
            continue;
        }
        let r = check_underapprox(&b.base, c, &b.offset, UNDERAPPROX_SAMPLES, &grid, seed)?;
        checks.push(labelled(r, &cs.label));
    }

    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { scenario: spec.name.clone(), seed, pass, checks, equivariance, skipped })
}
