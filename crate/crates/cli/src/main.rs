//! `tvcbf`: verify and simulate time-varying CBF scenarios.
//!
//! Exit codes: 0 pass, 1 verification or run criteria failed, 2 bad
//! configuration, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use tvcbf_core::comparison::uniform_grid;
use tvcbf_core::config::{CbfSpec, DEFAULT_TOL_B};
use tvcbf_core::scenarios::BUILTIN_NAMES;
use tvcbf_core::{
    compose_beta, estimate_lipschitz, run_scenario, verify_scenario, Error, LipschitzRegion, RunConfig, ScenarioSpec,
};

#[derive(Parser)]
#[command(name = "tvcbf", version, about = "Verify and simulate time-varying control barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the static checks and write a JSON report.
    Verify(Common),
    /// Simulate the filtered closed loop and write the trajectory and summary.
    Run(RunArgs),
    /// Estimate the Lipschitz constant of a barrier over its domain.
    Lipschitz(LipschitzArgs),
    /// Tabulate the composed comparison function β of a barrier.
    Beta(BetaArgs),
    /// Print the resolved scenario as JSON, usable as an inline config.
    Show(Common),
    /// List the built-in scenarios.
    List,
}

#[derive(Args)]
struct Common {
    /// Built-in scenario name; ignored when --config is given.
    #[arg(default_value = "waypoint_si")]
    scenario: String,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario override as key=value, e.g. path_speed=1.0. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Tolerance on min B for a passing run.
    #[arg(long, default_value_t = DEFAULT_TOL_B)]
    tol_b: f64,
    #[arg(long)]
    dt_sim: Option<f64>,
    #[arg(long)]
    dt_control: Option<f64>,
}

#[derive(Args)]
struct LipschitzArgs {
    #[command(flatten)]
    common: Common,
    /// Barrier label; the first barrier by default.
    #[arg(long)]
    cbf: Option<String>,
    /// Sample only the band |b(x) + λ(0)| <= epsilon.
    #[arg(long)]
    boundary: bool,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
}

#[derive(Args)]
struct BetaArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    cbf: Option<String>,
    /// Decomposition grid size.
    #[arg(long, default_value_t = 1001)]
    grid: usize,
    /// Print β at this many evenly spaced points instead of the knots.
    #[arg(long)]
    points: Option<usize>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

/// Configuration-shaped errors exit 2, everything else 3.
fn classify(e: Error) -> Failure {
    match e {
        Error::Io(_) | Error::Diverged(_) | Error::NonFinite(_) | Error::Gradient(_) | Error::NoSamples => {
            Failure::Runtime(e.into())
        }
        _ => Failure::Config(e.into()),
    }
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T, Failure> {
    r.with_context(|| format!("writing {}", what.display())).map_err(Failure::Runtime)
}

struct Loaded {
    spec: ScenarioSpec,
    seed: u64,
    out: PathBuf,
    out_given: bool,
}

fn parse_set(item: &str) -> Result<(String, Value), Failure> {
    let (k, v) = item.split_once('=').ok_or_else(|| Failure::Config(anyhow!("--set expects KEY=VALUE, got {item}")))?;
    // bare words such as `true` or numbers parse as JSON; anything else is a string
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn load(c: &Common) -> Result<Loaded, Failure> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_path(path).map_err(classify)?,
        None => RunConfig::named(&c.scenario),
    };
    for item in &c.set {
        let (k, v) = parse_set(item)?;
        cfg.overrides.insert(k, v);
    }
    let spec = cfg.resolve().map_err(classify)?;
    let out_given = c.out.is_some() || cfg.output_dir.is_some();
    let out = c.out.clone().or(cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Loaded { spec, seed: c.seed.unwrap_or(cfg.seed), out, out_given })
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    io(fs::create_dir_all(dir), dir)
}

fn pick_cbf<'a>(spec: &'a ScenarioSpec, label: Option<&str>) -> Result<&'a CbfSpec, Failure> {
    match label {
        None => spec.cbfs.first().ok_or_else(|| Failure::Config(anyhow!("scenario {} has no barriers", spec.name))),
        Some(l) => spec.cbfs.iter().find(|c| c.label == l).ok_or_else(|| {
            let known: Vec<&str> = spec.cbfs.iter().map(|c| c.label.as_str()).collect();
            Failure::Config(anyhow!("no barrier labelled {l} (have {})", known.join(", ")))
        }),
    }
}

fn cmd_verify(c: &Common) -> Result<u8, Failure> {
    let l = load(c)?;
    let report = verify_scenario(&l.spec, l.seed).map_err(classify)?;
    ensure_dir(&l.out)?;
    let path = l.out.join(format!("verify_{}.json", l.spec.name));
    report.write_json(&path).map_err(classify)?;
    for chk in &report.checks {
        println!("{} {} (margin {:.3e})", if chk.pass { "ok  " } else { "FAIL" }, chk.check, chk.worst_margin);
    }
    for s in &report.skipped {
        println!("skip {s}");
    }
    if report.pass {
        println!("{}: verified, report at {}", report.scenario, path.display());
        Ok(0)
    } else {
        eprintln!("{}: failed checks: {}", report.scenario, report.failed_checks().join(", "));
        Ok(1)
    }
}

fn cmd_run(a: &RunArgs) -> Result<u8, Failure> {
    if a.tol_b.is_nan() || a.tol_b < 0.0 {
        return Err(Failure::Config(anyhow!("--tol-b must be non-negative")));
    }
    let mut l = load(&a.common)?;
    if let Some(dt) = a.dt_sim {
        l.spec.dt_sim = dt;
    }
    if let Some(dt) = a.dt_control {
        l.spec.dt_control = dt;
    }
    let mut scenario = l.spec.build().map_err(classify)?;
    let certs = scenario.certify(&l.spec.certificate_grid()).map_err(classify)?;
    ensure_dir(&l.out)?;
    let csv_path = l.out.join(format!("{}.csv", l.spec.name));
    let summary_path = l.out.join(format!("{}_summary.json", l.spec.name));

    let start = Instant::now();
    let (record, failure) = match run_scenario(&scenario) {
        Ok(r) => (r, None),
        Err(f) => (*f.record, Some(f.error)),
    };
    let elapsed = start.elapsed().as_secs_f64();
    record.write_csv(&csv_path).map_err(classify)?;
    let summary = record.summary(&certs, a.tol_b);
    summary.write_json(&summary_path).map_err(classify)?;

    if let Some(e) = failure {
        eprintln!("partial trajectory ({} rows) written to {}", record.rows.len(), csv_path.display());
        return Err(classify(e));
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: {} rows in {elapsed:.2}s, min B {} at t = {:.2}, min h {}, worst status {}, infeasible rows {}",
        summary.scenario,
        summary.rows,
        fmt(summary.min_b),
        summary.min_b_time,
        fmt(summary.min_h),
        summary.worst_status.as_str(),
        summary.infeasible_rows
    );
    for cert in certs.iter().filter(|c| !c.pass) {
        println!("warning: certificate {} failed: {}", cert.check, cert.message);
    }
    println!("wrote {} and {}", csv_path.display(), summary_path.display());
    Ok(if summary.pass { 0 } else { 1 })
}

fn cmd_lipschitz(a: &LipschitzArgs) -> Result<u8, Failure> {
    let l = load(&a.common)?;
    let cs = pick_cbf(&l.spec, a.cbf.as_deref())?;
    let field = cs.field.build().map_err(classify)?;
    let dim = field.dim();
    let domain = cs.domain.clone().unwrap_or_else(|| tvcbf_core::Domain::cube(10.0, dim));
    let region = if a.boundary {
        let lambda = cs.offset.build().map_err(classify)?.eval(0.0);
        LipschitzRegion::Boundary { domain, lambda, epsilon: a.epsilon, level: None }
    } else {
        LipschitzRegion::Domain(domain)
    };
    let est = estimate_lipschitz(field.as_ref(), &region, a.samples, l.seed).map_err(classify)?;
    let out = json!({
        "scenario": l.spec.name,
        "cbf": cs.label,
        "field": field.name(),
        "seed": l.seed,
        "estimate": est,
    });
    let text = serde_json::to_string_pretty(&out).expect("serialisable");
    println!("{text}");
    if l.out_given {
        ensure_dir(&l.out)?;
        let path = l.out.join(format!("lipschitz_{}_{}.json", l.spec.name, cs.label));
        io(fs::write(&path, text + "\n"), &path)?;
    }
    Ok(0)
}

fn cmd_beta(a: &BetaArgs) -> Result<u8, Failure> {
    let l = load(&a.common)?;
    let cs = pick_cbf(&l.spec, a.cbf.as_deref())?;
    let beta = compose_beta(&cs.alpha, cs.alpha_p(), cs.capacity, a.grid).map_err(classify)?;
    let rows: Vec<(f64, f64)> = match (a.points, beta.knots()) {
        (None, Some(knots)) => knots.to_vec(),
        (n, _) => {
            let (lo, hi) = beta.domain_hint();
            uniform_grid(lo, hi, n.unwrap_or(a.grid).max(2)).into_iter().map(|s| (s, beta.eval(s))).collect()
        }
    };
    let mut text = String::from("s,beta\n");
    for (s, b) in &rows {
        text.push_str(&format!("{s},{b}\n"));
    }
    if l.out_given {
        ensure_dir(&l.out)?;
        let path = l.out.join(format!("beta_{}_{}.csv", l.spec.name, cs.label));
        io(fs::write(&path, &text), &path)?;
        println!("{} rows written to {}", rows.len(), path.display());
    } else {
        print!("{text}");
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(c) => cmd_verify(c),
        Command::Run(a) => cmd_run(a),
        Command::Lipschitz(a) => cmd_lipschitz(a),
        Command::Beta(a) => cmd_beta(a),
        Command::Show(c) => load(c).map(|l| {
            let cfg = json!({ "scenario": l.spec, "seed": l.seed });
            println!("{}", serde_json::to_string_pretty(&cfg).expect("serialisable"));
            0
        }),
        Command::List => {
            BUILTIN_NAMES.iter().for_each(|n| println!("{n}"));
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let (Failure::Config(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
