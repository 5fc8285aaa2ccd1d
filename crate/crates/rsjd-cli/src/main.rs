//! Configuration-driven command-line front end.
//!
//! Five verbs: `simulate`, `verify`, `couple`, `resolvent`, `report`. A JSON
//! run-configuration file can prefill any parameter; command-line flags
//! override file fields. Exit codes: 0 all checks pass / run complete,
//! 1 at least one check fails, 2 configuration or model error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use rsjd::coupling::{self, CouplingKind};
use rsjd::model::{validate_model, Hyperrect, ModelSpec};
use rsjd::paths::simulate_direct;
use rsjd::report::{
    atomic_write, config_hash, coupling_report_csv, read_verdicts_jsonl, resolvent_report_csv,
    tail_report_csv, write_paths_csv, write_verdicts_jsonl, OutputMeta, ResolventRow,
};
use rsjd::rng::ensemble_map;
use rsjd::semigroup::{
    alpha_one, resolvent_mc, resolvent_series, MeshConfig, ResolventQuery, SimulatorKind,
};
use rsjd::verify::{run_suite, CheckConfig};
use rsjd::zoo::{build_model, parse_config};
use rsjd::State;

#[derive(Parser)]
#[command(
    name = "rsjd",
    version,
    about = "Simulate and statistically verify regime-switching jump diffusions"
)]
struct Cli {
    /// Model configuration file (JSON).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Master seed; every path derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run-configuration file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble and dump paths as CSV.
    Simulate(SimulateArgs),
    /// Run the statistical identity suite and write a verdict file.
    Verify(VerifyArgs),
    /// Run coupled pairs and write distance/tail curves with their bounds.
    Couple(CoupleArgs),
    /// Estimate resolvents and write the comparison table.
    Resolvent(ResolventArgs),
    /// Summarize a verdict file.
    Report {
        /// Verdict file (JSON lines).
        verdicts: PathBuf,
    },
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct SimulateArgs {
    /// Number of paths.
    #[arg(long)]
    n: Option<usize>,
    /// Horizon.
    #[arg(long)]
    t: Option<f64>,
    /// Euler step.
    #[arg(long)]
    h: Option<f64>,
    /// Start point, comma separated.
    #[arg(long)]
    x0: Option<String>,
    /// Start regime (zero-based).
    #[arg(long)]
    k0: Option<usize>,
    /// Simulation law.
    #[arg(long, value_enum)]
    law: Option<Law>,
    /// How many paths to write out.
    #[arg(long)]
    dump_paths: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Serialize, Deserialize, Debug)]
#[serde(rename_all = "snake_case")]
enum Law {
    Pieced,
    Direct,
    Segment,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct VerifyArgs {
    /// Check suite to run (only `all` is defined).
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    x0: Option<String>,
    #[arg(long)]
    k0: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct CoupleArgs {
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    /// First start point.
    #[arg(long)]
    x0: Option<String>,
    /// Second start point.
    #[arg(long)]
    z0: Option<String>,
    /// Regime the coupling runs in.
    #[arg(long)]
    k: Option<usize>,
    /// Number of report times on (0, t].
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Serialize, Deserialize, Debug)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Synchronous,
    Reflection,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct ResolventArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// Methods to run, comma separated: direct,pieced,series.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    x0: Option<String>,
    #[arg(long)]
    k0: Option<usize>,
    /// Series truncation order.
    #[arg(long)]
    m_max: Option<usize>,
}

/// Run-configuration file: global fields plus one block per command.
#[derive(Serialize, Deserialize, Default)]
struct RunConfig {
    model: Option<PathBuf>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    #[serde(default)]
    simulate: Option<SimulateArgs>,
    #[serde(default)]
    verify: Option<VerifyArgs>,
    #[serde(default)]
    couple: Option<CoupleArgs>,
    #[serde(default)]
    resolvent: Option<ResolventArgs>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    CheckFailures(usize),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::CheckFailures(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

impl From<rsjd::Error> for CliError {
    fn from(e: rsjd::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::CheckFailures(n)) => {
            eprintln!("error: {n} check(s) failed");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn merge<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_point(text: &str, dim: usize) -> Result<State, CliError> {
    let vals: Result<Vec<f64>, _> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect();
    let vals = vals.map_err(|e| CliError::Config(format!("bad point '{text}': {e}")))?;
    if vals.len() != dim {
        return Err(CliError::Config(format!(
            "point '{text}' has {} coordinates, model has dimension {dim}",
            vals.len()
        )));
    }
    Ok(DVector::from_vec(vals))
}

struct Context {
    model: ModelSpec,
    seed: u64,
    out_dir: PathBuf,
    effective: serde_json::Value,
}

impl Context {
    fn meta(&self) -> OutputMeta {
        OutputMeta::new(config_hash(&self.effective))
    }
}

fn load_context(cli: &Cli, run_cfg: &RunConfig, command_block: serde_json::Value) -> Result<Context, CliError> {
    let model_path = cli
        .model
        .clone()
        .or_else(|| run_cfg.model.clone())
        .ok_or_else(|| CliError::Config("no model file given (use --model)".into()))?;
    let text = std::fs::read_to_string(&model_path).map_err(|e| {
        CliError::Config(format!("cannot read model file {}: {e}", model_path.display()))
    })?;
    let model_config = parse_config(&text)?;
    let model = build_model(&model_config)?;
    // Sampling-based validation before any run; a hard violation aborts.
    let report = validate_model(&model, 64, &Hyperrect::cube(model.dim, 2.0), 1)?;
    if !report.pass {
        let failed: Vec<&str> = report
            .items
            .iter()
            .filter(|i| !i.pass)
            .map(|i| i.name.as_str())
            .collect();
        return Err(CliError::Config(format!(
            "model validation failed: {}",
            failed.join(", ")
        )));
    }
    let seed = merge(cli.seed, run_cfg.seed, 0);
    let workers = merge(cli.workers, run_cfg.workers, 0);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .ok();
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| run_cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let effective = serde_json::json!({
        "model": serde_json::to_value(&model_config)?,
        "seed": seed,
        "params": command_block,
    });
    Ok(Context {
        model,
        seed,
        out_dir,
        effective,
    })
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config file {}: {e}", p.display()))
            })?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let run_cfg = load_run_config(&cli.config)?;
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(&cli, &run_cfg, args.clone()),
        Command::Verify(args) => cmd_verify(&cli, &run_cfg, args.clone()),
        Command::Couple(args) => cmd_couple(&cli, &run_cfg, args.clone()),
        Command::Resolvent(args) => cmd_resolvent(&cli, &run_cfg, args.clone()),
        Command::Report { verdicts } => cmd_report(verdicts),
    }
}

fn merge_args<T: Serialize + for<'a> Deserialize<'a>>(flag: &T, file: &Option<T>) -> T {
    // field-wise overlay: any null flag field falls back to the file block
    let mut base = match file {
        Some(f) => serde_json::to_value(f).expect("serializable args"),
        None => serde_json::Value::Object(Default::default()),
    };
    let over = serde_json::to_value(flag).expect("serializable args");
    if let (serde_json::Value::Object(b), serde_json::Value::Object(o)) = (&mut base, over) {
        for (key, val) in o {
            if !val.is_null() {
                b.insert(key, val);
            }
        }
    }
    serde_json::from_value(base).expect("merged args deserialize")
}

fn cmd_simulate(cli: &Cli, run_cfg: &RunConfig, args: SimulateArgs) -> Result<(), CliError> {
    let args: SimulateArgs = merge_args(&args, &run_cfg.simulate);
    let ctx = load_context(cli, run_cfg, serde_json::to_value(&args)?)?;
    let n = args.n.unwrap_or(1000);
    if n == 0 {
        return Err(CliError::Config("n_paths must be >= 1".into()));
    }
    let t = args.t.unwrap_or(1.0);
    let h = args.h.unwrap_or(1e-3);
    let k0 = args.k0.unwrap_or(0);
    let x0 = match &args.x0 {
        Some(s) => parse_point(s, ctx.model.dim)?,
        None => DVector::zeros(ctx.model.dim),
    };
    let law = args.law.unwrap_or(Law::Direct);
    let dump = args.dump_paths.unwrap_or(10).min(n);

    let results: Vec<Result<(Option<rsjd::RegimePath>, f64), rsjd::Error>> =
        ensemble_map(n, ctx.seed, |i, mut rng| {
            let path = match law {
                Law::Direct => {
                    simulate_direct(&ctx.model, x0.clone(), k0, t, h, &mut rng)?
                }
                Law::Pieced => {
                    rsjd::paths::simulate_pieced(&ctx.model, x0.clone(), k0, t, h, &mut rng)?
                }
                Law::Segment => {
                    rsjd::paths::simulate_segment(&ctx.model, k0, x0.clone(), 0.0, t, h, &mut rng)?
                }
            };
            let terminal = path.endpoint().0[0];
            Ok((if i < dump { Some(path) } else { None }, terminal))
        });
    let mut kept = Vec::new();
    let mut terminals = Vec::with_capacity(n);
    for r in results {
        let (p, v) = r.map_err(CliError::from)?;
        if let Some(p) = p {
            kept.push(p);
        }
        terminals.push(v);
    }
    let est = rsjd::MCEstimate::from_samples(&terminals, ctx.seed);
    let out = ctx.out_dir.join("paths.csv");
    write_paths_csv(&out, &kept, &ctx.meta()).map_err(CliError::from)?;
    println!(
        "simulated {n} paths to t={t} ({law:?}); E[X_1(t)] = {:.6} +- {:.6}; wrote {}",
        est.value,
        est.se,
        out.display()
    );
    Ok(())
}

fn cmd_verify(cli: &Cli, run_cfg: &RunConfig, args: VerifyArgs) -> Result<(), CliError> {
    let args: VerifyArgs = merge_args(&args, &run_cfg.verify);
    let ctx = load_context(cli, run_cfg, serde_json::to_value(&args)?)?;
    let suite = args.suite.clone().unwrap_or_else(|| "all".into());
    if suite != "all" {
        return Err(CliError::Config(format!(
            "unknown suite '{suite}' (only 'all' is defined)"
        )));
    }
    let n = args.n.unwrap_or(10_000);
    if n == 0 {
        return Err(CliError::Config("n_paths must be >= 1".into()));
    }
    let cfg = CheckConfig {
        n_paths: n,
        h: args.h.unwrap_or(1e-3),
        seed: ctx.seed,
        quad_per_point: 2,
        eval_stride: 4,
    };
    let horizon = args.t.unwrap_or(1.0);
    let k0 = args.k0.unwrap_or(0);
    let x0 = match &args.x0 {
        Some(s) => parse_point(s, ctx.model.dim)?,
        None => DVector::zeros(ctx.model.dim),
    };
    let outcome = run_suite(&ctx.model, &x0, k0, horizon, &cfg).map_err(CliError::from)?;
    let out = ctx.out_dir.join("verdicts.jsonl");
    write_verdicts_jsonl(&out, &outcome.reports, &ctx.meta()).map_err(CliError::from)?;
    for r in &outcome.reports {
        println!(
            "{:<24} {:<34} statistic {:>12.6e}  threshold {:>12.6e}  {}",
            r.check,
            r.anchor,
            r.statistic,
            r.threshold,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(note) = &outcome.multiplicity_note {
        eprintln!("note: {note}");
    }
    println!("wrote {}", out.display());
    let failures = outcome.reports.iter().filter(|r| !r.pass).count();
    if failures > 0 {
        return Err(CliError::CheckFailures(failures));
    }
    Ok(())
}

fn cmd_couple(cli: &Cli, run_cfg: &RunConfig, args: CoupleArgs) -> Result<(), CliError> {
    let args: CoupleArgs = merge_args(&args, &run_cfg.couple);
    let ctx = load_context(cli, run_cfg, serde_json::to_value(&args)?)?;
    let n = args.n.unwrap_or(1000);
    if n == 0 {
        return Err(CliError::Config("n_paths must be >= 1".into()));
    }
    let t = args.t.unwrap_or(1.0);
    let h = args.h.unwrap_or(1e-3);
    let k = args.k.unwrap_or(0);
    let kind = args.kind.unwrap_or(Kind::Synchronous);
    let x0 = match &args.x0 {
        Some(s) => parse_point(s, ctx.model.dim)?,
        None => DVector::from_element(ctx.model.dim, 0.5),
    };
    let z0 = match &args.z0 {
        Some(s) => parse_point(s, ctx.model.dim)?,
        None => DVector::zeros(ctx.model.dim),
    };
    let n_grid = args.grid.unwrap_or(8);
    let t_grid: Vec<f64> = (1..=n_grid).map(|i| t * i as f64 / n_grid as f64).collect();
    let r0 = (&x0 - &z0).norm();

    let curve = coupling::empirical_mean_distance(
        &ctx.model,
        k,
        &x0,
        &z0,
        &t_grid,
        n,
        match kind {
            Kind::Synchronous => CouplingKind::Synchronous,
            Kind::Reflection => CouplingKind::Reflection,
        },
        h,
        ctx.seed,
    )
    .map_err(CliError::from)?;
    let rows: Vec<(f64, rsjd::MCEstimate, f64)> = t_grid
        .iter()
        .zip(curve)
        .map(|(&tg, est)| {
            let bound = coupling::wasserstein_bound(&ctx.model.rho, ctx.model.lip_const, r0, tg);
            (tg, est, bound)
        })
        .collect();
    let out = ctx.out_dir.join("coupling.csv");
    atomic_write(&out, coupling_report_csv(&rows, n, &ctx.meta()).as_bytes())
        .map_err(CliError::from)?;
    println!("wrote {}", out.display());

    if ctx.model.ellipticity > 0.0 && ctx.model.reflection_modulus.is_some() {
        let params = coupling::contraction_params(&ctx.model, k).map_err(CliError::from)?;
        let tail = coupling::empirical_coupling_tail(
            &ctx.model,
            k,
            &x0,
            &z0,
            &t_grid,
            n,
            1e-6 * r0,
            h,
            ctx.seed + 1,
        )
        .map_err(CliError::from)?;
        let rows: Vec<(f64, rsjd::MCEstimate, f64)> = t_grid
            .iter()
            .zip(tail)
            .map(|(&tg, est)| (tg, est, coupling::coupling_tail_bound(&params, r0, tg)))
            .collect();
        let out = ctx.out_dir.join("coupling_tail.csv");
        atomic_write(&out, tail_report_csv(&rows, &ctx.meta()).as_bytes())
            .map_err(CliError::from)?;
        println!("wrote {}", out.display());
        let sens = coupling::glue_tol_sensitivity(
            &ctx.model,
            k,
            &x0,
            &z0,
            &t_grid,
            (n / 4).max(100),
            1e-6 * r0,
            h,
            ctx.seed + 2,
        )
        .map_err(CliError::from)?;
        println!("glue_tol sensitivity (tol vs 10x tol): max |dP(T>t)| = {sens:.3e}");
    }
    Ok(())
}

fn cmd_resolvent(cli: &Cli, run_cfg: &RunConfig, args: ResolventArgs) -> Result<(), CliError> {
    let args: ResolventArgs = merge_args(&args, &run_cfg.resolvent);
    let ctx = load_context(cli, run_cfg, serde_json::to_value(&args)?)?;
    let n = args.n.unwrap_or(2000);
    if n == 0 {
        return Err(CliError::Config("n_paths must be >= 1".into()));
    }
    let h = args.h.unwrap_or(1e-3);
    let k0 = args.k0.unwrap_or(0);
    let x0 = match &args.x0 {
        Some(s) => parse_point(s, ctx.model.dim)?,
        None => DVector::zeros(ctx.model.dim),
    };
    let alpha = args.alpha.unwrap_or_else(|| alpha_one(&ctx.model).max(1.0));
    let methods: Vec<String> = args
        .methods
        .clone()
        .unwrap_or_else(|| "direct,pieced".into())
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    // bounded test function shared by all methods
    let f = |x: &State, k: usize| (-x.norm_squared() / 8.0).exp() / (1.0 + k as f64);

    let mut rows = Vec::new();
    for method in &methods {
        let started = std::time::Instant::now();
        match method.as_str() {
            "direct" | "pieced" => {
                let query = ResolventQuery::new(
                    Box::new(f),
                    1.0,
                    alpha,
                    x0.clone(),
                    k0,
                    n,
                    h,
                    ctx.seed,
                    None,
                    None,
                )
                .map_err(CliError::from)?;
                let sim = if method == "direct" {
                    SimulatorKind::Direct
                } else {
                    SimulatorKind::PiecedWeighted
                };
                let r = resolvent_mc(&ctx.model, &query, sim).map_err(CliError::from)?;
                rows.push(ResolventRow {
                    alpha,
                    method: method.clone(),
                    estimate: r.est.value,
                    se: r.est.se,
                    residual_bound: r.tail_bound,
                    runtime_ms: started.elapsed().as_millis() as u64,
                });
            }
            "series" => {
                let m_max = args.m_max.unwrap_or(8);
                let r = resolvent_series(
                    &ctx.model,
                    &f,
                    1.0,
                    alpha,
                    &x0,
                    k0,
                    m_max,
                    &MeshConfig::default(),
                    (n / 20).max(50),
                    h,
                    ctx.seed,
                )
                .map_err(CliError::from)?;
                rows.push(ResolventRow {
                    alpha,
                    method: method.clone(),
                    estimate: r.estimate,
                    se: r.estimate_se,
                    residual_bound: r.residual_bound,
                    runtime_ms: started.elapsed().as_millis() as u64,
                });
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown resolvent method '{other}' (direct, pieced, series)"
                )))
            }
        }
    }
    let out = ctx.out_dir.join("resolvent.csv");
    atomic_write(&out, resolvent_report_csv(&rows, &ctx.meta()).as_bytes())
        .map_err(CliError::from)?;
    for r in &rows {
        println!(
            "alpha={} method={:<8} estimate={:.6} +- {:.6} (residual bound {:.3e})",
            r.alpha, r.method, r.estimate, r.se, r.residual_bound
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(verdicts: &Path) -> Result<(), CliError> {
    let lines = read_verdicts_jsonl(verdicts)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", verdicts.display())))?;
    if lines.is_empty() {
        return Err(CliError::Config(format!(
            "no checks in {}",
            verdicts.display()
        )));
    }
    println!(
        "{:<26} {:<36} {:>13} {:>13} {:>6}",
        "check", "anchor", "statistic", "threshold", "pass"
    );
    let mut failures = 0usize;
    for l in &lines {
        let r = &l.report;
        if !r.pass {
            failures += 1;
        }
        println!(
            "{:<26} {:<36} {:>13.6e} {:>13.6e} {:>6}",
            r.check,
            r.anchor,
            r.statistic,
            r.threshold,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, {} failed (config {} version {})",
        lines.len(),
        failures,
        lines[0].config_hash,
        lines[0].version
    );
    if failures > 0 {
        return Err(CliError::CheckFailures(failures));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_parsing() {
        assert_eq!(parse_point("1.5, -2", 2).unwrap(), DVector::from_vec(vec![1.5, -2.0]));
        assert!(parse_point("1.5", 2).is_err());
        assert!(parse_point("a,b", 2).is_err());
    }

    #[test]
    fn args_merge_prefers_flags() {
        let flag = SimulateArgs {
            n: Some(5),
            ..Default::default()
        };
        let file = Some(SimulateArgs {
            n: Some(9),
            t: Some(2.0),
            ..Default::default()
        });
        let merged: SimulateArgs = merge_args(&flag, &file);
        assert_eq!(merged.n, Some(5));
        assert_eq!(merged.t, Some(2.0));
    }
}
