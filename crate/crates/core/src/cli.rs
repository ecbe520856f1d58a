//! Command layer: `score`, `validate`, `reverse`, `simulate`, `duality`.
//!
//! Every command is a pure function of its config file. Files are assembled in memory and
//! written once; wall-clock timings go to stderr only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{RunConfig, ScoreSource};
use crate::error::{Error, Result};
use crate::malliavin::{
    covering_inner_product, malliavin_covariance, skorokhod_all, SkorokhodMode, SkorokhodOptions,
};
use crate::model::{BuiltinModel, SdeModel};
use crate::oracle::{bump_report, duality_report, BumpTarget, ProbePlan};
use crate::path::{fmt_f64, sample_brownian, simulate_variations, trajectory_csv_header, write_trajectory_rows};
use crate::score::{
    analytic_score_linear, regress_score, reverse_time_sample, skorokhod_sample, AnalyticScore, Exclusion,
    PathOutcome, ScoreProvider, ScoreTable, TableScore, ZeroScore,
};

/// Pathwise identities that hold to roundoff.
pub const COVERING_TOLERANCE: f64 = 1e-10;
pub const EVALUATOR_AGREEMENT: f64 = 1e-12;
pub const INVERSE_DRIFT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "malliavin-score", version, about = "Score estimation for SDEs via Malliavin calculus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate ∇log p_t on a grid of points for every t_eval.
    Score(CommonArgs),
    /// Run the oracle suite; exit status 1 on any failed check.
    Validate(CommonArgs),
    /// Reverse-time sampling from the horizon back to t = 0.
    Reverse(CommonArgs),
    /// Dump X, Y, Y⁻¹, Z along simulated paths.
    Simulate(CommonArgs),
    /// Monte Carlo E[X_T^i δ(u_k)] against δ_ik.
    Duality(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides [output] dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Never changes the output.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Score(_) => "score",
            Command::Validate(_) => "validate",
            Command::Reverse(_) => "reverse",
            Command::Simulate(_) => "simulate",
            Command::Duality(_) => "duality",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Score(a)
            | Command::Validate(a)
            | Command::Reverse(a)
            | Command::Simulate(a)
            | Command::Duality(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ValidationFailed,
}

/// 0 success, 1 validation or runtime failure, 2 configuration error.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::ValidationFailed) => 1,
        Err(Error::Config(_)) => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let args = cli.command.args();
    let cfg = RunConfig::from_file(&args.config)?;
    let out = cfg.output_dir(args.out.as_deref());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    let started = Instant::now();
    let result = pool.install(|| match &cli.command {
        Command::Score(_) => cmd_score(&cfg, &out),
        Command::Validate(_) => cmd_validate(&cfg, &out),
        Command::Reverse(_) => cmd_reverse(&cfg, &out),
        Command::Simulate(_) => cmd_simulate(&cfg, &out),
        Command::Duality(_) => cmd_duality(&cfg, &out),
    });
    eprintln!(
        "{} finished in {:.2} s on {} worker(s)",
        cli.command.name(),
        started.elapsed().as_secs_f64(),
        pool.current_num_threads()
    );
    result
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn summary_header(cfg: &RunConfig, command: &str) -> String {
    format!(
        "malliavin-score {} (command: {command})\n\n[config]\n{}\n[results]\n",
        env!("CARGO_PKG_VERSION"),
        cfg.echo()
    )
}

fn exclusion_counts(outcomes: &[PathOutcome]) -> (usize, usize) {
    outcomes.iter().fold((0, 0), |(b, s), o| match o {
        PathOutcome::Excluded(Exclusion::BlowUp) => (b + 1, s),
        PathOutcome::Excluded(Exclusion::NearSingular) => (b, s + 1),
        PathOutcome::Valid { .. } => (b, s),
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

/// Writes one score table per `t_eval` plus a summary.
pub fn cmd_score(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let x0 = cfg.x0();
    let points = cfg.y_points()?;
    let regression = cfg.regression()?;
    let m = model.state_dim();
    let mut summary = summary_header(cfg, "score");
    for node in cfg.eval_nodes()? {
        let started = Instant::now();
        let sample = skorokhod_sample(&model, &x0, &grid, node, cfg.run.n_paths, cfg.run.seed, cfg.pipeline())?;
        let table = regress_score(&sample, &points, regression)?;
        eprintln!("node {node}: {:.2} s", started.elapsed().as_secs_f64());
        let mut csv = Vec::new();
        table.write_csv(&mut csv)?;
        write_file(out, &format!("score_node{node:05}.csv"), &String::from_utf8_lossy(&csv))?;

        let (blow, singular) = exclusion_counts(&sample.outcomes);
        let flagged = table.entries.iter().filter(|e| e.is_flagged()).count();
        writeln!(
            summary,
            "t = {} (node {node}): valid {} excluded {} (blow-up {blow}, near-singular {singular}); bandwidth [{}]; flagged entries {flagged}",
            fmt_f64(sample.t),
            table.valid_paths,
            table.excluded,
            join(&table.bandwidth),
        )
        .unwrap();
        if singular > 0 {
            writeln!(summary, "  note: near-singular paths are excluded from the conditional average, which may bias it").unwrap();
        }
        if model.is_linear() {
            writeln!(summary, "  y | k | score | stderr | analytic | abs diff").unwrap();
            for (q, y) in table.points.iter().enumerate() {
                let exact = analytic_score_linear(&model, sample.t, &x0, y)?;
                for k in 0..m {
                    let e = table.entry(q, k);
                    writeln!(
                        summary,
                        "  [{}] | {} | {} | {} | {} | {}",
                        join(y),
                        k + 1,
                        fmt_f64(e.score),
                        fmt_f64(e.stderr),
                        fmt_f64(exact[k]),
                        fmt_f64((e.score - exact[k]).abs())
                    )
                    .unwrap();
                }
            }
        }
        if cfg.output.dump_breakdown {
            let mut s = String::new();
            let xs: Vec<String> = (1..=m).map(|j| format!("x_{j}")).collect();
            writeln!(s, "path,status,{},k,ito,a,b,c,total", xs.join(",")).unwrap();
            for (p, o) in sample.outcomes.iter().enumerate() {
                match o {
                    PathOutcome::Valid { x, breakdown } => {
                        for b in breakdown {
                            writeln!(
                                s,
                                "{p},valid,{},{},{},{},{},{},{}",
                                join(x),
                                b.k + 1,
                                fmt_f64(b.ito),
                                fmt_f64(b.a),
                                fmt_f64(b.b),
                                fmt_f64(b.c),
                                fmt_f64(b.total)
                            )
                            .unwrap();
                        }
                    }
                    PathOutcome::Excluded(reason) => {
                        let status = match reason {
                            Exclusion::BlowUp => "blow_up",
                            Exclusion::NearSingular => "near_singular",
                        };
                        let nan = vec!["NaN"; m].join(",");
                        writeln!(s, "{p},{status},{nan},,NaN,NaN,NaN,NaN,NaN").unwrap();
                    }
                }
            }
            write_file(out, &format!("breakdown_node{node:05}.csv"), &s)?;
        }
    }
    if cfg.output.dump_paths {
        let limit = cfg.output.dump_paths_limit.min(cfg.run.n_paths);
        write_file(out, "paths.csv", &trajectories_csv(&model, &x0, cfg, limit)?.0)?;
    }
    write_file(out, "summary.txt", &summary)?;
    Ok(Outcome::Success)
}

/// CSV of the first `count` trajectories plus `(blow-ups, max inverse drift, terminal states)`.
fn trajectories_csv(
    model: &BuiltinModel,
    x0: &[f64],
    cfg: &RunConfig,
    count: usize,
) -> Result<(String, usize, f64, Vec<f64>)> {
    let grid = cfg.grid()?;
    let trajs: Vec<Result<_>> = (0..count as u64)
        .into_par_iter()
        .map(|p| {
            let w = sample_brownian(&grid, model.noise_dim(), cfg.run.seed, p);
            simulate_variations(model, x0, &grid, &w)
        })
        .collect();
    let mut buf = Vec::new();
    std::io::Write::write_all(&mut buf, format!("{}\n", trajectory_csv_header(model.state_dim())).as_bytes())?;
    let (mut blow, mut drift, mut terminal) = (0, 0.0_f64, Vec::new());
    for t in trajs {
        match t {
            Ok(t) => {
                write_trajectory_rows(&mut buf, &t)?;
                drift = drift.max(t.inverse_drift());
                terminal.extend_from_slice(t.terminal());
            }
            Err(Error::BlowUp { .. }) => blow += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((String::from_utf8_lossy(&buf).into_owned(), blow, drift, terminal))
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = cfg.build_model()?;
    let x0 = cfg.x0();
    let (csv, blow, drift, terminal) = trajectories_csv(&model, &x0, cfg, cfg.run.n_paths)?;
    write_file(out, "paths.csv", &csv)?;
    let m = model.state_dim();
    let n = terminal.len() / m;
    let mut summary = summary_header(cfg, "simulate");
    writeln!(summary, "paths {n} blow-ups {blow}").unwrap();
    writeln!(summary, "max |Y Y^-1 - I| {}", fmt_f64(drift)).unwrap();
    for j in 0..m {
        let mean = (0..n).map(|p| terminal[p * m + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|p| (terminal[p * m + j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        writeln!(summary, "X_T[{}] mean {} std {}", j + 1, fmt_f64(mean), fmt_f64(var.sqrt())).unwrap();
    }
    write_file(out, "summary.txt", &summary)?;
    Ok(Outcome::Success)
}

pub fn cmd_duality(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let report = duality_report(&model, &cfg.x0(), &grid, cfg.run.n_paths, cfg.run.seed, cfg.pipeline())?;
    let m = report.m;
    let mut csv = String::from("i,k,mean,stderr,expected\n");
    for i in 0..m {
        for k in 0..m {
            writeln!(
                csv,
                "{},{},{},{},{}",
                i + 1,
                k + 1,
                fmt_f64(report.mean[i * m + k]),
                fmt_f64(report.stderr[i * m + k]),
                if i == k { 1 } else { 0 }
            )
            .unwrap();
        }
    }
    write_file(out, "duality.csv", &csv)?;
    let mut summary = summary_header(cfg, "duality");
    writeln!(summary, "valid {} excluded {}", report.valid, report.excluded).unwrap();
    writeln!(summary, "max |mean - delta_ik| / SE {}", fmt_f64(report.max_z())).unwrap();
    write_file(out, "summary.txt", &summary)?;
    Ok(Outcome::Success)
}

fn load_tables(dir: &Path, cfg: &RunConfig) -> Result<TableScore> {
    let grid = cfg.grid()?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("[reverse] tables_dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    let mut tables = BTreeMap::new();
    for path in entries {
        let file = std::fs::File::open(&path)?;
        let Ok(table) = ScoreTable::read_csv(std::io::BufReader::new(file)) else {
            continue;
        };
        let node = grid
            .node_of(table.t)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        tables.insert(node, table);
    }
    TableScore::new(tables)
}

pub fn cmd_reverse(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let x0 = cfg.x0();
    let provider: Box<dyn ScoreProvider> = match cfg.reverse.score {
        ScoreSource::Analytic => {
            if !model.is_linear() {
                return Err(Error::Config(format!(
                    "[reverse] score = \"analytic\" needs a linear model, not {}",
                    model.id()
                )));
            }
            Box::new(AnalyticScore {
                model: model.clone(),
                x0: x0.clone(),
            })
        }
        ScoreSource::Zero => Box::new(ZeroScore),
        ScoreSource::Tables => Box::new(load_tables(Path::new(&cfg.reverse.tables_dir), cfg)?),
    };
    let samples = reverse_time_sample(&model, provider.as_ref(), &x0, &grid, cfg.reverse.n_samples, cfg.run.seed)?;
    let m = samples.m;
    let mut csv = String::new();
    let starts: Vec<String> = (1..=m).map(|j| format!("start_{j}")).collect();
    let ends: Vec<String> = (1..=m).map(|j| format!("end_{j}")).collect();
    writeln!(csv, "sample,{},{}", starts.join(","), ends.join(",")).unwrap();
    for p in 0..samples.len() {
        writeln!(
            csv,
            "{p},{},{}",
            join(&samples.initial[p * m..(p + 1) * m]),
            join(&samples.terminal[p * m..(p + 1) * m])
        )
        .unwrap();
    }
    write_file(out, "samples.csv", &csv)?;
    let (mean, std) = samples.terminal_stats();
    let mut summary = summary_header(cfg, "reverse");
    writeln!(summary, "samples {}", samples.len()).unwrap();
    for j in 0..m {
        writeln!(
            summary,
            "X_0[{}] mean {} std {} stderr {} x0 {}",
            j + 1,
            fmt_f64(mean[j]),
            fmt_f64(std[j]),
            fmt_f64(std[j] / (samples.len() as f64).sqrt()),
            fmt_f64(x0[j])
        )
        .unwrap();
    }
    write_file(out, "summary.txt", &summary)?;
    Ok(Outcome::Success)
}

/// One line of the validation report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub model: String,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn le(model: &str, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Check {
            model: model.to_string(),
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }
}

/// Covering condition, duality, bump oracles, evaluator agreement and `Y·Y⁻¹` drift.
pub fn validation_checks(cfg: &RunConfig) -> Result<Vec<Check>> {
    let grid = cfg.grid()?;
    let v = &cfg.validate;
    let seed = cfg.run.seed;
    let mut checks = Vec::new();
    for (idx, model) in cfg.validation_models()?.into_iter().enumerate() {
        let m = model.state_dim();
        let x0 = if idx == 0 { cfg.x0() } else { vec![0.0; m] };
        let id = model.id();

        let pathwise: Vec<Result<Option<(f64, f64, f64)>>> = (0..v.pathwise_paths as u64)
            .into_par_iter()
            .map(|p| {
                let w = sample_brownian(&grid, model.noise_dim(), seed, p);
                let traj = match simulate_variations(&model, &x0, &grid, &w) {
                    Ok(t) => t,
                    Err(Error::BlowUp { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let drift = traj.inverse_drift();
                let bundle = match malliavin_covariance(&traj) {
                    Ok(b) => b,
                    Err(Error::NearSingular { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let mut cover = 0.0_f64;
                for i in 0..m {
                    for k in 0..m {
                        let target = if i == k { 1.0 } else { 0.0 };
                        cover = cover.max((covering_inner_product(&traj, &bundle, i, k)? - target).abs());
                    }
                }
                let mut agree = 0.0_f64;
                if traj.state_independent_diffusion() {
                    let opts = |mode| SkorokhodOptions {
                        mode,
                        ..Default::default()
                    };
                    let g = skorokhod_all(&traj, &bundle, opts(SkorokhodMode::General))?;
                    let c = skorokhod_all(&traj, &bundle, opts(SkorokhodMode::StateIndependent))?;
                    for (a, b) in g.iter().zip(&c) {
                        agree = agree.max((a.total - b.total).abs() / a.total.abs().max(1.0));
                    }
                }
                Ok(Some((cover, agree, drift)))
            })
            .collect();
        let (mut cover, mut agree, mut drift) = (0.0_f64, 0.0_f64, 0.0_f64);
        for r in pathwise {
            if let Some((c, a, d)) = r? {
                cover = cover.max(c);
                agree = agree.max(a);
                drift = drift.max(d);
            }
        }
        checks.push(Check::le(id, "covering condition max abs error", cover, COVERING_TOLERANCE));
        if model.state_independent_diffusion() {
            checks.push(Check::le(id, "general vs pruned evaluator max rel diff", agree, EVALUATOR_AGREEMENT));
        }
        checks.push(Check::le(id, "inverse drift max |Y Y^-1 - I|", drift, INVERSE_DRIFT_TOLERANCE));

        let targets: Vec<BumpTarget> = if m == 1 {
            vec![BumpTarget::State, BumpTarget::FirstVar, BumpTarget::InvVar { s: 0 }, BumpTarget::Gamma]
        } else {
            vec![BumpTarget::State]
        };
        let plan = ProbePlan::random(v.probes, v.pathwise_paths as u64, model.noise_dim(), seed);
        for target in targets {
            let report = bump_report(target, &model, &x0, &grid, grid.steps(), &plan, 1e-4, seed)?;
            checks.push(Check::le(
                id,
                format!("bump oracle {} error", report.target),
                report.error(),
                v.bump_tolerance,
            ));
        }

        let mut opts = cfg.pipeline();
        if idx > 0 {
            opts.skorokhod.mode = SkorokhodMode::Auto;
        }
        let dual = duality_report(&model, &x0, &grid, v.duality_paths, seed, opts)?;
        checks.push(Check::le(id, "duality max |mean - delta_ik| / SE", dual.max_z(), v.z_threshold));
    }
    Ok(checks)
}

pub fn cmd_validate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let checks = validation_checks(cfg)?;
    let mut report = String::new();
    for c in &checks {
        writeln!(
            report,
            "{} {} {}: {} (threshold {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.model,
            c.name,
            fmt_f64(c.value),
            fmt_f64(c.threshold)
        )
        .unwrap();
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(report, "{} checks, {failed} failed", checks.len()).unwrap();
    write_file(out, "validation.txt", &report)?;
    let mut summary = summary_header(cfg, "validate");
    summary.push_str(&report);
    write_file(out, "summary.txt", &summary)?;
    Ok(if failed == 0 {
        Outcome::Success
    } else {
        Outcome::ValidationFailed
    })
}
