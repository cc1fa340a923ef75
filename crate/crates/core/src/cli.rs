//! `amq` command-line front end.
//!
//! Exit codes: 0 success, 1 check failed, 2 config or artifact error,
//! 3 training diverged, 4 state-count guard tripped.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, ValidationError};
use crate::eval::{evaluate_weights, weight_interpretation_report, write_consistency_csv, MetricsReport, WeightReport};
use crate::features::{audit_gradient_dominance, audit_subexponential};
use crate::learner::{convergence_curve, train, LearnError, TrainTrajectory, TrajectoryRecord};
use crate::lyapunov::scan_nu;
use crate::oracle::{
    build_truncated_chain, geometric_iteration_bound, projected_fixed_point, solve_equilibrium,
    stationary_distribution, write_equilibrium_csv, write_stationary_csv, Equilibrium, FixedPointOptions, OracleError,
    DEFAULT_ITERATION_CAP,
};
use crate::policy::c0_bound;
use crate::space::TruncatedSpace;

/// Largest truncated state space the oracle will enumerate.
pub const STATE_GUARD: usize = 1_000_000;

#[derive(Debug, Parser)]
#[command(name = "amq", version, about = "Approximate minimax-Q learning for a queueing security game")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Suppress the human-readable summary on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a config against every model constraint.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run approximate minimax-Q training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify the drift conditions of the behavior pair over the nu grid.
    DriftCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        no_validate: bool,
    },
    /// Audit the configured feature basis on the Lyapunov box.
    AuditBasis {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the truncated game exactly and compute the projected fixed point.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained weights against oracle artifacts.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect plot-ready CSVs from a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Unix seconds recorded in manifests.
    pub timestamp: u64,
}

impl RunOptions {
    /// `SOURCE_DATE_EPOCH` when set, the system clock otherwise.
    pub fn from_env() -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()).unwrap_or_else(|| {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
        });
        RunOptions { timestamp }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid config ({field}): {source}", field = .0.field(), source = .0)]
    Invalid(ValidationError),
    #[error("{0}")]
    Artifact(String),
    #[error("{0}")]
    Check(String),
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("{0}")]
    Guard(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) | CliError::Invalid(_) | CliError::Artifact(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Guard(_) => 4,
        }
    }
}

fn artifact(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Artifact(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: Option<String>,
    files: &'a [String],
    timestamp: u64,
    versions: Versions,
}

#[derive(Serialize)]
struct Versions {
    #[serde(rename = "amq-core")]
    amq_core: &'static str,
}

/// Tracks every file a command writes so the manifest can list them.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| artifact(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, data).map_err(|e| artifact(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.bytes(name, to_json(value).as_bytes())
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| artifact(&self.dir.join(name), e))?;
        self.bytes(name, &buf)
    }

    fn finish(mut self, command: &str, config: Option<&[u8]>, opts: &RunOptions) -> Result<(), CliError> {
        let name = format!("{command}.manifest.json");
        self.files.push(name.clone());
        let manifest = Manifest {
            command,
            config_sha256: config.map(sha256_hex),
            files: &self.files,
            timestamp: opts.timestamp,
            versions: Versions { amq_core: env!("CARGO_PKG_VERSION") },
        };
        let path = self.dir.join(&name);
        fs::write(&path, to_json(&manifest)).map_err(|e| artifact(&path, e))
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_valid(path: &Path) -> Result<(RunConfig, Vec<u8>), CliError> {
    let (cfg, bytes) = RunConfig::load(path)?;
    cfg.validate().map_err(CliError::Invalid)?;
    Ok((cfg, bytes))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| artifact(path, e))?;
    serde_json::from_str(&text).map_err(|e| artifact(path, e))
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_args<I, T>(args: I, opts: &RunOptions) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, opts),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, opts: &RunOptions) -> i32 {
    let quiet = cli.quiet;
    match dispatch(cli.command, quiet, opts) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, quiet: bool, opts: &RunOptions) -> Result<(), CliError> {
    let say = |msg: String| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match command {
        Command::Validate { config, out } => cmd_validate(&config, out.as_deref(), say, opts),
        Command::Train { config, out } => cmd_train(&config, &out, say, opts),
        Command::DriftCheck { config, out, no_validate } => {
            cmd_drift_check(&config, out.as_deref(), no_validate, say, opts)
        }
        Command::AuditBasis { config, out } => cmd_audit_basis(&config, out.as_deref(), say, opts),
        Command::Oracle { config, out } => cmd_oracle(&config, &out, say, opts),
        Command::Eval { config, weights, oracle, out } => cmd_eval(&config, &weights, &oracle, &out, say, opts),
        Command::Report { out } => cmd_report(&out, say, opts),
    }
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    field: Option<&'static str>,
    message: Option<String>,
    c0_bound: f64,
    basis_dim: usize,
    oracle_states: Option<usize>,
}

fn cmd_validate(path: &Path, out: Option<&Path>, say: impl Fn(String), opts: &RunOptions) -> Result<(), CliError> {
    let (cfg, bytes) = RunConfig::load(path)?;
    let result = cfg.validate();
    let report = ValidationReport {
        valid: result.is_ok(),
        field: result.as_ref().err().map(|e| e.field()),
        message: result.as_ref().err().map(|e| e.to_string()),
        c0_bound: c0_bound(&cfg.game),
        basis_dim: cfg.basis().dim(),
        oracle_states: TruncatedSpace::checked_len(cfg.oracle.cap, cfg.game.servers()),
    };
    match out {
        Some(dir) => {
            let mut o = Outputs::new(dir)?;
            o.json("validation.json", &report)?;
            o.finish("validate", Some(&bytes), opts)?;
        }
        None => print!("{}", to_json(&report)),
    }
    match result {
        Ok(()) => {
            say(format!("{}: valid", path.display()));
            Ok(())
        }
        Err(e) => Err(CliError::Check(format!("invalid config ({}): {e}", e.field()))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub basis: String,
    pub epsilon_scale: f64,
    pub servers: usize,
    pub seed: u64,
    pub epochs: u64,
    pub eta0: f64,
    pub tau: f64,
    pub diverged: bool,
    pub divergence_step: Option<u64>,
    pub final_weights: Option<Vec<f64>>,
}

pub fn write_trajectory_csv(traj: &TrainTrajectory, servers: usize, out: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = traj.final_weights.len() / servers.max(1);
    let mut header = vec!["step".to_string(), "td_error".into(), "state_l1".into()];
    for i in 1..=servers {
        for j in 1..=d {
            header.push(format!("w_{i}_{j}"));
        }
    }
    w.write_record(&header)?;
    for r in &traj.records {
        let mut rec = vec![r.step.to_string(), format!("{:.16e}", r.td_error), r.state_l1.to_string()];
        rec.extend(r.weights.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<TrainTrajectory, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| artifact(path, e))?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| artifact(path, e))?;
        let num = |k: usize| row.get(k).ok_or_else(|| artifact(path, "short row"));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| artifact(path, e));
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| artifact(path, e));
        let weights = (3..row.len()).map(|k| parse_f(&row[k])).collect::<Result<Vec<_>, _>>()?;
        records.push(TrajectoryRecord {
            step: parse_u(num(0)?)?,
            td_error: parse_f(num(1)?)?,
            state_l1: parse_u(num(2)?)?,
            weights,
        });
    }
    let last = records.last().ok_or_else(|| artifact(path, "no rows"))?;
    let (final_weights, steps) = (last.weights.clone(), last.step);
    Ok(TrainTrajectory { records, final_weights, steps })
}

fn cmd_train(path: &Path, out: &Path, say: impl Fn(String), opts: &RunOptions) -> Result<(), CliError> {
    let (cfg, bytes) = load_valid(path)?;
    let basis = cfg.basis();
    let mut summary = TrainSummary {
        basis: cfg.basis.kind.clone(),
        epsilon_scale: cfg.basis.epsilon_scale,
        servers: cfg.game.servers(),
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        eta0: cfg.train.eta0,
        tau: cfg.train.tau,
        diverged: false,
        divergence_step: None,
        final_weights: None,
    };
    let mut o = Outputs::new(out)?;
    let result = train(&cfg.game, &basis, &cfg.behavior_pair(), &cfg.schedule(), &cfg.train_config());
    match result {
        Ok(traj) => {
            o.csv("trajectory.csv", |buf| write_trajectory_csv(&traj, cfg.game.servers(), buf))?;
            summary.final_weights = Some(traj.final_weights.clone());
            o.json("train_summary.json", &summary)?;
            o.finish("train", Some(&bytes), opts)?;
            say(format!("trained {} steps, {} weights written to {}", traj.steps, basis.dim(), out.display()));
            Ok(())
        }
        Err(LearnError::Diverged { step }) => {
            summary.diverged = true;
            summary.divergence_step = Some(step);
            o.json("train_summary.json", &summary)?;
            o.finish("train", Some(&bytes), opts)?;
            Err(CliError::Diverged { step })
        }
        Err(e) => Err(CliError::Artifact(e.to_string())),
    }
}

fn cmd_drift_check(
    path: &Path,
    out: Option<&Path>,
    no_validate: bool,
    say: impl Fn(String),
    opts: &RunOptions,
) -> Result<(), CliError> {
    let (cfg, bytes) = if no_validate { RunConfig::load(path)? } else { load_valid(path)? };
    let l = &cfg.lyapunov;
    let scan = scan_nu(&l.nu_grid, &cfg.behavior_pair(), &cfg.game, l.box_cap, l.shell);
    match out {
        Some(dir) => {
            let mut o = Outputs::new(dir)?;
            o.json("drift_report.json", &scan)?;
            o.finish("drift-check", Some(&bytes), opts)?;
        }
        None => print!("{}", to_json(&scan)),
    }
    for row in &scan.table {
        say(format!(
            "nu {:<6} V: c {:+.4e} d {:.4e}  W: c {:+.4e} d {:.4e}{}",
            row.nu,
            row.v.c,
            row.v.d,
            row.w.c,
            row.w.d,
            if row.certified() { "  certified" } else { "" }
        ));
    }
    match scan.best_nu {
        Some(nu) => {
            say(format!("best nu {nu}"));
            Ok(())
        }
        None => Err(CliError::Check("no nu in the grid certifies both V and W".into())),
    }
}

#[derive(Serialize)]
struct BasisAuditReport {
    basis: String,
    epsilon_scale: f64,
    subexponential: crate::features::SubexpAudit,
    gradient: crate::features::GradientAudit,
}

fn cmd_audit_basis(path: &Path, out: Option<&Path>, say: impl Fn(String), opts: &RunOptions) -> Result<(), CliError> {
    let (cfg, bytes) = load_valid(path)?;
    let basis = cfg.basis();
    let cap = cfg.lyapunov.box_cap;
    let report = BasisAuditReport {
        basis: cfg.basis.kind.clone(),
        epsilon_scale: cfg.basis.epsilon_scale,
        subexponential: audit_subexponential(&basis, cap),
        gradient: audit_gradient_dominance(&basis, cap),
    };
    match out {
        Some(dir) => {
            let mut o = Outputs::new(dir)?;
            o.json("basis_audit.json", &report)?;
            o.finish("audit-basis", Some(&bytes), opts)?;
        }
        None => print!("{}", to_json(&report)),
    }
    say(format!(
        "{} subexponential violations on box {cap}; largest admissible epsilon {:?}",
        report.subexponential.violations.len(),
        report.subexponential.max_admissible_epsilon
    ));
    match report.gradient.certified_b {
        Some(b) => {
            say(format!("gradient dominance certified from |x|_2^2 >= {b}"));
            Ok(())
        }
        None => Err(CliError::Check("gradient dominance not certified within the box".into())),
    }
}

#[derive(Serialize)]
struct OracleSummary {
    cap: u32,
    states: usize,
    shapley_iterations: usize,
    shapley_residual: f64,
    geometric_bound: usize,
    stationary_iterations: usize,
    stationary_residual: f64,
    cap_mass: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedPointFile {
    pub basis: String,
    pub epsilon_scale: f64,
    pub weights: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub sigma_rank: usize,
    pub sigma_dim: usize,
    pub sigma_min_eigenvalue: f64,
}

fn oracle_failure(e: OracleError) -> CliError {
    CliError::Check(e.to_string())
}

fn cmd_oracle(path: &Path, out: &Path, say: impl Fn(String), opts: &RunOptions) -> Result<(), CliError> {
    let (cfg, bytes) = load_valid(path)?;
    let m = cfg.game.servers();
    let cap = cfg.oracle.cap;
    match TruncatedSpace::checked_len(cap, m) {
        Some(n) if n <= STATE_GUARD => {}
        _ => {
            return Err(CliError::Guard(format!(
                "(cap + 1)^m = {}^{m} exceeds {STATE_GUARD} states; lower oracle.cap or use a smaller system",
                cap as u64 + 1
            )))
        }
    }
    let space = TruncatedSpace::new(cap, m);
    let chain = build_truncated_chain(&cfg.game, space);
    let eq =
        solve_equilibrium(&chain, cfg.game.gamma, cfg.oracle.tol, DEFAULT_ITERATION_CAP).map_err(oracle_failure)?;
    let pair = cfg.behavior_pair();
    let st = stationary_distribution(&chain, &pair.attacker, &pair.defender, 1e-12, DEFAULT_ITERATION_CAP)
        .map_err(oracle_failure)?;
    let basis = cfg.basis();
    let fp = projected_fixed_point(
        &basis,
        &chain,
        &st.mu,
        &pair.attacker,
        &pair.defender,
        cfg.game.gamma,
        FixedPointOptions { tol: cfg.oracle.tol, ..FixedPointOptions::default() },
    )
    .map_err(oracle_failure)?;

    let mut o = Outputs::new(out)?;
    o.json("equilibrium.json", &eq)?;
    o.csv("equilibrium.csv", |buf| write_equilibrium_csv(&eq, buf))?;
    o.csv("stationary.csv", |buf| write_stationary_csv(&st, buf))?;
    o.json(
        "fixed_point.json",
        &FixedPointFile {
            basis: cfg.basis.kind.clone(),
            epsilon_scale: cfg.basis.epsilon_scale,
            weights: fp.weights,
            residual: fp.residual,
            iterations: fp.iterations,
            sigma_rank: fp.sigma_rank,
            sigma_dim: fp.sigma_dim,
            sigma_min_eigenvalue: fp.sigma_min_eigenvalue,
        },
    )?;
    o.json(
        "oracle_summary.json",
        &OracleSummary {
            cap,
            states: space.len(),
            shapley_iterations: eq.iterations,
            shapley_residual: eq.residual,
            geometric_bound: geometric_iteration_bound(eq.first_step, cfg.game.gamma, cfg.oracle.tol),
            stationary_iterations: st.iterations,
            stationary_residual: st.residual,
            cap_mass: st.cap_mass,
        },
    )?;
    o.finish("oracle", Some(&bytes), opts)?;
    say(format!(
        "{} states solved in {} sweeps; mass above 0.9 cap {:.3e}; Sigma rank {}/{}",
        space.len(),
        eq.iterations,
        st.cap_mass,
        fp.sigma_rank,
        fp.sigma_dim
    ));
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    metrics: &'a MetricsReport,
    weights: &'a WeightReport,
}

fn cmd_eval(
    path: &Path,
    weights_path: &Path,
    oracle_dir: &Path,
    out: &Path,
    say: impl Fn(String),
    opts: &RunOptions,
) -> Result<(), CliError> {
    let (cfg, bytes) = load_valid(path)?;
    let basis = cfg.basis();
    let summary: TrainSummary = read_json(weights_path)?;
    let w = summary.final_weights.ok_or_else(|| artifact(weights_path, "no final weights (training diverged?)"))?;
    if summary.basis != cfg.basis.kind || w.len() != basis.dim() {
        return Err(artifact(
            weights_path,
            format!(
                "{} weights of kind {} do not fit basis {} of dimension {}",
                w.len(),
                summary.basis,
                cfg.basis.kind,
                basis.dim()
            ),
        ));
    }
    let eq: Equilibrium = read_json(&oracle_dir.join("equilibrium.json"))?;
    if eq.space.m != cfg.game.servers() {
        return Err(artifact(oracle_dir, "oracle server count differs from the config"));
    }
    let runs: Vec<(u64, Vec<f64>)> = cfg.eval.seeds.iter().map(|&s| (s, w.clone())).collect();
    let (report, details) = evaluate_weights(&basis, &runs, &eq, &cfg.game, &cfg.eval);
    let interp = weight_interpretation_report(&w, &basis);
    let rows: Vec<_> = details.into_iter().flatten().collect();

    let mut o = Outputs::new(out)?;
    let kind = &cfg.basis.kind;
    o.json(&format!("metrics_{kind}.json"), &EvalOutput { metrics: &report, weights: &interp })?;
    o.csv(&format!("consistency_{kind}.csv"), |buf| write_consistency_csv(&rows, buf))?;
    o.finish("eval", Some(&bytes), opts)?;
    say(format!(
        "{kind}: normalized mean cost {:.4}, policy consistency {:.3}, mean TV {:.4}",
        report.normalized_mean_cost, report.policy_consistency, report.mean_tv_distance
    ));
    Ok(())
}

#[derive(Deserialize)]
struct StoredMetrics {
    metrics: StoredReport,
}

#[derive(Deserialize)]
struct StoredReport {
    basis: String,
    normalized_mean_cost: f64,
    policy_consistency: f64,
    mean_tv_distance: f64,
}

fn cmd_report(out: &Path, say: impl Fn(String), opts: &RunOptions) -> Result<(), CliError> {
    let traj = read_trajectory_csv(&out.join("trajectory.csv"))?;
    let fixed = out.join("fixed_point.json");
    let (w_ref, reference) = match fixed.exists().then(|| read_json::<FixedPointFile>(&fixed)).transpose()? {
        Some(fp) if fp.weights.len() == traj.final_weights.len() => (fp.weights, "oracle projected fixed point"),
        _ => (traj.trailing_average(0.1), "trailing 10% weight average"),
    };
    let curve = convergence_curve(&traj, &w_ref);

    let mut metric_files: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| artifact(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".json"))
        })
        .collect();
    metric_files.sort();
    if metric_files.is_empty() {
        return Err(artifact(out, "no metrics_<basis>.json found; run eval first"));
    }
    let servers = read_json::<TrainSummary>(&out.join("train_summary.json"))?.servers;

    let mut o = Outputs::new(out)?;
    o.csv("convergence.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["step", "normalized_distance"])?;
        for (step, d) in &curve.points {
            w.write_record([step.to_string(), format!("{d:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let mut stored = Vec::new();
    for p in &metric_files {
        stored.push(read_json::<StoredMetrics>(p)?.metrics);
    }
    o.csv("metrics.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["metric", "system", "basis", "value"])?;
        let system = format!("{servers}-server");
        for m in &stored {
            for (name, v) in [
                ("normalized_mean_cost", m.normalized_mean_cost),
                ("policy_consistency", m.policy_consistency),
                ("mean_tv_distance", m.mean_tv_distance),
            ] {
                w.write_record([name, system.as_str(), m.basis.as_str(), &format!("{v:.16e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    o.finish("report", None, opts)?;
    say(format!(
        "convergence measured against the {reference}{}",
        if curve.unnormalized { " (unnormalized)" } else { "" }
    ));
    Ok(())
}
