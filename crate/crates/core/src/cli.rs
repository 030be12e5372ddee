//! Command-line front end. Exit codes: 0 success, 1 domain error (JSON
//! object on stderr), 2 configuration or usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{BoxSpec, Config};
use crate::error::{Error, Result};
use crate::estfun::{check_lemma_conseq, verify_martingale_order, LemmaReport, OrderReport};
use crate::inference::{self, Assumption31Report, ConditionReport, FisherInformation};
use crate::io;
use crate::mc::{self, McSummary, NormalityStats, Rung};
use crate::model::{JumpDiffusionModel, ParamBox};
use crate::parallel;
use crate::simulate::{simulate_path_from, SamplingScheme};
use crate::solve::{multi_start_solve, BlockVariance, Starts};
use crate::stats;

#[derive(Debug, Parser)]
#[command(name = "jumpest", version, about = "Simulate and estimate ergodic jump-diffusions")]
pub struct Cli {
    /// Worker threads; falls back to JUMPEST_WORKERS, then 1.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one observed path and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the jump log as CSV.
        #[arg(long)]
        jumps: Option<PathBuf>,
    },
    /// Estimate θ from an observed path.
    Estimate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        ef: Option<String>,
        /// Parameter box as `l1,l2,...;u1,u2,...` or a JSON object.
        #[arg(long = "theta0-box")]
        theta0_box: Option<String>,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Martingale-order check and local identities of an estimating function.
    CheckEf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identifiability, efficiency and rate conditions.
    CheckConditions {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of 31,41,42,43.
        #[arg(long)]
        conditions: Option<String>,
        /// Comma-separated θ; defaults to model.theta0.
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fisher information and its inverse.
    Fisher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo experiment; writes summary.json and raw.csv.
    Mc {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ParameterOutsideBox(_) => "parameter_outside_box",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::NanCoefficient(_) => "nan_coefficient",
        Error::QuadratureFailure { .. } => "quadrature_failure",
        Error::DomainExit { .. } => "domain_exit",
        Error::InsufficientSmoothness(_) => "insufficient_smoothness",
        Error::SingularJacobian { .. } => "singular_jacobian",
        Error::NoRootFound { .. } => "no_root_found",
        Error::NotPositiveSemidefinite(_) => "not_positive_semidefinite",
        Error::ZeroDenominator(_) => "zero_denominator",
        Error::MissingCoordSplit => "missing_coord_split",
        Error::EmptyGrid => "empty_grid",
        Error::NanEstimatingFunction { .. } => "nan_estimating_function",
        Error::InsufficientReplications { .. } => "insufficient_replications",
        Error::Invalid(_) => "invalid",
        Error::Config(_) => "config",
        Error::Data { .. } => "data",
        Error::NonuniformGrid { .. } => "nonuniform_grid",
        Error::EmptyData => "empty_data",
        Error::Io(_) => "io",
    }
}

/// Entry point used by the binary.
pub fn main_entry() -> i32 {
    run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

/// Parses `args` and runs the subcommand, returning the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let body = serde_json::json!({ "error": ErrorBody { kind: error_kind(&e), message: e.to_string() } });
            let _ = writeln!(stderr, "{body}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn emit(text: &[u8], out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => stdout.write_all(text).map_err(Error::from),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("{what}: {t:?} is not a number"))))
        .collect()
}

fn parse_box(s: &str) -> Result<BoxSpec> {
    let s = s.trim();
    if s.starts_with('{') {
        return serde_json::from_str(s).map_err(|e| Error::Config(format!("--theta0-box: {e}")));
    }
    let (lo, hi) = s.split_once(';').ok_or_else(|| Error::Config("--theta0-box must look like l1,l2;u1,u2".into()))?;
    Ok(BoxSpec { lower: parse_list(lo, "--theta0-box")?, upper: parse_list(hi, "--theta0-box")? })
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let workers = parallel::resolve_workers(cli.workers)?;
    match cli.command {
        Command::Simulate { config, out, jumps } => {
            let cfg = Config::load(&config)?;
            let (csv, log) = parallel::with_workers(workers, || simulate(&cfg))?;
            if let Some(p) = jumps {
                emit(&log, Some(&p), stdout)?;
            }
            emit(&csv, out.as_deref(), stdout)
        }
        Command::Estimate { config, data, model, ef, theta0_box, starts, tol, out } => {
            let mut cfg = match (&config, &model) {
                (Some(p), _) => Config::load(p)?,
                (None, Some(m)) => Config::for_model(m),
                (None, None) => return Err(Error::Config("estimate needs --config or --model".into())),
            };
            if let Some(m) = model {
                if m != cfg.model.name {
                    cfg.model = crate::config::ModelSection::named(&m);
                }
            }
            if let Some(e) = ef {
                cfg.ef = Some(crate::config::EfSection::named(&e));
            }
            if let Some(b) = theta0_box {
                cfg.model.param_box = Some(parse_box(&b)?);
            }
            if let Some(s) = starts {
                cfg.solver.starts = s;
                cfg.estimate.starts = Some(Starts::Count(s));
            }
            if let Some(t) = tol {
                cfg.solver.tol = t;
            }
            cfg.validate()?;
            let report = parallel::with_workers(workers, || estimate(&cfg, &data))?;
            emit(io::to_json(&report)?.as_bytes(), out.as_deref(), stdout)
        }
        Command::CheckEf { config, out } => {
            let cfg = Config::load(&config)?;
            let report = parallel::with_workers(workers, || check_ef(&cfg, workers))?;
            emit(io::to_json(&report)?.as_bytes(), out.as_deref(), stdout)
        }
        Command::CheckConditions { config, conditions, theta, out } => {
            let cfg = Config::load(&config)?;
            let report = parallel::with_workers(workers, || check_conditions(&cfg, conditions.as_deref(), theta.as_deref()))?;
            emit(io::to_json(&report)?.as_bytes(), out.as_deref(), stdout)
        }
        Command::Fisher { config, theta, out } => {
            let cfg = Config::load(&config)?;
            let model = cfg.build_model()?;
            let th = theta_arg(&cfg, &model, theta.as_deref())?;
            let report = parallel::with_workers(workers, || inference::fisher_information(&model, &th, &cfg.ergodic))?;
            emit(io::to_json(&FisherOutput { model: model.name.clone(), theta: th, fisher: report })?.as_bytes(), out.as_deref(), stdout)
        }
        Command::Mc { spec, out } => {
            let cfg = Config::load(&spec)?;
            let spec = mc::ExperimentSpec::new(cfg)?;
            let output = mc::run_experiment(&spec, workers)?;
            let normality = (0..spec.mc().ladder.len())
                .map(|r| mc::normality_diagnostics(&mc::studentized_rows(&output.records, r)).ok())
                .collect();
            std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
            let report = McReport { summary: output.summary, normality };
            std::fs::write(out.join("summary.json"), io::to_json(&report)?)?;
            let mut raw = Vec::new();
            io::write_raw_csv(&output.records, report.summary.theta0.len(), &mut raw)?;
            std::fs::write(out.join("raw.csv"), raw)?;
            Ok(())
        }
    }
}

fn simulate(cfg: &Config) -> Result<(Vec<u8>, Vec<u8>)> {
    let model = cfg.build_model()?;
    let theta0 = cfg.model.theta0()?;
    let n = cfg.sim.n.ok_or_else(|| Error::Config("sim.n is required".into()))?;
    let delta = cfg.sim.delta.ok_or_else(|| Error::Config("sim.delta is required".into()))?;
    let scheme = SamplingScheme::new(n, delta).map_err(|e| Error::Config(e.to_string()))?;
    let path = simulate_path_from(&model, &theta0, scheme, cfg.sim.start(), cfg.sim.substeps, cfg.sim.seed)?;
    let mut csv = Vec::new();
    io::write_path_csv(&path, &mut csv)?;
    let mut log = Vec::new();
    io::write_jumps_csv(path.jump_log.as_deref().unwrap_or(&[]), &mut log)?;
    Ok((csv, log))
}

#[derive(Serialize)]
struct EstimateDiagnostics {
    converged: bool,
    residual_norm: f64,
    iterations: usize,
    start_points_tried: usize,
    converged_starts: usize,
    distinct_roots: usize,
    variance_error: Option<String>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct EstimateOutput {
    model: String,
    ef: String,
    n: usize,
    delta: f64,
    theta_hat: Vec<f64>,
    std_errors: Option<Vec<f64>>,
    vhat: Option<Vec<Vec<f64>>>,
    vhat_sqrt: Option<Vec<Vec<f64>>>,
    vhat_block: Option<BlockVariance>,
    diagnostics: EstimateDiagnostics,
}

fn estimate(cfg: &Config, data: &Path) -> Result<EstimateOutput> {
    let model = cfg.build_model()?;
    let ef = cfg.build_ef(&model)?;
    let path = io::read_path_file(data, &model.state_space)?;
    let search = cfg.estimate.search_box.as_ref().map(|b| b.to_box(model.d1())).transpose()?;
    let res = multi_start_solve(ef.as_ref(), &path, &cfg.starts(), &model.param_box, search.as_ref(), &cfg.solver)?;
    let rung = Rung { n: path.n(), delta: path.delta() };
    let warnings = mc::scaling_notes(ef.as_ref(), &[rung]).concat();
    Ok(EstimateOutput {
        model: model.name.clone(),
        ef: ef.name().to_string(),
        n: path.n(),
        delta: path.delta(),
        theta_hat: res.theta_hat.to_vec(),
        std_errors: res.std_errors,
        vhat: res.vhat,
        vhat_sqrt: res.vhat_sqrt,
        vhat_block: res.vhat_block,
        diagnostics: EstimateDiagnostics {
            converged: res.converged,
            residual_norm: res.residual_norm,
            iterations: res.iterations,
            start_points_tried: res.start_points_tried,
            converged_starts: res.converged_starts,
            distinct_roots: res.distinct_roots,
            variance_error: res.variance_error,
            warnings,
        },
    })
}

/// `count` Halton points inside the box shrunk by a quarter on each side.
fn halton_grid(pbox: &ParamBox, count: usize) -> Vec<Vec<f64>> {
    let k = pbox.shrink(0.25);
    (1..=count)
        .map(|i| stats::halton(i, k.dim()).iter().enumerate().map(|(j, u)| k.lower[j] + u * (k.upper[j] - k.lower[j])).collect())
        .collect()
}

#[derive(Serialize)]
struct CheckEfOutput {
    model: String,
    ef: String,
    theta: Vec<f64>,
    x: f64,
    order: OrderReport,
    lemma: LemmaReport,
}

fn check_ef(cfg: &Config, workers: usize) -> Result<CheckEfOutput> {
    let model = cfg.build_model()?;
    let ef = cfg.build_ef(&model)?;
    let theta = cfg.model.theta0()?;
    let xs = cfg.check.x_grid.clone().unwrap_or_else(|| (0..20).map(|i| -2.0 + 4.0 * i as f64 / 19.0).collect());
    let thetas = cfg.check.theta_grid.clone().unwrap_or_else(|| halton_grid(&model.param_box, 8));
    let points: Vec<(f64, Vec<f64>)> = xs.iter().flat_map(|&x| thetas.iter().map(move |t| (x, t.clone()))).collect();
    let lemma = check_lemma_conseq(ef.as_ref(), &model, &points)?;
    let order = verify_martingale_order(ef.as_ref(), &model, &theta, cfg.check.x, &cfg.check.order, workers)?;
    Ok(CheckEfOutput { model: model.name.clone(), ef: ef.name().to_string(), theta, x: cfg.check.x, order, lemma })
}

fn theta_arg(cfg: &Config, model: &JumpDiffusionModel, theta: Option<&str>) -> Result<Vec<f64>> {
    let th = match theta {
        Some(s) => parse_list(s, "--theta")?,
        None => cfg.model.theta0()?,
    };
    if th.len() != model.dim() || !model.param_box.contains(&th) {
        return Err(Error::Config(format!("θ = {th:?} is not inside the parameter box")));
    }
    Ok(th)
}

#[derive(Serialize)]
#[serde(untagged)]
enum ConditionOutcome {
    Assumption(Box<Assumption31Report>),
    Residuals(Box<ConditionReport>),
    Skipped { skipped: String },
}

#[derive(Serialize)]
struct ConditionsOutput {
    model: String,
    ef: String,
    theta: Vec<f64>,
    conditions: BTreeMap<String, ConditionOutcome>,
}

fn check_conditions(cfg: &Config, which: Option<&str>, theta: Option<&str>) -> Result<ConditionsOutput> {
    let model = cfg.build_model()?;
    let ef = cfg.build_ef(&model)?;
    let th = theta_arg(cfg, &model, theta)?;
    let explicit = which.is_some();
    let list: Vec<String> = match which {
        Some(s) => s.split(',').map(|t| t.trim().to_string()).collect(),
        None => vec!["31".into(), "41".into(), "42".into(), "43".into()],
    };
    let c = &cfg.conditions;
    let theta_grid = c.theta_grid.clone().unwrap_or_else(|| vec![th.clone()]);
    let mut out = BTreeMap::new();
    for name in list {
        let res = match name.as_str() {
            "31" => {
                let grid = c.theta_grid.clone().unwrap_or_else(|| halton_grid(&model.param_box, 8));
                inference::check_assumption_31(ef.as_ref(), &model, &grid, &th, &cfg.ergodic).map(|r| ConditionOutcome::Assumption(Box::new(r)))
            }
            "41" => {
                let alpha = c.alpha_grid.clone().unwrap_or_else(|| vec![th.clone()]);
                inference::check_condition_41(ef.as_ref(), &model, &alpha, &c.x_grid, &c.w_samples, c.tol).map(|r| ConditionOutcome::Residuals(Box::new(r)))
            }
            "42" => {
                let alpha = c.alpha_grid.clone().unwrap_or_else(|| theta_grid.clone());
                inference::check_condition_42(ef.as_ref(), &model, &theta_grid, &alpha, &c.x_grid, &c.reach, c.tol)
                    .map(|r| ConditionOutcome::Residuals(Box::new(r)))
            }
            "43" => inference::check_condition_43(ef.as_ref(), &model, &theta_grid, &c.x_grid, &c.w_samples, c.tol)
                .map(|r| ConditionOutcome::Residuals(Box::new(r))),
            other => return Err(Error::Config(format!("unknown condition {other:?}; expected 31, 41, 42 or 43"))),
        };
        let outcome = match res {
            Ok(o) => o,
            Err(e) if !explicit => ConditionOutcome::Skipped { skipped: e.to_string() },
            Err(e) => return Err(e),
        };
        out.insert(name, outcome);
    }
    Ok(ConditionsOutput { model: model.name.clone(), ef: ef.name().to_string(), theta: th, conditions: out })
}

#[derive(Serialize)]
struct FisherOutput {
    model: String,
    theta: Vec<f64>,
    fisher: FisherInformation,
}

#[derive(Serialize)]
struct McReport {
    summary: McSummary,
    /// Per rung; absent below the replication minimum.
    normality: Vec<Option<Vec<NormalityStats>>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = run_args(&["jumpest", "frobnicate"]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"));
    }

    #[test]
    fn box_parsing() {
        assert_eq!(parse_box("0.1,0.2;3,4").unwrap(), BoxSpec { lower: vec![0.1, 0.2], upper: vec![3.0, 4.0] });
        assert!(parse_box("0.1,0.2").unwrap_err().is_config());
    }
}
