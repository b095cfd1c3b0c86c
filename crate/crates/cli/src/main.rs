//! `subpop`: worst-case subpopulation performance from the command line.
//!
//! Every command prints one JSON line `{"manifest": ..., "result": ...}` on
//! stdout, except `curve`, which prints CSV on stdout and its manifest on
//! stderr. Exit codes: 0 success, 1 runtime error, 2 invalid input.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use subpop_core::certificate::{certificate_error_bound, certify_fitted, default_alpha_lo, ErrorBound};
use subpop_core::cvar::{empirical_cvar, generalized_worst_case, higher_order_cvar, AlphaMixture};
use subpop_core::data::{read_csv, read_losses, Dataset, EvalConfig, LearnerKind};
use subpop_core::learner::{BoostParams, KnnParams, LearnerParams};
use subpop_core::simulation::{oracle_true_w, simulate_dataset, Problem, SimConfig};
use subpop_core::{bounds, fmt_g17, CertifyMode, CrossFit, Error};

use output::{to_json_line, Run};

#[derive(Parser)]
#[command(name = "subpop", version, about = "Worst-case subpopulation performance estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical worst-case value (tail mean) of a list of values.
    Cvar(CvarArgs),
    /// Cross-fitted, bias-corrected estimate with a confidence interval.
    Estimate(EstimateArgs),
    /// Estimates over a list of alphas as CSV, reusing the fitted models.
    Curve(CurveArgs),
    /// Smallest subpopulation share whose worst-case loss stays below a threshold.
    Certify(CertifyArgs),
    /// Write a synthetic dataset to CSV.
    Simulate(SimulateArgs),
    /// Monte-Carlo value of the true worst case for the synthetic problem.
    Oracle(OracleArgs),
    /// Higher-order tail risk of a list of values.
    Hocvar(HocvarArgs),
    /// Per-fold upper confidence bounds.
    Ucb(UcbArgs),
    /// Weighted mixture of worst-case values over several alphas.
    Mixture(MixtureArgs),
}

#[derive(Args, Serialize)]
#[group(required = true, multiple = false)]
struct ValuesSource {
    /// CSV file with a `loss` column.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    values: Option<Vec<f64>>,
}

#[derive(Args, Serialize)]
struct CvarArgs {
    #[command(flatten)]
    source: ValuesSource,
    #[arg(long)]
    alpha: f64,
}

#[derive(Args, Serialize)]
struct HocvarArgs {
    #[command(flatten)]
    source: ValuesSource,
    #[arg(long)]
    alpha: f64,
    /// Order of the tail norm (k >= 1).
    #[arg(long)]
    k: f64,
}

#[derive(Args, Serialize)]
struct MixtureArgs {
    #[command(flatten)]
    source: ValuesSource,
    /// Comma-separated `alpha:weight` atoms; weights must sum to 1.
    #[arg(long, value_delimiter = ',', value_parser = parse_atom, required = true)]
    atoms: Vec<(f64, f64)>,
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// CSV with `loss`, `z0..z{d-1}` and optionally `mu_hat`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// knn, boosted_stumps or external.
    #[arg(long, default_value = "boosted_stumps", value_parser = parse_learner)]
    learner: LearnerKind,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbours for knn (default ceil(sqrt(n_aux))).
    #[arg(long)]
    k_neighbors: Option<usize>,
    #[arg(long, default_value_t = 200)]
    rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 2)]
    max_depth: usize,
    #[arg(long, default_value_t = 64)]
    n_bins: usize,
}

impl FitArgs {
    fn config(&self, alpha: f64) -> EvalConfig {
        EvalConfig {
            alpha,
            folds: self.folds,
            delta: self.delta,
            learner: self.learner,
            params: LearnerParams {
                knn: KnnParams { k_neighbors: self.k_neighbors },
                boost: BoostParams {
                    rounds: self.rounds,
                    learning_rate: self.learning_rate,
                    max_depth: self.max_depth,
                    n_bins: self.n_bins,
                },
            },
            seed: self.seed,
        }
    }
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Skip the bias correction.
    #[arg(long)]
    plugin_only: bool,
}

#[derive(Args, Serialize)]
struct CurveArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
}

#[derive(Args, Serialize)]
struct CertifyArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Largest acceptable worst-case loss.
    #[arg(long)]
    threshold: f64,
    /// Lower end of the search bracket (default max(10/n, 0.01)).
    #[arg(long)]
    alpha_lo: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// plugin_per_fold or debiased_curve.
    #[arg(long, default_value = "plugin_per_fold", value_parser = parse_mode)]
    mode: CertifyMode,
    /// Estimation-error level U(delta); enables per-fold relative-error radii.
    #[arg(long)]
    u_delta: Option<f64>,
    /// Floor on alpha used in the radius (default alpha_lo).
    #[arg(long)]
    alpha_floor: Option<f64>,
}

#[derive(Args, Serialize)]
struct UcbArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Heuristic constant of the concentration term.
    #[arg(long = "c", default_value_t = 1.0)]
    c: f64,
    /// Loss upper bound (default: largest observed loss).
    #[arg(long = "m")]
    m: Option<f64>,
    /// Distance from the learner class to the true conditional risk.
    #[arg(long, default_value_t = 0.0)]
    misspec_budget: f64,
}

#[derive(Args, Serialize)]
struct ProblemArgs {
    #[arg(long, default_value_t = 5)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.645)]
    clip: f64,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    n: usize,
    /// Independent data draw for the same problem instance.
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct OracleArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 20_000)]
    outer: usize,
    #[arg(long, default_value_t = 5_000)]
    inner: usize,
}

fn parse_learner(s: &str) -> Result<LearnerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<CertifyMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_atom(s: &str) -> Result<(f64, f64), String> {
    let (a, w) = s.split_once(':').ok_or_else(|| format!("expected alpha:weight, got `{s}`"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: `{t}`"));
    Ok((num(a)?, num(w)?))
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_input(path: &Path, run: &mut Run) -> CliResult<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    run.record_input(&bytes);
    Ok(bytes)
}

fn load_values(src: &ValuesSource, run: &mut Run) -> CliResult<Vec<f64>> {
    match (&src.input, &src.values) {
        (Some(path), _) => Ok(read_losses(read_input(path, run)?.as_slice())?),
        (None, Some(v)) => Ok(v.clone()),
        (None, None) => Err(Failure::Validation("one of --input or --values is required".into())),
    }
}

fn load_dataset(path: &Path, run: &mut Run) -> CliResult<Dataset> {
    Ok(read_csv(read_input(path, run)?.as_slice())?)
}

/// What a command writes: a JSON result line, or raw text plus a manifest
/// line for stderr.
enum Emit {
    Json(String),
    Text { stdout: String, stderr: String },
}

fn cmd_cvar(args: &CvarArgs) -> CliResult<Emit> {
    let mut run = Run::start("cvar", args, None);
    let values = load_values(&args.source, &mut run)?;
    let r = empirical_cvar(&values, args.alpha)?;
    #[derive(Serialize)]
    struct Out {
        n: usize,
        alpha: f64,
        #[serde(flatten)]
        result: subpop_core::cvar::EmpiricalCvarResult,
    }
    Ok(Emit::Json(run.render(&Out { n: values.len(), alpha: args.alpha, result: r })))
}

fn cmd_hocvar(args: &HocvarArgs) -> CliResult<Emit> {
    let mut run = Run::start("hocvar", args, None);
    let values = load_values(&args.source, &mut run)?;
    let value = higher_order_cvar(&values, args.alpha, args.k)?;
    #[derive(Serialize)]
    struct Out {
        n: usize,
        alpha: f64,
        k: f64,
        value: f64,
    }
    Ok(Emit::Json(run.render(&Out { n: values.len(), alpha: args.alpha, k: args.k, value })))
}

fn cmd_mixture(args: &MixtureArgs) -> CliResult<Emit> {
    let mut run = Run::start("mixture", args, None);
    let mixture = AlphaMixture::new(args.atoms.clone())?;
    let values = load_values(&args.source, &mut run)?;
    let value = generalized_worst_case(&values, &mixture)?;
    #[derive(Serialize)]
    struct Out {
        n: usize,
        atoms: Vec<(f64, f64)>,
        value: f64,
    }
    Ok(Emit::Json(run.render(&Out { n: values.len(), atoms: mixture.atoms().to_vec(), value })))
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult<Emit> {
    let mut run = Run::start("estimate", args, Some(args.fit.seed));
    let cfg = args.fit.config(args.alpha);
    cfg.validate()?;
    let ds = load_dataset(&args.fit.input, &mut run)?;
    let cf = CrossFit::fit(&ds, &cfg)?;
    let est = if args.plugin_only {
        cf.estimate_plugin_only(cfg.alpha, cfg.delta)?
    } else {
        cf.estimate(cfg.alpha, cfg.delta)?
    };
    Ok(Emit::Json(run.render(&est)))
}

fn cmd_curve(args: &CurveArgs) -> CliResult<Emit> {
    let mut run = Run::start("curve", args, Some(args.fit.seed));
    let cfg = args.fit.config(args.alphas.first().copied().unwrap_or(1.0));
    for &alpha in &args.alphas {
        EvalConfig { alpha, ..cfg.clone() }.validate()?;
    }
    let ds = load_dataset(&args.fit.input, &mut run)?;
    let cf = CrossFit::fit(&ds, &cfg)?;
    let mut csv = String::from("alpha,omega,sigma,ci_low,ci_high,plugin\n");
    for &alpha in &args.alphas {
        let e = cf.estimate(alpha, cfg.delta)?;
        let row = [alpha, e.omega, e.sigma, e.ci_low, e.ci_high, cf.plugin_value(alpha)];
        csv.push_str(&row.map(fmt_g17).join(","));
        csv.push('\n');
    }
    Ok(Emit::Text { stdout: csv, stderr: to_json_line(&run.manifest()) })
}

fn cmd_certify(args: &CertifyArgs) -> CliResult<Emit> {
    let mut run = Run::start("certify", args, Some(args.fit.seed));
    let cfg = args.fit.config(1.0);
    cfg.validate()?;
    let ds = load_dataset(&args.fit.input, &mut run)?;
    let alpha_lo = args.alpha_lo.unwrap_or_else(|| default_alpha_lo(ds.len()));
    let cf = CrossFit::fit(&ds, &cfg)?;
    let cert = certify_fitted(&cf, args.threshold, alpha_lo, args.tol, args.mode)?;
    let error_bounds = match (args.u_delta, cert.alpha()) {
        (Some(u), Some(alpha_hat)) => Some(
            (0..cf.k())
                .map(|k| {
                    certificate_error_bound(cf.fold_predictions(k), alpha_hat, args.alpha_floor.unwrap_or(alpha_lo), u)
                })
                .collect::<subpop_core::Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    #[derive(Serialize)]
    struct Out {
        #[serde(flatten)]
        certificate: subpop_core::Certificate,
        #[serde(skip_serializing_if = "Option::is_none")]
        error_bounds: Option<Vec<ErrorBound>>,
    }
    Ok(Emit::Json(run.render(&Out { certificate: cert, error_bounds })))
}

fn cmd_ucb(args: &UcbArgs) -> CliResult<Emit> {
    let mut run = Run::start("ucb", args, Some(args.fit.seed));
    let cfg = args.fit.config(args.alpha);
    cfg.validate()?;
    let ds = load_dataset(&args.fit.input, &mut run)?;
    let m = args.m.unwrap_or_else(|| ds.max_loss());
    let cf = CrossFit::fit(&ds, &cfg)?;
    let b = bounds::dim_free_ucb_fitted(&cf, &ds, &cfg, args.c, m, args.misspec_budget)?;
    Ok(Emit::Json(run.render(&b)))
}

fn sim_config(p: &ProblemArgs) -> SimConfig {
    SimConfig { d: p.d, seed: p.seed, clip: p.clip, ..Default::default() }
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<Emit> {
    let run = Run::start("simulate", args, Some(args.problem.seed));
    let cfg = SimConfig { n: args.n, replicate: args.replicate, ..sim_config(&args.problem) };
    let ds = simulate_dataset(&cfg)?;
    ds.save_csv(&args.output)?;
    #[derive(Serialize)]
    struct Out<'a> {
        rows: usize,
        output: &'a Path,
        flipped_rows: usize,
        mean_loss: f64,
        problem: Problem,
    }
    let flipped_rows = ds.samples().iter().filter(|s| s.z[0] > cfg.clip).count();
    let mean_loss = ds.losses().iter().sum::<f64>() / ds.len() as f64;
    let out =
        Out { rows: ds.len(), output: &args.output, flipped_rows, mean_loss, problem: Problem::from_config(&cfg) };
    Ok(Emit::Json(run.render(&out)))
}

fn cmd_oracle(args: &OracleArgs) -> CliResult<Emit> {
    let run = Run::start("oracle", args, Some(args.problem.seed));
    let cfg = SimConfig { alpha: args.alpha, outer: args.outer, inner: args.inner, ..sim_config(&args.problem) };
    let r = oracle_true_w(&cfg)?;
    Ok(Emit::Json(run.render(&r)))
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("SUBPOP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::Validation(format!("SUBPOP_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.to_string()))
}

fn dispatch(command: &Command) -> CliResult<Emit> {
    configure_threads()?;
    match command {
        Command::Cvar(a) => cmd_cvar(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Hocvar(a) => cmd_hocvar(a),
        Command::Ucb(a) => cmd_ucb(a),
        Command::Mixture(a) => cmd_mixture(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(Emit::Json(line)) => {
            print!("{line}");
            ExitCode::SUCCESS
        }
        Ok(Emit::Text { stdout, stderr }) => {
            print!("{stdout}");
            eprint!("{stderr}");
            ExitCode::SUCCESS
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
