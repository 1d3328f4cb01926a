//! `gmf`: fit, evaluate and simulate generalized linear latent variable
//! models from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use gmf_core::data::{holdout_split, load_csv_matrix, load_mask_csv, load_model, save_model, write_csv_matrix, write_mask_csv};
use gmf_core::eval::{self, cross_validate};
use gmf_core::simulate::{simulate_dataset, SimulationSpec};
use gmf_core::{fit, pql, Family, FitConfig, FitReport, GmfError, Method, ModelParams, ResponseData};
use ndarray::{Array1, Array2, Axis};
use serde_json::json;

const EXIT_INPUT: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_MAX_ITER: u8 = 3;

#[derive(Parser)]
#[command(name = "gmf", version, about = "Generalized linear latent variable models by penalized quasi-likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write it with its report.
    Fit(FitArgs),
    /// Write fitted means (and optionally linear predictors).
    Predict(PredictArgs),
    /// Score a model against a response matrix.
    Eval(EvalArgs),
    /// Cross-validate a grid of ranks or penalties.
    Cv(CvArgs),
    /// Simulate a data set with known parameters.
    Simulate(SimulateArgs),
    /// Write the scree values of a fitted model.
    Scree(ScreeArgs),
    /// Split the observed cells into training and test masks.
    Split(SplitArgs),
    /// Drop rows and columns with too few positive responses.
    Filter(FilterArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Response matrix CSV; missing cells hold the NA token.
    #[arg(long)]
    y: PathBuf,
    /// Covariate matrix CSV (one row per response row).
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    family: Family,
    /// Token marking a missing response.
    #[arg(long, default_value = "NA")]
    na: String,
    /// 0/1 mask CSV restricting which cells are used for fitting.
    #[arg(long)]
    train_mask: Option<PathBuf>,
}

#[derive(Args)]
struct ThreadArgs {
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "GMF_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value = "airwls")]
    method: Method,
    #[arg(long, default_value_t = 1.0)]
    gamma_u: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma_lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    threads: ThreadArgs,
    /// Model JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Fit report JSON output; defaults to the model path with `.report.json` in place of its extension.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Covariates the model was fitted with.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Mean matrix CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the linear predictor to this CSV.
    #[arg(long)]
    link_scale: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long, default_value = "NA")]
    na: String,
    /// 0/1 mask of held-out cells; the remaining cells serve as training.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// JSON output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "airwls")]
    method: Method,
    /// Ranks to compare, as `a:b` or a comma list.
    #[arg(long, conflicts_with = "grid_gamma")]
    grid_rank: Option<String>,
    /// Equal penalties to compare at the rank given by `--rank`.
    #[arg(long)]
    grid_gamma: Option<String>,
    /// Rank bound for a penalty grid.
    #[arg(long, default_value_t = 10)]
    rank: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma_u: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma_lambda: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    threads: ThreadArgs,
    /// CV table CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    d: usize,
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 0.0)]
    intercept: f64,
    /// d×d covariance CSV for the rows of X (identity by default).
    #[arg(long)]
    sigma_x: Option<PathBuf>,
    /// p×p covariance CSV for the columns of Λ (identity by default).
    #[arg(long)]
    sigma_lambda: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving y.csv, truth.json and (for d > 0) x.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScreeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    y: PathBuf,
    #[arg(long, default_value = "NA")]
    na: String,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long, default_value = "NA")]
    na: String,
    /// Minimum fraction of observed cells with a positive response.
    #[arg(long)]
    min_positive: f64,
    #[arg(long)]
    out_y: PathBuf,
    #[arg(long)]
    out_x: Option<PathBuf>,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<GmfError>() {
            Some(e) if !e.is_input_error() => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        Failure { code, error }
    }
}

impl From<GmfError> for Failure {
    fn from(error: GmfError) -> Self {
        anyhow::Error::from(error).into()
    }
}

type CmdResult = std::result::Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Scree(a) => cmd_scree(a),
        Command::Split(a) => cmd_split(a),
        Command::Filter(a) => cmd_filter(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Reads a fully observed matrix; `None` gives an `n × 0` matrix.
fn load_x(path: Option<&Path>, n: usize) -> anyhow::Result<Array2<f64>> {
    match path {
        None => Ok(Array2::zeros((n, 0))),
        Some(p) => {
            let (x, present) = load_csv_matrix::<f64>(p, "NA").with_context(|| format!("reading {}", p.display()))?;
            if present.iter().any(|&b| !b) {
                bail!("covariates in {} contain missing values", p.display());
            }
            Ok(x)
        }
    }
}

fn load_data(args: &DataArgs) -> anyhow::Result<ResponseData<f64>> {
    let (y, mut mask) = load_csv_matrix::<f64>(&args.y, &args.na).with_context(|| format!("reading {}", args.y.display()))?;
    if let Some(path) = &args.train_mask {
        let train = load_mask_csv(path).with_context(|| format!("reading {}", path.display()))?;
        if train.dim() != mask.dim() {
            bail!("training mask is {:?} but responses are {:?}", train.dim(), mask.dim());
        }
        mask.zip_mut_with(&train, |m, &t| *m = *m && t);
    }
    let x = load_x(args.x.as_deref(), y.nrows())?;
    Ok(ResponseData::new(y, mask, x, args.family)?)
}

fn parse_ranks(spec: &str) -> anyhow::Result<Vec<usize>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once(':') {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty range `{spec}`");
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|t| t.trim().parse::<usize>().map_err(|e| anyhow!("bad rank `{t}`: {e}"))).collect()
}

fn parse_gammas(spec: &str) -> anyhow::Result<Vec<f64>> {
    spec.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| anyhow!("bad penalty `{t}`: {e}"))).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn default_report_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".report.json");
    out.with_file_name(name)
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    if a.rank < 1 {
        return Err(anyhow!("rank ≥ 1 is required").into());
    }
    let data = load_data(&a.data)?;
    let config = FitConfig {
        gamma_u: a.gamma_u,
        gamma_lambda: a.gamma_lambda,
        tol: a.tol,
        max_iter: a.max_iter,
        seed: a.seed,
        threads: a.threads.threads,
        ..FitConfig::new(a.method, a.rank)
    };
    let (params, report) = fit(&data, &config)?;
    save_model(&params, &report, &a.out)?;
    let report_path = a.report.unwrap_or_else(|| default_report_path(&a.out));
    write_json(&report_path, &serde_json::to_value(&report).map_err(anyhow::Error::from)?)?;
    println!(
        "{} after {} iterations, objective {:.6}, deviance {:.6}",
        if report.converged { "converged" } else { "max-iter reached" },
        report.iterations,
        report.objective_trace.last().copied().unwrap_or(f64::NAN),
        report.deviance
    );
    Ok(if report.converged { 0 } else { EXIT_MAX_ITER })
}

/// Response container carrying only covariates, for prediction.
fn design_only(family: Family, x: Array2<f64>, m: usize) -> anyhow::Result<ResponseData<f64>> {
    let n = x.nrows();
    let y = Array2::from_elem((n, m), if family == Family::Poisson { 1.0 } else { 0.0 });
    Ok(ResponseData::fully_observed(y, x, family)?)
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let (params, report): (ModelParams<f64>, FitReport) = load_model(&a.model)?;
    let x = load_x(a.x.as_deref(), params.n())?;
    let data = design_only(report.family, x, params.m())?;
    let mu = pql::predict_mean(&data, &params)?;
    write_csv_matrix(&a.out, &mu, None, "NA")?;
    if let Some(path) = &a.link_scale {
        let eta = pql::linear_predictor(&data, &params)?;
        write_csv_matrix(path, &eta, None, "NA")?;
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (params, report): (ModelParams<f64>, FitReport) = load_model(&a.model)?;
    let (y, observed) = load_csv_matrix::<f64>(&a.y, &a.na).with_context(|| format!("reading {}", a.y.display()))?;
    let x = load_x(a.x.as_deref(), y.nrows())?;
    let (train_mask, test_mask) = match &a.holdout {
        Some(path) => {
            let test = load_mask_csv(path).with_context(|| format!("reading {}", path.display()))?;
            if test.dim() != observed.dim() {
                return Err(anyhow!("holdout mask is {:?} but responses are {:?}", test.dim(), observed.dim()).into());
            }
            let test = &test & &observed;
            let train = &observed & &test.mapv(|b| !b);
            (train, test)
        }
        None => (observed.clone(), observed),
    };
    let data = ResponseData::new(y, train_mask, x, report.family)?;
    let mu = pql::predict_mean(&data, &params)?;
    let deviance = eval::deviance(&data, &mu, &params.phi, &test_mask)?;
    let fraction = eval::null_deviance_fraction(&data, &mu, &params.phi, &test_mask)?;
    let mut out = json!({ "deviance": deviance, "null_deviance_fraction": fraction });
    if report.family == Family::Bernoulli {
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for ((i, j), &t) in test_mask.indexed_iter() {
            if t {
                labels.push(data.y()[(i, j)] > 0.5);
                scores.push(mu[(i, j)]);
            }
        }
        out["auc"] = json!(eval::auc(&labels, &scores)?);
    }
    match &a.out {
        Some(path) => write_json(path, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out).map_err(anyhow::Error::from)?),
    }
    Ok(0)
}

fn cmd_cv(a: CvArgs) -> CmdResult {
    let data = load_data(&a.data)?;
    let base = FitConfig {
        gamma_u: a.gamma_u,
        gamma_lambda: a.gamma_lambda,
        tol: a.tol,
        max_iter: a.max_iter,
        seed: a.seed,
        ..FitConfig::new(a.method, a.rank)
    };
    let grid: Vec<FitConfig<f64>> = match (&a.grid_rank, &a.grid_gamma) {
        (Some(spec), None) => parse_ranks(spec)?.into_iter().map(|rank| FitConfig { rank, ..base.clone() }).collect(),
        (None, Some(spec)) => parse_gammas(spec)?.into_iter().map(|g| base.clone().with_equal_gamma(g)).collect(),
        _ => return Err(anyhow!("give exactly one of --grid-rank or --grid-gamma").into()),
    };
    let table = cross_validate(&data, &grid, a.folds, a.seed, a.threads.threads)?;
    std::fs::write(&a.out, table.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    let best = &table.rows[table.best];
    println!(
        "best: rank {} gamma_u {} gamma_lambda {} mean deviance {:.6}",
        best.rank, best.gamma_u, best.gamma_lambda, best.mean_deviance
    );
    Ok(0)
}

fn truth_report(family: Family, params: &ModelParams<f64>, seed: u64) -> FitReport {
    FitReport {
        family,
        method: Method::Airwls,
        rank: params.p(),
        gamma_u: 0.0,
        gamma_lambda: 0.0,
        tol: 0.0,
        seed,
        objective_trace: Vec::new(),
        iterations: 0,
        converged: true,
        wall_time_secs: 0.0,
        scree: eval::scree_values(&params.lambda).to_vec(),
        deviance: 0.0,
        diagonal_floor_hits: 0,
        step_reductions: 0,
        clamp_hits: false,
        latent_repairs: 0,
    }
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let spec = SimulationSpec {
        intercept: a.intercept,
        sigma_x: a.sigma_x.as_deref().map(|p| load_x(Some(p), 0)).transpose()?,
        sigma_lambda: a.sigma_lambda.as_deref().map(|p| load_x(Some(p), 0)).transpose()?,
        ..SimulationSpec::new(a.n, a.m, a.p, a.d, a.family, a.seed)
    };
    let (data, truth) = simulate_dataset::<f64>(&spec)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_csv_matrix(a.out_dir.join("y.csv"), data.y(), None, "NA")?;
    if a.d > 0 {
        write_csv_matrix(a.out_dir.join("x.csv"), data.x(), None, "NA")?;
    }
    save_model(&truth, &truth_report(a.family, &truth, a.seed), a.out_dir.join("truth.json"))?;
    Ok(0)
}

fn cmd_scree(a: ScreeArgs) -> CmdResult {
    let (params, _): (ModelParams<f64>, FitReport) = load_model(&a.model)?;
    let scree = eval::scree_values(&params.lambda).insert_axis(Axis(1));
    write_csv_matrix(&a.out, &scree, None, "NA")?;
    Ok(0)
}

fn cmd_split(a: SplitArgs) -> CmdResult {
    let (y, mask) = load_csv_matrix::<f64>(&a.y, &a.na).with_context(|| format!("reading {}", a.y.display()))?;
    let n = y.nrows();
    let data = ResponseData::new(y, mask, Array2::zeros((n, 0)), Family::Gaussian)?;
    let (train, test) = holdout_split(&data, a.fraction, a.seed)?;
    write_mask_csv(&a.train_out, &train)?;
    write_mask_csv(&a.test_out, &test)?;
    Ok(0)
}

fn positive_fraction(y: &Array2<f64>, mask: &Array2<bool>, axis: Axis) -> Array1<f64> {
    let pos = ndarray::Zip::from(y).and(mask).map_collect(|&v, &o| f64::from(o && v > 0.0)).sum_axis(axis);
    let obs = mask.mapv(f64::from).sum_axis(axis);
    ndarray::Zip::from(&pos).and(&obs).map_collect(|&p, &o| if o > 0.0 { p / o } else { 0.0 })
}

fn cmd_filter(a: FilterArgs) -> CmdResult {
    let (y, mask) = load_csv_matrix::<f64>(&a.y, &a.na).with_context(|| format!("reading {}", a.y.display()))?;
    let n_rows = y.nrows();
    let keep_cols: Vec<usize> = positive_fraction(&y, &mask, Axis(0))
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= a.min_positive)
        .map(|(j, _)| j)
        .collect();
    let y = y.select(Axis(1), &keep_cols);
    let mask = mask.select(Axis(1), &keep_cols);
    let keep_rows: Vec<usize> = positive_fraction(&y, &mask, Axis(1))
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= a.min_positive)
        .map(|(i, _)| i)
        .collect();
    if keep_rows.is_empty() || keep_cols.is_empty() {
        return Err(anyhow!("no rows or columns reach a positive fraction of {}", a.min_positive).into());
    }
    let y = y.select(Axis(0), &keep_rows);
    let mask = mask.select(Axis(0), &keep_rows);
    write_csv_matrix(&a.out_y, &y, Some(&mask), &a.na)?;
    match (&a.x, &a.out_x) {
        (Some(x_path), Some(out)) => {
            let x = load_x(Some(x_path), 0)?;
            if x.nrows() != n_rows {
                return Err(anyhow!("covariates and responses differ in row count").into());
            }
            write_csv_matrix(out, &x.select(Axis(0), &keep_rows), None, "NA")?;
        }
        (None, None) => {}
        _ => return Err(anyhow!("--x and --out-x must be given together").into()),
    }
    println!("kept {} rows and {} columns", keep_rows.len(), keep_cols.len());
    Ok(0)
}
