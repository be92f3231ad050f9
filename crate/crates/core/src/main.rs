use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conmvgp::data::SplitMode;
use conmvgp::experiment::{run_cv, ExperimentConfig, MetricsReport, ModelKind};
use conmvgp::kernels::{
    factorize_basis, graph_diffusion_kernel, identity_kernel, load_edge_list, read_matrix, write_matrix,
    BasisFactor,
};
use conmvgp::solver::{fit_mean, predict_mean, MeanModel, SolverMethod};
use conmvgp::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "conmvgp", version, about = "Constrained matrix-variate GP for transposable data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prior covariance and its basis factor.
    Kernel(KernelArgs),
    /// Fit the mean model once on all observations.
    Fit(FitArgs),
    /// Score entries with a fitted model.
    Predict(PredictArgs),
    /// Cross-validate the hyperparameter grid.
    Cv(CvArgs),
    /// Print a saved cross-validation report.
    Report(ReportArgs),
}

#[derive(Args)]
struct KernelArgs {
    /// Edge list `i j [weight]`; required for diffusion kernels.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "diffusion")]
    kind: KindArg,
    /// Node count; defaults to the largest graph index plus one.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    b: f64,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    out_kernel: Option<PathBuf>,
    #[arg(long)]
    out_basis: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Identity,
    Diffusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    ConMvgp,
    TraceGp,
    Mvgp,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::ConMvgp => ModelKind::ConMvgp,
            ModelArg::TraceGp => ModelKind::TraceGp,
            ModelArg::Mvgp => ModelKind::Mvgp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Factored,
    Exact,
}

impl From<MethodArg> for SolverMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Factored => SolverMethod::Factored,
            MethodArg::Exact => SolverMethod::Exact,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    KnownRows,
    NewRows,
}

/// Config overrides shared by `fit` and `cv`.
#[derive(Args)]
struct Overrides {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    row_graph: Option<PathBuf>,
    #[arg(long)]
    col_graph: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = self.model {
            cfg.model = m.into();
        }
        if let Some(m) = self.method {
            cfg.solver.method = m.into();
        }
        if let Some(p) = &self.triples {
            cfg.triples = p.clone();
        }
        if let Some(p) = &self.row_graph {
            cfg.row_graph = Some(p.clone());
        }
        if let Some(p) = &self.col_graph {
            cfg.col_graph = Some(p.clone());
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    sigma2: f64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Diagnostics JSON; printed to stdout when omitted.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Solver seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rebuild the bases from this experiment config.
    #[arg(long, conflicts_with_all = ["row_basis", "col_basis"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "col_basis")]
    row_basis: Option<PathBuf>,
    #[arg(long, requires = "row_basis")]
    col_basis: Option<PathBuf>,
    /// File of `m n` pairs, one per line.
    #[arg(long, conflicts_with_all = ["rows", "all_rows"])]
    indices: Option<PathBuf>,
    /// Comma-separated rows to score against every column.
    #[arg(long, value_delimiter = ',', conflicts_with = "all_rows")]
    rows: Option<Vec<usize>>,
    /// Score every row against every column.
    #[arg(long)]
    all_rows: bool,
    /// TSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitArg>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `cv`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
    Json,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn cmd_kernel(args: &KernelArgs) -> Result<()> {
    let kernel = match args.kind {
        KindArg::Diffusion => {
            let path = args
                .graph
                .as_ref()
                .ok_or_else(|| Error::Input("--graph is required for diffusion kernels".into()))?;
            let graph = load_edge_list(path, args.nodes)?;
            graph_diffusion_kernel(&graph, args.a, args.b)?
        }
        KindArg::Identity => {
            let n = match (args.nodes, &args.graph) {
                (Some(n), _) => n,
                (None, Some(path)) => load_edge_list(path, None)?.node_count(),
                (None, None) => return Err(Error::Input("identity kernel needs --nodes or --graph".into())),
            };
            identity_kernel(n)?
        }
    };
    let basis = factorize_basis(&kernel, args.jitter)?;
    if let Some(path) = &args.out_kernel {
        write_matrix(path, kernel.label(), kernel.values())?;
    }
    write_matrix(&args.out_basis, basis.id(), basis.values())?;
    log::info!("{} -> basis {}x{}", basis.id(), basis.rows(), basis.basis_dim());
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg);
    if let Some(seed) = args.seed {
        cfg.solver.options.seed = seed;
    }
    let lambda = if cfg.model == ModelKind::Mvgp { 0.0 } else { args.lambda };
    let params = cfg.model.params(lambda, args.sigma2)?;
    let data = cfg.load_dataset()?;
    let result = fit_mean(cfg.solver.method, &data.obs, &data.row_basis, &data.col_basis, params, &cfg.solver.options);
    let (model, failure) = match result {
        Ok(m) => (m, None),
        Err(Error::Convergence { iterations, objective, last: Some(m) }) => {
            (*m, Some(Error::Convergence { iterations, objective, last: None }))
        }
        Err(e) => return Err(e),
    };
    model.save(&args.out)?;
    let d = &model.diagnostics;
    let diag = json!({
        "model": cfg.model.as_str(),
        "solver": d.solver,
        "lambda": lambda,
        "sigma2": args.sigma2,
        "objective": d.objective,
        "rank": model.rank(),
        "iterations": d.iterations,
        "converged": d.converged,
        "history": d.history,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&diag)?);
    write_output(args.diagnostics.as_deref(), &text)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn load_basis(path: &Path) -> Result<BasisFactor> {
    let (label, values) = read_matrix(path)?;
    Ok(BasisFactor::with_id(values, label))
}

fn parse_indices(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [m, n] | [m, n, _] => m.parse().ok().zip(n.parse().ok()),
            _ => None,
        };
        let pair = parsed
            .ok_or_else(|| Error::Input(format!("{}: line {}: expected `m n`", path.display(), i + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = MeanModel::load(&args.model)?;
    let (row_basis, col_basis) = match (&args.config, &args.row_basis, &args.col_basis) {
        (Some(cfg), _, _) => {
            let data = ExperimentConfig::load(cfg)?.load_dataset()?;
            (data.row_basis, data.col_basis)
        }
        (None, Some(r), Some(c)) => (load_basis(r)?, load_basis(c)?),
        _ => return Err(Error::Input("give --config or both --row-basis and --col-basis".into())),
    };
    model.check_bases(&row_basis, &col_basis)?;
    let indices: Vec<(usize, usize)> = if let Some(path) = &args.indices {
        parse_indices(path)?
    } else {
        let rows: Vec<usize> = match &args.rows {
            Some(rows) => rows.clone(),
            None if args.all_rows => (0..row_basis.rows()).collect(),
            None => return Err(Error::Input("give --indices, --rows or --all-rows".into())),
        };
        rows.iter().flat_map(|&m| (0..col_basis.rows()).map(move |n| (m, n))).collect()
    };
    let scores = predict_mean(&model, &row_basis, &col_basis, &indices)?;
    let mut text = String::with_capacity(indices.len() * 24);
    for (&(m, n), s) in indices.iter().zip(&scores) {
        text.push_str(&format!("{m}\t{n}\t{s:?}\n"));
    }
    write_output(args.out.as_deref(), &text)
}

fn cmd_cv(args: &CvArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg);
    cfg.seed = args.seed;
    if let Some(k) = args.folds {
        cfg.folds = k;
    }
    if let Some(mode) = args.split_mode {
        cfg.split_mode = match mode {
            SplitArg::KnownRows => SplitMode::KnownRows,
            SplitArg::NewRows => SplitMode::NewRows,
        };
    }
    cfg.validate()?;
    let report = run_cv(&cfg)?;
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_output(Some(&dir.join("metrics.csv")), &report.to_csv())?;
    write_output(Some(&dir.join("report.json")), &report.to_json()?)?;
    write_output(Some(&dir.join("config.json")), &cfg.to_json()?)?;
    eprint!("{}", report.to_table());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let path = &args.input;
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let report = MetricsReport::from_json(&text)?;
    let out = match args.format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.to_json()? + "\n",
    };
    write_output(None, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Kernel(a) => cmd_kernel(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
