//! The `emss` command line: argument parsing, config files, artifact
//! emission and exit codes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::dataset::{generate_synthetic, DataMatrix, SyntheticSpec};
use crate::error::{Error, Result};
use crate::io::{self, format_f64, sha256_hex};
use crate::kpca::{self, KernelModel, KernelModelFile, KernelSpec};
use crate::motion::{
    estimate_field, imc, BorderPolicy, DisplacementField, FieldConfig, Frame, Init, MaskSpec, Retention,
    SolverSpec,
};
use crate::motion::synth::{add_noise, Scene};
use crate::pca::{self, EmConfig, SubspaceModel};
use crate::spca;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "emss", version, about = "EM principal subspaces and pel-recursive motion estimation", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Principal component analysis.
    Pca {
        #[command(subcommand)]
        action: PcaAction,
    },
    /// Sensible PCA (finite isotropic noise).
    Spca {
        #[command(subcommand)]
        action: SpcaAction,
    },
    /// Kernel PCA through the constrained EM eigensolver.
    Kpca {
        #[command(subcommand)]
        action: KpcaAction,
    },
    /// Pel-recursive displacement estimation.
    Motion {
        #[command(subcommand)]
        action: MotionAction,
    },
    /// Synthetic data with planted ground truth.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
}

#[derive(Debug, Subcommand)]
enum PcaAction {
    Fit(PcaFit),
}

#[derive(Debug, Subcommand)]
enum SpcaAction {
    Fit(SpcaFit),
}

#[derive(Debug, Subcommand)]
enum KpcaAction {
    Fit(KpcaFit),
    /// Scores of new points on a fitted model.
    Project(KpcaProject),
    /// Pivoted incomplete Cholesky of the kernel matrix.
    Ichol(KpcaIchol),
}

#[derive(Debug, Subcommand)]
enum MotionAction {
    Estimate(MotionEstimate),
    /// Improvement in motion compensation over a frame sequence.
    Imc(MotionImc),
}

#[derive(Debug, Subcommand)]
enum SynthAction {
    Make(SynthMake),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args, Serialize)]
struct Common {
    /// Output directory, created if missing.
    #[arg(long, default_value = "emss-out")]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, env = "EMSS_SEED", default_value_t = 0)]
    seed: u64,
    /// Layout of tabular outputs. Plot data is always CSV.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// File of `key = value` lines; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(short, long, action = ArgAction::Count)]
    #[serde(skip)]
    verbose: u8,
}

#[derive(Debug, Args, Serialize)]
struct IterArgs {
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum PcaAlgo {
    Cov,
    Svd,
    Em,
}

#[derive(Debug, Args, Serialize)]
struct PcaFit {
    /// p x n matrix, one observation per column (CSV or .emss).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = PcaAlgo::Em)]
    algo: PcaAlgo,
    #[arg(short, long, default_value_t = 2)]
    k: usize,
    #[command(flatten)]
    iter: IterArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct SpcaFit {
    #[arg(long)]
    input: PathBuf,
    #[arg(short, long, default_value_t = 2)]
    k: usize,
    #[command(flatten)]
    iter: IterArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum KernelKind {
    Linear,
    Polynomial,
    Rbf,
}

#[derive(Debug, Args, Serialize)]
struct KernelArgs {
    #[arg(long, value_enum, default_value_t = KernelKind::Rbf)]
    kernel: KernelKind,
    #[arg(long, default_value_t = 2)]
    degree: u32,
    #[arg(long, default_value_t = 1.0)]
    offset: f64,
    /// RBF width; the median heuristic when omitted.
    #[arg(long)]
    gamma: Option<f64>,
}

impl KernelArgs {
    fn spec(&self, data: &DataMatrix) -> Result<KernelSpec> {
        let spec = match self.kernel {
            KernelKind::Linear => KernelSpec::Linear,
            KernelKind::Polynomial => KernelSpec::Polynomial {
                degree: self.degree,
                offset: self.offset,
            },
            KernelKind::Rbf => KernelSpec::Rbf {
                gamma: match self.gamma {
                    Some(g) => g,
                    None => kpca::median_gamma(data)?,
                },
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args, Serialize)]
struct KpcaFit {
    #[arg(long)]
    input: PathBuf,
    #[arg(short, long, default_value_t = 2)]
    q: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Use the raw kernel matrix instead of centering in feature space.
    #[arg(long)]
    no_center: bool,
    #[command(flatten)]
    iter: IterArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct KpcaProject {
    /// Model JSON written by `kpca fit`.
    #[arg(long)]
    model: PathBuf,
    /// The training matrix the model was fitted on.
    #[arg(long)]
    training: PathBuf,
    /// Points to project, one per column.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct KpcaIchol {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Stop once the residual trace is at most this fraction of the trace.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SolverKind {
    Ols,
    Rls,
    Pcr1,
    Pcr2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum InitArg {
    Causal,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BorderArg {
    Clamp,
    Error,
}

#[derive(Debug, Args, Serialize)]
struct EstimatorArgs {
    /// RLS regularization, `lambda * I`.
    #[arg(long, default_value_t = crate::motion::solver::DEFAULT_LAMBDA)]
    lambda: f64,
    /// PCR2 regularization on both principal components.
    #[arg(long, default_value_t = crate::motion::solver::DEFAULT_LAMBDA)]
    xi: f64,
    /// PCR1 keeps the second component when lambda2 / lambda1 exceeds this.
    #[arg(long, default_value_t = crate::motion::solver::DEFAULT_RATIO, conflicts_with = "components")]
    ratio: f64,
    /// PCR1 keeps exactly this many components (1 or 2).
    #[arg(long)]
    components: Option<usize>,
    /// Odd side of a square mask; the 5-point causal mask when omitted.
    #[arg(long)]
    mask_size: Option<usize>,
    #[arg(long, default_value_t = 5)]
    max_iter: usize,
    /// Stop once the update is shorter than this many pixels.
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    #[arg(long, default_value_t = 15.0)]
    clamp: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Causal)]
    init: InitArg,
    #[arg(long, value_enum, default_value_t = BorderArg::Clamp)]
    border: BorderArg,
    /// Process rows in parallel (same result as the serial scan).
    #[arg(long)]
    parallel: bool,
}

impl EstimatorArgs {
    fn solver(&self, kind: SolverKind) -> SolverSpec {
        match kind {
            SolverKind::Ols => SolverSpec::Ols,
            SolverKind::Rls => SolverSpec::rls(self.lambda),
            SolverKind::Pcr1 => SolverSpec::Pcr1 {
                retention: match self.components {
                    Some(c) => Retention::Components(c),
                    None => Retention::Ratio(self.ratio),
                },
            },
            SolverKind::Pcr2 => SolverSpec::pcr2(self.xi),
        }
    }

    fn config(&self, kind: SolverKind) -> Result<FieldConfig> {
        let mask = match self.mask_size {
            Some(s) => MaskSpec::square(s)?,
            None => MaskSpec::causal(),
        };
        let cfg = FieldConfig {
            mask,
            solver: self.solver(kind),
            max_iterations: self.max_iter,
            tolerance: self.tol,
            clamp: self.clamp,
            init: match self.init {
                InitArg::Causal => Init::Causal,
                InitArg::Zero => Init::Zero,
            },
            border: match self.border {
                BorderArg::Clamp => BorderPolicy::Clamp,
                BorderArg::Error => BorderPolicy::Error,
            },
            parallel: self.parallel,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
struct MotionEstimate {
    /// Previous frame (PGM or .emss).
    #[arg(long)]
    prev: PathBuf,
    #[arg(long)]
    cur: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverKind::Ols)]
    solver: SolverKind,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct MotionImc {
    /// Directory of frames (`.pgm` or `.emss`), taken in file name order.
    #[arg(long)]
    frames: PathBuf,
    /// Field CSV applied to every frame pair, or a directory with one CSV per pair.
    /// Without it every solver estimates its own fields.
    #[arg(long)]
    fields: Option<PathBuf>,
    /// Pixels ignored along each border.
    #[arg(long, default_value_t = 4)]
    margin: usize,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SynthKind {
    Matrix,
    Frames,
}

#[derive(Debug, Args, Serialize)]
struct SynthMake {
    #[arg(long, value_enum, default_value_t = SynthKind::Matrix)]
    kind: SynthKind,
    #[arg(short, long, default_value_t = 10)]
    p: usize,
    #[arg(short, long, default_value_t = 200)]
    n: usize,
    /// Planted variances, comma separated; their count is the planted rank.
    #[arg(long, value_delimiter = ',', default_values_t = [4.0, 2.0])]
    eigenvalues: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Fraction of entries to hide.
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// Per-frame displacement `dx,dy`.
    #[arg(long, value_delimiter = ',', num_args = 1, default_values_t = [2.0, 1.0])]
    shift: Vec<f64>,
    /// Additive noise in dB; noiseless when omitted.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 6)]
    waves: usize,
    /// Wavelength range `lo,hi` in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = [8.0, 16.0])]
    band: Vec<f64>,
    /// Write raw `.emss` grids instead of 8-bit PGM.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    common: Common,
}

/// Result table, written as CSV or as `{"columns": [...], "rows": [...]}`.
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => format_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) => json!(v),
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
        }
    }
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(Cell::csv).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    fn to_json(&self) -> Value {
        json!({
            "columns": self.columns,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// A gnuplot script over a CSV with a header row.
struct Plot<'a> {
    title: &'a str,
    xlabel: &'a str,
    ylabel: &'a str,
    /// Full `using ... with ...` clause.
    using: &'a str,
    log_y: bool,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    NotConverged,
}

/// Everything a run produces, held in memory until the run succeeds.
struct Run {
    command: &'static str,
    config: Value,
    seed: u64,
    format: Format,
    inputs: Vec<FileEntry>,
    artifacts: Vec<(String, Vec<u8>)>,
    status: Status,
}

impl Run {
    fn new<T: Serialize>(command: &'static str, args: &T, common: &Common) -> Result<Self> {
        let mut run = Run {
            command,
            config: serde_json::to_value(args)?,
            seed: common.seed,
            format: common.format,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            status: Status::Ok,
        };
        if let Some(cfg) = &common.config {
            run.input(cfg)?;
        }
        Ok(run)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: io::hash_file(path)?,
        });
        Ok(())
    }

    fn read_matrix(&mut self, path: &Path) -> Result<DataMatrix> {
        self.input(path)?;
        let m = DataMatrix::read(path)?;
        log::info!("{}: {}x{} matrix, {} missing", path.display(), m.nrows(), m.ncols(), m.missing_count());
        Ok(m)
    }

    fn read_frame(&mut self, path: &Path) -> Result<Frame> {
        self.input(path)?;
        Frame::read(path)
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.artifacts.push((name.into(), bytes));
    }

    fn add_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn add_table(&mut self, stem: &str, table: &Table, plot: Option<Plot>) -> Result<()> {
        match self.format {
            Format::Csv => self.add(format!("{stem}.csv"), table.to_csv().into_bytes()),
            Format::Json => {
                self.add_json(&format!("{stem}.json"), &table.to_json())?;
                if plot.is_some() {
                    self.add(format!("{stem}.csv"), table.to_csv().into_bytes());
                }
            }
        }
        if let Some(plot) = plot {
            self.add(format!("{stem}.gp"), gnuplot(&format!("{stem}.csv"), &plot).into_bytes());
        }
        Ok(())
    }

    fn converged(&mut self, ok: bool) {
        if !ok {
            self.status = Status::NotConverged;
        }
    }

    /// Writes every artifact and the manifest listing them.
    fn flush(self, out: &Path) -> Result<i32> {
        std::fs::create_dir_all(out)?;
        let mut listed = Vec::with_capacity(self.artifacts.len());
        for (name, bytes) in &self.artifacts {
            let path = out.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, bytes)?;
            listed.push(json!({"path": name, "sha256": sha256_hex(bytes), "bytes": bytes.len()}));
        }
        let (status, code) = match self.status {
            Status::Ok => ("ok", EXIT_OK),
            Status::NotConverged => ("not_converged", EXIT_CONVERGENCE),
        };
        let manifest = json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "artifacts": listed,
            "status": status,
            "exit_code": code,
        });
        io::write_json(&out.join("manifest.json"), &manifest)?;
        Ok(code)
    }
}

fn gnuplot(csv: &str, plot: &Plot) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead\n");
    s.push_str(&format!("set title '{}'\n", plot.title));
    s.push_str(&format!("set xlabel '{}'\n", plot.xlabel));
    s.push_str(&format!("set ylabel '{}'\n", plot.ylabel));
    if plot.log_y {
        s.push_str("set logscale y\n");
    }
    s.push_str(&format!("plot '{csv}' {}\n", plot.using));
    s
}

fn spectrum_table(eigenvalues: &[f64], total: Option<f64>) -> Table {
    let mut t = Table::new(&["component", "eigenvalue", "explained"]);
    let total = total.unwrap_or_else(|| eigenvalues.iter().sum());
    for (i, l) in eigenvalues.iter().enumerate() {
        t.rows.push(vec![Cell::Int(i as u64 + 1), Cell::Num(*l), Cell::Num(l / total)]);
    }
    t
}

const SPECTRUM_PLOT: Plot<'static> = Plot {
    title: "eigenspectrum",
    xlabel: "component",
    ylabel: "eigenvalue",
    using: "using 1:2 with linespoints",
    log_y: false,
};

fn total_variance(m: &DataMatrix) -> Option<f64> {
    m.sample_covariance().ok().map(|c| c.trace())
}

fn pca_fit(a: &PcaFit) -> Result<Run> {
    let mut run = Run::new("pca fit", a, &a.common)?;
    let m = run.read_matrix(&a.input)?;
    let cfg = EmConfig::new(a.k)
        .with_seed(a.common.seed)
        .with_tolerance(a.iter.tol)
        .with_max_iterations(a.iter.max_iter);
    cfg.validate(m.nrows(), m.ncols())?;
    let model: SubspaceModel = match a.algo {
        PcaAlgo::Cov => pca::pca_covariance(&m, a.k)?,
        PcaAlgo::Svd => pca::pca_svd(&m, a.k)?,
        PcaAlgo::Em => pca::pca_em(&m, &cfg)?,
    };
    log::info!("{} iterations, converged {}", model.iterations, model.converged);
    run.converged(model.converged);
    run.add_json("model.json", &model)?;
    run.add_table(
        "eigenspectrum",
        &spectrum_table(&model.eigenvalues, total_variance(&m)),
        Some(SPECTRUM_PLOT),
    )?;
    if !model.reconstruction_trace.is_empty() {
        let mut t = Table::new(&["iteration", "reconstruction_error"]);
        for (i, e) in model.reconstruction_trace.iter().enumerate() {
            t.rows.push(vec![Cell::Int(i as u64 + 1), Cell::Num(*e)]);
        }
        let plot = Plot {
            title: "EM reconstruction error",
            xlabel: "iteration",
            ylabel: "||Y - CX||_F",
            using: "using 1:2 with lines",
            log_y: true,
        };
        run.add_table("trace", &t, Some(plot))?;
    }
    Ok(run)
}

fn spca_fit(a: &SpcaFit) -> Result<Run> {
    let mut run = Run::new("spca fit", a, &a.common)?;
    let m = run.read_matrix(&a.input)?;
    let cfg = EmConfig::new(a.k)
        .with_seed(a.common.seed)
        .with_tolerance(a.iter.tol)
        .with_max_iterations(a.iter.max_iter);
    cfg.validate(m.nrows(), m.ncols())?;
    let model = spca::spca_em(&m, &cfg)?;
    log::info!(
        "noise level {:.4e} after {} iterations",
        model.noise_level,
        model.subspace.iterations
    );
    run.converged(model.subspace.converged);
    run.add_json("model.json", &model)?;
    let mut t = Table::new(&["iteration", "log_likelihood"]);
    for (i, l) in model.log_likelihood_trace.iter().enumerate() {
        t.rows.push(vec![Cell::Int(i as u64), Cell::Num(*l)]);
    }
    let plot = Plot {
        title: "sensible PCA log-likelihood",
        xlabel: "iteration",
        ylabel: "log-likelihood",
        using: "using 1:2 with linespoints",
        log_y: false,
    };
    run.add_table("likelihood", &t, Some(plot))?;
    Ok(run)
}

fn kpca_fit(a: &KpcaFit) -> Result<Run> {
    let mut run = Run::new("kpca fit", a, &a.common)?;
    let m = run.read_matrix(&a.input)?;
    let spec = a.kernel.spec(&m)?;
    let cfg = EmConfig::new(a.q)
        .with_seed(a.common.seed)
        .with_tolerance(a.iter.tol)
        .with_max_iterations(a.iter.max_iter);
    cfg.validate(m.ncols(), m.ncols())?;
    let model = kpca::kpca_fit(&m, &spec, a.q, &cfg, !a.no_center)?;
    run.converged(model.converged);
    run.add_json("model.json", &model.to_file())?;
    run.add_table("eigenspectrum", &spectrum_table(&model.eigenvalues, None), Some(SPECTRUM_PLOT))?;
    let scores = kpca::training_scores(&model)?;
    run.add_table("scores", &scores_table(&scores), None)?;
    Ok(run)
}

/// One row per point, one column per component.
fn scores_table(scores: &DMatrix<f64>) -> Table {
    let mut columns = vec!["point".to_string()];
    columns.extend((1..=scores.nrows()).map(|i| format!("score_{i}")));
    let mut t = Table {
        columns,
        rows: Vec::new(),
    };
    for (j, col) in scores.column_iter().enumerate() {
        let mut row = vec![Cell::Int(j as u64)];
        row.extend(col.iter().map(|v| Cell::Num(*v)));
        t.rows.push(row);
    }
    t
}

fn kpca_project(a: &KpcaProject) -> Result<Run> {
    let mut run = Run::new("kpca project", a, &a.common)?;
    run.input(&a.model)?;
    let file: KernelModelFile = serde_json::from_slice(&std::fs::read(&a.model)?)?;
    let training = run.read_matrix(&a.training)?;
    let model = KernelModel::from_file(file, training)?;
    let points = run.read_matrix(&a.input)?;
    if !points.is_complete() {
        return Err(Error::MissingData(points.missing_count()));
    }
    let mut scores = DMatrix::zeros(model.components(), points.ncols());
    for (j, col) in points.values().column_iter().enumerate() {
        let y: DVector<f64> = col.into_owned();
        scores.set_column(j, &kpca::kpca_project(&model, &y)?);
    }
    run.add_table("scores", &scores_table(&scores), None)?;
    Ok(run)
}

fn kpca_ichol(a: &KpcaIchol) -> Result<Run> {
    let mut run = Run::new("kpca ichol", a, &a.common)?;
    if !(a.tol > 0.0 && a.tol < 1.0) {
        return Err(Error::InvalidConfig(format!("tolerance {} must lie in (0, 1)", a.tol)));
    }
    let m = run.read_matrix(&a.input)?;
    let spec = a.kernel.spec(&m)?;
    let k = kpca::kernel_matrix(&m, &spec)?;
    let factor = kpca::incomplete_cholesky(&k, a.tol)?;
    let trace = k.trace();
    let approx = &factor.l * factor.l.transpose();
    let relative_error = (&k - approx).norm() / k.norm();
    let summary = json!({
        "n": k.nrows(),
        "kernel": spec,
        "tolerance": a.tol,
        "rank": factor.rank,
        "trace": trace,
        "residual_trace": factor.residual_trace,
        "relative_residual_trace": factor.residual_trace / trace,
        "relative_frobenius_error": relative_error,
        "pivot_order": factor.pivot_order,
    });
    match run.format {
        Format::Json => run.add_json("summary.json", &summary)?,
        Format::Csv => {
            let mut t = Table::new(&["key", "value"]);
            t.rows.push(vec![Cell::Text("n".into()), Cell::Int(k.nrows() as u64)]);
            t.rows.push(vec![Cell::Text("rank".into()), Cell::Int(factor.rank as u64)]);
            t.rows.push(vec![Cell::Text("tolerance".into()), Cell::Num(a.tol)]);
            t.rows.push(vec![Cell::Text("trace".into()), Cell::Num(trace)]);
            t.rows.push(vec![Cell::Text("residual_trace".into()), Cell::Num(factor.residual_trace)]);
            t.rows.push(vec![Cell::Text("relative_frobenius_error".into()), Cell::Num(relative_error)]);
            run.add_table("summary", &t, None)?;
        }
    }
    let mut t = Table::new(&["rank", "relative_residual_trace"]);
    for (i, r) in factor.residual_history.iter().enumerate() {
        t.rows.push(vec![Cell::Int(i as u64), Cell::Num(r / trace)]);
    }
    let plot = Plot {
        title: "incomplete Cholesky residual",
        xlabel: "rank",
        ylabel: "residual trace / trace",
        using: "using 1:2 with linespoints",
        log_y: true,
    };
    run.add_table("residual", &t, Some(plot))?;
    Ok(run)
}

fn field_summary(field: &DisplacementField, cfg: &FieldConfig) -> Value {
    let n = field.iterations.len() as f64;
    let mean_iterations = field.iterations.iter().map(|i| f64::from(*i)).sum::<f64>() / n;
    json!({
        "width": field.width,
        "height": field.height,
        "solver": cfg.solver,
        "converged_fraction": field.converged_fraction(),
        "mean_iterations": mean_iterations,
        "median_displacement": field.interior_median(cfg.mask.reach()),
    })
}

fn motion_estimate(a: &MotionEstimate) -> Result<Run> {
    let mut run = Run::new("motion estimate", a, &a.common)?;
    let cfg = a.estimator.config(a.solver)?;
    let prev = run.read_frame(&a.prev)?;
    let cur = run.read_frame(&a.cur)?;
    let field = estimate_field(&prev, &cur, &cfg)?;
    run.add("field.csv", field.to_csv().into_bytes());
    run.add(
        "field.gp",
        gnuplot(
            "field.csv",
            &Plot {
                title: "displacement field",
                xlabel: "x",
                ylabel: "y",
                using: "every 4 using 1:2:3:4 with vectors notitle",
                log_y: false,
            },
        )
        .replace("set key autotitle columnhead\n", "set key autotitle columnhead\nset yrange [*:*] reverse\n")
        .into_bytes(),
    );
    run.add_json("summary.json", &field_summary(&field, &cfg))?;
    Ok(run)
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm" || e == "emss"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn motion_imc(a: &MotionImc) -> Result<Run> {
    let mut run = Run::new("motion imc", a, &a.common)?;
    let solvers = [SolverKind::Ols, SolverKind::Rls, SolverKind::Pcr1, SolverKind::Pcr2];
    let configs: Vec<FieldConfig> = if a.fields.is_none() {
        solvers.iter().map(|k| a.estimator.config(*k)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let paths = frame_paths(&a.frames)?;
    if paths.len() < 2 {
        return Err(Error::InvalidData(format!(
            "{} holds {} frames, need at least 2",
            a.frames.display(),
            paths.len()
        )));
    }
    let frames: Vec<Frame> = paths.iter().map(|p| run.read_frame(p)).collect::<Result<_>>()?;
    let pairs = frames.len() - 1;
    let mut table = Table::new(&["solver", "imc_db", "converged_fraction", "mean_iterations"]);
    let mut results = Vec::new();
    if let Some(fields_path) = &a.fields {
        let fields = if fields_path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(fields_path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .collect();
            files.sort();
            files
                .iter()
                .map(|p| {
                    run.input(p)?;
                    DisplacementField::read(p)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            run.input(fields_path)?;
            vec![DisplacementField::read(fields_path)?; pairs]
        };
        let value = imc(&frames, &fields, a.margin)?;
        table.rows.push(vec![
            Cell::Text("given".into()),
            Cell::Num(value),
            Cell::Num(mean_of(&fields, |f| f.converged_fraction())),
            Cell::Num(mean_of(&fields, mean_iterations)),
        ]);
        results.push(json!({"solver": "given", "imc_db": value}));
    } else {
        for cfg in &configs {
            let fields = frames
                .windows(2)
                .map(|w| estimate_field(&w[0], &w[1], cfg))
                .collect::<Result<Vec<_>>>()?;
            let value = imc(&frames, &fields, a.margin)?;
            log::info!("{}: {value:.3} dB", cfg.solver.name());
            table.rows.push(vec![
                Cell::Text(cfg.solver.name().into()),
                Cell::Num(value),
                Cell::Num(mean_of(&fields, |f| f.converged_fraction())),
                Cell::Num(mean_of(&fields, mean_iterations)),
            ]);
            results.push(json!({"solver": cfg.solver.name(), "imc_db": value}));
            for (i, f) in fields.iter().enumerate() {
                run.add(format!("fields/{}_{i:03}.csv", cfg.solver.name()), f.to_csv().into_bytes());
            }
        }
    }
    let plot = Plot {
        title: "improvement in motion compensation",
        xlabel: "solver",
        ylabel: "IMC (dB)",
        using: "using 0:2:xtic(1) with boxes notitle",
        log_y: false,
    };
    run.add_table("imc", &table, Some(plot))?;
    run.add_json(
        "summary.json",
        &json!({"frames": frames.len(), "margin": a.margin, "results": results}),
    )?;
    Ok(run)
}

fn mean_iterations(f: &DisplacementField) -> f64 {
    f.iterations.iter().map(|i| f64::from(*i)).sum::<f64>() / f.iterations.len() as f64
}

fn mean_of(fields: &[DisplacementField], stat: impl Fn(&DisplacementField) -> f64) -> f64 {
    fields.iter().map(stat).sum::<f64>() / fields.len() as f64
}

fn synth_make(a: &SynthMake) -> Result<Run> {
    let mut run = Run::new("synth make", a, &a.common)?;
    let seed = a.common.seed;
    match a.kind {
        SynthKind::Matrix => {
            let spec = SyntheticSpec {
                p: a.p,
                n: a.n,
                true_rank: a.eigenvalues.len(),
                eigenvalues: a.eigenvalues.clone(),
                noise_sigma: a.noise,
                seed,
            };
            spec.validate()?;
            let (mut data, basis) = generate_synthetic(&spec)?;
            if a.missing > 0.0 {
                data = data.with_random_mask(a.missing, seed.wrapping_add(1))?;
            }
            if a.raw {
                run.add("data.emss", io::encode_emss(&data.to_grid()));
            } else {
                run.add("data.csv", io::format_csv_grid(&data.to_grid()).into_bytes());
            }
            run.add("basis.csv", io::format_csv_grid(&io::Grid::from_matrix(&basis, None)).into_bytes());
            run.add_json("truth.json", &json!({"spec": spec, "missing_fraction": a.missing}))?;
        }
        SynthKind::Frames => {
            if a.shift.len() != 2 || a.band.len() != 2 {
                return Err(Error::InvalidConfig("--shift and --band take two values each".into()));
            }
            if !(a.band[0] > 0.0 && a.band[0] < a.band[1]) {
                return Err(Error::InvalidConfig(format!("wavelength band {:?} is empty", a.band)));
            }
            if a.count < 2 {
                return Err(Error::InvalidConfig("need at least 2 frames".into()));
            }
            let shift = [a.shift[0], a.shift[1]];
            let scene = Scene::random_band(seed, a.waves, [a.band[0], a.band[1]]);
            for k in 0..a.count {
                let t = k as f64;
                let mut f = scene.render(a.width, a.height, [shift[0] * t, shift[1] * t])?;
                if let Some(snr) = a.snr {
                    f = add_noise(&f, snr, seed.wrapping_add(1 + k as u64))?;
                }
                if a.raw {
                    run.add(format!("frames/frame_{k:03}.emss"), io::encode_emss(&f.to_grid()));
                } else {
                    run.add(
                        format!("frames/frame_{k:03}.pgm"),
                        io::encode_pgm(f.width(), f.height(), &f.to_bytes()),
                    );
                }
            }
            let truth = DisplacementField::uniform(a.width, a.height, shift).to_csv();
            for k in 0..a.count - 1 {
                run.add(format!("truth/field_{k:03}.csv"), truth.clone().into_bytes());
            }
            run.add_json("truth.json", &json!({"shift": shift, "snr_db": a.snr, "scene": scene}))?;
        }
    }
    Ok(run)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_CONFIG,
        Error::Convergence { .. } => EXIT_CONVERGENCE,
        _ => EXIT_DATA,
    }
}

/// Splices `key = value` lines from the `--config` file into `args` right
/// after the two subcommand words, so flags typed later override them.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let pos = args.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let path = match args[pos].to_string_lossy().strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => match args.get(pos + 1) {
            Some(p) => PathBuf::from(p),
            None => return Ok(args),
        },
    };
    if args.len() < 3 {
        return Ok(args);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let root = Cli::command();
    let leaf = root
        .find_subcommand(args[1].to_string_lossy().as_ref())
        .and_then(|c| c.find_subcommand(args[2].to_string_lossy().as_ref()))
        .ok_or_else(|| "--config needs a subcommand such as `pca fit`".to_string())?;
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), lineno + 1))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key == "config" || key == "out" {
            return Err(format!("{}:{}: `{key}` cannot be set from a config file", path.display(), lineno + 1));
        }
        let arg = leaf
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("{}:{}: unknown key `{key}`", path.display(), lineno + 1))?;
        if arg.get_action().takes_values() {
            tokens.push(OsString::from(format!("--{key}")));
            tokens.push(OsString::from(value));
        } else {
            match value {
                "true" => tokens.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(format!("{}:{}: `{key}` takes true or false", path.display(), lineno + 1)),
            }
        }
    }
    let mut out = args[..3].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&args[3..]);
    Ok(out)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (result, common) = match &cli.command {
        Command::Pca { action: PcaAction::Fit(a) } => (pca_fit(a), &a.common),
        Command::Spca { action: SpcaAction::Fit(a) } => (spca_fit(a), &a.common),
        Command::Kpca { action: KpcaAction::Fit(a) } => (kpca_fit(a), &a.common),
        Command::Kpca { action: KpcaAction::Project(a) } => (kpca_project(a), &a.common),
        Command::Kpca { action: KpcaAction::Ichol(a) } => (kpca_ichol(a), &a.common),
        Command::Motion { action: MotionAction::Estimate(a) } => (motion_estimate(a), &a.common),
        Command::Motion { action: MotionAction::Imc(a) } => (motion_imc(a), &a.common),
        Command::Synth { action: SynthAction::Make(a) } => (synth_make(a), &a.common),
    };
    init_logging(common.verbose);
    match result.and_then(|r| r.flush(&common.out)) {
        Ok(code) => {
            if code == EXIT_CONVERGENCE {
                eprintln!("warning: iteration limit reached before convergence; results flagged in the manifest");
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
