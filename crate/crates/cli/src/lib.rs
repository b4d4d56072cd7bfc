//! The `qr-adapt` command line: factorize matrices, build adapters and run
//! fine-tuning experiments from a TOML config.
//!
//! Exit codes: 0 success, 1 usage, 2 unreadable or invalid input,
//! 3 numerical failure (including any failed experiment cell).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde::Deserialize;

use qrlora::adapters::{Adapter, AdapterSpec, AnyAdapter, Method};
use qrlora::io::{load_matrix, save_adapter, save_matrix};
use qrlora::linalg::{qr_pivoted, reconstruct};
use qrlora::model::{TinyTransformerConfig, TransformerModel};
use qrlora::rank::{select_rank, RankPolicy};
use qrlora::train::{self, CellReport, SyntheticTask, TrainConfig};
use qrlora::Matrix;

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "QR_ADAPT_THREADS";
pub const REPORT_TAUS: [f64; 3] = [0.5, 0.7, 0.8];
/// Round-trip tolerance of `decompose --verify`, scaled by `1 + max|W|`.
pub const VERIFY_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] qrlora::Error),
    #[error("{failed} of {total} cells failed")]
    CellsFailed { failed: usize, total: usize },
    #[error("reconstruction error {error:e} exceeds {bound:e}")]
    Verify { error: f64, bound: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
            CliError::CellsFailed { .. } | CliError::Verify { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qr-adapt", version, about = "Pivoted-QR adapters and fine-tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Tau,
    Size,
    Scope,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Factorize a matrix and write q.qrla, r.qrla and perm.txt.
    Decompose {
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Reload the written factors and check the reconstruction.
        #[arg(long)]
        verify: bool,
    },
    /// Print |diag(R)| and the rank each policy selects.
    RankReport {
        input: PathBuf,
        /// Extra policies, e.g. `fixed:4` or `relmag:0.1`.
        #[arg(long = "policy")]
        policies: Vec<RankPolicy>,
    },
    /// Build one adapter for a matrix and save it as a checkpoint.
    Adapter {
        input: PathBuf,
        #[arg(long, default_value = "qr_lora")]
        method: Method,
        #[arg(long, default_value = "energy:0.5")]
        policy: RankPolicy,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one cell per spec of the config.
    Run(RunArgs),
    /// Train a grid along one axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: Axis,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the model, task and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which of the two written files is echoed to stdout.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

impl RunArgs {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            seed: None,
            out: None,
            format: Format::Csv,
        }
    }
}

fn default_taus() -> Vec<f64> {
    REPORT_TAUS.to_vec()
}

fn default_sizes() -> Vec<usize> {
    vec![2_000, 10_000, 50_000]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: default_taus(),
            sizes: default_sizes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: TinyTransformerConfig,
    pub task: SyntheticTask,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub specs: Vec<AdapterSpec>,
    #[serde(default)]
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Input(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                self.schema
            )));
        }
        let input = |e: qrlora::Error| CliError::Input(e.to_string());
        self.model.validate().map_err(input)?;
        self.task.validate().map_err(input)?;
        self.train.validate().map_err(input)?;
        for spec in &self.specs {
            spec.validate(self.model.n_layers).map_err(input)?;
        }
        let (m, t) = (&self.model, &self.task);
        if m.n_classes != t.n_classes || m.vocab_size < t.vocab_size || m.max_seq_len < t.seq_len {
            return Err(CliError::Input("model and task shapes disagree".into()));
        }
        Ok(())
    }

    /// Uses `seed` for the model, the task and the training run.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.task.seed = seed;
        self.train.seed = seed;
    }
}

/// Worker cap from [`THREADS_ENV`]; unset means rayon's default.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Input(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Paths and rows produced by `run` or `sweep`.
#[derive(Debug)]
pub struct RunOutput {
    pub reports: Vec<CellReport>,
    pub csv_path: PathBuf,
    pub jsonl_path: PathBuf,
}

fn write_atomically(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(qrlora::Error::from)?;
    fs::rename(&tmp, path).map_err(qrlora::Error::from)?;
    Ok(())
}

fn prepare(args: &RunArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.reseed(seed);
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn finish(reports: Vec<CellReport>, out: &Path, format: Format, stdout: &mut dyn Write) -> CliResult<RunOutput> {
    let mut csv = Vec::new();
    train::write_csv(&mut csv, &reports)?;
    let mut jsonl = Vec::new();
    train::write_jsonl(&mut jsonl, &reports)?;
    let csv_path = out.join("results.csv");
    let jsonl_path = out.join("results.jsonl");
    write_atomically(&csv_path, &csv)?;
    write_atomically(&jsonl_path, &jsonl)?;
    stdout
        .write_all(match format {
            Format::Csv => &csv,
            Format::Jsonl => &jsonl,
        })
        .map_err(qrlora::Error::from)?;
    let failed = reports.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        return Err(CliError::CellsFailed {
            failed,
            total: reports.len(),
        });
    }
    Ok(RunOutput {
        reports,
        csv_path,
        jsonl_path,
    })
}

/// Trains one cell per spec and writes `results.csv` and `results.jsonl`.
pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<RunOutput> {
    let (cfg, out) = prepare(args)?;
    let threads = threads_from_env()?;
    let template = TransformerModel::new(cfg.model.clone())?;
    let data = cfg.task.generate()?;
    let cells: Vec<train::Cell> = cfg
        .specs
        .iter()
        .map(|spec| train::Cell {
            spec: spec.clone(),
            config: cfg.train.clone(),
        })
        .collect();
    let reports = train::run_cells(&template, &cfg.task, &data, &cells, threads)?;
    finish(reports, &out, args.format, stdout)
}

/// Trains the grid of one axis: every `τ` of the first QR-LoRA spec, every
/// `(size, spec)` pair, or the layer × projection grid of the first adapter
/// spec.
pub fn cmd_sweep(args: &RunArgs, axis: Axis, stdout: &mut dyn Write) -> CliResult<RunOutput> {
    let (cfg, out) = prepare(args)?;
    let threads = threads_from_env()?;
    let template = TransformerModel::new(cfg.model.clone())?;
    let data = cfg.task.generate()?;
    let cells = match axis {
        Axis::Tau => {
            let base = cfg
                .specs
                .iter()
                .find(|s| s.method == Method::QrLora)
                .ok_or_else(|| CliError::Input("a tau sweep needs a qr_lora spec".into()))?;
            train::tau_cells(base, &cfg.sweep.taus, &cfg.train).map_err(|e| CliError::Input(e.to_string()))?
        }
        Axis::Size => train::size_cells(&cfg.sweep.sizes, &cfg.specs, &cfg.train, data.train.len())
            .map_err(|e| CliError::Input(e.to_string()))?,
        Axis::Scope => {
            let base = cfg
                .specs
                .iter()
                .find(|s| s.method != Method::FullFt)
                .ok_or_else(|| CliError::Input("a scope sweep needs an adapter spec".into()))?;
            train::scope_cells(base, &cfg.train)
        }
    };
    let reports = train::run_cells(&template, &cfg.task, &data, &cells, threads)?;
    finish(reports, &out, args.format, stdout)
}

fn format_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(", ")
}

fn rank_table(diag: &[f64], extra: &[RankPolicy], stdout: &mut dyn Write) -> CliResult<()> {
    let mut policies = Vec::new();
    for &tau in &REPORT_TAUS {
        policies.push(RankPolicy::Energy(tau));
        policies.push(RankPolicy::AbsCumulative(tau));
        policies.push(RankPolicy::RelativeMagnitude(tau));
    }
    policies.extend_from_slice(extra);
    let io = |e: std::io::Error| CliError::Core(e.into());
    writeln!(stdout, "policy\trank").map_err(io)?;
    for p in policies {
        let r = select_rank(diag, p)?;
        writeln!(stdout, "{p}\t{r}").map_err(io)?;
    }
    Ok(())
}

const DIAG_HEAD: usize = 8;

pub fn cmd_decompose(input: &Path, out: &Path, verify: bool, stdout: &mut dyn Write) -> CliResult<()> {
    let w = load_matrix(input)?;
    let f = qr_pivoted(&w)?;
    fs::create_dir_all(out).map_err(qrlora::Error::from)?;
    save_matrix(&out.join("q.qrla"), &f.q)?;
    save_matrix(&out.join("r.qrla"), &f.r)?;
    let perm_text: Vec<String> = f.perm.iter().map(usize::to_string).collect();
    fs::write(out.join("perm.txt"), perm_text.join(",") + "\n").map_err(qrlora::Error::from)?;

    let diag = f.diag_abs();
    let io = |e: std::io::Error| CliError::Core(e.into());
    writeln!(stdout, "shape\t{}x{}", w.rows(), w.cols()).map_err(io)?;
    writeln!(
        stdout,
        "diag\t[{}]{}",
        format_values(&diag[..diag.len().min(DIAG_HEAD)]),
        if diag.len() > DIAG_HEAD { " ..." } else { "" }
    )
    .map_err(io)?;
    rank_table(&diag, &[], stdout)?;

    if verify {
        let q = load_matrix(&out.join("q.qrla"))?;
        let r = load_matrix(&out.join("r.qrla"))?;
        let perm = parse_perm(&fs::read_to_string(out.join("perm.txt")).map_err(qrlora::Error::from)?)?;
        let back = reconstruct(&qrlora::PivotedQr { q, r, perm });
        let error = back.max_abs_diff(&w)?;
        let bound = VERIFY_TOL * (1.0 + w.max_abs());
        writeln!(stdout, "verify\t{error:e}").map_err(io)?;
        if !(error <= bound) {
            return Err(CliError::Verify { error, bound });
        }
    }
    Ok(())
}

fn parse_perm(text: &str) -> CliResult<Vec<usize>> {
    text.trim()
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::Input(format!("bad permutation entry `{t}`")))
        })
        .collect()
}

pub fn cmd_rank_report(input: &Path, policies: &[RankPolicy], stdout: &mut dyn Write) -> CliResult<()> {
    let w = load_matrix(input)?;
    let diag = qr_pivoted(&w)?.diag_abs();
    writeln!(stdout, "diag\t[{}]", format_values(&diag)).map_err(|e| CliError::Core(e.into()))?;
    rank_table(&diag, policies, stdout)
}

pub fn cmd_adapter(
    input: &Path,
    spec: &AdapterSpec,
    seed: u64,
    out: &Path,
    stdout: &mut dyn Write,
) -> CliResult<AnyAdapter> {
    let w0: Matrix = load_matrix(input)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let adapter = AnyAdapter::build(spec, &w0, &mut rng)?;
    save_adapter(out, spec, &adapter)?;
    writeln!(
        stdout,
        "{}\ttrainable {}\t{}",
        spec.label(),
        adapter.trainable_count(),
        out.display()
    )
    .map_err(|e| CliError::Core(e.into()))?;
    Ok(adapter)
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Decompose { input, out, verify } => cmd_decompose(&input, &out, verify, stdout),
        Command::RankReport { input, policies } => cmd_rank_report(&input, &policies, stdout),
        Command::Adapter {
            input,
            method,
            policy,
            rank,
            top_k,
            alpha,
            seed,
            out,
        } => {
            let spec = AdapterSpec {
                method,
                policy,
                rank,
                alpha,
                top_k,
                ..AdapterSpec::full_ft()
            };
            spec.validate(1).map_err(|e| CliError::Usage(e.to_string()))?;
            cmd_adapter(&input, &spec, seed, &out, stdout).map(|_| ())
        }
        Command::Run(args) => cmd_run(&args, stdout).map(|_| ()),
        Command::Sweep { run, axis } => cmd_sweep(&run, axis, stdout).map(|_| ()),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return 1;
            }
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
