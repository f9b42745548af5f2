//! The `gmcr` command-line tool.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gmcr::baselines::Method;
use gmcr::decontam::ContaminationConfig;
use gmcr::synth::SynthConfig;
use gmcr::{GmcrError, HyperParams, ModelConfig};

pub const EXIT_ARGUMENT: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_PARSE: i32 = 5;

/// Process exit code for an error.
pub fn exit_code(e: &GmcrError) -> i32 {
    match e {
        GmcrError::Argument(_) => EXIT_ARGUMENT,
        GmcrError::Io { .. } => EXIT_IO,
        GmcrError::Numeric { .. } | GmcrError::UndefinedR2 => EXIT_NUMERIC,
        GmcrError::Parse { .. } | GmcrError::Json(_) => EXIT_PARSE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "gmcr", version, about = "Sparse energy-based generative curve resolution")]
pub struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to $GMCR_OUT/<command>, or gmcr-out/<command>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset bundle or contamination fixture.
    Synth(SynthArgs),
    /// Train a solver (or a classical baseline) on a dataset.
    Fit(FitArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare methods over seeded replicates.
    Bench(BenchArgs),
    /// Remove contamination from polluted chromatograms.
    Clean(CleanArgs),
    /// Summarize the outputs in a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub n_true: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Dataset size as a multiple of the true component count.
    #[arg(long)]
    pub multiple: Option<usize>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// Skip the noise step.
    #[arg(long)]
    pub no_noise: bool,
    #[arg(long)]
    pub conc_low: Option<f64>,
    #[arg(long)]
    pub conc_high: Option<f64>,
    #[arg(long)]
    pub active_min: Option<usize>,
    #[arg(long)]
    pub active_max: Option<usize>,
}

impl SynthFlags {
    pub fn apply(&self, cfg: &mut SynthConfig) {
        set(&mut cfg.n_true, self.n_true);
        set(&mut cfg.d, self.d);
        set(&mut cfg.sparsity_ratio, self.sparsity);
        set(&mut cfg.dataset_multiple, self.multiple);
        if let Some(s) = self.snr_db {
            cfg.snr_db = Some(s);
        }
        if self.no_noise {
            cfg.snr_db = None;
        }
        set(&mut cfg.conc_low, self.conc_low);
        set(&mut cfg.conc_high, self.conc_high);
        set(&mut cfg.active_min, self.active_min);
        set(&mut cfg.active_max, self.active_max);
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthFlags,
    /// Write the chromatogram contamination fixture instead of a mixture bundle.
    #[arg(long)]
    pub contamination: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Component budget K.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Hidden width of both predictors.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Training iterations (or baseline iterations with --method).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Weight of the component-usage term.
    #[arg(long)]
    pub lambda_prime: Option<f64>,
    /// Weight of the gate-energy terms.
    #[arg(long)]
    pub lambda_e: Option<f64>,
    /// Weight of the gate-entropy term.
    #[arg(long)]
    pub lambda_amb: Option<f64>,
    /// Mixtures per training batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Iterations between checkpoints.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initial relaxation temperature.
    #[arg(long)]
    pub tau_start: Option<f64>,
    /// Final relaxation temperature.
    #[arg(long)]
    pub tau_end: Option<f64>,
    /// Usage-probability threshold for pruning.
    #[arg(long)]
    pub tau_use: Option<f64>,
}

impl TrainFlags {
    pub fn apply(&self, model: &mut ModelConfig, hp: &mut HyperParams) {
        set(&mut model.budget, self.budget);
        set(&mut model.hidden, self.hidden);
        set(&mut hp.max_iters, self.iters);
        set(&mut hp.lambda_prime, self.lambda_prime);
        set(&mut hp.lambda_e, self.lambda_e);
        set(&mut hp.lambda_amb, self.lambda_amb);
        set(&mut hp.batch_size, self.batch_size);
        set(&mut hp.checkpoint_interval, self.checkpoint_interval);
        set(&mut hp.adam.learning_rate, self.lr);
        set(&mut hp.tau_start, self.tau_start);
        set(&mut hp.tau_end, self.tau_end);
        set(&mut hp.tau_use, self.tau_use);
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset bundle directory, or a CSV file of mixtures (one per row).
    #[arg(long)]
    pub data: PathBuf,
    /// The CSV file has a header line.
    #[arg(long)]
    pub header: bool,
    /// sparse, nmf or mcr-als.
    #[arg(long, default_value = "sparse")]
    pub method: Method,
    /// Rank of a classical baseline; defaults to the bundle's true component count.
    #[arg(long)]
    pub rank: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Solver checkpoint or baseline factors file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset bundle directory or CSV file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated methods: sparse, nmf, mcr-als.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub baseline_iters: Option<usize>,
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Manifest JSON listing runs and their clean/polluted labels.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub window_seconds: Option<f64>,
    /// Comma-separated m/z channels for the reduction report.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<u32>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by another command.
    pub run: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Contamination fixture settings after config and flag overrides.
pub fn contamination_config(file: Option<ContaminationConfig>, flags: &SynthFlags, seed: u64) -> ContaminationConfig {
    let mut cfg = file.unwrap_or_default();
    set(&mut cfg.channels, flags.d);
    set(&mut cfg.n_clean_components, flags.n_true);
    set(&mut cfg.sparsity_ratio, flags.sparsity);
    set(&mut cfg.snr_db, flags.snr_db);
    cfg.seed = seed;
    cfg
}

/// Parses `args` and runs the command.
pub fn run<I, T>(args: I) -> gmcr::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| GmcrError::argument(e.to_string()))?;
    commands::dispatch(cli).map(|_| ())
}
