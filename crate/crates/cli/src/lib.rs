//! Command-line driver for the kernel-learning experiments.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies flag
//! overrides, writes the resolved config and its artifacts to `--out`, and
//! returns a JSON summary.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use ikl_core::gantoy::{GanConfig, GanKernel};
use ikl_core::rks::Method;

use commands::RunDir;
use config::{
    load_config, AlignTrainCmdConfig, CheckKernel, ConsistencyConfig, DataKind, GenDataConfig, KernelCheckConfig,
    RksEvalConfig, SamplerChoice, SynthBenchmarkConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] ikl_core::Error),
}

impl CliError {
    pub fn io(context: String, source: std::io::Error) -> Self {
        Self::Io { context, source }
    }

    pub fn kind(&self) -> &'static str {
        use ikl_core::Error as E;
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Csv(_) => "csv",
            Self::Core(e) => match e {
                E::Divergence { .. } => "divergence",
                E::Parse { .. } | E::Json(_) => "parse",
                E::Io(_) => "io",
                E::Invalid(_) => "invalid",
                _ => "numerics",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

#[derive(Debug, Parser)]
#[command(name = "ikl", version, about = "Implicit kernel learning experiments")]
pub struct Cli {
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare Monte-Carlo kernel estimates with the closed form.
    KernelCheck(KernelCheckArgs),
    /// Classification error on the norm-sphere task across dimensions.
    SynthBenchmark(SynthBenchmarkArgs),
    /// Train an MMD GAN on the ring of Gaussians.
    GanToy(GanToyArgs),
    /// Alignment estimate against its large-`m` reference.
    Consistency(ConsistencyArgs),
    /// Train an implicit sampler by kernel alignment.
    AlignTrain(AlignTrainArgs),
    /// Two-stage random-feature classification.
    RksEval(RksEvalArgs),
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::KernelCheck(_) => "kernel-check",
            Command::SynthBenchmark(_) => "synth-benchmark",
            Command::GanToy(_) => "gan-toy",
            Command::Consistency(_) => "consistency",
            Command::AlignTrain(_) => "align-train",
            Command::RksEval(_) => "rks-eval",
            Command::GenData(_) => "gen-data",
        }
    }
}

#[derive(Debug, Args)]
pub struct KernelCheckArgs {
    #[arg(long, value_enum)]
    pub kernel: Option<CheckKernel>,
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthBenchmarkArgs {
    #[arg(long, value_delimiter = ',')]
    pub d_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GanToyArgs {
    #[arg(long)]
    pub kernel: Option<GanKernel>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Drop the second-moment penalty on the learned frequencies.
    #[arg(long)]
    pub no_variance_constraint: bool,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long, value_delimiter = ',')]
    pub m_list: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerChoice>,
}

#[derive(Debug, Args)]
pub struct AlignTrainArgs {
    /// Labeled CSV (features then a ±1 label).
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub header: bool,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Keep wall-clock times in the log (output is then not reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct RksEvalArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub val: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub header: bool,
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: Option<DataKind>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

/// What a successful run prints on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: &'static str,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub result: Value,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

fn start<T: Serialize>(out: &Path, cfg: &T) -> Result<RunDir, CliError> {
    let mut dir = RunDir::create(out)?;
    dir.json("config.json", cfg)?;
    Ok(dir)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    let cfg_path = cli.config.as_deref();
    let (dir, result) = match &cli.command {
        Command::KernelCheck(a) => {
            let mut cfg: KernelCheckConfig = load_config(cfg_path)?;
            set(&mut cfg.kernel, &a.kernel);
            set(&mut cfg.bandwidths, &a.bandwidths);
            set(&mut cfg.m, &a.m);
            set(&mut cfg.pairs, &a.pairs);
            set(&mut cfg.dim, &a.dim);
            set(&mut cfg.seed, &cli.seed);
            cfg.validate()?;
            let mut dir = start(&out, &cfg)?;
            let report = commands::kernel_check(&cfg, &mut dir)?;
            (dir, to_value(&report)?)
        }
        Command::SynthBenchmark(a) => {
            let mut cfg: SynthBenchmarkConfig = load_config(cfg_path)?;
            set(&mut cfg.d_list, &a.d_list);
            set(&mut cfg.methods, &a.methods);
            set(&mut cfg.n_seeds, &a.n_seeds);
            set(&mut cfg.pipeline.features, &a.features);
            set(&mut cfg.seed, &cli.seed);
            cfg.validate()?;
            let mut dir = start(&out, &cfg)?;
            let entries = commands::synth_benchmark(&cfg, &mut dir)?;
            (dir, to_value(&commands::summarize(&entries))?)
        }
        Command::GanToy(a) => {
            let mut cfg: GanConfig = load_config(cfg_path)?;
            set(&mut cfg.kernel, &a.kernel);
            set(&mut cfg.iters, &a.iters);
            if a.no_variance_constraint {
                cfg.lambda_h = 0.0;
            }
            set(&mut cfg.seed, &cli.seed);
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let mut dir = start(&out, &cfg)?;
            let run = commands::gan_toy(&cfg, &mut dir)?;
            (dir, to_value(&run.state.log.last())?)
        }
        Command::Consistency(a) => {
            let mut cfg: ConsistencyConfig = load_config(cfg_path)?;
            set(&mut cfg.m_list, &a.m_list);
            set(&mut cfg.repeats, &a.repeats);
            set(&mut cfg.sampler, &a.sampler);
            set(&mut cfg.seed, &cli.seed);
            cfg.validate()?;
            let mut dir = start(&out, &cfg)?;
            let rows = commands::consistency(&cfg, &mut dir)?;
            (dir, to_value(&rows)?)
        }
        Command::AlignTrain(a) => {
            let mut cfg: AlignTrainCmdConfig = load_config(cfg_path)?;
            if a.data.is_some() {
                cfg.data_csv = a.data.clone();
            }
            cfg.header |= a.header;
            set(&mut cfg.max_iters, &a.max_iters);
            set(&mut cfg.seed, &cli.seed);
            cfg.validate()?;
            let mut dir = start(&out, &cfg)?;
            let log = commands::align_train(&cfg, a.timing, &mut dir)?;
            (
                dir,
                json!({ "iters_run": log.iters_run, "stopped_early": log.stopped_early, "best_iter": log.best_iter }),
            )
        }
        Command::RksEval(a) => {
            let mut cfg: RksEvalConfig = load_config(cfg_path)?;
            set(&mut cfg.method, &a.method);
            if a.train.is_some() || a.val.is_some() || a.test.is_some() {
                cfg.train_csv = a.train.clone();
                cfg.val_csv = a.val.clone();
                cfg.test_csv = a.test.clone();
            }
            cfg.header |= a.header;
            set(&mut cfg.pipeline.features, &a.features);
            set(&mut cfg.seed, &cli.seed);
            cfg.validate()?;
            let mut dir = start(&out, &cfg)?;
            let entries = commands::rks_eval(&cfg, &mut dir)?;
            (dir, to_value(&entries)?)
        }
        Command::GenData(a) => {
            let mut cfg: GenDataConfig = load_config(cfg_path)?;
            set(&mut cfg.kind, &a.kind);
            set(&mut cfg.n, &a.n);
            set(&mut cfg.d, &a.d);
            set(&mut cfg.seed, &cli.seed);
            cfg.validate()?;
            let mut dir = start(&out, &cfg)?;
            commands::gen_data(&cfg, &mut dir)?;
            (dir, json!({ "rows": cfg.n }))
        }
    };
    Ok(RunSummary {
        command: name,
        out_dir: dir.dir().to_path_buf(),
        files: dir.files().to_vec(),
        result,
    })
}
