//! Per-command experiment configurations.
//!
//! Config files are flat JSON objects. Missing keys take the defaults below,
//! unknown keys are rejected, and command-line flags are applied on top.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ikl_core::align::AlignTrainConfig;
use ikl_core::rks::{Method, PipelineConfig, SamplerInit, SolverOptions, Stage1Monitor};

use crate::CliError;

/// Reads a flat JSON config, rejecting keys that `T::default()` does not serialize.
pub fn load_config<T>(path: Option<&Path>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Some(path) = path else {
        return Ok(T::default());
    };
    let file = File::open(path).map_err(|e| CliError::io(format!("opening config {}", path.display()), e))?;
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(value)
}

pub fn parse_config<T>(value: serde_json::Value) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let serde_json::Value::Object(map) = &value else {
        return Err(CliError::Config("config must be a JSON object".into()));
    };
    let known = known_keys::<T>()?;
    let unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !known.contains(*k)).collect();
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn known_keys<T: Serialize + Default>() -> Result<BTreeSet<String>, CliError> {
    match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(map)) => Ok(map.into_iter().map(|(k, _)| k).collect()),
        _ => Err(CliError::Config("config type does not serialize to an object".into())),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Stage-1 and stage-2 settings shared by the classification commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineKnobs {
    /// Stage-2 random feature counts `M`.
    pub features: Vec<usize>,
    pub rff_bandwidth: f64,
    pub ikl_hidden: Vec<usize>,
    pub ikl_init: SamplerInit,
    pub ikl_jitter: f64,
    pub sm_components: usize,
    pub align_batch_size: usize,
    /// Frequencies per alignment step.
    pub align_m: usize,
    pub align_lr: f64,
    pub align_max_iters: usize,
    pub align_eval_every: usize,
    pub align_patience: usize,
    pub stage1_monitor: Stage1Monitor,
    pub monitor_lambda: f64,
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub standardize: bool,
    pub solver_grad_tol: f64,
    pub solver_max_iters: usize,
}

impl Default for PipelineKnobs {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let a = AlignTrainConfig::default();
        Self {
            features: p.feature_counts,
            rff_bandwidth: p.rff_bandwidth,
            ikl_hidden: p.ikl_hidden,
            ikl_init: p.ikl_init,
            ikl_jitter: p.ikl_jitter,
            sm_components: p.sm_components,
            align_batch_size: a.batch_size,
            align_m: a.m,
            align_lr: 1e-3,
            align_max_iters: a.max_iters,
            align_eval_every: a.eval_every,
            align_patience: a.patience,
            stage1_monitor: p.stage1_monitor,
            monitor_lambda: p.monitor_lambda,
            lambdas: p.lambdas,
            folds: p.folds,
            standardize: p.standardize,
            solver_grad_tol: p.solver.grad_tol,
            solver_max_iters: p.solver.max_iters,
        }
    }
}

impl PipelineKnobs {
    pub fn pipeline(&self, method: Method, seed: u64) -> PipelineConfig {
        PipelineConfig {
            method,
            feature_counts: self.features.clone(),
            rff_bandwidth: self.rff_bandwidth,
            ikl_hidden: self.ikl_hidden.clone(),
            ikl_init: self.ikl_init,
            ikl_jitter: self.ikl_jitter,
            sm_components: self.sm_components,
            align: AlignTrainConfig {
                batch_size: self.align_batch_size,
                m: self.align_m,
                lr: self.align_lr,
                max_iters: self.align_max_iters,
                eval_every: self.align_eval_every,
                patience: self.align_patience,
                ..AlignTrainConfig::default()
            },
            stage1_monitor: self.stage1_monitor,
            monitor_lambda: self.monitor_lambda,
            lambdas: self.lambdas.clone(),
            folds: self.folds,
            standardize: self.standardize,
            solver: SolverOptions {
                grad_tol: self.solver_grad_tol,
                max_iters: self.solver_max_iters,
                ..SolverOptions::default()
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.features.is_empty() || self.features.contains(&0) {
            return Err(invalid("features must be a nonempty list of positive counts"));
        }
        if self.lambdas.is_empty() || self.folds < 2 {
            return Err(invalid("need at least one λ and two folds"));
        }
        if !(self.rff_bandwidth > 0.0) {
            return Err(invalid("rff_bandwidth must be positive"));
        }
        self.pipeline(Method::Ikl, 0)
            .align
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CheckKernel {
    /// Gaussian mixture with the configured bandwidths.
    Gaussian,
    /// Implicit sampler with `h̃ = id`, compared against the unit Gaussian kernel.
    IdentitySampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCheckConfig {
    pub kernel: CheckKernel,
    pub bandwidths: Vec<f64>,
    pub m: usize,
    pub pairs: usize,
    pub dim: usize,
    /// Offsets `δ` have length uniform in `[0, max_offset · max σ]`; the first pair has `δ = 0`.
    pub max_offset: f64,
    pub seed: u64,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self {
            kernel: CheckKernel::Gaussian,
            bandwidths: vec![1.0],
            m: 4096,
            pairs: 100,
            dim: 16,
            max_offset: 3.0,
            seed: 0,
        }
    }
}

impl KernelCheckConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.m == 0 || self.pairs == 0 || self.dim == 0 {
            return Err(invalid("m, pairs and dim must be positive"));
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|b| !(*b > 0.0)) {
            return Err(invalid("bandwidths must be a nonempty list of positive values"));
        }
        if !(self.max_offset >= 0.0) {
            return Err(invalid("max_offset must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthBenchmarkConfig {
    pub d_list: Vec<usize>,
    pub methods: Vec<Method>,
    /// Seeds `seed, seed + 1, …`.
    pub n_seeds: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub pipeline: PipelineKnobs,
}

impl Default for SynthBenchmarkConfig {
    fn default() -> Self {
        Self {
            d_list: vec![2, 4, 8, 12, 16, 20],
            methods: vec![Method::Rff, Method::Ikl],
            n_seeds: 5,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            seed: 0,
            pipeline: PipelineKnobs::default(),
        }
    }
}

impl SynthBenchmarkConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Usage("synth-benchmark needs at least one method".into()));
        }
        if self.d_list.is_empty() || self.d_list.contains(&0) {
            return Err(invalid("d_list must be a nonempty list of positive dimensions"));
        }
        if self.n_seeds == 0 || self.n_train < 2 || self.n_val < 1 || self.n_test < 1 {
            return Err(invalid(
                "n_seeds, n_val, n_test must be positive and n_train at least 2",
            ));
        }
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RksEvalConfig {
    pub method: Method,
    /// Dimension of the synthetic data used when no CSV files are given.
    pub d: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_csv: Option<String>,
    pub val_csv: Option<String>,
    pub test_csv: Option<String>,
    pub header: bool,
    pub seed: u64,
    #[serde(flatten)]
    pub pipeline: PipelineKnobs,
}

impl Default for RksEvalConfig {
    fn default() -> Self {
        Self {
            method: Method::Ikl,
            d: 2,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            train_csv: None,
            val_csv: None,
            test_csv: None,
            header: false,
            seed: 0,
            pipeline: PipelineKnobs::default(),
        }
    }
}

impl RksEvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let given = [&self.train_csv, &self.val_csv, &self.test_csv]
            .iter()
            .filter(|p| p.is_some())
            .count();
        if given != 0 && given != 3 {
            return Err(invalid("give all of train_csv, val_csv and test_csv, or none"));
        }
        if given == 0 && (self.d == 0 || self.n_train < 2 || self.n_val == 0 || self.n_test == 0) {
            return Err(invalid(
                "synthetic data needs d, n_val, n_test positive and n_train at least 2",
            ));
        }
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplerChoice {
    /// `h̃ = id`: the unit Gaussian kernel.
    Identity,
    /// Glorot-initialised network.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub m_list: Vec<usize>,
    pub repeats: usize,
    pub m_ref: usize,
    pub delta: f64,
    pub n: usize,
    pub d: usize,
    pub sampler: SamplerChoice,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            m_list: vec![16, 64, 256, 1024],
            repeats: 50,
            m_ref: 16384,
            delta: 0.05,
            n: 256,
            d: 4,
            sampler: SamplerChoice::Random,
            hidden: vec![16, 16],
            seed: 0,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats == 0 || self.m_ref == 0 || self.d == 0 || self.n < 2 {
            return Err(invalid("repeats, m_ref, d must be positive and n at least 2"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        if self.m_list.is_empty() || self.m_list.contains(&0) || self.m_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("m_list must be strictly ascending positive counts"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignTrainCmdConfig {
    /// Dimension of the synthetic data used when no CSV file is given.
    pub d: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub data_csv: Option<String>,
    pub header: bool,
    /// Fraction of CSV rows held out for validation.
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub m: usize,
    pub lr: f64,
    pub max_iters: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub probe_size: usize,
    pub probe_m: usize,
    pub seed: u64,
}

impl Default for AlignTrainCmdConfig {
    fn default() -> Self {
        let a = AlignTrainConfig::default();
        Self {
            d: 2,
            n_train: 2000,
            n_val: 500,
            data_csv: None,
            header: false,
            val_fraction: 0.2,
            hidden: vec![16, 16],
            batch_size: a.batch_size,
            m: a.m,
            lr: 1e-3,
            max_iters: a.max_iters,
            eval_every: a.eval_every,
            patience: a.patience,
            probe_size: a.probe_size,
            probe_m: a.probe_m,
            seed: 0,
        }
    }
}

impl AlignTrainCmdConfig {
    pub fn align(&self, seed: u64) -> AlignTrainConfig {
        AlignTrainConfig {
            batch_size: self.batch_size,
            m: self.m,
            lr: self.lr,
            max_iters: self.max_iters,
            eval_every: self.eval_every,
            patience: self.patience,
            probe_size: self.probe_size,
            probe_m: self.probe_m,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data_csv.is_none() && (self.d == 0 || self.n_train < 2 || self.n_val < 2) {
            return Err(invalid("synthetic data needs d positive and n_train, n_val at least 2"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("val_fraction must lie in (0, 1)"));
        }
        self.align(self.seed).validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Labels `sign(‖x‖ − √d)` for `x ~ N(0, I_d)`.
    NormSphere,
    /// Unlabelled 2D mixture of Gaussians on a circle.
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub kind: DataKind,
    pub n: usize,
    pub d: usize,
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::NormSphere,
            n: 1000,
            d: 2,
            modes: 8,
            radius: 2.0,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl GenDataConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n == 0 || self.d == 0 || self.modes == 0 {
            return Err(invalid("n, d and modes must be positive"));
        }
        if !(self.sigma >= 0.0) || !self.radius.is_finite() {
            return Err(invalid("sigma must be non-negative and radius finite"));
        }
        Ok(())
    }
}
