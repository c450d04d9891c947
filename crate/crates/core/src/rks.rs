//! Random kitchen sinks: a fixed random-feature transform followed by an
//! L2-regularised logistic regression solved to optimality.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::align::{train_alignment, train_alignment_monitored, AlignLog, AlignTrainConfig};
use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::features::{features_from_projections, fourier_features, project, FeatureMap};
use crate::numerics::{dot, DenseMatrix, Prng};
use crate::spectral::{FrequencyBatch, KernelSpec, SpectralMixture, SpectralSampler, SpectralSource};

/// Draws `m_features` frequencies from `spec` once and embeds `x`.
pub fn transform_dataset(x: &DenseMatrix, spec: &KernelSpec, m_features: usize, prng: &mut Prng) -> Result<FeatureMap> {
    if m_features == 0 {
        return Err(Error::Invalid("need at least one random feature".into()));
    }
    let batch = Arc::new(spec.sample_frequencies(prng, m_features, x.cols())?);
    fourier_features(x, &batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
}

impl LinearModel {
    pub fn decision(&self, phi: &DenseMatrix) -> Result<Vec<f64>> {
        ensure_dim("model width", self.w.len(), phi.cols())?;
        Ok(phi.iter_rows().map(|r| dot(r, &self.w) + self.bias).collect())
    }

    /// Labels `sign(wᵀφ + b)` with `sign(0) = +1`.
    pub fn predict(&self, phi: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self
            .decision(phi)?
            .into_iter()
            .map(|z| if z >= 0.0 { 1.0 } else { -1.0 })
            .collect())
    }
}

/// A trained stage-2 classifier together with the frequencies it was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RksModel {
    pub frequencies: FrequencyBatch,
    pub linear: LinearModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 5000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: LinearModel,
    pub objective: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `(λ/2)‖w‖² + mean log(1 + exp(−y(wᵀφ + b)))` over `theta = [w, b]`, with gradient.
pub fn logistic_objective(phi: &DenseMatrix, y: &[f64], lambda: f64, theta: &[f64]) -> (f64, Vec<f64>) {
    let p = phi.cols();
    let (w, b) = (&theta[..p], theta[p]);
    let n = y.len() as f64;
    let mut grad = vec![0.0; p + 1];
    let mut loss = 0.0;
    for (row, &yi) in phi.iter_rows().zip(y) {
        let margin = yi * (dot(row, w) + b);
        loss += softplus(-margin);
        let r = -yi * sigmoid(-margin) / n;
        for (g, &x) in grad[..p].iter_mut().zip(row) {
            *g += r * x;
        }
        grad[p] += r;
    }
    for (g, &wi) in grad[..p].iter_mut().zip(w) {
        *g += lambda * wi;
    }
    (loss / n + 0.5 * lambda * dot(w, w), grad)
}

fn check_fit_inputs(phi: &DenseMatrix, y: &[f64], lambda: f64) -> Result<()> {
    ensure_dim("labels per row", phi.rows(), y.len())?;
    if y.len() < 2 {
        return Err(Error::SampleSize { min: 2, got: y.len() });
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Invalid("logistic labels must be ±1".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid("λ must be positive".into()));
    }
    Ok(())
}

/// Fits the logistic model from `w = 0, b = 0`.
pub fn fit_logistic(phi: &DenseMatrix, y: &[f64], lambda: f64, opts: &SolverOptions) -> Result<FitResult> {
    fit_logistic_from(phi, y, lambda, &vec![0.0; phi.cols() + 1], opts)
}

/// Fits the logistic model with L-BFGS and a backtracking Armijo line search,
/// starting from `init = [w, b]`.
pub fn fit_logistic_from(
    phi: &DenseMatrix,
    y: &[f64],
    lambda: f64,
    init: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult> {
    check_fit_inputs(phi, y, lambda)?;
    ensure_dim("initial parameters", phi.cols() + 1, init.len())?;
    let f = |t: &[f64]| logistic_objective(phi, y, lambda, t);
    let mut x = init.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut hist_s: Vec<Vec<f64>> = Vec::new();
    let mut hist_y: Vec<Vec<f64>> = Vec::new();
    let mut iters = 0;
    let mut gnorm = dot(&g, &g).sqrt();

    while gnorm > opts.grad_tol && iters < opts.max_iters {
        iters += 1;
        let mut dir = two_loop(&g, &hist_s, &hist_y);
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            hist_s.clear();
            hist_y.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if hist_s.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let accepted = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx + 1e-4 * step * slope {
                break Some((cand, fc, gc));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((xn, fnew, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &yv) > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if hist_s.len() == opts.memory {
                hist_s.remove(0);
                hist_y.remove(0);
            }
            hist_s.push(s);
            hist_y.push(yv);
        }
        x = xn;
        fx = fnew;
        g = gn;
        gnorm = dot(&g, &g).sqrt();
    }
    let converged = gnorm <= opts.grad_tol;
    if !converged {
        log::warn!("logistic solver stopped after {iters} iterations with gradient norm {gnorm:e}");
    }
    let p = phi.cols();
    Ok(FitResult {
        model: LinearModel {
            w: x[..p].to_vec(),
            bias: x[p],
            lambda,
        },
        objective: fx,
        grad_norm: gnorm,
        iters,
        converged,
    })
}

fn two_loop(g: &[f64], hist_s: &[Vec<f64>], hist_y: &[Vec<f64>]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let k = hist_s.len();
    let mut alpha = vec![0.0; k];
    for i in (0..k).rev() {
        let rho = 1.0 / dot(&hist_y[i], &hist_s[i]);
        alpha[i] = rho * dot(&hist_s[i], &q);
        for (qv, yv) in q.iter_mut().zip(&hist_y[i]) {
            *qv -= alpha[i] * yv;
        }
    }
    if let (Some(s), Some(y)) = (hist_s.last(), hist_y.last()) {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..k {
        let rho = 1.0 / dot(&hist_y[i], &hist_s[i]);
        let beta = rho * dot(&hist_y[i], &q);
        for (qv, sv) in q.iter_mut().zip(&hist_s[i]) {
            *qv += (alpha[i] - beta) * sv;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Fraction of misclassified rows.
pub fn evaluate(model: &LinearModel, phi: &DenseMatrix, y: &[f64]) -> Result<f64> {
    ensure_dim("labels per row", phi.rows(), y.len())?;
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let wrong = model.predict(phi)?.iter().zip(y).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / y.len() as f64)
}

/// Mean validation error per λ over `folds` folds, and the chosen λ (lowest
/// error, ties to the larger λ).
pub fn cross_validate(
    phi: &DenseMatrix,
    y: &[f64],
    lambdas: &[f64],
    folds: usize,
    prng: &mut Prng,
    opts: &SolverOptions,
) -> Result<(f64, Vec<f64>)> {
    ensure_dim("labels per row", phi.rows(), y.len())?;
    if lambdas.is_empty() {
        return Err(Error::Invalid("empty λ grid".into()));
    }
    if folds < 2 || y.len() < 2 * folds {
        return Err(Error::Invalid(format!(
            "cannot split {} rows into {folds} folds",
            y.len()
        )));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    prng.shuffle(&mut order);
    let mut errors = vec![0.0; lambdas.len()];
    for k in 0..folds {
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % folds == k {
                va.push(i);
            } else {
                tr.push(i);
            }
        }
        let (phi_tr, phi_va) = (phi.select_rows(&tr), phi.select_rows(&va));
        let y_tr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
        let y_va: Vec<f64> = va.iter().map(|&i| y[i]).collect();
        for (e, &lam) in errors.iter_mut().zip(lambdas) {
            let fit = fit_logistic(&phi_tr, &y_tr, lam, opts)?;
            *e += evaluate(&fit.model, &phi_va, &y_va)? / folds as f64;
        }
    }
    let mut best = 0;
    for i in 1..lambdas.len() {
        let better = errors[i] < errors[best] || (errors[i] == errors[best] && lambdas[i] > lambdas[best]);
        if better {
            best = i;
        }
    }
    Ok((lambdas[best], errors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Fixed Gaussian kernel, no stage 1.
    Rff,
    /// Implicit sampler trained by alignment.
    Ikl,
    /// Spectral mixture trained by alignment.
    Sm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rff => "rff",
            Method::Ikl => "ikl",
            Method::Sm => "sm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rff" => Ok(Method::Rff),
            "ikl" => Ok(Method::Ikl),
            "sm" => Ok(Method::Sm),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Quantity watched on the validation split for early stopping in stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Monitor {
    /// Kernel alignment on validation data.
    Alignment,
    /// Error of a stage-2 classifier (fixed λ) fit on the training split.
    ValidationError,
}

/// Starting point of the implicit sampler before alignment training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerInit {
    /// Glorot-uniform weights, zero biases.
    Random,
    /// Identity map plus a small random perturbation, scaled to the RFF bandwidth.
    NearIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    /// Stage-2 feature counts `M`.
    pub feature_counts: Vec<usize>,
    /// Bandwidth of the fixed Gaussian kernel (and of the implicit sampler's starting point).
    pub rff_bandwidth: f64,
    pub ikl_hidden: Vec<usize>,
    pub ikl_init: SamplerInit,
    /// Scale of the random perturbation added to the identity initialisation.
    pub ikl_jitter: f64,
    pub sm_components: usize,
    pub align: AlignTrainConfig,
    pub stage1_monitor: Stage1Monitor,
    /// λ of the classifier fit when monitoring validation error.
    pub monitor_lambda: f64,
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub standardize: bool,
    pub solver: SolverOptions,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Ikl,
            feature_counts: vec![256],
            rff_bandwidth: 1.0,
            ikl_hidden: vec![16, 16],
            ikl_init: SamplerInit::Random,
            ikl_jitter: 0.1,
            sm_components: 4,
            align: AlignTrainConfig::default(),
            stage1_monitor: Stage1Monitor::ValidationError,
            monitor_lambda: 1e-3,
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            folds: 3,
            standardize: false,
            solver: SolverOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: Method,
    pub d: usize,
    #[serde(rename = "M")]
    pub m_features: usize,
    pub seed: u64,
    pub test_error: f64,
    pub val_error: f64,
    pub chosen_lambda: f64,
    pub stage1_iters: usize,
}

/// Per-column mean and standard deviation estimated on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseMatrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in x.iter_rows() {
            for ((v, &a), &m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (a - m) * (a - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        ensure_dim("standardizer width", self.mean.len(), ds.dim())?;
        let mut x = ds.x().clone();
        for i in 0..x.rows() {
            for ((v, &m), &s) in x.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        LabeledDataset::new(x, ds.y().to_vec(), ds.split())
    }
}

/// Stage 1 for the configured method: the kernel used for stage 2 and the
/// number of alignment iterations run.
pub fn learn_kernel(train: &LabeledDataset, val: &LabeledDataset, cfg: &PipelineConfig) -> Result<(KernelSpec, usize)> {
    let d = train.dim();
    let root = Prng::new(cfg.seed);
    let align = AlignTrainConfig {
        seed: root.split("stage1").seed(),
        ..cfg.align.clone()
    };
    match cfg.method {
        Method::Rff => Ok((KernelSpec::gaussian(&[cfg.rff_bandwidth])?, 0)),
        Method::Ikl => {
            let mut init = root.split("ikl-init");
            let mut s = match cfg.ikl_init {
                SamplerInit::Random => SpectralSampler::new(d, &cfg.ikl_hidden, &mut init)?,
                SamplerInit::NearIdentity => {
                    let hidden: Vec<usize> = cfg.ikl_hidden.iter().map(|&h| h.max(d)).collect();
                    let mut s = SpectralSampler::near_identity(d, &hidden, cfg.ikl_jitter, &mut init)?;
                    s.net_mut().scale_output(1.0 / cfg.rff_bandwidth);
                    s
                }
            };
            let log = run_stage1(train, val, &mut s, &align, cfg)?;
            Ok((KernelSpec::Implicit { sampler: s }, log.iters_run))
        }
        Method::Sm => {
            let mut sm = SpectralMixture::init(
                d,
                cfg.sm_components,
                0.1 / cfg.rff_bandwidth,
                1.0 / cfg.rff_bandwidth,
                &mut root.split("sm-init"),
            )?;
            let log = run_stage1(train, val, &mut sm, &align, cfg)?;
            Ok((KernelSpec::SpectralMixture(sm), log.iters_run))
        }
    }
}

fn run_stage1<S: SpectralSource + ?Sized>(
    train: &LabeledDataset,
    val: &LabeledDataset,
    source: &mut S,
    align: &AlignTrainConfig,
    cfg: &PipelineConfig,
) -> Result<AlignLog> {
    match cfg.stage1_monitor {
        Stage1Monitor::Alignment => train_alignment(train, Some(val), source, align),
        Stage1Monitor::ValidationError => {
            let m = cfg.feature_counts.first().copied().unwrap_or(256);
            let noise = Prng::new(cfg.seed)
                .split("stage1-monitor")
                .normal_matrix(m, source.dim());
            train_alignment_monitored(train, source, align, |src: &S| {
                let draw = src.draw_from_noise(noise.clone())?;
                let phi_tr = features_from_projections(&project(train.x(), &draw.omegas)?);
                let phi_va = features_from_projections(&project(val.x(), &draw.omegas)?);
                let fit = fit_logistic(&phi_tr, train.y(), cfg.monitor_lambda, &cfg.solver)?;
                Ok(-evaluate(&fit.model, &phi_va, val.y())?)
            })
        }
    }
}

/// Two-stage pipeline: kernel learning on `train` (early stopping on `val`),
/// then for every `M` a random-feature logistic regression with λ chosen by
/// cross-validation on `train`.
pub fn run_pipeline(
    train: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &PipelineConfig,
) -> Result<Vec<ReportEntry>> {
    ensure_dim("validation dimension", train.dim(), val.dim())?;
    ensure_dim("test dimension", train.dim(), test.dim())?;
    if cfg.feature_counts.is_empty() {
        return Err(Error::Invalid("no feature counts given".into()));
    }
    let (train, val, test) = if cfg.standardize {
        let st = Standardizer::fit(train.x());
        (st.apply(train)?, st.apply(val)?, st.apply(test)?)
    } else {
        (train.clone(), val.clone(), test.clone())
    };
    let (spec, stage1_iters) = learn_kernel(&train, &val, cfg)?;
    let root = Prng::new(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.feature_counts.len());
    for &m in &cfg.feature_counts {
        let mut fr = root.substream("stage2", m as u64);
        let phi_tr = transform_dataset(train.x(), &spec, m, &mut fr)?;
        let batch = Arc::clone(phi_tr.batch());
        let phi_va = fourier_features(val.x(), &batch)?;
        let phi_te = fourier_features(test.x(), &batch)?;
        let (lambda, _) = cross_validate(
            phi_tr.features(),
            train.y(),
            &cfg.lambdas,
            cfg.folds,
            &mut root.substream("cv", m as u64),
            &cfg.solver,
        )?;
        let fit = fit_logistic(phi_tr.features(), train.y(), lambda, &cfg.solver)?;
        entries.push(ReportEntry {
            method: cfg.method,
            d: train.dim(),
            m_features: m,
            seed: cfg.seed,
            test_error: evaluate(&fit.model, phi_te.features(), test.y())?,
            val_error: evaluate(&fit.model, phi_va.features(), val.y())?,
            chosen_lambda: lambda,
            stage1_iters,
        });
    }
    Ok(entries)
}
