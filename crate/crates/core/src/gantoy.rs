//! A small MMD GAN on 2D point clouds whose base kernel sits on top of a learned
//! critic embedding, `k(f(x), f(y))`.
//!
//! The base kernel is either a fixed closed-form mixture (exact Gram path) or a
//! trainable spectral source evaluated with random Fourier features. Trainable
//! sources are held near a second-moment target by the variance penalty.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{gen_ring_mixture, ring_centers};
use crate::error::{ensure_dim, Error, Result};
use crate::features::{
    csv_err, features_backward_cached, features_from_projections, kernel_matrix_exact, project, projection_grad_cached,
};
use crate::mmd::{
    feature_mmd_with_grad, gradient_penalty_at, gram_mmd_with_grad, mmd_unbiased, variance_penalty_terms, Estimator,
};
use crate::numerics::{sq_dist, Activation, AdamState, DenseMatrix, Mlp, Prng};
use crate::spectral::{
    default_variance_target, KernelSpec, SamplerMixture, SpectralMixture, SpectralSampler, SpectralSource,
};

/// Base kernel family used by the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanKernel {
    Gaussian,
    Rq,
    Sm,
    Ikl,
}

impl GanKernel {
    pub fn name(self) -> &'static str {
        match self {
            GanKernel::Gaussian => "gaussian",
            GanKernel::Rq => "rq",
            GanKernel::Sm => "sm",
            GanKernel::Ikl => "ikl",
        }
    }
}

impl FromStr for GanKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(GanKernel::Gaussian),
            "rq" => Ok(GanKernel::Rq),
            "sm" => Ok(GanKernel::Sm),
            "ikl" => Ok(GanKernel::Ikl),
            other => Err(Error::Invalid(format!("unknown GAN kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub kernel: GanKernel,
    /// Adam learning rate of generator and critic.
    pub lr: f64,
    /// Adam learning rate of the base kernel parameters.
    pub kernel_lr: f64,
    pub batch_size: usize,
    /// Critic/kernel updates per generator update.
    pub n_critic: usize,
    /// Frequencies resampled every step.
    pub m: usize,
    pub lambda_gp: f64,
    pub lambda_h: f64,
    /// Second-moment target of a single trainable source.
    pub u: f64,
    /// Generator updates.
    pub iters: usize,
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub sampler_hidden: Vec<usize>,
    /// One implicit sampler per bandwidth with targets `d/σ_q²` instead of a single one.
    pub ikl_mixture: bool,
    pub bandwidths: Vec<f64>,
    pub rq_scales: Vec<f64>,
    pub sm_components: usize,
    pub estimator: Estimator,
    pub eval_every: usize,
    pub eval_size: usize,
    /// Bandwidths of the fixed Gaussian mixture used for evaluation on raw samples.
    pub ref_bandwidths: Vec<f64>,
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub coverage_radius: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            kernel: GanKernel::Ikl,
            lr: 5e-4,
            kernel_lr: 1e-6,
            batch_size: 64,
            n_critic: 5,
            m: 1024,
            lambda_gp: 10.0,
            lambda_h: 10.0,
            u: 1.0,
            iters: 5000,
            latent_dim: 8,
            generator_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            embed_dim: 16,
            activation: Activation::Relu,
            sampler_hidden: vec![32, 32],
            ikl_mixture: false,
            bandwidths: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            rq_scales: vec![0.2, 0.5, 1.0, 2.0, 5.0],
            sm_components: 5,
            estimator: Estimator::FeatureMean,
            eval_every: 100,
            eval_size: 1000,
            ref_bandwidths: vec![0.1, 0.5, 1.0, 2.0],
            modes: 8,
            radius: 2.0,
            sigma: 0.05,
            coverage_radius: 0.15,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("n_critic", self.n_critic),
            ("m", self.m),
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("eval_every", self.eval_every),
            ("modes", self.modes),
            ("sm_components", self.sm_components),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if self.batch_size < 2 || self.eval_size < 2 {
            return Err(Error::Invalid("batch_size and eval_size must be at least 2".into()));
        }
        if !(self.lambda_gp >= 0.0) || !(self.lambda_h >= 0.0) {
            return Err(Error::Invalid("λ_GP and λ_h must be non-negative".into()));
        }
        let positive = [
            ("lr", self.lr),
            ("kernel_lr", self.kernel_lr),
            ("u", self.u),
            ("radius", self.radius),
            ("coverage_radius", self.coverage_radius),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid(format!("{name} must be positive and finite")));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Invalid("sigma must be non-negative".into()));
        }
        for (name, list) in [
            ("bandwidths", &self.bandwidths),
            ("rq_scales", &self.rq_scales),
            ("ref_bandwidths", &self.ref_bandwidths),
        ] {
            if list.is_empty() || list.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Invalid(format!(
                    "{name} must be a nonempty list of positive values"
                )));
            }
        }
        Ok(())
    }
}

/// Data distribution the generator is trained to match.
pub trait GanTarget {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, prng: &mut Prng) -> Result<DenseMatrix>;
    /// Mode centers for coverage counting, if the target has any.
    fn centers(&self) -> Option<DenseMatrix> {
        None
    }
}

/// Equal-weight Gaussians on a circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingTarget {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl RingTarget {
    pub fn from_config(cfg: &GanConfig) -> Self {
        Self {
            modes: cfg.modes,
            radius: cfg.radius,
            sigma: cfg.sigma,
        }
    }
}

impl GanTarget for RingTarget {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, prng: &mut Prng) -> Result<DenseMatrix> {
        gen_ring_mixture(n, self.modes, self.radius, self.sigma, prng)
    }

    fn centers(&self) -> Option<DenseMatrix> {
        Some(ring_centers(self.modes, self.radius))
    }
}

/// Base kernel on critic embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseKernel {
    Fixed { spec: KernelSpec },
    SpectralMixture { source: SpectralMixture, targets: Vec<f64> },
    Implicit { source: SamplerMixture, targets: Vec<f64> },
}

impl BaseKernel {
    /// The trainable source and its per-block second-moment targets.
    pub fn source(&self) -> Option<(&dyn SpectralSource, &[f64])> {
        match self {
            BaseKernel::Fixed { .. } => None,
            BaseKernel::SpectralMixture { source, targets } => Some((source, targets)),
            BaseKernel::Implicit { source, targets } => Some((source, targets)),
        }
    }

    fn source_mut(&mut self) -> Option<&mut dyn SpectralSource> {
        match self {
            BaseKernel::Fixed { .. } => None,
            BaseKernel::SpectralMixture { source, .. } => Some(source),
            BaseKernel::Implicit { source, .. } => Some(source),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.source().map_or_else(Vec::new, |(s, _)| s.params())
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self.source_mut() {
            Some(s) => s.set_params(params),
            None => ensure_dim("fixed kernel parameters", 0, params.len()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.source().map_or(0, |(s, _)| s.num_params())
    }

    /// Frequency dimension, if the kernel is evaluated through frequencies.
    pub fn dim(&self) -> Option<usize> {
        self.source().map(|(s, _)| s.dim())
    }
}

fn hash_params(params: &[f64]) -> u64 {
    params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        v.to_bits()
            .to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub iter: usize,
    pub ref_mmd: f64,
    /// `Ê‖ω‖²` on fixed probe noise; absent for closed-form kernels.
    pub variance_hat: Option<f64>,
    pub modes_covered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanState {
    pub generator: Mlp,
    pub critic: Mlp,
    pub kernel: BaseKernel,
    pub opt_generator: AdamState,
    pub opt_critic: AdamState,
    pub opt_kernel: AdamState,
    /// Generator updates performed.
    pub iter: usize,
    pub log: Vec<GanLogRow>,
}

impl GanState {
    /// Fresh networks and kernel. Trainable sources start at their second-moment targets.
    pub fn init(cfg: &GanConfig, data_dim: usize, prng: &Prng) -> Result<Self> {
        cfg.validate()?;
        let mut rng = prng.split("init-generator");
        let mut sizes = vec![cfg.latent_dim];
        sizes.extend_from_slice(&cfg.generator_hidden);
        sizes.push(data_dim);
        let generator = Mlp::new(&sizes, cfg.activation, &mut rng)?;

        let mut rng = prng.split("init-critic");
        let mut sizes = vec![data_dim];
        sizes.extend_from_slice(&cfg.critic_hidden);
        sizes.push(cfg.embed_dim);
        let critic = Mlp::new(&sizes, cfg.activation, &mut rng)?;

        let mut rng = prng.split("init-kernel");
        let d = cfg.embed_dim;
        let kernel = match cfg.kernel {
            GanKernel::Gaussian => BaseKernel::Fixed {
                spec: KernelSpec::gaussian(&cfg.bandwidths)?,
            },
            GanKernel::Rq => BaseKernel::Fixed {
                spec: KernelSpec::rq(&cfg.rq_scales)?,
            },
            GanKernel::Sm => {
                let s = (cfg.u / d as f64).sqrt();
                BaseKernel::SpectralMixture {
                    source: SpectralMixture::init(d, cfg.sm_components, s, s, &mut rng)?,
                    targets: vec![cfg.u; cfg.sm_components],
                }
            }
            GanKernel::Ikl => {
                let targets = if cfg.ikl_mixture {
                    cfg.bandwidths.iter().map(|&b| default_variance_target(d, b)).collect()
                } else {
                    vec![cfg.u]
                };
                let mut members = Vec::with_capacity(targets.len());
                for &t in &targets {
                    let mut s = SpectralSampler::new(d, &cfg.sampler_hidden, &mut rng)?;
                    s.calibrate_second_moment(t, cfg.m.max(1024), &mut rng)?;
                    members.push(s);
                }
                BaseKernel::Implicit {
                    source: SamplerMixture::new(members)?,
                    targets,
                }
            }
        };
        let state = Self {
            opt_generator: AdamState::new(generator.num_params(), cfg.lr),
            opt_critic: AdamState::new(critic.num_params(), cfg.lr),
            opt_kernel: AdamState::new(kernel.num_params(), cfg.kernel_lr),
            generator,
            critic,
            kernel,
            iter: 0,
            log: Vec::new(),
        };
        state.check()?;
        Ok(state)
    }

    /// Shape invariants between the networks and the kernel.
    pub fn check(&self) -> Result<()> {
        ensure_dim(
            "generator output vs critic input",
            self.critic.input_dim(),
            self.generator.output_dim(),
        )?;
        if let Some(d) = self.kernel.dim() {
            ensure_dim("critic embedding vs frequency dimension", d, self.critic.output_dim())?;
        }
        Ok(())
    }

    pub fn generate(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        self.generator.forward(z)
    }

    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "ref_mmd", "variance_hat", "modes_covered"])
            .map_err(csv_err)?;
        for r in &self.log {
            w.write_record([
                r.iter.to_string(),
                r.ref_mmd.to_string(),
                r.variance_hat.map_or_else(String::new, |v| v.to_string()),
                r.modes_covered.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything random that one update consumes.
#[derive(Debug, Clone)]
pub struct GanBatch {
    pub x_real: DenseMatrix,
    pub z: DenseMatrix,
    /// Base noise for the frequencies (no rows for closed-form kernels).
    pub nu: DenseMatrix,
    /// Interpolation weights for the gradient penalty, one per row.
    pub mix: Vec<f64>,
}

impl GanBatch {
    pub fn sample<T: GanTarget + ?Sized>(
        cfg: &GanConfig,
        state: &GanState,
        target: &T,
        prng: &mut Prng,
    ) -> Result<Self> {
        let x_real = target.sample(cfg.batch_size, prng)?;
        let z = prng.normal_matrix(cfg.batch_size, cfg.latent_dim);
        let nu = match state.kernel.dim() {
            Some(d) => prng.normal_matrix(cfg.m, d),
            None => DenseMatrix::zeros(0, 0),
        };
        let mix = (0..cfg.batch_size).map(|_| prng.uniform()).collect();
        Ok(Self { x_real, z, nu, mix })
    }
}

fn interpolate_with(x_real: &DenseMatrix, x_fake: &DenseMatrix, mix: &[f64]) -> Result<DenseMatrix> {
    ensure_dim("interpolation rows", x_real.rows(), x_fake.rows())?;
    ensure_dim("interpolation cols", x_real.cols(), x_fake.cols())?;
    ensure_dim("interpolation weights", x_real.rows(), mix.len())?;
    let mut out = x_fake.clone();
    for (i, &eps) in mix.iter().enumerate() {
        for (o, &r) in out.row_mut(i).iter_mut().zip(x_real.row(i)) {
            *o = eps * r + (1.0 - eps) * *o;
        }
    }
    Ok(out)
}

struct EmbeddingMmd {
    value: f64,
    grad_real: DenseMatrix,
    grad_fake: DenseMatrix,
    /// Gradient of `MMD − penalty` with respect to the kernel parameters.
    kernel_grad: Vec<f64>,
    penalty: f64,
    second_moment: Option<f64>,
}

/// MMD between embeddings; the variance penalty enters only when `lambda_h` is given.
fn embedding_mmd(
    kernel: &BaseKernel,
    e_real: &DenseMatrix,
    e_fake: &DenseMatrix,
    nu: &DenseMatrix,
    estimator: Estimator,
    lambda_h: Option<f64>,
) -> Result<EmbeddingMmd> {
    let Some((source, targets)) = kernel.source() else {
        let BaseKernel::Fixed { spec } = kernel else {
            unreachable!("only fixed kernels lack a source")
        };
        let r = gram_mmd_with_grad(spec, e_real, e_fake, estimator)?;
        return Ok(EmbeddingMmd {
            value: r.value,
            grad_real: r.grad_x,
            grad_fake: r.grad_y,
            kernel_grad: Vec::new(),
            penalty: 0.0,
            second_moment: None,
        });
    };
    if nu.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let draw = source.draw_from_noise(nu.clone())?;
    let w = &draw.omegas;
    let fr = features_from_projections(&project(e_real, w)?);
    let ff = features_from_projections(&project(e_fake, w)?);
    let fm = feature_mmd_with_grad(&fr, &ff, estimator)?;
    let norms = w.row_sq_norms();
    let second_moment = Some(norms.iter().sum::<f64>() / norms.len() as f64);
    let Some(lambda) = lambda_h else {
        // Generator side: only the fake embeddings need a gradient.
        let grad_fake = projection_grad_cached(&ff, &fm.grad_y)?.matmul(w)?;
        return Ok(EmbeddingMmd {
            value: fm.value,
            grad_real: DenseMatrix::zeros(0, 0),
            grad_fake,
            kernel_grad: Vec::new(),
            penalty: 0.0,
            second_moment,
        });
    };
    let (grad_real, mut dw) = features_backward_cached(e_real, w, &fr, &fm.grad_x)?;
    let (grad_fake, dwf) = features_backward_cached(e_fake, w, &ff, &fm.grad_y)?;
    dw.add_assign(&dwf)?;
    let p = variance_penalty_terms(w, &source.blocks(w.rows()), lambda, targets)?;
    dw.add_assign(&p.omega_grad.neg())?;
    Ok(EmbeddingMmd {
        value: fm.value,
        grad_real,
        grad_fake,
        kernel_grad: source.vjp(&draw, &dw)?,
        penalty: p.value,
        second_moment,
    })
}

/// Value and gradients of the critic objective `MMD − GP − VP`.
#[derive(Debug, Clone)]
pub struct CriticObjective {
    pub value: f64,
    pub mmd: f64,
    pub gradient_penalty: f64,
    pub variance_penalty: f64,
    /// Batch `Ê‖ω‖²`, for trainable kernels.
    pub second_moment: Option<f64>,
    pub grad_critic: Vec<f64>,
    pub grad_kernel: Vec<f64>,
}

pub fn critic_objective(state: &GanState, cfg: &GanConfig, batch: &GanBatch) -> Result<CriticObjective> {
    ensure_dim("real batch width", state.critic.input_dim(), batch.x_real.cols())?;
    ensure_dim("real vs latent batch", batch.x_real.rows(), batch.z.rows())?;
    let x_fake = state.generator.forward(&batch.z)?;
    let cr = state.critic.forward_cached(&batch.x_real)?;
    let cf = state.critic.forward_cached(&x_fake)?;
    let em = embedding_mmd(
        &state.kernel,
        cr.output(),
        cf.output(),
        &batch.nu,
        cfg.estimator,
        Some(cfg.lambda_h),
    )?;
    let (mut grad_critic, _) = state.critic.backprop_cached(&cr, &em.grad_real)?;
    let (gf, _) = state.critic.backprop_cached(&cf, &em.grad_fake)?;
    let x_hat = interpolate_with(&batch.x_real, &x_fake, &batch.mix)?;
    let (gp, gp_grad) = gradient_penalty_at(&state.critic, &x_hat, cfg.lambda_gp)?;
    for ((g, a), b) in grad_critic.iter_mut().zip(&gf).zip(&gp_grad) {
        *g += a - b;
    }
    Ok(CriticObjective {
        value: em.value - gp - em.penalty,
        mmd: em.value,
        gradient_penalty: gp,
        variance_penalty: em.penalty,
        second_moment: em.second_moment,
        grad_critic,
        grad_kernel: em.kernel_grad,
    })
}

/// MMD between real and generated embeddings with its generator gradient;
/// critic and kernel are held fixed.
pub fn generator_objective(state: &GanState, cfg: &GanConfig, batch: &GanBatch) -> Result<(f64, Vec<f64>)> {
    ensure_dim("real batch width", state.critic.input_dim(), batch.x_real.cols())?;
    let cg = state.generator.forward_cached(&batch.z)?;
    let e_real = state.critic.forward(&batch.x_real)?;
    let cf = state.critic.forward_cached(cg.output())?;
    let em = embedding_mmd(&state.kernel, &e_real, cf.output(), &batch.nu, cfg.estimator, None)?;
    let (_, dx) = state.critic.backprop_cached(&cf, &em.grad_fake)?;
    let (grad, _) = state.generator.backprop_cached(&cg, &dx)?;
    Ok((em.value, grad))
}

/// Number of `centers` with at least one sample within `radius`.
pub fn eval_mode_coverage(samples: &DenseMatrix, centers: &DenseMatrix, radius: f64) -> usize {
    let r2 = radius * radius;
    centers
        .iter_rows()
        .filter(|c| samples.iter_rows().any(|s| s.len() == c.len() && sq_dist(s, c) <= r2))
        .count()
}

/// Fixed inputs for the periodic evaluation.
struct Evaluator {
    z: DenseMatrix,
    reals: DenseMatrix,
    nu: Option<DenseMatrix>,
    reference: KernelSpec,
    kyy: DenseMatrix,
    centers: Option<DenseMatrix>,
    coverage_radius: f64,
}

impl Evaluator {
    fn new<T: GanTarget + ?Sized>(cfg: &GanConfig, state: &GanState, target: &T, prng: &Prng) -> Result<Self> {
        let z = prng.split("eval-z").normal_matrix(cfg.eval_size, cfg.latent_dim);
        let reals = target.sample(cfg.eval_size, &mut prng.split("eval-real"))?;
        let nu = state
            .kernel
            .dim()
            .map(|d| prng.split("eval-nu").normal_matrix(cfg.m, d));
        let reference = KernelSpec::gaussian(&cfg.ref_bandwidths)?;
        let kyy = kernel_matrix_exact(&reference, &reals, &reals)?;
        Ok(Self {
            z,
            reals,
            nu,
            reference,
            kyy,
            centers: target.centers(),
            coverage_radius: cfg.coverage_radius,
        })
    }

    fn row(&self, state: &GanState) -> Result<GanLogRow> {
        let fake = state.generate(&self.z)?;
        let kxx = kernel_matrix_exact(&self.reference, &fake, &fake)?;
        let kxy = kernel_matrix_exact(&self.reference, &fake, &self.reals)?;
        let ref_mmd = mmd_unbiased(&kxx, &kxy, &self.kyy)?.value;
        let variance_hat = match (state.kernel.source(), &self.nu) {
            (Some((s, _)), Some(nu)) => {
                let norms = s.draw_from_noise(nu.clone())?.omegas.row_sq_norms();
                Some(norms.iter().sum::<f64>() / norms.len() as f64)
            }
            _ => None,
        };
        let modes_covered = self
            .centers
            .as_ref()
            .map_or(0, |c| eval_mode_coverage(&fake, c, self.coverage_radius));
        Ok(GanLogRow {
            iter: state.iter,
            ref_mmd,
            variance_hat,
            modes_covered,
        })
    }
}

/// Result of a training run. On divergence the state holds the last finite
/// parameters and the log up to that point.
#[derive(Debug)]
pub struct GanRun {
    pub state: GanState,
    pub divergence: Option<Error>,
}

fn finite_or(value: f64, iter: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iter,
            message: format!("{what} is {value}"),
        })
    }
}

fn critic_step(state: &mut GanState, cfg: &GanConfig, batch: &GanBatch) -> Result<()> {
    let obj = critic_objective(state, cfg, batch)?;
    finite_or(obj.value, state.iter, "critic objective")?;
    let mut p = state.critic.params();
    state.opt_critic.ascend(&mut p, &obj.grad_critic)?;
    let mut q = state.kernel.params();
    if !q.is_empty() {
        state.opt_kernel.ascend(&mut q, &obj.grad_kernel)?;
    }
    if p.iter().chain(&q).any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iter: state.iter,
            message: "critic or kernel parameters became non-finite".into(),
        });
    }
    state.critic.set_params(&p)?;
    state.kernel.set_params(&q)
}

fn generator_step(state: &mut GanState, cfg: &GanConfig, batch: &GanBatch) -> Result<()> {
    let (value, grad) = generator_objective(state, cfg, batch)?;
    finite_or(value, state.iter, "generator objective")?;
    let mut p = state.generator.params();
    state.opt_generator.step(&mut p, &grad)?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iter: state.iter,
            message: "generator parameters became non-finite".into(),
        });
    }
    state.generator.set_params(&p)
}

/// Trains from a fresh state. See [`continue_gan`].
pub fn train_gan<T: GanTarget + ?Sized>(cfg: &GanConfig, target: &T, prng: &Prng) -> Result<GanRun> {
    let state = GanState::init(cfg, target.dim(), prng)?;
    continue_gan(state, cfg, target, prng)
}

/// Runs `cfg.iters − state.iter` rounds of `n_critic` critic/kernel ascent
/// steps followed by one generator descent step. Every step draws fresh data,
/// latents and frequency noise from its own substream, so runs are reproducible
/// and resumable. Evaluations are logged at iteration 0, every `eval_every`
/// rounds and at the end.
pub fn continue_gan<T: GanTarget + ?Sized>(
    mut state: GanState,
    cfg: &GanConfig,
    target: &T,
    prng: &Prng,
) -> Result<GanRun> {
    cfg.validate()?;
    state.check()?;
    ensure_dim("target dimension", state.critic.input_dim(), target.dim())?;
    let eval = Evaluator::new(cfg, &state, target, prng)?;
    let log_now = |state: &mut GanState| -> Result<()> {
        if state.log.last().is_some_and(|r| r.iter == state.iter) {
            return Ok(());
        }
        let row = eval.row(state)?;
        finite_or(row.ref_mmd, state.iter, "reference MMD")?;
        state.log.push(row);
        Ok(())
    };
    log_now(&mut state)?;
    while state.iter < cfg.iters {
        let it = state.iter as u64;
        let g_hash = state.generator.param_hash();
        for t in 0..cfg.n_critic {
            let mut rng = prng.substream("critic", it * cfg.n_critic as u64 + t as u64);
            let batch = GanBatch::sample(cfg, &state, target, &mut rng)?;
            let before = state.clone();
            if let Err(e) = critic_step(&mut state, cfg, &batch) {
                return Ok(GanRun {
                    state: before,
                    divergence: Some(e),
                });
            }
        }
        assert_eq!(
            g_hash,
            state.generator.param_hash(),
            "critic steps touched the generator"
        );

        let f_hash = state.critic.param_hash();
        let h_hash = hash_params(&state.kernel.params());
        let mut rng = prng.substream("generator", it);
        let batch = GanBatch::sample(cfg, &state, target, &mut rng)?;
        let before = state.clone();
        if let Err(e) = generator_step(&mut state, cfg, &batch) {
            return Ok(GanRun {
                state: before,
                divergence: Some(e),
            });
        }
        assert_eq!(f_hash, state.critic.param_hash(), "generator step touched the critic");
        assert_eq!(
            h_hash,
            hash_params(&state.kernel.params()),
            "generator step touched the kernel"
        );

        state.iter += 1;
        if state.iter.is_multiple_of(cfg.eval_every) || state.iter == cfg.iters {
            if let Err(e) = log_now(&mut state) {
                return Ok(GanRun {
                    state,
                    divergence: Some(e),
                });
            }
        }
    }
    Ok(GanRun {
        state,
        divergence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient_norm;

    fn tiny(kernel: GanKernel) -> GanConfig {
        GanConfig {
            kernel,
            batch_size: 5,
            m: 8,
            latent_dim: 2,
            generator_hidden: vec![4],
            critic_hidden: vec![5],
            embed_dim: 3,
            sampler_hidden: vec![4],
            activation: Activation::Tanh,
            sm_components: 2,
            bandwidths: vec![1.0, 2.0],
            iters: 3,
            eval_every: 1,
            eval_size: 20,
            ..GanConfig::default()
        }
    }

    fn setup(cfg: &GanConfig, seed: u64) -> (GanState, GanBatch) {
        let prng = Prng::new(seed);
        let target = RingTarget::from_config(cfg);
        let state = GanState::init(cfg, 2, &prng).unwrap();
        let batch = GanBatch::sample(cfg, &state, &target, &mut prng.split("batch")).unwrap();
        (state, batch)
    }

    #[test]
    fn defaults_validate() {
        GanConfig::default().validate().unwrap();
        let bad = GanConfig {
            lambda_h: -1.0,
            ..GanConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identical_sets_give_zero_biased_mmd() {
        let cfg = GanConfig {
            lambda_gp: 0.0,
            lambda_h: 0.0,
            ..tiny(GanKernel::Ikl)
        };
        let (state, mut batch) = setup(&cfg, 1);
        batch.x_real = state.generate(&batch.z).unwrap();
        let obj = critic_objective(&state, &cfg, &batch).unwrap();
        assert!(obj.mmd.abs() < 1e-15, "{}", obj.mmd);
        assert!(obj.value.abs() < 1e-15);
        let (g, _) = generator_objective(&state, &cfg, &batch).unwrap();
        assert!(g.abs() < 1e-15);
    }

    #[test]
    fn calibrated_sampler_has_no_variance_penalty_gradient_at_target() {
        let cfg = tiny(GanKernel::Ikl);
        let (state, batch) = setup(&cfg, 2);
        let BaseKernel::Implicit { source, .. } = &state.kernel else {
            panic!("expected an implicit kernel")
        };
        let draw = source.draw_from_noise(batch.nu.clone()).unwrap();
        let norms = draw.omegas.row_sq_norms();
        let e = norms.iter().sum::<f64>() / norms.len() as f64;
        let p = variance_penalty_terms(&draw.omegas, &[0..norms.len()], 10.0, &[e]).unwrap();
        assert_eq!(p.value, 0.0);
        assert_eq!(p.omega_grad.max_abs(), 0.0);
    }

    fn check_critic(kernel: GanKernel, seed: u64) {
        let cfg = tiny(kernel);
        let (state, batch) = setup(&cfg, seed);
        let obj = critic_objective(&state, &cfg, &batch).unwrap();
        let f = |p: &[f64]| {
            let mut s = state.clone();
            s.critic.set_params(p).unwrap();
            critic_objective(&s, &cfg, &batch).unwrap().value
        };
        let err = check_gradient_norm(f, &obj.grad_critic, &state.critic.params(), 1e-5).unwrap();
        assert!(err <= 1e-3, "{kernel:?} critic err {err}");
        if state.kernel.num_params() > 0 {
            let f = |p: &[f64]| {
                let mut s = state.clone();
                s.kernel.set_params(p).unwrap();
                critic_objective(&s, &cfg, &batch).unwrap().value
            };
            let err = check_gradient_norm(f, &obj.grad_kernel, &state.kernel.params(), 1e-5).unwrap();
            assert!(err <= 1e-4, "{kernel:?} kernel err {err}");
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        for (k, seed) in [
            (GanKernel::Ikl, 3),
            (GanKernel::Sm, 4),
            (GanKernel::Gaussian, 5),
            (GanKernel::Rq, 6),
        ] {
            check_critic(k, seed);
        }
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        for (k, seed) in [(GanKernel::Ikl, 7), (GanKernel::Gaussian, 8)] {
            let cfg = tiny(k);
            let (state, batch) = setup(&cfg, seed);
            let (_, grad) = generator_objective(&state, &cfg, &batch).unwrap();
            let f = |p: &[f64]| {
                let mut s = state.clone();
                s.generator.set_params(p).unwrap();
                generator_objective(&s, &cfg, &batch).unwrap().0
            };
            let err = check_gradient_norm(f, &grad, &state.generator.params(), 1e-5).unwrap();
            assert!(err <= 1e-4, "{k:?} generator err {err}");
        }
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let cfg = tiny(GanKernel::Ikl);
        let value = |seed| {
            let (state, batch) = setup(&cfg, seed);
            generator_objective(&state, &cfg, &batch).unwrap().0
        };
        assert_eq!(value(11).to_bits(), value(11).to_bits());
        assert_ne!(value(11), value(12));
    }

    #[test]
    fn coverage_counts() {
        let centers = ring_centers(8, 2.0);
        assert_eq!(eval_mode_coverage(&centers, &centers, 0.1), 8);
        assert_eq!(eval_mode_coverage(&DenseMatrix::zeros(0, 2), &centers, 0.1), 0);
        let one = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![2.05, 0.02], vec![1.97, -0.04]]).unwrap();
        assert_eq!(eval_mode_coverage(&one, &centers, 0.1), 1);
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let cfg = GanConfig {
            iters: 0,
            ..tiny(GanKernel::Ikl)
        };
        let prng = Prng::new(9);
        let run = train_gan(&cfg, &RingTarget::from_config(&cfg), &prng).unwrap();
        assert!(run.divergence.is_none());
        let mut init = GanState::init(&cfg, 2, &prng).unwrap();
        init.log = run.state.log.clone();
        assert_eq!(run.state, init);
        assert_eq!(run.state.log.len(), 1);
        assert_eq!(run.state.log[0].iter, 0);
    }

    #[test]
    fn short_runs_are_deterministic_and_resumable() {
        let cfg = tiny(GanKernel::Ikl);
        let target = RingTarget::from_config(&cfg);
        let prng = Prng::new(10);
        let a = train_gan(&cfg, &target, &prng).unwrap().state;
        let b = train_gan(&cfg, &target, &prng).unwrap().state;
        assert_eq!(a, b);
        assert_eq!(a.iter, 3);
        assert_eq!(a.log.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(a.opt_critic.steps(), 3 * cfg.n_critic as u64);
        assert_eq!(a.opt_generator.steps(), 3);

        let half = GanConfig {
            iters: 1,
            ..cfg.clone()
        };
        let first = train_gan(&half, &target, &prng).unwrap().state;
        let resumed = continue_gan(first, &cfg, &target, &prng).unwrap().state;
        assert_eq!(resumed, a);
    }

    #[test]
    fn blow_up_is_reported_with_partial_state() {
        let cfg = GanConfig {
            lr: 1e300,
            activation: Activation::Relu,
            ..tiny(GanKernel::Gaussian)
        };
        let run = train_gan(&cfg, &RingTarget::from_config(&cfg), &Prng::new(12)).unwrap();
        let err = run.divergence.expect("huge steps must diverge");
        assert!(
            matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }),
            "{err}"
        );
        assert!(!run.state.log.is_empty());
        assert!(run.state.critic.params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_csv_leaves_variance_blank_for_fixed_kernels() {
        let cfg = GanConfig {
            iters: 1,
            ..tiny(GanKernel::Gaussian)
        };
        let run = train_gan(&cfg, &RingTarget::from_config(&cfg), &Prng::new(13)).unwrap();
        let mut buf = Vec::new();
        run.state.write_log_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,ref_mmd,variance_hat,modes_covered");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').nth(2), Some(""));
    }

    #[test]
    fn state_checkpoint_roundtrips() {
        let cfg = tiny(GanKernel::Ikl);
        let run = train_gan(&cfg, &RingTarget::from_config(&cfg), &Prng::new(14)).unwrap();
        let text = serde_json::to_string(&run.state).unwrap();
        let back: GanState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, run.state);
    }
}
