//! Frequency sources for shift-invariant kernels.
//!
//! A kernel `k(x - x') = E_ω[cos(ωᵀ(x - x'))]` is described either by a closed form
//! (Gaussian or rational-quadratic mixtures), by an explicit spectral density
//! (spectral mixture), or implicitly by a network that pushes standard-normal
//! noise `ν` through `h(ν) = sign(ν) ∘ h̃(|ν|)`.

use std::num::NonZeroUsize;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{Activation, DenseMatrix, ForwardCache, Layer, Mlp, Prng};

/// Where a batch of frequencies came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    GaussianMixture,
    SpectralMixture,
    Implicit,
    Explicit,
}

/// `m` frequencies in `R^d` with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBatch {
    omegas: DenseMatrix,
    source: BatchSource,
    seed: u64,
    fingerprint: u64,
}

impl FrequencyBatch {
    pub fn new(omegas: DenseMatrix, source: BatchSource, seed: u64) -> Result<Self> {
        if let Some(index) = omegas.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "frequency batch",
                index,
            });
        }
        let fingerprint = fingerprint(&omegas, source, seed);
        Ok(Self {
            omegas,
            source,
            seed,
            fingerprint,
        })
    }

    pub fn omegas(&self) -> &DenseMatrix {
        &self.omegas
    }

    pub fn source(&self) -> BatchSource {
        self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.omegas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.omegas.cols()
    }

    /// Mean of `‖ω‖²` over the batch.
    pub fn second_moment(&self) -> f64 {
        mean(&self.omegas.row_sq_norms())
    }
}

fn fingerprint(omegas: &DenseMatrix, source: BatchSource, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(omegas.rows() as u64);
    eat(omegas.cols() as u64);
    eat(source as u64);
    eat(seed);
    for v in omegas.as_slice() {
        eat(v.to_bits());
    }
    h
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// i.i.d. standard-normal base noise `ν ∈ R^{m×d}`.
pub fn sample_base(prng: &mut Prng, m: NonZeroUsize, d: NonZeroUsize) -> DenseMatrix {
    prng.normal_matrix(m.get(), d.get())
}

fn nz(v: usize, what: &str) -> Result<NonZeroUsize> {
    NonZeroUsize::new(v).ok_or_else(|| Error::Invalid(format!("{what} must be at least 1")))
}

/// Splits `m` draws across components in proportion to `weights` (largest remainder).
pub fn stratified_counts(weights: &[f64], m: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| m as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = m - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps ties in component order.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &q in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[q] += 1;
        left -= 1;
    }
    counts
}

fn blocks_from_counts(counts: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    #[default]
    StandardNormal,
}

/// Implicit spectral sampler `h(ν) = sign(ν) ∘ h̃(|ν|)` with `ν ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SamplerDoc")]
pub struct SpectralSampler {
    base_dim: usize,
    base: BaseDistribution,
    net: Mlp,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplerDoc {
    base_dim: usize,
    #[serde(default)]
    base: BaseDistribution,
    net: Mlp,
}

impl TryFrom<SamplerDoc> for SpectralSampler {
    type Error = Error;

    fn try_from(doc: SamplerDoc) -> Result<Self> {
        let mut s = SpectralSampler::from_net(doc.net)?;
        ensure_dim("sampler base_dim", s.base_dim, doc.base_dim)?;
        s.base = doc.base;
        Ok(s)
    }
}

/// Cached forward pass of a sampler, needed for its VJP.
#[derive(Debug, Clone)]
pub struct SamplerCache {
    signs: DenseMatrix,
    net: ForwardCache,
}

#[inline]
fn sign_nonneg(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl SpectralSampler {
    /// Wraps a network whose input and output widths agree.
    pub fn from_net(net: Mlp) -> Result<Self> {
        ensure_dim("sampler output width", net.input_dim(), net.output_dim())?;
        Ok(Self {
            base_dim: net.input_dim(),
            base: BaseDistribution::StandardNormal,
            net,
        })
    }

    /// Glorot-initialized ReLU network `d → hidden… → d`.
    pub fn new(dim: usize, hidden: &[usize], rng: &mut Prng) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self::from_net(Mlp::new(&sizes, Activation::Relu, rng)?)
    }

    /// One linear layer with identity weights: `h(ν) = ν`, i.e. the Gaussian kernel with σ = 1.
    pub fn identity(dim: usize) -> Self {
        Self {
            base_dim: dim,
            base: BaseDistribution::StandardNormal,
            net: Mlp::identity(dim),
        }
    }

    /// Network whose layers are identity blocks plus `jitter` times Glorot noise.
    ///
    /// With `jitter = 0` and hidden widths ≥ `dim`, `h(ν) = ν` exactly, because `h̃`
    /// only ever sees the nonnegative orthant.
    pub fn near_identity(dim: usize, hidden: &[usize], jitter: f64, rng: &mut Prng) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        if hidden.iter().any(|&h| h < dim) {
            return Err(Error::Invalid(format!(
                "near-identity sampler needs hidden widths >= {dim}, got {hidden:?}"
            )));
        }
        let noise = Mlp::new(&sizes, Activation::Relu, rng)?;
        let layers = noise
            .layers()
            .iter()
            .map(|l| {
                let mut w = l.weights().clone();
                w.scale(jitter);
                for i in 0..dim {
                    w[(i, i)] += 1.0;
                }
                Layer::new(w, l.bias().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_net(Mlp::from_layers(layers, Activation::Relu)?)
    }

    pub fn dim(&self) -> usize {
        self.base_dim
    }

    pub fn base(&self) -> BaseDistribution {
        self.base
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Frequencies for base noise `nu`, with the cache needed by [`Self::vjp`].
    pub fn map_cached(&self, nu: &DenseMatrix) -> Result<(DenseMatrix, SamplerCache)> {
        ensure_dim("base noise width", self.base_dim, nu.cols())?;
        let signs = nu.map(sign_nonneg);
        let abs = nu.map(f64::abs);
        let cache = self.net.forward_cached(&abs)?;
        let out = cache.output();
        let omegas = DenseMatrix::from_raw(
            out.rows(),
            out.cols(),
            out.as_slice()
                .iter()
                .zip(signs.as_slice())
                .map(|(&h, &s)| s * h)
                .collect(),
        );
        Ok((omegas, SamplerCache { signs, net: cache }))
    }

    pub fn map(&self, nu: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.map_cached(nu)?.0)
    }

    /// Parameter gradient of `Σ upstream ⊙ h(ν)`.
    pub fn vjp(&self, cache: &SamplerCache, upstream: &DenseMatrix) -> Result<Vec<f64>> {
        ensure_dim("sampler upstream rows", cache.signs.rows(), upstream.rows())?;
        ensure_dim("sampler upstream cols", cache.signs.cols(), upstream.cols())?;
        let signed = DenseMatrix::from_raw(
            upstream.rows(),
            upstream.cols(),
            upstream
                .as_slice()
                .iter()
                .zip(cache.signs.as_slice())
                .map(|(&g, &s)| g * s)
                .collect(),
        );
        Ok(self.net.backprop_cached(&cache.net, &signed)?.0)
    }

    /// Rescales the output layer so that `E‖h(ν)‖²` over `m` probe draws equals `target`.
    pub fn calibrate_second_moment(&mut self, target: f64, m: usize, rng: &mut Prng) -> Result<f64> {
        let nu = sample_base(rng, nz(m, "probe size")?, nz(self.base_dim, "dim")?);
        let current = mean(&self.map(&nu)?.row_sq_norms());
        if !(current > 0.0) || !(target > 0.0) {
            return Err(Error::Invalid(format!(
                "cannot calibrate second moment {current} to {target}"
            )));
        }
        self.net.scale_output((target / current).sqrt());
        Ok(current)
    }
}

/// Frequencies mapped from `nu` through `s`.
pub fn sampler_map(s: &SpectralSampler, nu: &DenseMatrix, seed: u64) -> Result<FrequencyBatch> {
    FrequencyBatch::new(s.map(nu)?, BatchSource::Implicit, seed)
}

/// Gradient of `Σ upstream ⊙ sampler_map(s, nu)` with respect to the sampler parameters.
pub fn sampler_vjp(s: &SpectralSampler, nu: &DenseMatrix, upstream: &DenseMatrix) -> Result<Vec<f64>> {
    let (_, cache) = s.map_cached(nu)?;
    s.vjp(&cache, upstream)
}

/// Explicit spectral mixture with diagonal components, sampled as `ω = μ_q + s_q ∘ ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMixture {
    pub means: Vec<Vec<f64>>,
    pub stddevs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SpectralMixture {
    pub fn new(means: Vec<Vec<f64>>, stddevs: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let sm = Self {
            means,
            stddevs,
            weights,
        };
        sm.validate()?;
        Ok(sm)
    }

    /// `q` equal-weight components with means drawn as `mean_scale · N(0, I)` and unit stddevs.
    pub fn init(dim: usize, q: usize, mean_scale: f64, stddev: f64, rng: &mut Prng) -> Result<Self> {
        let means = (0..q)
            .map(|_| (0..dim).map(|_| mean_scale * rng.normal()).collect())
            .collect();
        Self::new(means, vec![vec![stddev; dim]; q], vec![1.0 / q as f64; q])
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.weights.len();
        if q == 0 {
            return Err(Error::Invalid("spectral mixture needs a component".into()));
        }
        ensure_dim("spectral mixture means", q, self.means.len())?;
        ensure_dim("spectral mixture stddevs", q, self.stddevs.len())?;
        let d = self.dim();
        for (mu, s) in self.means.iter().zip(&self.stddevs) {
            ensure_dim("spectral mixture mean width", d, mu.len())?;
            ensure_dim("spectral mixture stddev width", d, s.len())?;
            if mu.iter().any(|v| !v.is_finite()) || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Invalid(
                    "spectral mixture parameters must be finite, stddevs > 0".into(),
                ));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("spectral mixture weights must be >= 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "spectral mixture weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// Frequencies for standard-normal noise `eps`, rows assigned to components in blocks.
    pub fn map(&self, eps: &DenseMatrix) -> Result<DenseMatrix> {
        ensure_dim("spectral mixture noise width", self.dim(), eps.cols())?;
        let mut out = eps.clone();
        for (q, rows) in blocks_from_counts(&stratified_counts(&self.weights, eps.rows()))
            .into_iter()
            .enumerate()
        {
            for i in rows {
                for ((o, &mu), &s) in out.row_mut(i).iter_mut().zip(&self.means[q]).zip(&self.stddevs[q]) {
                    *o = mu + s * *o;
                }
            }
        }
        Ok(out)
    }
}

/// Closed-form or samplable kernel description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Equal-weight mixture of Gaussian kernels with bandwidths `σ_q`.
    GaussianMixture {
        bandwidths: Vec<f64>,
    },
    /// Equal-weight mixture of rational-quadratic kernels with scales `α_q`.
    RqMixture {
        scales: Vec<f64>,
    },
    SpectralMixture(SpectralMixture),
    Implicit {
        sampler: SpectralSampler,
    },
}

impl KernelSpec {
    pub fn gaussian(bandwidths: &[f64]) -> Result<Self> {
        let spec = KernelSpec::GaussianMixture {
            bandwidths: bandwidths.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rq(scales: &[f64]) -> Result<Self> {
        let spec = KernelSpec::RqMixture {
            scales: scales.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::GaussianMixture { .. } => "gaussian_mixture",
            KernelSpec::RqMixture { .. } => "rq_mixture",
            KernelSpec::SpectralMixture(_) => "spectral_mixture",
            KernelSpec::Implicit { .. } => "implicit",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64], what: &str| {
            if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                Err(Error::Invalid(format!("{what} must be non-empty and positive")))
            } else {
                Ok(())
            }
        };
        match self {
            KernelSpec::GaussianMixture { bandwidths } => positive(bandwidths, "bandwidths"),
            KernelSpec::RqMixture { scales } => positive(scales, "rq scales"),
            KernelSpec::SpectralMixture(sm) => sm.validate(),
            KernelSpec::Implicit { .. } => Ok(()),
        }
    }

    pub fn has_closed_form(&self) -> bool {
        matches!(self, KernelSpec::GaussianMixture { .. } | KernelSpec::RqMixture { .. })
    }

    /// Kernel value and its derivative with respect to `r = ‖δ‖²`.
    pub fn closed_form_with_derivative(&self, r: f64) -> Result<(f64, f64)> {
        match self {
            KernelSpec::GaussianMixture { bandwidths } => {
                let q = bandwidths.len() as f64;
                let (mut k, mut dk) = (0.0, 0.0);
                for &s in bandwidths {
                    let e = (-r / (2.0 * s * s)).exp();
                    k += e;
                    dk -= e / (2.0 * s * s);
                }
                Ok((k / q, dk / q))
            }
            KernelSpec::RqMixture { scales } => {
                let q = scales.len() as f64;
                let (mut k, mut dk) = (0.0, 0.0);
                for &a in scales {
                    let base = 1.0 + r / (2.0 * a);
                    let v = base.powf(-a);
                    k += v;
                    dk -= 0.5 * v / base;
                }
                Ok((k / q, dk / q))
            }
            other => Err(Error::NoClosedForm(other.name())),
        }
    }

    /// `m` frequencies in `R^d` from the spectral density of this kernel.
    ///
    /// Gaussian mixtures split the draws evenly across bandwidths, in blocks.
    pub fn sample_frequencies(&self, prng: &mut Prng, m: usize, d: usize) -> Result<FrequencyBatch> {
        let seed = prng.seed();
        match self {
            KernelSpec::GaussianMixture { bandwidths } => {
                let mut eps = prng.normal_matrix(m, d);
                let counts = stratified_counts(&vec![1.0; bandwidths.len()], m);
                for (q, rows) in blocks_from_counts(&counts).into_iter().enumerate() {
                    let inv = 1.0 / bandwidths[q];
                    for i in rows {
                        eps.row_mut(i).iter_mut().for_each(|v| *v *= inv);
                    }
                }
                FrequencyBatch::new(eps, BatchSource::GaussianMixture, seed)
            }
            KernelSpec::SpectralMixture(sm) => {
                ensure_dim("spectral mixture dimension", sm.dim(), d)?;
                let eps = prng.normal_matrix(m, d);
                FrequencyBatch::new(sm.map(&eps)?, BatchSource::SpectralMixture, seed)
            }
            KernelSpec::Implicit { sampler } => {
                ensure_dim("sampler dimension", sampler.dim(), d)?;
                let nu = prng.normal_matrix(m, d);
                sampler_map(sampler, &nu, seed)
            }
            KernelSpec::RqMixture { .. } => Err(Error::ClosedFormOnly("rq_mixture")),
        }
    }
}

/// Closed-form kernel value at offset `delta`.
pub fn kernel_closed_form(spec: &KernelSpec, delta: &[f64]) -> Result<f64> {
    let r: f64 = delta.iter().map(|v| v * v).sum();
    Ok(spec.closed_form_with_derivative(r)?.0)
}

/// Default variance target `d / σ²`: the second moment of `N(0, I_d / σ²)`.
pub fn default_variance_target(dim: usize, bandwidth: f64) -> f64 {
    dim as f64 / (bandwidth * bandwidth)
}

/// One draw of frequencies together with what is needed to differentiate it.
#[derive(Debug, Clone)]
pub struct SourceDraw {
    pub noise: DenseMatrix,
    pub omegas: DenseMatrix,
    cache: Option<SamplerCache>,
    member_caches: Vec<SamplerCache>,
}

/// A trainable frequency source: frequencies are a differentiable function of
/// parameters and standard-normal noise.
pub trait SpectralSource {
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn tag(&self) -> BatchSource;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Maps standard-normal noise to frequencies.
    fn draw_from_noise(&self, noise: DenseMatrix) -> Result<SourceDraw>;

    /// Parameter gradient of `Σ upstream ⊙ ω`.
    fn vjp(&self, draw: &SourceDraw, upstream: &DenseMatrix) -> Result<Vec<f64>>;

    /// Row ranges that share a variance target (one per mixture member).
    fn blocks(&self, m: usize) -> Vec<Range<usize>> {
        vec![0..m]
    }

    fn draw(&self, prng: &mut Prng, m: usize) -> Result<SourceDraw> {
        self.draw_from_noise(prng.normal_matrix(m, self.dim()))
    }

    fn batch(&self, prng: &mut Prng, m: usize) -> Result<FrequencyBatch> {
        let seed = prng.seed();
        let draw = self.draw(prng, m)?;
        FrequencyBatch::new(draw.omegas, self.tag(), seed)
    }
}

impl SpectralSource for SpectralSampler {
    fn dim(&self) -> usize {
        self.base_dim
    }

    fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_params(params)
    }

    fn tag(&self) -> BatchSource {
        BatchSource::Implicit
    }

    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn draw_from_noise(&self, noise: DenseMatrix) -> Result<SourceDraw> {
        let (omegas, cache) = self.map_cached(&noise)?;
        Ok(SourceDraw {
            noise,
            omegas,
            cache: Some(cache),
            member_caches: Vec::new(),
        })
    }

    fn vjp(&self, draw: &SourceDraw, upstream: &DenseMatrix) -> Result<Vec<f64>> {
        let cache = draw
            .cache
            .as_ref()
            .ok_or_else(|| Error::Invalid("draw was not produced by an implicit sampler".into()))?;
        SpectralSampler::vjp(self, cache, upstream)
    }
}

/// Spectral mixture trained through `(μ, ln s)`; weights stay fixed.
impl SpectralSource for SpectralMixture {
    fn dim(&self) -> usize {
        SpectralMixture::dim(self)
    }

    fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.means.iter().flatten().copied().collect();
        p.extend(self.stddevs.iter().flatten().map(|s| s.ln()));
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let (q, d) = (self.weights.len(), self.dim());
        ensure_dim("spectral mixture parameter vector", 2 * q * d, params.len())?;
        for c in 0..q {
            for j in 0..d {
                self.means[c][j] = params[c * d + j];
                self.stddevs[c][j] = params[q * d + c * d + j].exp();
            }
        }
        Ok(())
    }

    fn tag(&self) -> BatchSource {
        BatchSource::SpectralMixture
    }

    fn draw_from_noise(&self, noise: DenseMatrix) -> Result<SourceDraw> {
        let omegas = self.map(&noise)?;
        Ok(SourceDraw {
            noise,
            omegas,
            cache: None,
            member_caches: Vec::new(),
        })
    }

    fn vjp(&self, draw: &SourceDraw, upstream: &DenseMatrix) -> Result<Vec<f64>> {
        ensure_dim("spectral mixture upstream rows", draw.noise.rows(), upstream.rows())?;
        ensure_dim("spectral mixture upstream cols", draw.noise.cols(), upstream.cols())?;
        let (q, d) = (self.weights.len(), self.dim());
        let mut grad = vec![0.0; 2 * q * d];
        for (c, rows) in self.blocks(draw.noise.rows()).into_iter().enumerate() {
            for i in rows {
                let g = upstream.row(i);
                let e = draw.noise.row(i);
                for j in 0..d {
                    grad[c * d + j] += g[j];
                    grad[q * d + c * d + j] += g[j] * e[j] * self.stddevs[c][j];
                }
            }
        }
        Ok(grad)
    }

    fn blocks(&self, m: usize) -> Vec<Range<usize>> {
        blocks_from_counts(&stratified_counts(&self.weights, m))
    }
}

/// Equal-weight mixture of implicit samplers, each owning a block of the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerMixture {
    pub members: Vec<SpectralSampler>,
}

impl SamplerMixture {
    pub fn new(members: Vec<SpectralSampler>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Invalid("sampler mixture needs a member".into()))?;
        for m in &members {
            ensure_dim("sampler mixture member dimension", first.dim(), m.dim())?;
        }
        Ok(Self { members })
    }
}

impl SpectralSource for SamplerMixture {
    fn dim(&self) -> usize {
        self.members[0].dim()
    }

    fn params(&self) -> Vec<f64> {
        self.members.iter().flat_map(|s| s.net.params()).collect()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim("sampler mixture parameter vector", self.num_params(), params.len())?;
        let mut offset = 0;
        for s in &mut self.members {
            let n = s.num_params();
            s.net.set_params(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.members.iter().map(SpectralSampler::num_params).sum()
    }

    fn tag(&self) -> BatchSource {
        BatchSource::Implicit
    }

    fn draw_from_noise(&self, noise: DenseMatrix) -> Result<SourceDraw> {
        let mut omegas = DenseMatrix::zeros(noise.rows(), noise.cols());
        let mut caches = Vec::with_capacity(self.members.len());
        for (s, rows) in self.members.iter().zip(self.blocks(noise.rows())) {
            let idx: Vec<usize> = rows.clone().collect();
            let (om, cache) = s.map_cached(&noise.select_rows(&idx))?;
            for (k, i) in rows.enumerate() {
                omegas.row_mut(i).copy_from_slice(om.row(k));
            }
            caches.push(cache);
        }
        Ok(SourceDraw {
            noise,
            omegas,
            cache: None,
            member_caches: caches,
        })
    }

    fn vjp(&self, draw: &SourceDraw, upstream: &DenseMatrix) -> Result<Vec<f64>> {
        ensure_dim("sampler mixture caches", self.members.len(), draw.member_caches.len())?;
        let mut grad = Vec::with_capacity(self.num_params());
        for ((s, cache), rows) in self
            .members
            .iter()
            .zip(&draw.member_caches)
            .zip(self.blocks(draw.noise.rows()))
        {
            let idx: Vec<usize> = rows.collect();
            grad.extend(s.vjp(cache, &upstream.select_rows(&idx))?);
        }
        Ok(grad)
    }

    fn blocks(&self, m: usize) -> Vec<Range<usize>> {
        blocks_from_counts(&stratified_counts(&vec![1.0; self.members.len()], m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    fn nzu(v: usize) -> NonZeroUsize {
        NonZeroUsize::new(v).unwrap()
    }

    #[test]
    fn base_noise_is_reproducible() {
        let a = sample_base(&mut Prng::new(9), nzu(1), nzu(1));
        let b = sample_base(&mut Prng::new(9), nzu(1), nzu(1));
        assert_eq!(a, b);
    }

    #[test]
    fn base_noise_moments() {
        let nu = sample_base(&mut Prng::new(10), nzu(100_000), nzu(2));
        let n = nu.rows() as f64;
        for j in 0..2 {
            let col: Vec<f64> = (0..nu.rows()).map(|i| nu[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn identity_sampler_returns_noise() {
        let nu = Prng::new(11).normal_matrix(50, 3);
        assert_eq!(SpectralSampler::identity(3).map(&nu).unwrap(), nu);
        let exact = SpectralSampler::near_identity(3, &[8, 8], 0.0, &mut Prng::new(1)).unwrap();
        assert_eq!(exact.map(&nu).unwrap(), nu);
    }

    #[test]
    fn hand_evaluated_sign_abs_wrapper() {
        // h̃(a) = a·W + b with W = [[2, 0], [1, -1]], b = [0, 3]; ν = (1, -2)
        // |ν| = (1, 2): h̃ = (2 + 2, 0 - 2 + 3) = (4, 1); sign = (+, -) → (4, -1)
        let w = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![1.0, -1.0]]).unwrap();
        let net = Mlp::from_layers(vec![Layer::new(w, vec![0.0, 3.0]).unwrap()], Activation::Relu).unwrap();
        let s = SpectralSampler::from_net(net).unwrap();
        let nu = DenseMatrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        assert_eq!(s.map(&nu).unwrap().as_slice(), &[4.0, -1.0]);
    }

    #[test]
    fn sign_of_zero_is_positive() {
        let s = SpectralSampler::identity(2);
        let nu = DenseMatrix::from_rows(&[vec![0.0, -0.0]]).unwrap();
        let out = s.map(&nu).unwrap();
        assert!(out.as_slice().iter().all(|v| v.is_sign_positive() || *v == 0.0));
    }

    #[test]
    fn odd_symmetry_is_exact() {
        let mut rng = Prng::new(12);
        let s = SpectralSampler::new(4, &[16, 16], &mut rng).unwrap();
        let nu = rng.normal_matrix(1000, 4);
        let pos = s.map(&nu).unwrap();
        let neg = s.map(&nu.neg()).unwrap();
        for (a, b) in pos.as_slice().iter().zip(neg.as_slice()) {
            assert_eq!(a.to_bits(), (-b).to_bits());
        }
    }

    #[test]
    fn vjp_zero_upstream_and_positive_orthant() {
        let mut rng = Prng::new(13);
        let s = SpectralSampler::new(3, &[6], &mut rng).unwrap();
        let nu = rng.normal_matrix(5, 3);
        let g = sampler_vjp(&s, &nu, &DenseMatrix::zeros(5, 3)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let pos = nu.map(f64::abs);
        let up = rng.normal_matrix(5, 3);
        let via_sampler = sampler_vjp(&s, &pos, &up).unwrap();
        let direct = s.net().backprop(&pos, &up).unwrap().0;
        assert_eq!(via_sampler, direct);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = Prng::new(200 + seed);
            let s = SpectralSampler::new(3, &[8, 8], &mut rng).unwrap();
            let nu = rng.normal_matrix(7, 3);
            let up = rng.normal_matrix(7, 3);
            let g = sampler_vjp(&s, &nu, &up).unwrap();
            let f = |p: &[f64]| {
                let mut t = s.clone();
                t.net_mut().set_params(p).unwrap();
                crate::numerics::dot(t.map(&nu).unwrap().as_slice(), up.as_slice())
            };
            assert!(check_gradient(f, &g, &s.net().params(), 1e-5).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn gaussian_frequency_second_moments() {
        for (sigma, expect) in [(1.0, 3.0), (2.0, 0.75)] {
            let spec = KernelSpec::gaussian(&[sigma]).unwrap();
            let b = spec.sample_frequencies(&mut Prng::new(14), 200_000, 3).unwrap();
            let m2 = b.second_moment();
            assert!((m2 - expect).abs() / expect < 0.02, "σ={sigma}: {m2}");
        }
    }

    #[test]
    fn gaussian_mixture_partitions_evenly() {
        let spec = KernelSpec::gaussian(&[1.0, 4.0]).unwrap();
        let b = spec.sample_frequencies(&mut Prng::new(15), 100_000, 2).unwrap();
        let norms = b.omegas().row_sq_norms();
        let first = norms[..50_000].iter().sum::<f64>() / 50_000.0;
        let second = norms[50_000..].iter().sum::<f64>() / 50_000.0;
        assert!((first - 2.0).abs() / 2.0 < 0.02);
        assert!((second - 0.125).abs() / 0.125 < 0.02);
    }

    #[test]
    fn unit_spectral_mixture_equals_unit_gaussian() {
        let sm = SpectralMixture::new(vec![vec![0.0; 3]], vec![vec![1.0; 3]], vec![1.0]).unwrap();
        let a = KernelSpec::SpectralMixture(sm)
            .sample_frequencies(&mut Prng::new(16), 64, 3)
            .unwrap();
        let b = KernelSpec::gaussian(&[1.0])
            .unwrap()
            .sample_frequencies(&mut Prng::new(16), 64, 3)
            .unwrap();
        assert_eq!(a.omegas(), b.omegas());
    }

    #[test]
    fn rq_cannot_be_sampled_and_implicit_has_no_closed_form() {
        let rq = KernelSpec::rq(&[1.0]).unwrap();
        assert!(matches!(
            rq.sample_frequencies(&mut Prng::new(1), 4, 2),
            Err(Error::ClosedFormOnly(_))
        ));
        let imp = KernelSpec::Implicit {
            sampler: SpectralSampler::identity(2),
        };
        assert!(matches!(
            kernel_closed_form(&imp, &[0.0, 0.0]),
            Err(Error::NoClosedForm(_))
        ));
    }

    #[test]
    fn closed_form_values() {
        let g = KernelSpec::gaussian(&[1.0]).unwrap();
        assert_eq!(kernel_closed_form(&g, &[0.0, 0.0]).unwrap(), 1.0);
        assert!((kernel_closed_form(&g, &[1.0, 0.0]).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        let rq = KernelSpec::rq(&[1.0]).unwrap();
        assert!((kernel_closed_form(&rq, &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        let mix = KernelSpec::gaussian(&[1.0, 2.0]).unwrap();
        assert_eq!(kernel_closed_form(&mix, &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn closed_form_derivative_matches_finite_differences() {
        for spec in [
            KernelSpec::gaussian(&[0.5, 2.0]).unwrap(),
            KernelSpec::rq(&[0.2, 1.0, 5.0]).unwrap(),
        ] {
            for r in [0.01, 0.3, 2.0] {
                let (_, dk) = spec.closed_form_with_derivative(r).unwrap();
                let f = |p: &[f64]| spec.closed_form_with_derivative(p[0]).unwrap().0;
                assert!(check_gradient(f, &[dk], &[r], 1e-5).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::gaussian(&[1.0, 0.0]).is_err());
        assert!(KernelSpec::rq(&[]).is_err());
        assert!(SpectralMixture::new(vec![vec![0.0]], vec![vec![1.0]], vec![0.5]).is_err());
        assert!(SpectralMixture::new(vec![vec![0.0]], vec![vec![-1.0]], vec![1.0]).is_err());
    }

    #[test]
    fn stratified_counts_sum_to_m() {
        assert_eq!(stratified_counts(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(stratified_counts(&[0.5, 0.25, 0.25], 8), vec![4, 2, 2]);
        assert_eq!(stratified_counts(&[1.0], 0), vec![0]);
    }

    #[test]
    fn spectral_mixture_vjp_matches_finite_differences() {
        let mut rng = Prng::new(17);
        let sm = SpectralMixture::init(3, 2, 0.5, 1.0, &mut rng).unwrap();
        let noise = rng.normal_matrix(9, 3);
        let up = rng.normal_matrix(9, 3);
        let draw = sm.draw_from_noise(noise.clone()).unwrap();
        let g = SpectralSource::vjp(&sm, &draw, &up).unwrap();
        let f = |p: &[f64]| {
            let mut t = sm.clone();
            SpectralSource::set_params(&mut t, p).unwrap();
            crate::numerics::dot(t.map(&noise).unwrap().as_slice(), up.as_slice())
        };
        assert!(check_gradient(f, &g, &SpectralSource::params(&sm), 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn sampler_mixture_vjp_matches_finite_differences() {
        let mut rng = Prng::new(18);
        let mix = SamplerMixture::new(vec![
            SpectralSampler::new(2, &[5], &mut rng).unwrap(),
            SpectralSampler::new(2, &[5], &mut rng).unwrap(),
        ])
        .unwrap();
        let noise = rng.normal_matrix(7, 2);
        let up = rng.normal_matrix(7, 2);
        let draw = mix.draw_from_noise(noise.clone()).unwrap();
        let g = mix.vjp(&draw, &up).unwrap();
        let f = |p: &[f64]| {
            let mut t = mix.clone();
            t.set_params(p).unwrap();
            let om = t.draw_from_noise(noise.clone()).unwrap().omegas;
            crate::numerics::dot(om.as_slice(), up.as_slice())
        };
        assert!(check_gradient(f, &g, &mix.params(), 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn calibration_hits_target() {
        let mut rng = Prng::new(19);
        let mut s = SpectralSampler::new(4, &[16, 16], &mut rng).unwrap();
        s.calibrate_second_moment(1.0, 4096, &mut Prng::new(20)).unwrap();
        let nu = Prng::new(20).normal_matrix(4096, 4);
        let m2 = mean(&s.map(&nu).unwrap().row_sq_norms());
        assert!((m2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kernel_spec_json_roundtrip() {
        let mut rng = Prng::new(21);
        let specs = vec![
            KernelSpec::gaussian(&[1.0, 2.5]).unwrap(),
            KernelSpec::rq(&[0.2]).unwrap(),
            KernelSpec::SpectralMixture(SpectralMixture::init(2, 2, 1.0, 0.3, &mut rng).unwrap()),
            KernelSpec::Implicit {
                sampler: SpectralSampler::new(2, &[4], &mut rng).unwrap(),
            },
        ];
        for spec in specs {
            let json = serde_json::to_string(&spec).unwrap();
            assert!(json.contains("\"variant\""));
            let back: KernelSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec);
        }
    }
}
