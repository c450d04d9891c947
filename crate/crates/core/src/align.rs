//! Kernel alignment: training a frequency source so that the induced kernel
//! agrees with the label similarity `y_i y_j`.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_dim, Error, Result};
use crate::features::{csv_err, features_backward, features_from_projections, project};
use crate::numerics::{dot, AdamState, DenseMatrix, Prng};
use crate::spectral::SpectralSource;

/// A minibatch of labelled points together with the base noise for one step.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    x: DenseMatrix,
    y: Vec<f64>,
    nu: DenseMatrix,
}

impl AlignmentBatch {
    pub fn new(x: DenseMatrix, y: Vec<f64>, nu: DenseMatrix) -> Result<Self> {
        ensure_dim("alignment labels", x.rows(), y.len())?;
        if x.rows() < 2 {
            return Err(Error::SampleSize { min: 2, got: x.rows() });
        }
        if y.iter().any(|&v| v.abs() != 1.0) {
            return Err(Error::Invalid("alignment labels must be ±1".into()));
        }
        Ok(Self { x, y, nu })
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn nu(&self) -> &DenseMatrix {
        &self.nu
    }
}

/// Alignment of features `phi` with labels `y`, plus its gradient with respect to `phi`.
fn alignment_from_features(phi: &DenseMatrix, y: &[f64], want_grad: bool) -> (f64, Option<DenseMatrix>) {
    let b = y.len() as f64;
    let norm = 1.0 / (b * (b - 1.0));
    let mut s = vec![0.0; phi.cols()];
    for (row, &yi) in phi.iter_rows().zip(y) {
        for (a, &p) in s.iter_mut().zip(row) {
            *a += yi * p;
        }
    }
    let diag: f64 = phi.row_sq_norms().iter().zip(y).map(|(r, yi)| yi * yi * r).sum();
    let value = norm * (dot(&s, &s) - diag);
    let grad = want_grad.then(|| {
        let mut g = DenseMatrix::zeros(phi.rows(), phi.cols());
        for (i, &yi) in y.iter().enumerate() {
            let p = phi.row(i);
            for ((gv, &sv), &pv) in g.row_mut(i).iter_mut().zip(&s).zip(p) {
                *gv = 2.0 * norm * (yi * sv - yi * yi * pv);
            }
        }
        g
    });
    (value, grad)
}

/// Empirical alignment `(1/(B(B−1))) Σ_{i≠i'} y_i y_i' k̂(x_i, x_i')` under the
/// frequencies the source produces from the batch noise.
pub fn alignment_value<S: SpectralSource + ?Sized>(batch: &AlignmentBatch, source: &S) -> Result<f64> {
    let draw = source.draw_from_noise(batch.nu.clone())?;
    alignment_with_omegas(batch.x(), batch.y(), &draw.omegas)
}

/// Alignment for explicit frequencies.
pub fn alignment_with_omegas(x: &DenseMatrix, y: &[f64], omegas: &DenseMatrix) -> Result<f64> {
    ensure_dim("alignment labels", x.rows(), y.len())?;
    if x.rows() < 2 {
        return Err(Error::SampleSize { min: 2, got: x.rows() });
    }
    let phi = features_from_projections(&project(x, omegas)?);
    Ok(alignment_from_features(&phi, y, false).0)
}

/// Alignment value and its gradient with respect to the source parameters.
pub fn alignment_value_and_grad<S: SpectralSource + ?Sized>(
    batch: &AlignmentBatch,
    source: &S,
) -> Result<(f64, Vec<f64>)> {
    let draw = source.draw_from_noise(batch.nu.clone())?;
    let proj = project(batch.x(), &draw.omegas)?;
    let phi = features_from_projections(&proj);
    let (value, g_phi) = alignment_from_features(&phi, batch.y(), true);
    let (_, g_omega) = features_backward(batch.x(), &draw.omegas, &proj, &g_phi.expect("gradient requested"))?;
    Ok((value, source.vjp(&draw, &g_omega)?))
}

pub fn alignment_grad<S: SpectralSource + ?Sized>(batch: &AlignmentBatch, source: &S) -> Result<Vec<f64>> {
    Ok(alignment_value_and_grad(batch, source)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignTrainConfig {
    pub batch_size: usize,
    /// Frequencies drawn per step.
    pub m: usize,
    pub lr: f64,
    pub max_iters: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub probe_size: usize,
    /// Frequencies used for probe and validation evaluations.
    pub probe_m: usize,
    pub seed: u64,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            m: 64,
            lr: 1e-6,
            max_iters: 3000,
            eval_every: 100,
            patience: 5,
            probe_size: 256,
            probe_m: 256,
            seed: 0,
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid("batch_size must be at least 2".into()));
        }
        if self.m == 0 || self.eval_every == 0 || self.probe_size < 2 || self.probe_m == 0 {
            return Err(Error::Invalid(
                "m, eval_every, probe_size and probe_m must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignLogRow {
    pub iter: usize,
    pub probe_alignment: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignLog {
    pub rows: Vec<AlignLogRow>,
    pub iters_run: usize,
    pub stopped_early: bool,
    /// Iteration whose parameters were kept (best validation alignment).
    pub best_iter: usize,
}

impl AlignLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "probe_alignment", "wall_ms"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.iter.to_string(), r.probe_alignment.to_string(), r.wall_ms.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Copy with wall-clock times zeroed, for byte-reproducible output.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.rows.iter_mut().for_each(|r| r.wall_ms = 0);
        out
    }
}

/// Ascends the alignment with Adam on fresh minibatches and fresh noise every
/// step. Probe alignment is logged on a fixed subset of `data` with fixed noise;
/// early stopping watches the same quantity on `validation` when given.
/// The parameters with the best monitored alignment are kept.
pub fn train_alignment<S: SpectralSource + ?Sized>(
    data: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    source: &mut S,
    cfg: &AlignTrainConfig,
) -> Result<AlignLog> {
    cfg.validate()?;
    ensure_dim("data dimension", source.dim(), data.dim())?;
    let root = Prng::new(cfg.seed);
    let probe_nu = root.split("probe-noise").normal_matrix(cfg.probe_m, source.dim());
    let monitor = match validation {
        Some(v) => {
            ensure_dim("validation dimension", source.dim(), v.dim())?;
            let idx = root.split("validation").sample_indices(v.len(), cfg.probe_size);
            v.select(&idx)
        }
        None => {
            let idx = root.split("probe").sample_indices(data.len(), cfg.probe_size);
            data.select(&idx)
        }
    };
    train_alignment_monitored(data, source, cfg, |src: &S| {
        let draw = src.draw_from_noise(probe_nu.clone())?;
        alignment_with_omegas(monitor.x(), monitor.y(), &draw.omegas)
    })
}

/// Like [`train_alignment`], with early stopping and model selection driven by
/// `score` (higher is better), evaluated every `eval_every` steps and at the start.
pub fn train_alignment_monitored<S, F>(
    data: &LabeledDataset,
    source: &mut S,
    cfg: &AlignTrainConfig,
    mut score: F,
) -> Result<AlignLog>
where
    S: SpectralSource + ?Sized,
    F: FnMut(&S) -> Result<f64>,
{
    cfg.validate()?;
    ensure_dim("data dimension", source.dim(), data.dim())?;
    if data.len() < 2 {
        return Err(Error::SampleSize {
            min: 2,
            got: data.len(),
        });
    }
    if data.is_single_class() {
        log::warn!("alignment training on single-class data; the objective is label-independent");
    }
    let root = Prng::new(cfg.seed);
    let d = source.dim();
    let probe_idx = root.split("probe").sample_indices(data.len(), cfg.probe_size);
    let probe = data.select(&probe_idx);
    let probe_nu = root.split("probe-noise").normal_matrix(cfg.probe_m, d);
    let eval = |src: &S| -> Result<f64> {
        let draw = src.draw_from_noise(probe_nu.clone())?;
        alignment_with_omegas(probe.x(), probe.y(), &draw.omegas)
    };

    let start = Instant::now();
    let mut log = AlignLog::default();
    let mut params = source.params();
    let mut best_params = params.clone();
    let mut best = score(source)?;
    let mut stale = 0;
    log.rows.push(AlignLogRow {
        iter: 0,
        probe_alignment: eval(source)?,
        wall_ms: 0,
    });
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let batch_size = cfg.batch_size.min(data.len());

    for it in 1..=cfg.max_iters {
        let mut step = root.substream("step", it as u64);
        let idx = step.sample_indices(data.len(), batch_size);
        let nu = step.normal_matrix(cfg.m, d);
        let sub = data.select(&idx);
        let batch = AlignmentBatch::new(sub.x().clone(), sub.y().to_vec(), nu)?;
        let (value, grad) = alignment_value_and_grad(&batch, source)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                iter: it,
                message: "non-finite alignment".into(),
            });
        }
        adam.ascend(&mut params, &grad)?;
        source.set_params(&params)?;
        log.iters_run = it;

        if it % cfg.eval_every == 0 || it == cfg.max_iters {
            log.rows.push(AlignLogRow {
                iter: it,
                probe_alignment: eval(source)?,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            let v = score(source)?;
            if v > best {
                best = v;
                best_params.clone_from(&params);
                log.best_iter = it;
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    source.set_params(&best_params)?;
    Ok(log)
}

/// One row of the random-feature consistency study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub m: usize,
    pub mean_gap: f64,
    pub bound: f64,
    /// Fraction of repeats whose gap is within `bound`.
    pub within: f64,
}

/// `√(2 log(4/δ) / m)`.
pub fn consistency_bound(m: usize, delta: f64) -> f64 {
    (2.0 * (4.0 / delta).ln() / m as f64).sqrt()
}

/// Gap between the alignment estimated with `m` frequencies and a reference
/// estimate with `m_ref` frequencies, averaged over `repeats` resamplings.
pub fn alignment_consistency<S: SpectralSource + ?Sized>(
    x: &DenseMatrix,
    y: &[f64],
    source: &S,
    m_list: &[usize],
    repeats: usize,
    m_ref: usize,
    delta: f64,
    prng: &Prng,
) -> Result<Vec<ConsistencyRow>> {
    if repeats == 0 || m_list.is_empty() {
        return Err(Error::Invalid(
            "consistency study needs repeats and at least one m".into(),
        ));
    }
    if m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("m list must be strictly ascending".into()));
    }
    let d = source.dim();
    let reference = {
        let draw = source.draw_from_noise(prng.split("reference").normal_matrix(m_ref, d))?;
        alignment_with_omegas(x, y, &draw.omegas)?
    };
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let bound = consistency_bound(m, delta);
        let mut total = 0.0;
        let mut inside = 0usize;
        for r in 0..repeats {
            let mut rng = prng.substream(&format!("m{m}"), r as u64);
            let draw = source.draw_from_noise(rng.normal_matrix(m, d))?;
            let gap = (alignment_with_omegas(x, y, &draw.omegas)? - reference).abs();
            total += gap;
            if gap <= bound {
                inside += 1;
            }
        }
        rows.push(ConsistencyRow {
            m,
            mean_gap: total / repeats as f64,
            bound,
            within: inside as f64 / repeats as f64,
        });
    }
    Ok(rows)
}
