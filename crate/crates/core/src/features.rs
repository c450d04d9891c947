//! Random Fourier feature embeddings and kernel matrices.
//!
//! For frequencies `ω_1..ω_m` a point `x` is embedded as
//! `(1/√m) [cos ω_1ᵀx, sin ω_1ᵀx, …, cos ω_mᵀx, sin ω_mᵀx]`, so that inner
//! products average `cos(ω_jᵀ(x - x'))` and every row has unit norm.

use std::io::Write;
use std::sync::Arc;

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, sq_dist, DenseMatrix};
use crate::spectral::{FrequencyBatch, KernelSpec};

/// Feature embedding of a dataset for one frequency batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    features: DenseMatrix,
    batch: Arc<FrequencyBatch>,
}

impl FeatureMap {
    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn batch(&self) -> &Arc<FrequencyBatch> {
        &self.batch
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    /// Width of the embedding, `2m`.
    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn same_batch(&self, other: &FeatureMap) -> bool {
        Arc::ptr_eq(&self.batch, &other.batch) || self.batch.fingerprint() == other.batch.fingerprint()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMap {
        FeatureMap {
            features: self.features.select_rows(idx),
            batch: Arc::clone(&self.batch),
        }
    }

    /// Writes one CSV row per example, with the label first when given.
    pub fn write_csv<W: Write>(&self, out: W, labels: Option<&[f64]>) -> Result<()> {
        if let Some(y) = labels {
            ensure_dim("csv labels", self.rows(), y.len())?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for (i, row) in self.features.iter_rows().enumerate() {
            let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
            if let Some(y) = labels {
                rec.push(y[i].to_string());
            }
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// `X Ωᵀ`: projections of every row of `x` on every frequency.
pub fn project(x: &DenseMatrix, omegas: &DenseMatrix) -> Result<DenseMatrix> {
    ensure_dim("data width vs frequency dimension", omegas.cols(), x.cols())?;
    x.matmul(&omegas.transpose())
}

/// Interleaved cos/sin features of projections `proj` (n×m), scaled by `1/√m`.
pub fn features_from_projections(proj: &DenseMatrix) -> DenseMatrix {
    let (n, m) = proj.shape();
    let scale = 1.0 / (m as f64).sqrt();
    let mut data = Vec::with_capacity(n * 2 * m);
    for &p in proj.as_slice() {
        let (s, c) = p.sin_cos();
        data.push(scale * c);
        data.push(scale * s);
    }
    DenseMatrix::from_raw(n, 2 * m, data)
}

/// Random Fourier features of `x` for the given frequency batch.
pub fn fourier_features(x: &DenseMatrix, freqs: &Arc<FrequencyBatch>) -> Result<FeatureMap> {
    let proj = project(x, freqs.omegas())?;
    Ok(FeatureMap {
        features: features_from_projections(&proj),
        batch: Arc::clone(freqs),
    })
}

/// Backward pass of the feature map: given `∂L/∂features` (n×2m), returns
/// `(∂L/∂x, ∂L/∂Ω)`.
pub fn features_backward(
    x: &DenseMatrix,
    omegas: &DenseMatrix,
    proj: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, m) = proj.shape();
    ensure_dim("feature upstream rows", n, upstream.rows())?;
    ensure_dim("feature upstream cols", 2 * m, upstream.cols())?;
    let g_proj = projection_grad(proj, upstream);
    let dx = g_proj.matmul(omegas)?;
    let domega = g_proj.t_matmul(x)?;
    Ok((dx, domega))
}

/// [`features_backward`] reusing the cos/sin values already stored in `features`.
pub fn features_backward_cached(
    x: &DenseMatrix,
    omegas: &DenseMatrix,
    features: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, w) = features.shape();
    ensure_dim("feature upstream rows", n, upstream.rows())?;
    ensure_dim("feature upstream cols", w, upstream.cols())?;
    ensure_dim("feature width vs frequencies", 2 * omegas.rows(), w)?;
    let g_proj = projection_grad_cached(features, upstream)?;
    Ok((g_proj.matmul(omegas)?, g_proj.t_matmul(x)?))
}

/// `∂L/∂proj` from `∂L/∂features` and the features themselves (already scaled by `1/√m`).
pub fn projection_grad_cached(features: &DenseMatrix, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, w) = features.shape();
    ensure_dim("feature upstream rows", n, upstream.rows())?;
    ensure_dim("feature upstream cols", w, upstream.cols())?;
    let data = features
        .as_slice()
        .chunks_exact(2)
        .zip(upstream.as_slice().chunks_exact(2))
        .map(|(f, up)| -f[1] * up[0] + f[0] * up[1])
        .collect();
    Ok(DenseMatrix::from_raw(n, w / 2, data))
}

/// `∂L/∂proj` from `∂L/∂features`.
pub fn projection_grad(proj: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    let (n, m) = proj.shape();
    let scale = 1.0 / (m as f64).sqrt();
    let up = upstream.as_slice();
    let data = proj
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let (s, c) = p.sin_cos();
            scale * (-s * up[2 * k] + c * up[2 * k + 1])
        })
        .collect();
    DenseMatrix::from_raw(n, m, data)
}

/// `Φ_X Φ_Yᵀ`: the Monte-Carlo kernel matrix.
pub fn kernel_matrix_approx(a: &FeatureMap, b: &FeatureMap) -> Result<DenseMatrix> {
    if !a.same_batch(b) {
        return Err(Error::Provenance);
    }
    a.features.matmul_t(&b.features)
}

/// Exact kernel matrix from a closed-form kernel.
pub fn kernel_matrix_exact(spec: &KernelSpec, x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    ensure_dim("kernel_matrix_exact widths", x.cols(), y.cols())?;
    if !spec.has_closed_form() {
        return Err(Error::NoClosedForm(spec.name()));
    }
    let mut out = Vec::with_capacity(x.rows() * y.rows());
    for a in x.iter_rows() {
        for b in y.iter_rows() {
            out.push(spec.closed_form_with_derivative(sq_dist(a, b))?.0);
        }
    }
    if x.cols() == 0 {
        out = vec![1.0; x.rows() * y.rows()];
    }
    DenseMatrix::from_vec(x.rows(), y.rows(), out)
}

/// Monte-Carlo estimate `(1/m) Σ_j cos(ω_jᵀ(x - y))` for a single pair.
pub fn kernel_estimate(omegas: &DenseMatrix, x: &[f64], y: &[f64]) -> f64 {
    let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = omegas.rows() as f64;
    omegas.iter_rows().map(|w| dot(w, &delta).cos()).sum::<f64>() / m
}
