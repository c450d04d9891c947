//! Maximum mean discrepancy estimators and the penalties used when training
//! kernels adversarially.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::features::FeatureMap;
use crate::numerics::{dot, DenseMatrix, Mlp, Prng};
use crate::spectral::{KernelSpec, SourceDraw, SpectralSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Diagonal-excluded U-statistic.
    Unbiased,
    /// Squared distance between mean embeddings (V-statistic).
    FeatureMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub n: usize,
    pub n_prime: usize,
    pub estimator: Estimator,
}

fn off_diagonal_sum(k: &DenseMatrix) -> f64 {
    let diag: f64 = (0..k.rows()).map(|i| k[(i, i)]).sum();
    k.sum() - diag
}

/// U-statistic MMD² from the three Gram blocks.
pub fn mmd_unbiased(kxx: &DenseMatrix, kxy: &DenseMatrix, kyy: &DenseMatrix) -> Result<MmdEstimate> {
    let (n, n2) = (kxx.rows(), kyy.rows());
    ensure_dim("KXX must be square", n, kxx.cols())?;
    ensure_dim("KYY must be square", n2, kyy.cols())?;
    ensure_dim("KXY rows", n, kxy.rows())?;
    ensure_dim("KXY cols", n2, kxy.cols())?;
    check_sizes(n, n2)?;
    let (nf, mf) = (n as f64, n2 as f64);
    let value = off_diagonal_sum(kxx) / (nf * (nf - 1.0)) - 2.0 * kxy.sum() / (nf * mf)
        + off_diagonal_sum(kyy) / (mf * (mf - 1.0));
    Ok(MmdEstimate {
        value,
        n,
        n_prime: n2,
        estimator: Estimator::Unbiased,
    })
}

fn check_sizes(n: usize, n2: usize) -> Result<()> {
    let got = n.min(n2);
    if got < 2 {
        return Err(Error::SampleSize { min: 2, got });
    }
    Ok(())
}

/// MMD² computed directly from feature matrices, with its gradient with
/// respect to both feature matrices.
#[derive(Debug, Clone)]
pub struct FeatureMmd {
    pub value: f64,
    pub grad_x: DenseMatrix,
    pub grad_y: DenseMatrix,
}

/// Feature-space MMD² and its gradient. The unbiased form drops the diagonal
/// terms `‖φ_i‖²` exactly as the Gram-matrix U-statistic does.
pub fn feature_mmd_with_grad(fx: &DenseMatrix, fy: &DenseMatrix, estimator: Estimator) -> Result<FeatureMmd> {
    ensure_dim("feature widths", fx.cols(), fy.cols())?;
    let (n, n2) = (fx.rows(), fy.rows());
    let sx = fx.column_sums();
    let sy = fy.column_sums();
    let (nf, mf) = (n as f64, n2 as f64);
    let mut grad_x = DenseMatrix::zeros(n, fx.cols());
    let mut grad_y = DenseMatrix::zeros(n2, fy.cols());
    let value = match estimator {
        Estimator::FeatureMean => {
            if n == 0 || n2 == 0 {
                return Err(Error::EmptyBatch);
            }
            let diff: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| a / nf - b / mf).collect();
            for i in 0..n {
                for (g, d) in grad_x.row_mut(i).iter_mut().zip(&diff) {
                    *g = 2.0 * d / nf;
                }
            }
            for j in 0..n2 {
                for (g, d) in grad_y.row_mut(j).iter_mut().zip(&diff) {
                    *g = -2.0 * d / mf;
                }
            }
            dot(&diff, &diff)
        }
        Estimator::Unbiased => {
            check_sizes(n, n2)?;
            let cx = 1.0 / (nf * (nf - 1.0));
            let cy = 1.0 / (mf * (mf - 1.0));
            let cxy = 2.0 / (nf * mf);
            let dx: f64 = fx.row_sq_norms().iter().sum();
            let dy: f64 = fy.row_sq_norms().iter().sum();
            for i in 0..n {
                let phi = fx.row(i);
                for ((g, (&s, &t)), &p) in grad_x.row_mut(i).iter_mut().zip(sx.iter().zip(&sy)).zip(phi) {
                    *g = 2.0 * cx * (s - p) - cxy * t;
                }
            }
            for j in 0..n2 {
                let phi = fy.row(j);
                for ((g, (&s, &t)), &p) in grad_y.row_mut(j).iter_mut().zip(sy.iter().zip(&sx)).zip(phi) {
                    *g = 2.0 * cy * (s - p) - cxy * t;
                }
            }
            cx * (dot(&sx, &sx) - dx) - cxy * dot(&sx, &sy) + cy * (dot(&sy, &sy) - dy)
        }
    };
    Ok(FeatureMmd { value, grad_x, grad_y })
}

/// MMD² between two feature maps built from the same frequency batch.
pub fn mmd_from_features(px: &FeatureMap, py: &FeatureMap, unbiased: bool) -> Result<MmdEstimate> {
    if !px.same_batch(py) {
        return Err(Error::Provenance);
    }
    let estimator = if unbiased {
        Estimator::Unbiased
    } else {
        Estimator::FeatureMean
    };
    let r = feature_mmd_with_grad(px.features(), py.features(), estimator)?;
    Ok(MmdEstimate {
        value: r.value,
        n: px.rows(),
        n_prime: py.rows(),
        estimator,
    })
}

/// MMD² under a closed-form kernel with gradients with respect to the raw
/// point sets. The biased form keeps the diagonal terms.
pub fn gram_mmd_with_grad(
    spec: &KernelSpec,
    x: &DenseMatrix,
    y: &DenseMatrix,
    estimator: Estimator,
) -> Result<FeatureMmd> {
    ensure_dim("point dimensions", x.cols(), y.cols())?;
    if !spec.has_closed_form() {
        return Err(Error::NoClosedForm(spec.name()));
    }
    let (n, n2) = (x.rows(), y.rows());
    let (nf, mf) = (n as f64, n2 as f64);
    let (cx, cy) = match estimator {
        Estimator::Unbiased => {
            check_sizes(n, n2)?;
            (1.0 / (nf * (nf - 1.0)), 1.0 / (mf * (mf - 1.0)))
        }
        Estimator::FeatureMean => {
            if n == 0 || n2 == 0 {
                return Err(Error::EmptyBatch);
            }
            (1.0 / (nf * nf), 1.0 / (mf * mf))
        }
    };
    let cxy = 2.0 / (nf * mf);
    let d = x.cols();
    let mut grad_x = DenseMatrix::zeros(n, d);
    let mut grad_y = DenseMatrix::zeros(n2, d);
    let mut value = 0.0;

    // Within-set terms: each unordered pair contributes twice.
    let mut within = |pts: &DenseMatrix, grad: &mut DenseMatrix, c: f64| -> Result<()> {
        for i in 0..pts.rows() {
            for j in i + 1..pts.rows() {
                let (k, dk) = pair(spec, pts.row(i), pts.row(j))?;
                value += 2.0 * c * k;
                for t in 0..d {
                    let g = 2.0 * c * dk * 2.0 * (pts[(i, t)] - pts[(j, t)]);
                    grad[(i, t)] += g;
                    grad[(j, t)] -= g;
                }
            }
            if estimator == Estimator::FeatureMean {
                value += c;
            }
        }
        Ok(())
    };
    within(x, &mut grad_x, cx)?;
    within(y, &mut grad_y, cy)?;
    for i in 0..n {
        for j in 0..n2 {
            let (k, dk) = pair(spec, x.row(i), y.row(j))?;
            value -= cxy * k;
            for t in 0..d {
                let g = cxy * dk * 2.0 * (x[(i, t)] - y[(j, t)]);
                grad_x[(i, t)] -= g;
                grad_y[(j, t)] += g;
            }
        }
    }
    Ok(FeatureMmd { value, grad_x, grad_y })
}

fn pair(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    spec.closed_form_with_derivative(crate::numerics::sq_dist(a, b))
}

/// Variance-constraint penalty `λ (Ê‖ω‖² − u)²` summed over blocks of a draw,
/// with its gradient with respect to the frequencies.
#[derive(Debug, Clone)]
pub struct VariancePenalty {
    pub value: f64,
    /// Batch second moment `Ê‖ω‖²` per block.
    pub second_moments: Vec<f64>,
    pub omega_grad: DenseMatrix,
}

/// Penalty terms for frequencies `omegas` split into `blocks`, one target per block.
pub fn variance_penalty_terms(
    omegas: &DenseMatrix,
    blocks: &[std::ops::Range<usize>],
    lambda_h: f64,
    targets: &[f64],
) -> Result<VariancePenalty> {
    ensure_dim("variance targets per block", blocks.len(), targets.len())?;
    if lambda_h < 0.0 || targets.iter().any(|&u| !(u > 0.0)) {
        return Err(Error::Invalid("variance penalty needs λ_h ≥ 0 and u > 0".into()));
    }
    let mut value = 0.0;
    let mut moments = Vec::with_capacity(blocks.len());
    let mut omega_grad = DenseMatrix::zeros(omegas.rows(), omegas.cols());
    let norms = omegas.row_sq_norms();
    for (rows, &u) in blocks.iter().zip(targets) {
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let count = rows.len() as f64;
        let e = rows.clone().map(|i| norms[i]).sum::<f64>() / count;
        let gap = e - u;
        value += lambda_h * gap * gap;
        moments.push(e);
        let coef = lambda_h * 2.0 * gap * 2.0 / count;
        for i in rows.clone() {
            for (g, &w) in omega_grad.row_mut(i).iter_mut().zip(omegas.row(i)) {
                *g = coef * w;
            }
        }
    }
    Ok(VariancePenalty {
        value,
        second_moments: moments,
        omega_grad,
    })
}

/// `λ_h (Ê‖h(ν)‖² − u)²` over the whole draw, with its parameter gradient.
pub fn variance_penalty<S: SpectralSource + ?Sized>(
    source: &S,
    draw: &SourceDraw,
    lambda_h: f64,
    u: f64,
) -> Result<(f64, Vec<f64>)> {
    let m = draw.omegas.rows();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let p = variance_penalty_terms(&draw.omegas, &[0..m], lambda_h, &[u])?;
    let grad = source.vjp(draw, &p.omega_grad)?;
    Ok((p.value, grad))
}

/// Penalty with one target per mixture block of `source`.
pub fn block_variance_penalty<S: SpectralSource + ?Sized>(
    source: &S,
    draw: &SourceDraw,
    lambda_h: f64,
    targets: &[f64],
) -> Result<(VariancePenalty, Vec<f64>)> {
    let blocks = source.blocks(draw.omegas.rows());
    let p = variance_penalty_terms(&draw.omegas, &blocks, lambda_h, targets)?;
    let grad = source.vjp(draw, &p.omega_grad)?;
    Ok((p, grad))
}

/// Random interpolates `ε x_real + (1 − ε) x_fake`, one `ε ~ U(0,1)` per row.
pub fn interpolate(x_real: &DenseMatrix, x_fake: &DenseMatrix, prng: &mut Prng) -> Result<DenseMatrix> {
    ensure_dim("interpolation rows", x_real.rows(), x_fake.rows())?;
    ensure_dim("interpolation cols", x_real.cols(), x_fake.cols())?;
    let mut out = x_fake.clone();
    for i in 0..x_real.rows() {
        let eps = prng.uniform();
        for (o, &r) in out.row_mut(i).iter_mut().zip(x_real.row(i)) {
            *o = eps * r + (1.0 - eps) * *o;
        }
    }
    Ok(out)
}

/// `λ mean_i (‖J_f(x̂_i)‖_F − 1)²` at fixed points, with its parameter gradient.
pub fn gradient_penalty_at(critic: &Mlp, x_hat: &DenseMatrix, lambda_gp: f64) -> Result<(f64, Vec<f64>)> {
    ensure_dim("critic input", critic.input_dim(), x_hat.cols())?;
    let n = x_hat.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if lambda_gp == 0.0 {
        return Ok((0.0, vec![0.0; critic.num_params()]));
    }
    let norms = critic.jacobian_norms(x_hat)?;
    let nf = n as f64;
    let weights: Vec<f64> = norms.iter().map(|g| 2.0 * lambda_gp * (g - 1.0) / nf).collect();
    let value = lambda_gp * norms.iter().map(|g| (g - 1.0) * (g - 1.0)).sum::<f64>() / nf;
    let (_, grad) = critic.jacobian_norm_backprop(x_hat, &weights)?;
    Ok((value, grad))
}

/// Gradient penalty at random interpolates of real and generated points.
pub fn gradient_penalty(
    critic: &Mlp,
    x_real: &DenseMatrix,
    x_fake: &DenseMatrix,
    prng: &mut Prng,
    lambda_gp: f64,
) -> Result<(f64, Vec<f64>)> {
    if lambda_gp < 0.0 {
        return Err(Error::Invalid("λ_GP must be non-negative".into()));
    }
    let x_hat = interpolate(x_real, x_fake, prng)?;
    gradient_penalty_at(critic, &x_hat, lambda_gp)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::features::{fourier_features, kernel_matrix_approx, kernel_matrix_exact};
    use crate::numerics::{check_gradient, Activation, Layer};
    use crate::spectral::{BatchSource, FrequencyBatch, SpectralSampler};

    fn gauss() -> KernelSpec {
        KernelSpec::gaussian(&[1.0]).unwrap()
    }

    #[test]
    fn constant_kernel_gives_zero() {
        let one = DenseMatrix::filled(3, 3, 1.0);
        let v = mmd_unbiased(&one, &one, &one).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.estimator, Estimator::Unbiased);
    }

    #[test]
    fn two_point_hand_expansion() {
        let c = (-0.5f64).exp();
        let k = DenseMatrix::from_rows(&[vec![1.0, c], vec![c, 1.0]]).unwrap();
        let v = mmd_unbiased(&k, &k, &k).unwrap().value;
        // 2c/2 - 2(2 + 2c)/4 + 2c/2
        assert!((v - (c - 1.0)).abs() < 1e-15);
        assert!((v + 0.39347).abs() < 1e-5);
    }

    #[test]
    fn small_samples_rejected() {
        let one = DenseMatrix::filled(1, 1, 1.0);
        let kxy = DenseMatrix::filled(1, 3, 1.0);
        let kyy = DenseMatrix::filled(3, 3, 1.0);
        assert!(matches!(
            mmd_unbiased(&one, &kxy, &kyy),
            Err(Error::SampleSize { min: 2, got: 1 })
        ));
    }

    #[test]
    fn estimator_is_symmetric() {
        let mut rng = Prng::new(1);
        let x = rng.normal_matrix(5, 2);
        let y = rng.normal_matrix(7, 2);
        let s = gauss();
        let kxx = kernel_matrix_exact(&s, &x, &x).unwrap();
        let kyy = kernel_matrix_exact(&s, &y, &y).unwrap();
        let kxy = kernel_matrix_exact(&s, &x, &y).unwrap();
        let a = mmd_unbiased(&kxx, &kxy, &kyy).unwrap().value;
        let b = mmd_unbiased(&kyy, &kxy.transpose(), &kxx).unwrap().value;
        assert!((a - b).abs() < 1e-15);
    }

    fn maps(seed: u64, n: usize, n2: usize, m: usize) -> (FeatureMap, FeatureMap) {
        let mut rng = Prng::new(seed);
        let b = Arc::new(FrequencyBatch::new(rng.normal_matrix(m, 3), BatchSource::Explicit, seed).unwrap());
        let x = rng.normal_matrix(n, 3);
        let y = rng.normal_matrix(n2, 3).map(|v| v + 0.3);
        (fourier_features(&x, &b).unwrap(), fourier_features(&y, &b).unwrap())
    }

    #[test]
    fn feature_path_matches_gram_path() {
        for seed in 0..5 {
            let (px, py) = maps(seed, 8, 8, 16);
            let f = mmd_from_features(&px, &py, true).unwrap().value;
            let g = mmd_unbiased(
                &kernel_matrix_approx(&px, &px).unwrap(),
                &kernel_matrix_approx(&px, &py).unwrap(),
                &kernel_matrix_approx(&py, &py).unwrap(),
            )
            .unwrap()
            .value;
            assert!((f - g).abs() < 1e-12, "{f} vs {g}");
        }
        let (px, _) = maps(9, 6, 2, 8);
        let same = mmd_from_features(&px, &px, true).unwrap().value;
        let k = kernel_matrix_approx(&px, &px).unwrap();
        assert!((same - mmd_unbiased(&k, &k, &k).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn biased_identical_means_is_zero() {
        let (px, _) = maps(2, 6, 2, 8);
        assert_eq!(mmd_from_features(&px, &px, false).unwrap().value, 0.0);
    }

    #[test]
    fn provenance_checked() {
        let (px, _) = maps(1, 4, 4, 4);
        let (_, qy) = maps(2, 4, 4, 4);
        assert!(matches!(mmd_from_features(&px, &qy, true), Err(Error::Provenance)));
    }

    fn check_feature_grad(est: Estimator) {
        let mut rng = Prng::new(3);
        let fx = rng.normal_matrix(4, 6);
        let fy = rng.normal_matrix(5, 6);
        let r = feature_mmd_with_grad(&fx, &fy, est).unwrap();
        let f = |p: &[f64]| {
            let a = DenseMatrix::from_vec(4, 6, p.to_vec()).unwrap();
            feature_mmd_with_grad(&a, &fy, est).unwrap().value
        };
        assert!(check_gradient(f, r.grad_x.as_slice(), fx.as_slice(), 1e-5).unwrap() < 1e-6);
        let g = |p: &[f64]| {
            let b = DenseMatrix::from_vec(5, 6, p.to_vec()).unwrap();
            feature_mmd_with_grad(&fx, &b, est).unwrap().value
        };
        assert!(check_gradient(g, r.grad_y.as_slice(), fy.as_slice(), 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn feature_gradients() {
        check_feature_grad(Estimator::Unbiased);
        check_feature_grad(Estimator::FeatureMean);
    }

    #[test]
    fn gram_estimators_match_matrices_and_gradients() {
        let mut rng = Prng::new(4);
        let x = rng.normal_matrix(4, 2);
        let y = rng.normal_matrix(5, 2);
        for spec in [gauss(), KernelSpec::rq(&[0.5, 2.0]).unwrap()] {
            let kxx = kernel_matrix_exact(&spec, &x, &x).unwrap();
            let kyy = kernel_matrix_exact(&spec, &y, &y).unwrap();
            let kxy = kernel_matrix_exact(&spec, &x, &y).unwrap();
            let u = gram_mmd_with_grad(&spec, &x, &y, Estimator::Unbiased).unwrap();
            assert!((u.value - mmd_unbiased(&kxx, &kxy, &kyy).unwrap().value).abs() < 1e-13);
            let b = gram_mmd_with_grad(&spec, &x, &y, Estimator::FeatureMean).unwrap();
            let direct = kxx.sum() / 16.0 - 2.0 * kxy.sum() / 20.0 + kyy.sum() / 25.0;
            assert!((b.value - direct).abs() < 1e-13);
            for est in [Estimator::Unbiased, Estimator::FeatureMean] {
                let r = gram_mmd_with_grad(&spec, &x, &y, est).unwrap();
                let f = |p: &[f64]| {
                    let a = DenseMatrix::from_vec(4, 2, p.to_vec()).unwrap();
                    gram_mmd_with_grad(&spec, &a, &y, est).unwrap().value
                };
                assert!(check_gradient(f, r.grad_x.as_slice(), x.as_slice(), 1e-5).unwrap() < 1e-5);
                let g = |p: &[f64]| {
                    let b = DenseMatrix::from_vec(5, 2, p.to_vec()).unwrap();
                    gram_mmd_with_grad(&spec, &x, &b, est).unwrap().value
                };
                assert!(check_gradient(g, r.grad_y.as_slice(), y.as_slice(), 1e-5).unwrap() < 1e-5);
            }
        }
    }

    #[test]
    fn unbiased_under_null() {
        let spec = gauss();
        let mut rng = Prng::new(5);
        let trials = 1000;
        let vals: Vec<f64> = (0..trials)
            .map(|_| {
                let x = rng.normal_matrix(32, 2);
                let y = rng.normal_matrix(32, 2);
                gram_mmd_with_grad(&spec, &x, &y, Estimator::Unbiased).unwrap().value
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / trials as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
        assert!(mean.abs() <= 3.0 * (var / trials as f64).sqrt());
    }

    #[test]
    fn variance_penalty_zero_at_target() {
        // Rows with squared norms 1 and 3 average to 2.
        let om = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        let p = variance_penalty_terms(&om, &[0..2], 10.0, &[2.0]).unwrap();
        assert_eq!(p.value, 0.0);
        assert!(p.omega_grad.as_slice().iter().all(|&g| g == 0.0));
        let q = variance_penalty_terms(&om, &[0..2], 10.0, &[1.0]).unwrap();
        assert_eq!(q.value, 10.0);
        assert!(variance_penalty_terms(&DenseMatrix::zeros(0, 2), &[0..0], 1.0, &[1.0]).is_err());
    }

    #[test]
    fn identity_sampler_penalty_near_dimension() {
        let s = SpectralSampler::identity(3);
        let mut rng = Prng::new(6);
        let draw = s.draw(&mut rng, 20_000).unwrap();
        let p = variance_penalty_terms(&draw.omegas, &[0..20_000], 10.0, &[1.0]).unwrap();
        let e = p.second_moments[0];
        assert!((e - 3.0).abs() < 0.15);
        assert!((p.value - 10.0 * (e - 1.0).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn variance_penalty_gradient() {
        let mut rng = Prng::new(7);
        let s = SpectralSampler::new(2, &[5], &mut rng).unwrap();
        let noise = rng.normal_matrix(16, 2);
        let draw = s.draw_from_noise(noise.clone()).unwrap();
        let (_, grad) = variance_penalty(&s, &draw, 10.0, 0.5).unwrap();
        let f = |p: &[f64]| {
            let mut t = s.clone();
            t.set_params(p).unwrap();
            let d = t.draw_from_noise(noise.clone()).unwrap();
            variance_penalty(&t, &d, 10.0, 0.5).unwrap().0
        };
        assert!(check_gradient(f, &grad, &s.params(), 1e-5).unwrap() < 1e-4);
    }

    fn linear_critic(w: &[f64]) -> Mlp {
        let layer = Layer::new(DenseMatrix::from_vec(w.len(), 1, w.to_vec()).unwrap(), vec![0.0]).unwrap();
        Mlp::from_layers(vec![layer], Activation::Relu).unwrap()
    }

    #[test]
    fn linear_critic_penalties() {
        let mut rng = Prng::new(8);
        let xr = rng.normal_matrix(10, 2);
        let xf = rng.normal_matrix(10, 2);
        let unit = linear_critic(&[0.6, 0.8]);
        assert!(gradient_penalty(&unit, &xr, &xf, &mut rng, 10.0).unwrap().0.abs() < 1e-14);
        let double = linear_critic(&[1.2, 1.6]);
        assert!((gradient_penalty(&double, &xr, &xf, &mut rng, 10.0).unwrap().0 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_penalty_parameter_gradient() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut rng = Prng::new(9);
            let critic = Mlp::new(&[2, 6, 5, 3], act, &mut rng).unwrap();
            let x_hat = rng.normal_matrix(7, 2);
            let (_, grad) = gradient_penalty_at(&critic, &x_hat, 10.0).unwrap();
            let f = |p: &[f64]| {
                gradient_penalty_at(&critic.with_params(p).unwrap(), &x_hat, 10.0)
                    .unwrap()
                    .0
            };
            assert!(check_gradient(f, &grad, &critic.params(), 1e-5).unwrap() < 1e-3);
        }
    }

    #[test]
    fn interpolates_lie_between_endpoints() {
        let xr = DenseMatrix::filled(20, 1, 1.0);
        let xf = DenseMatrix::filled(20, 1, 0.0);
        let x = interpolate(&xr, &xf, &mut Prng::new(10)).unwrap();
        assert!(x.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(x.as_slice().windows(2).any(|w| w[0] != w[1]));
    }
}
