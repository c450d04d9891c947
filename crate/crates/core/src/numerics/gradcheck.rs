use crate::error::{ensure_dim, Error, Result};

/// Largest relative error between `analytic` and central differences of `f` at `point`.
///
/// Per coordinate: `|a - (f(p + h e_i) - f(p - h e_i)) / 2h| / (|a| + 1e-8)`.
pub fn check_gradient<F>(f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    ensure_dim("analytic gradient length", point.len(), analytic.len())?;
    let numeric = numeric_gradient(f, point, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max))
}

/// `‖a − n‖₂ / ‖n‖₂` between `analytic` and the central-difference gradient `n`.
///
/// Preferred when some coordinates are exactly zero by symmetry, where the
/// per-coordinate ratio of [`check_gradient`] only measures rounding noise.
pub fn check_gradient_norm<F>(f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    ensure_dim("analytic gradient length", point.len(), analytic.len())?;
    let numeric = numeric_gradient(f, point, h)?;
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum();
    let norm: f64 = numeric.iter().map(|n| n * n).sum();
    Ok((diff / norm.max(1e-300)).sqrt())
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient<F>(f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut p = point.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference objective",
                index: i,
            });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}
