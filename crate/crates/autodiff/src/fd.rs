//! Central finite differences for gradient verification.
//!
//! These helpers exist so gradient checks everywhere in the workspace share
//! one implementation: perturb one coordinate at a time, evaluate the
//! function twice, and compare against the analytic gradient with a
//! relative error that has an absolute floor for near-zero entries.

/// Central-difference gradient of a scalar function at `x` with step `h`.
pub fn central_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error `|got - want| / max(floor, |want|)`.
pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert!(
        got.len() == want.len(),
        "length mismatch: {} vs {}",
        got.len(),
        want.len()
    );
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Largest absolute elementwise difference.
pub fn max_abs_err(got: &[f64], want: &[f64]) -> f64 {
    assert!(
        got.len() == want.len(),
        "length mismatch: {} vs {}",
        got.len(),
        want.len()
    );
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g - w).abs())
        .fold(0.0, f64::max)
}
