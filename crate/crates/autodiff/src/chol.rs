//! Banded Cholesky factorization of a Hermitian Toeplitz matrix, its
//! triangular matrix-vector product, and hand-derived adjoints of both.
//!
//! The matrix is defined by its band `rho(0..=b)`: entry `(i, j)` on and
//! below the diagonal equals `conj(rho(i - j))`, and the diagonal is
//! `re(rho(0))`. The lower factor is stored packed row-major as
//! `[n, b + 1, 2]` real/imaginary pairs, slot `d` of row `i` holding
//! `L[i][i - d]`; slots with `d > i` stay zero.
//!
//! The adjoint walks the factorization loop in exact reverse order. Every
//! use of an entry `L[i][j]` occurs later in program order than its
//! definition, so by the time the reverse sweep reaches the defining
//! statement, that entry's cotangent is complete.

#[inline]
fn at(packed: &[f64], b1: usize, i: usize, d: usize) -> (f64, f64) {
    let p = (i * b1 + d) * 2;
    (packed[p], packed[p + 1])
}

#[inline]
fn add_at(packed: &mut [f64], b1: usize, i: usize, d: usize, re: f64, im: f64) {
    let p = (i * b1 + d) * 2;
    packed[p] += re;
    packed[p + 1] += im;
}

/// Factors the banded Hermitian Toeplitz matrix, retrying once with a
/// diagonal jitter of `1e-12 * trace / n` on a non-positive pivot.
///
/// Returns the packed factor and the applied jitter scale (1 when no jitter
/// was needed), or the row of the failing pivot.
pub fn factor_packed(
    band_re: &[f64],
    band_im: &[f64],
    n: usize,
) -> Result<(Vec<f64>, f64), usize> {
    let b1 = band_re.len();
    let mut packed = vec![0.0; n * b1 * 2];
    match try_factor(band_re, band_im, n, 1.0, &mut packed) {
        Ok(()) => Ok((packed, 1.0)),
        Err(_) => {
            let jitter_scale = 1.0 + 1e-12;
            packed.iter_mut().for_each(|v| *v = 0.0);
            match try_factor(band_re, band_im, n, jitter_scale, &mut packed) {
                Ok(()) => Ok((packed, jitter_scale)),
                Err(row) => Err(row),
            }
        }
    }
}

fn try_factor(
    band_re: &[f64],
    band_im: &[f64],
    n: usize,
    jitter_scale: f64,
    packed: &mut [f64],
) -> Result<(), usize> {
    let b1 = band_re.len();
    let b = b1 - 1;
    let diag = band_re[0] * jitter_scale;
    for i in 0..n {
        let jlo = i.saturating_sub(b);
        for j in jlo..=i {
            let d = i - j;
            // A[i][j] = conj(rho(d)); the diagonal uses re(rho(0)) only.
            let (mut s_re, mut s_im) = if d == 0 {
                (diag, 0.0)
            } else {
                (band_re[d], -band_im[d])
            };
            let klo = jlo.max(j.saturating_sub(b));
            for k in klo..j {
                let (air, aii) = at(packed, b1, i, i - k);
                let (bjr, bji) = at(packed, b1, j, j - k);
                // s -= L[i][k] * conj(L[j][k])
                s_re -= air * bjr + aii * bji;
                s_im -= aii * bjr - air * bji;
            }
            if j < i {
                let (dj, _) = at(packed, b1, j, 0);
                add_at(packed, b1, i, d, s_re / dj, s_im / dj);
            } else {
                if !(s_re > 0.0) || !s_re.is_finite() {
                    return Err(i);
                }
                add_at(packed, b1, i, 0, s_re.sqrt(), 0.0);
            }
        }
    }
    Ok(())
}

/// Reverse sweep of [`factor_packed`]: accumulates the band cotangents
/// given the factor and the cotangent of the packed output.
///
/// The imaginary slot of `rho(0)` receives zero, matching the forward
/// pass's use of the real part only. Cotangents arriving on the zero-filled
/// slots (`d > i`) and on the diagonal's imaginary slots are discarded,
/// since those outputs are constants of the operation.
pub fn factor_adjoint(
    packed: &[f64],
    grad_out: &[f64],
    n: usize,
    b1: usize,
    jitter_scale: f64,
    band_re_bar: &mut [f64],
    band_im_bar: &mut [f64],
) {
    let b = b1 - 1;
    // Working cotangent of L, seeded from the incoming gradient on the
    // valid slots only.
    let mut lbar = vec![0.0; n * b1 * 2];
    for i in 0..n {
        for d in 0..=b.min(i) {
            let p = (i * b1 + d) * 2;
            lbar[p] = grad_out[p];
            lbar[p + 1] = grad_out[p + 1];
        }
    }
    let mut dbar_acc = vec![0.0; n];

    for i in (0..n).rev() {
        let jlo = i.saturating_sub(b);
        for j in (jlo..=i).rev() {
            let d = i - j;
            let (s_re, s_im);
            if j < i {
                // Forward: L[i][j] = s / d[j] with real d[j].
                let (dj, _) = at(packed, b1, j, 0);
                let (lr, li) = at(&lbar, b1, i, d);
                s_re = lr / dj;
                s_im = li / dj;
                let (vr, vi) = at(packed, b1, i, d);
                dbar_acc[j] -= (lr * vr + li * vi) / dj;
            } else {
                // Forward: d[i] = sqrt(re(s)).
                let (dii, _) = at(packed, b1, i, 0);
                let (lr, _) = at(&lbar, b1, i, 0);
                let total = lr + dbar_acc[i];
                s_re = total / (2.0 * dii);
                s_im = 0.0;
            }
            // Forward: s started from A[i][j].
            if d == 0 {
                band_re_bar[0] += s_re * jitter_scale;
            } else {
                // A[i][j] = conj(rho(d)), so rho_bar(d) += conj(s_bar).
                band_re_bar[d] += s_re;
                band_im_bar[d] -= s_im;
            }
            // Forward inner loop: s -= L[i][k] * conj(L[j][k]).
            let klo = jlo.max(j.saturating_sub(b));
            for k in klo..j {
                let (air, aii) = at(packed, b1, i, i - k);
                let (bjr, bji) = at(packed, b1, j, j - k);
                // L_bar[i][k] -= s_bar * L[j][k]
                add_at(
                    &mut lbar,
                    b1,
                    i,
                    i - k,
                    -(s_re * bjr - s_im * bji),
                    -(s_re * bji + s_im * bjr),
                );
                // L_bar[j][k] -= conj(s_bar) * L[i][k]
                add_at(
                    &mut lbar,
                    b1,
                    j,
                    j - k,
                    -(s_re * air + s_im * aii),
                    -(s_re * aii - s_im * air),
                );
            }
        }
    }
}

/// Packed banded lower-triangular product `y = L x` on paired-channel
/// vectors: `x` and `y` are `[n, 2]` buffers.
pub fn matvec(packed: &[f64], n: usize, b1: usize, x: &[f64], y: &mut [f64]) {
    let b = b1 - 1;
    for i in 0..n {
        let mut acc_re = 0.0;
        let mut acc_im = 0.0;
        for d in 0..=b.min(i) {
            let (lr, li) = at(packed, b1, i, d);
            let j = i - d;
            let (xr, xi) = (x[2 * j], x[2 * j + 1]);
            acc_re += lr * xr - li * xi;
            acc_im += lr * xi + li * xr;
        }
        y[2 * i] = acc_re;
        y[2 * i + 1] = acc_im;
    }
}

/// Cotangent of the factor in `y = L x`: `L_bar[i][j] += y_bar[i] * conj(x[j])`.
pub fn matvec_adjoint_l(n: usize, b1: usize, x: &[f64], grad_y: &[f64], gl: &mut [f64]) {
    let b = b1 - 1;
    for i in 0..n {
        let (gr, gi) = (grad_y[2 * i], grad_y[2 * i + 1]);
        for d in 0..=b.min(i) {
            let j = i - d;
            let (xr, xi) = (x[2 * j], x[2 * j + 1]);
            let p = (i * b1 + d) * 2;
            // y_bar * conj(x)
            gl[p] += gr * xr + gi * xi;
            gl[p + 1] += gi * xr - gr * xi;
        }
    }
}

/// Cotangent of the vector in `y = L x`: `x_bar[j] += conj(L[i][j]) * y_bar[i]`.
pub fn matvec_adjoint_x(packed: &[f64], n: usize, b1: usize, grad_y: &[f64], grad_x: &mut [f64]) {
    let b = b1 - 1;
    for i in 0..n {
        let (gr, gi) = (grad_y[2 * i], grad_y[2 * i + 1]);
        for d in 0..=b.min(i) {
            let j = i - d;
            let (lr, li) = at(packed, b1, i, d);
            // conj(L) * y_bar
            grad_x[2 * j] += lr * gr + li * gi;
            grad_x[2 * j + 1] += lr * gi - li * gr;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // White noise: identity covariance factors to the identity.
    #[test]
    fn identity_band_gives_identity_factor() {
        let (packed, js) = factor_packed(&[1.0, 0.0], &[0.0, 0.0], 4).unwrap();
        assert_eq!(js, 1.0);
        for i in 0..4 {
            let (dr, di) = at(&packed, 2, i, 0);
            assert!((dr - 1.0).abs() < 1e-15 && di == 0.0);
            if i > 0 {
                let (or, oi) = at(&packed, 2, i, 1);
                assert!(or == 0.0 && oi == 0.0);
            }
        }
    }

    // L L^H must reproduce the band it was built from.
    #[test]
    fn factor_reconstructs_covariance() {
        let band_re = [2.0, 0.5, 0.25];
        let band_im = [0.0, 0.3, -0.1];
        let n = 6;
        let b1 = 3;
        let (packed, _) = factor_packed(&band_re, &band_im, n).unwrap();
        // Reconstruct A[i][j] = sum_k L[i][k] conj(L[j][k]) for i >= j.
        for i in 0..n {
            for j in i.saturating_sub(b1 - 1)..=i {
                let mut re = 0.0;
                let mut im = 0.0;
                for k in 0..=j {
                    if i - k >= b1 || j - k >= b1 {
                        continue;
                    }
                    let (ar, ai) = at(&packed, b1, i, i - k);
                    let (br, bi) = at(&packed, b1, j, j - k);
                    re += ar * br + ai * bi;
                    im += ai * br - ar * bi;
                }
                let d = i - j;
                let (er, ei) = if d == 0 {
                    (band_re[0], 0.0)
                } else {
                    (band_re[d], -band_im[d])
                };
                assert!(
                    (re - er).abs() < 1e-12 && (im - ei).abs() < 1e-12,
                    "entry ({i},{j}): got {re}+{im}i want {er}+{ei}i"
                );
            }
        }
    }

    #[test]
    fn indefinite_band_fails_with_row() {
        // rho(1) larger than rho(0) cannot be a valid covariance.
        let err = factor_packed(&[1.0, 2.0], &[0.0, 0.0], 4).unwrap_err();
        assert!(err > 0);
    }
}
