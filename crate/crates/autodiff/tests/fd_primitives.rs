//! Central-finite-difference verification of every tape primitive.
//!
//! Each case builds a scalar function of one or more leaf tensors, runs the
//! reverse sweep, and compares every leaf gradient against central
//! differences with step 1e-6. Inputs are seeded and kept away from kinks
//! and singularities so the finite-difference reference is trustworthy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavelearn_autodiff::{fd, Tape, Tensor, Var};

const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Checks tape gradients of `build` against central differences for every
/// leaf. `build` must be deterministic and record the same graph for equal
/// inputs.
fn check_grads(build: impl Fn(&Tape, &[Var]) -> Var, inits: &[Tensor], tol: f64) {
    let tape = Tape::new();
    let leaves: Vec<Var> = inits.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &leaves);
    assert!(tape.value(out).is_scalar(), "test function must be scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| tape.grad(v).unwrap().into_data())
        .collect();

    for li in 0..inits.len() {
        let f = |xs: &[f64]| {
            let tape = Tape::new();
            let leaves: Vec<Var> = inits
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == li {
                        tape.leaf(Tensor::new(t.shape().to_vec(), xs.to_vec()))
                    } else {
                        tape.leaf(t.clone())
                    }
                })
                .collect();
            tape.value_scalar(build(&tape, &leaves))
        };
        let numeric = fd::central_grad(f, inits[li].data(), 1e-6);
        let err = fd::max_rel_err(&analytic[li], &numeric, 1e-4);
        assert!(
            err < tol,
            "leaf {li}: max relative gradient error {err:.3e} exceeds {tol:.1e}"
        );
    }
}

#[test]
fn fd_add_sub_mul_div() {
    let mut r = rng(10);
    let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[3, 4], 0.5, 2.5);
    check_grads(
        |t, l| {
            let s = t.add(l[0], l[1]);
            let d = t.sub(l[0], l[1]);
            let m = t.mul(s, d);
            let q = t.div(m, l[1]);
            t.sum_all(q)
        },
        &[a, b],
        TOL,
    );
}

#[test]
fn fd_scalar_ops() {
    let mut r = rng(11);
    let x = rand_tensor(&mut r, &[5], -1.0, 1.0);
    let s = rand_tensor(&mut r, &[1], 0.5, 1.5);
    check_grads(
        |t, l| {
            let a = t.add_scalar(l[0], 0.7);
            let b = t.mul_scalar(a, -1.3);
            let c = t.neg(b);
            let d = t.mul_scalar_t(c, l[1]);
            t.sum_all(t.mul(d, d))
        },
        &[x, s],
        TOL,
    );
}

#[test]
fn fd_matmul() {
    let mut r = rng(12);
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
    check_grads(
        |t, l| {
            let p = t.matmul(l[0], l[1]);
            t.sum_all(t.mul(p, p))
        },
        &[a, b],
        TOL,
    );
}

#[test]
fn fd_conv1d_dilated_offset() {
    let mut r = rng(13);
    let x = rand_tensor(&mut r, &[7, 2], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 2, 3], -1.0, 1.0);
    for (dilation, offset) in [(1usize, 0i64), (2, -2), (3, 1)] {
        let xc = x.clone();
        let wc = w.clone();
        check_grads(
            move |t, l| {
                let y = t.conv1d(l[0], l[1], dilation, offset);
                t.sum_all(t.mul(y, y))
            },
            &[xc, wc],
            TOL,
        );
    }
}

#[test]
fn fd_conv1d_depthwise() {
    let mut r = rng(14);
    let x = rand_tensor(&mut r, &[8, 3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
    for (dilation, offset) in [(1usize, -1i64), (4, -4)] {
        let xc = x.clone();
        let wc = w.clone();
        check_grads(
            move |t, l| {
                let y = t.conv1d_depthwise(l[0], l[1], dilation, offset);
                t.sum_all(t.mul(y, y))
            },
            &[xc, wc],
            TOL,
        );
    }
}

#[test]
fn fd_bias_add() {
    let mut r = rng(15);
    let x = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
    check_grads(
        |t, l| {
            let y = t.bias_add(l[0], l[1]);
            t.sum_all(t.mul(y, y))
        },
        &[x, b],
        TOL,
    );
}

#[test]
fn fd_activations() {
    let mut r = rng(16);
    // Keep relu inputs away from the kink at 0.
    let x = Tensor::from_slice(
        &(0..8)
            .map(|_| {
                let v: f64 = r.random_range(0.2..1.5);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect::<Vec<_>>(),
    );
    check_grads(
        |t, l| {
            let a = t.relu(l[0]);
            let b = t.sigmoid(l[0]);
            let c = t.tanh(l[0]);
            let d = t.softplus(l[0]);
            let e = t.exp(l[0]);
            let s1 = t.sum_all(a);
            let s2 = t.sum_all(t.mul(b, c));
            let s3 = t.sum_all(t.mul(d, e));
            t.add(t.add(s1, s2), s3)
        },
        &[x],
        TOL,
    );
}

#[test]
fn fd_log_sqrt() {
    let mut r = rng(17);
    let x = rand_tensor(&mut r, &[6], 0.5, 3.0);
    check_grads(
        |t, l| {
            let a = t.log(l[0]);
            let b = t.sqrt(l[0]);
            t.sum_all(t.mul(a, b))
        },
        &[x],
        TOL,
    );
}

#[test]
fn fd_reductions() {
    let mut r = rng(18);
    let x = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    check_grads(
        |t, l| {
            let sq = t.mul(l[0], l[0]);
            let c = t.sum_axis0(sq);
            let rsum = t.sum_axis1(sq);
            let m = t.mean_all(l[0]);
            let s = t.add(t.sum_all(t.mul(c, c)), t.sum_all(t.mul(rsum, rsum)));
            t.add(s, t.mul(m, m))
        },
        &[x],
        TOL,
    );
}

#[test]
fn fd_gather_with_repeats() {
    let mut r = rng(19);
    let x = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let idx = vec![0usize, 3, 1, 1, 3, 0, 2];
    check_grads(
        move |t, l| {
            let y = t.gather_rows(l[0], &idx);
            t.sum_all(t.mul(y, y))
        },
        &[x],
        TOL,
    );
}

#[test]
fn fd_concat_slice_reshape_expand() {
    let mut r = rng(20);
    let a = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let v = rand_tensor(&mut r, &[4], -1.0, 1.0);
    check_grads(
        |t, l| {
            let cc = t.concat_cols(l[0], l[1]);
            let rr = t.concat_rows(cc, cc);
            let sr = t.slice_rows(rr, 1, 4);
            let sc = t.slice_cols(sr, 2, 3);
            let ex = t.expand_rows(l[2], 4);
            let flat_a = t.reshape(sc, vec![12]);
            let flat_b = t.reshape(t.slice_cols(ex, 0, 3), vec![12]);
            t.sum_all(t.mul(flat_a, flat_b))
        },
        &[a, b, v],
        TOL,
    );
}

#[test]
fn fd_complex_pairs() {
    let mut r = rng(21);
    let a = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    check_grads(
        |t, l| {
            let p = t.complex_mul(l[0], t.conj_pairs(l[1]));
            let q = t.complex_mul(p, l[0]);
            t.sum_all(t.mul(q, q))
        },
        &[a, b],
        TOL,
    );
}

/// A strictly diagonally dominant band, guaranteed positive definite for
/// the perturbation sizes used by the finite-difference probe.
fn spd_band(r: &mut ChaCha8Rng, b1: usize) -> (Tensor, Tensor) {
    let mut re = vec![2.5];
    let mut im = vec![0.0];
    for _ in 1..b1 {
        re.push(r.random_range(-0.4..0.4));
        im.push(r.random_range(-0.4..0.4));
    }
    (Tensor::from_slice(&re), Tensor::from_slice(&im))
}

#[test]
fn fd_toeplitz_chol() {
    let mut r = rng(22);
    let (band_re, band_im) = spd_band(&mut r, 3);
    check_grads(
        |t, l| {
            let lfac = t.toeplitz_chol(l[0], l[1], 6).unwrap();
            // Weighted square sum touches every packed slot.
            let w = t.constant(Tensor::new(
                vec![6, 3, 2],
                (0..36).map(|i| 0.1 + 0.05 * i as f64).collect(),
            ));
            t.sum_all(t.mul(t.mul(lfac, lfac), w))
        },
        &[band_re, band_im],
        TOL,
    );
}

#[test]
fn fd_banded_matvec_through_chol() {
    let mut r = rng(23);
    let (band_re, band_im) = spd_band(&mut r, 3);
    let x = rand_tensor(&mut r, &[6, 2], -1.0, 1.0);
    check_grads(
        |t, l| {
            let lfac = t.toeplitz_chol(l[0], l[1], 6).unwrap();
            let y = t.banded_matvec(lfac, l[2]);
            t.sum_all(t.mul(y, y))
        },
        &[band_re, band_im, x],
        TOL,
    );
}

#[test]
fn chol_band_im0_has_zero_gradient() {
    // The forward pass ignores the imaginary slot of rho(0); its gradient
    // must be exactly zero so finite differences and the adjoint agree.
    let mut r = rng(24);
    let (band_re, band_im) = spd_band(&mut r, 3);
    let tape = Tape::new();
    let lre = tape.leaf(band_re);
    let lim = tape.leaf(band_im);
    let lfac = tape.toeplitz_chol(lre, lim, 5).unwrap();
    // Unweighted sum(|L|^2) would collapse to trace(A) = n * rho(0);
    // weights keep the off-lag gradients alive.
    let w = tape.constant(Tensor::new(
        vec![5, 3, 2],
        (0..30).map(|i| 0.2 + 0.03 * i as f64).collect(),
    ));
    let s = tape.sum_all(tape.mul(w, tape.mul(lfac, lfac)));
    tape.backward(s).unwrap();
    let g = tape.grad(lim).unwrap();
    assert_eq!(g.data()[0], 0.0);
    assert!(g.data()[1] != 0.0 || g.data()[2] != 0.0);
}
