//! Complex tensors as separate real and imaginary parts.
//!
//! A [`CPair`] bundles two same-shape real nodes. The helpers here compose
//! tape primitives into the usual complex operations; nothing in this
//! module records new primitive kinds, so every gradient reduces to the
//! already-verified real ops.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A complex tensor held as two real tensors of identical shape.
#[derive(Clone, Copy, Debug)]
pub struct CPair {
    pub re: Var,
    pub im: Var,
}

impl CPair {
    pub fn new(re: Var, im: Var) -> Self {
        CPair { re, im }
    }
}

/// Records a complex constant from interleaved `(re, im)` slices.
pub fn constant(tape: &Tape, re: &[f64], im: &[f64]) -> CPair {
    CPair {
        re: tape.constant(Tensor::from_slice(re)),
        im: tape.constant(Tensor::from_slice(im)),
    }
}

/// Elementwise complex sum.
pub fn cadd(t: &Tape, a: CPair, b: CPair) -> CPair {
    CPair {
        re: t.add(a.re, b.re),
        im: t.add(a.im, b.im),
    }
}

/// Elementwise complex difference.
pub fn csub(t: &Tape, a: CPair, b: CPair) -> CPair {
    CPair {
        re: t.sub(a.re, b.re),
        im: t.sub(a.im, b.im),
    }
}

/// Elementwise complex product.
pub fn cmul(t: &Tape, a: CPair, b: CPair) -> CPair {
    CPair {
        re: t.sub(t.mul(a.re, b.re), t.mul(a.im, b.im)),
        im: t.add(t.mul(a.re, b.im), t.mul(a.im, b.re)),
    }
}

/// Elementwise `a * conj(b)`.
pub fn cmul_conj(t: &Tape, a: CPair, b: CPair) -> CPair {
    CPair {
        re: t.add(t.mul(a.re, b.re), t.mul(a.im, b.im)),
        im: t.sub(t.mul(a.im, b.re), t.mul(a.re, b.im)),
    }
}

/// Elementwise complex conjugate.
pub fn conj(t: &Tape, a: CPair) -> CPair {
    CPair {
        re: a.re,
        im: t.neg(a.im),
    }
}

/// Scales a complex tensor by a real scalar node.
pub fn cscale(t: &Tape, a: CPair, s: Var) -> CPair {
    CPair {
        re: t.mul_scalar_t(a.re, s),
        im: t.mul_scalar_t(a.im, s),
    }
}

/// Scales a complex tensor by a real constant.
pub fn cscale_const(t: &Tape, a: CPair, c: f64) -> CPair {
    CPair {
        re: t.mul_scalar(a.re, c),
        im: t.mul_scalar(a.im, c),
    }
}

/// Complex matrix product of `[m, k]` and `[k, n]` pairs.
pub fn cmatmul(t: &Tape, a: CPair, b: CPair) -> CPair {
    CPair {
        re: t.sub(t.matmul(a.re, b.re), t.matmul(a.im, b.im)),
        im: t.add(t.matmul(a.re, b.im), t.matmul(a.im, b.re)),
    }
}

/// Complex matrix-vector product: matrix pair `[r, c]`, vector pair `[c]`,
/// result pair `[r]`.
pub fn cmat_vec(t: &Tape, m: CPair, v: CPair, c: usize) -> CPair {
    let vr = t.reshape(v.re, vec![c, 1]);
    let vi = t.reshape(v.im, vec![c, 1]);
    let col = cmatmul(t, m, CPair { re: vr, im: vi });
    let rows = t.value(col.re).shape()[0];
    CPair {
        re: t.reshape(col.re, vec![rows]),
        im: t.reshape(col.im, vec![rows]),
    }
}

/// Inner product `sum(conj(a) * b)` as a scalar pair.
pub fn cdotc(t: &Tape, a: CPair, b: CPair) -> CPair {
    CPair {
        re: t.sum_all(t.add(t.mul(a.re, b.re), t.mul(a.im, b.im))),
        im: t.sum_all(t.sub(t.mul(a.re, b.im), t.mul(a.im, b.re))),
    }
}

/// Sum of all elements as a scalar pair.
pub fn csum(t: &Tape, a: CPair) -> CPair {
    CPair {
        re: t.sum_all(a.re),
        im: t.sum_all(a.im),
    }
}

/// Elementwise squared magnitude `re^2 + im^2` as a real tensor.
pub fn cabs2(t: &Tape, a: CPair) -> Var {
    t.add(t.mul(a.re, a.re), t.mul(a.im, a.im))
}

/// Packs a rank-1 pair `[n]` into an interleaved `[n, 2]` tensor.
pub fn interleave(t: &Tape, a: CPair) -> Var {
    let n = t.value(a.re).len();
    let re = t.reshape(a.re, vec![n, 1]);
    let im = t.reshape(a.im, vec![n, 1]);
    t.concat_cols(re, im)
}

/// Splits an interleaved `[n, 2]` tensor into a rank-1 pair `[n]`.
pub fn deinterleave(t: &Tape, v: Var) -> CPair {
    let n = t.value(v).shape()[0];
    let re = t.slice_cols(v, 0, 1);
    let im = t.slice_cols(v, 1, 1);
    CPair {
        re: t.reshape(re, vec![n]),
        im: t.reshape(im, vec![n]),
    }
}
