//! Recording tape: forward evaluation and reverse-mode gradient sweep.

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::chol;
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
///
/// A `Var` is a plain index plus the identifier of the tape that created it;
/// using it with a different tape panics immediately rather than silently
/// mixing graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: u32,
    tape: u64,
}

/// Errors surfaced by tape operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdError {
    /// `backward` was called on a node that is not a single-element tensor.
    NonScalarOutput { shape: Vec<usize> },
    /// The banded Toeplitz Cholesky factorization hit a non-positive pivot
    /// even after one jitter retry; `row` is the offending lag block.
    NotPositiveDefinite { row: usize },
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::NonScalarOutput { shape } => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            AdError::NotPositiveDefinite { row } => {
                write!(
                    f,
                    "covariance not positive definite at lag block {row} after jitter retry"
                )
            }
        }
    }
}

impl std::error::Error for AdError {}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    AddScalar(u32),
    MulScalar(u32, f64),
    MulScalarT { x: u32, s: u32 },
    Matmul { a: u32, b: u32 },
    Conv1d { x: u32, w: u32, dilation: usize, offset: i64 },
    ConvDepthwise { x: u32, w: u32, dilation: usize, offset: i64 },
    BiasAdd { x: u32, b: u32 },
    Relu(u32),
    Sigmoid(u32),
    Tanh(u32),
    Exp(u32),
    Log(u32),
    Sqrt(u32),
    Softplus(u32),
    SumAll(u32),
    MeanAll(u32),
    SumAxis0(u32),
    SumAxis1(u32),
    GatherRows { x: u32, idx: Vec<u32> },
    ConcatRows { a: u32, b: u32 },
    ConcatCols { a: u32, b: u32 },
    SliceRows { x: u32, start: usize },
    SliceCols { x: u32, start: usize },
    Reshape(u32),
    ExpandRows { x: u32 },
    ComplexMul(u32, u32),
    ConjPairs(u32),
    ToeplitzChol { band_re: u32, band_im: u32, jitter_scale: f64 },
    BandedMatvec { l: u32, x: u32 },
}

struct TapeInner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Tensor>,
}

/// Operation recorder for reverse-mode differentiation.
///
/// All tensor operations are methods on the tape; each returns a [`Var`]
/// referring to the freshly computed node. Shape mismatches panic with both
/// shapes in the message, since they indicate a programming error rather
/// than a data condition. A tape is single-threaded; run independent tapes
/// on separate threads for parallelism.
pub struct Tape {
    id: u64,
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Creates an empty tape.
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                ops: Vec::new(),
                requires: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len() as u32;
        inner.values.push(value);
        inner.ops.push(op);
        inner.requires.push(requires);
        Var { idx, tape: self.id }
    }

    fn check(&self, v: Var) -> u32 {
        assert!(
            v.tape == self.id,
            "variable belongs to a different tape (id {} vs {})",
            v.tape,
            self.id
        );
        v.idx
    }

    /// Records a differentiable input node.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant node; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a constant scalar node of shape `[1]`.
    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of the forward value of a node.
    pub fn value(&self, v: Var) -> Tensor {
        let i = self.check(v);
        self.inner.borrow().values[i as usize].clone()
    }

    /// Scalar forward value of a single-element node.
    pub fn value_scalar(&self, v: Var) -> f64 {
        self.value(v).scalar_value()
    }

    /// Copy of the gradient accumulated for a node by the last `backward`
    /// call, or `None` when no gradient was computed for it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.check(v) as usize;
        let inner = self.inner.borrow();
        if i < inner.grads.len() && inner.requires[i] {
            Some(inner.grads[i].clone())
        } else {
            None
        }
    }

    // ---------------------------------------------------------------
    // Elementwise binary and unary operations
    // ---------------------------------------------------------------

    fn binary_elementwise(&self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let ta = &inner.values[ia as usize];
            let tb = &inner.values[ib as usize];
            assert!(
                ta.shape() == tb.shape(),
                "{name}: shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
            let data: Vec<f64> = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(ta.shape().to_vec(), data),
                inner.requires[ia as usize] || inner.requires[ib as usize],
            )
        };
        self.push(value, op, requires)
    }

    fn unary_elementwise(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let data: Vec<f64> = tx.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::new(tx.shape().to_vec(), data),
                inner.requires[ix as usize],
            )
        };
        self.push(value, op, requires)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let op = Op::Add(self.check(a), self.check(b));
        self.binary_elementwise("add", a, b, |x, y| x + y, op)
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let op = Op::Sub(self.check(a), self.check(b));
        self.binary_elementwise("sub", a, b, |x, y| x - y, op)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let op = Op::Mul(self.check(a), self.check(b));
        self.binary_elementwise("mul", a, b, |x, y| x * y, op)
    }

    /// Elementwise quotient of two same-shape tensors.
    pub fn div(&self, a: Var, b: Var) -> Var {
        let op = Op::Div(self.check(a), self.check(b));
        self.binary_elementwise("div", a, b, |x, y| x / y, op)
    }

    /// Elementwise negation.
    pub fn neg(&self, x: Var) -> Var {
        let op = Op::Neg(self.check(x));
        self.unary_elementwise(x, |v| -v, op)
    }

    /// Adds a constant scalar to every element.
    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let op = Op::AddScalar(self.check(x));
        self.unary_elementwise(x, |v| v + c, op)
    }

    /// Multiplies every element by a constant scalar.
    pub fn mul_scalar(&self, x: Var, c: f64) -> Var {
        let op = Op::MulScalar(self.check(x), c);
        self.unary_elementwise(x, |v| v * c, op)
    }

    /// Multiplies every element of `x` by a single-element tensor `s`.
    pub fn mul_scalar_t(&self, x: Var, s: Var) -> Var {
        let (ix, is) = (self.check(x), self.check(s));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let ts = &inner.values[is as usize];
            assert!(
                ts.is_scalar(),
                "mul_scalar_t: scale must be a scalar, got shape {:?}",
                ts.shape()
            );
            let sv = ts.data()[0];
            let data: Vec<f64> = tx.data().iter().map(|&v| v * sv).collect();
            (
                Tensor::new(tx.shape().to_vec(), data),
                inner.requires[ix as usize] || inner.requires[is as usize],
            )
        };
        self.push(value, Op::MulScalarT { x: ix, s: is }, requires)
    }

    /// Rectified linear unit, `max(x, 0)`. The adjoint at the kink is 0.
    pub fn relu(&self, x: Var) -> Var {
        let op = Op::Relu(self.check(x));
        self.unary_elementwise(x, |v| if v > 0.0 { v } else { 0.0 }, op)
    }

    /// Logistic sigmoid, evaluated in a numerically stable form.
    pub fn sigmoid(&self, x: Var) -> Var {
        let op = Op::Sigmoid(self.check(x));
        self.unary_elementwise(x, sigmoid_stable, op)
    }

    /// Hyperbolic tangent.
    pub fn tanh(&self, x: Var) -> Var {
        let op = Op::Tanh(self.check(x));
        self.unary_elementwise(x, f64::tanh, op)
    }

    /// Elementwise exponential.
    pub fn exp(&self, x: Var) -> Var {
        let op = Op::Exp(self.check(x));
        self.unary_elementwise(x, f64::exp, op)
    }

    /// Elementwise natural logarithm.
    pub fn log(&self, x: Var) -> Var {
        let op = Op::Log(self.check(x));
        self.unary_elementwise(x, f64::ln, op)
    }

    /// Elementwise square root.
    pub fn sqrt(&self, x: Var) -> Var {
        let op = Op::Sqrt(self.check(x));
        self.unary_elementwise(x, f64::sqrt, op)
    }

    /// Elementwise `ln(1 + exp(x))`, evaluated in a numerically stable form.
    pub fn softplus(&self, x: Var) -> Var {
        let op = Op::Softplus(self.check(x));
        self.unary_elementwise(x, softplus_stable, op)
    }

    // ---------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------

    /// Sum of all elements, returned as a `[1]` tensor.
    pub fn sum_all(&self, x: Var) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            (
                Tensor::scalar(tx.data().iter().sum()),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::SumAll(ix), requires)
    }

    /// Mean of all elements, returned as a `[1]` tensor.
    pub fn mean_all(&self, x: Var) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            assert!(!tx.is_empty(), "mean_all: empty tensor");
            let s: f64 = tx.data().iter().sum();
            (
                Tensor::scalar(s / tx.len() as f64),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::MeanAll(ix), requires)
    }

    /// Column sums of a rank-2 tensor: `[r, c] -> [c]`.
    pub fn sum_axis0(&self, x: Var) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let (r, c) = rank2(tx, "sum_axis0");
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += tx.data()[i * c + j];
                }
            }
            (
                Tensor::new(vec![c], out),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::SumAxis0(ix), requires)
    }

    /// Row sums of a rank-2 tensor: `[r, c] -> [r]`.
    pub fn sum_axis1(&self, x: Var) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let (r, c) = rank2(tx, "sum_axis1");
            let mut out = vec![0.0; r];
            for i in 0..r {
                let row = &tx.data()[i * c..(i + 1) * c];
                out[i] = row.iter().sum();
            }
            (
                Tensor::new(vec![r], out),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::SumAxis1(ix), requires)
    }

    // ---------------------------------------------------------------
    // Shape manipulation
    // ---------------------------------------------------------------

    /// Reinterprets a tensor with a new shape of equal element count.
    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let n: usize = shape.iter().product();
            assert!(
                n == tx.len(),
                "reshape: cannot view {:?} as {:?}",
                tx.shape(),
                shape
            );
            (
                Tensor::new(shape, tx.data().to_vec()),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::Reshape(ix), requires)
    }

    /// Repeats a rank-1 tensor `[c]` as every row of a `[rows, c]` tensor.
    pub fn expand_rows(&self, x: Var, rows: usize) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            assert!(
                tx.shape().len() == 1,
                "expand_rows: expected rank-1 input, got {:?}",
                tx.shape()
            );
            let c = tx.len();
            let mut out = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                out.extend_from_slice(tx.data());
            }
            (
                Tensor::new(vec![rows, c], out),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::ExpandRows { x: ix }, requires)
    }

    /// Stacks two rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let ta = &inner.values[ia as usize];
            let tb = &inner.values[ib as usize];
            let (ra, ca) = rank2(ta, "concat_rows");
            let (rb, cb) = rank2(tb, "concat_rows");
            assert!(
                ca == cb,
                "concat_rows: column mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
            let mut out = Vec::with_capacity((ra + rb) * ca);
            out.extend_from_slice(ta.data());
            out.extend_from_slice(tb.data());
            (
                Tensor::new(vec![ra + rb, ca], out),
                inner.requires[ia as usize] || inner.requires[ib as usize],
            )
        };
        self.push(value, Op::ConcatRows { a: ia, b: ib }, requires)
    }

    /// Joins two rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let ta = &inner.values[ia as usize];
            let tb = &inner.values[ib as usize];
            let (ra, ca) = rank2(ta, "concat_cols");
            let (rb, cb) = rank2(tb, "concat_cols");
            assert!(
                ra == rb,
                "concat_cols: row mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
            let mut out = Vec::with_capacity(ra * (ca + cb));
            for i in 0..ra {
                out.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
            }
            (
                Tensor::new(vec![ra, ca + cb], out),
                inner.requires[ia as usize] || inner.requires[ib as usize],
            )
        };
        self.push(value, Op::ConcatCols { a: ia, b: ib }, requires)
    }

    /// Copies `len` consecutive rows starting at `start` from a rank-2 tensor.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let (r, c) = rank2(tx, "slice_rows");
            assert!(
                start + len <= r,
                "slice_rows: range {start}..{} out of bounds for {:?}",
                start + len,
                tx.shape()
            );
            let out = tx.data()[start * c..(start + len) * c].to_vec();
            (
                Tensor::new(vec![len, c], out),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::SliceRows { x: ix, start }, requires)
    }

    /// Copies `len` consecutive columns starting at `start` from a rank-2 tensor.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let (r, c) = rank2(tx, "slice_cols");
            assert!(
                start + len <= c,
                "slice_cols: range {start}..{} out of bounds for {:?}",
                start + len,
                tx.shape()
            );
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
            }
            (
                Tensor::new(vec![r, len], out),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::SliceCols { x: ix, start }, requires)
    }

    /// Selects rows of a rank-2 tensor by index, with repetition allowed.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let ix = self.check(x);
        let (value, requires, idx32) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let (r, c) = rank2(tx, "gather_rows");
            let mut out = Vec::with_capacity(idx.len() * c);
            let mut idx32 = Vec::with_capacity(idx.len());
            for &i in idx {
                assert!(
                    i < r,
                    "gather_rows: index {i} out of bounds for {:?}",
                    tx.shape()
                );
                out.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
                idx32.push(i as u32);
            }
            (
                Tensor::new(vec![idx.len(), c], out),
                inner.requires[ix as usize],
                idx32,
            )
        };
        self.push(value, Op::GatherRows { x: ix, idx: idx32 }, requires)
    }

    // ---------------------------------------------------------------
    // Linear and convolutional operations
    // ---------------------------------------------------------------

    /// Matrix product of `[m, k]` and `[k, n]` tensors.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let ta = &inner.values[ia as usize];
            let tb = &inner.values[ib as usize];
            let (m, ka) = rank2(ta, "matmul");
            let (kb, n) = rank2(tb, "matmul");
            assert!(
                ka == kb,
                "matmul: inner dimension mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
            let mut out = vec![0.0; m * n];
            matmul_kernel(ta.data(), tb.data(), &mut out, m, ka, n);
            (
                Tensor::new(vec![m, n], out),
                inner.requires[ia as usize] || inner.requires[ib as usize],
            )
        };
        self.push(value, Op::Matmul { a: ia, b: ib }, requires)
    }

    /// Adds a rank-1 bias `[c]` to every row of a rank-2 tensor `[n, c]`.
    pub fn bias_add(&self, x: Var, b: Var) -> Var {
        let (ix, ib) = (self.check(x), self.check(b));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let tb = &inner.values[ib as usize];
            let (n, c) = rank2(tx, "bias_add");
            assert!(
                tb.shape() == [c],
                "bias_add: bias shape {:?} does not match input {:?}",
                tb.shape(),
                tx.shape()
            );
            let mut out = Vec::with_capacity(n * c);
            for i in 0..n {
                for j in 0..c {
                    out.push(tx.data()[i * c + j] + tb.data()[j]);
                }
            }
            (
                Tensor::new(vec![n, c], out),
                inner.requires[ix as usize] || inner.requires[ib as usize],
            )
        };
        self.push(value, Op::BiasAdd { x: ix, b: ib }, requires)
    }

    /// One-dimensional convolution with zero padding.
    ///
    /// `x` has shape `[n, c_in]`, the kernel `w` has shape
    /// `[k, c_in, c_out]`, and the output has shape `[n, c_out]` with
    ///
    /// ```text
    /// out[m, co] = sum_{t, ci} w[t, ci, co] * x[m - offset - t*dilation, ci]
    /// ```
    ///
    /// Out-of-range input positions contribute zero. With an odd kernel
    /// length, `offset = -dilation * (k - 1) / 2` centers the kernel
    /// ("same" padding).
    pub fn conv1d(&self, x: Var, w: Var, dilation: usize, offset: i64) -> Var {
        assert!(dilation >= 1, "conv1d: dilation must be at least 1");
        let (ix, iw) = (self.check(x), self.check(w));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let tw = &inner.values[iw as usize];
            let (n, cin) = rank2(tx, "conv1d");
            let ws = tw.shape();
            assert!(
                ws.len() == 3 && ws[1] == cin,
                "conv1d: kernel shape {:?} does not match input {:?}",
                ws,
                tx.shape()
            );
            let (k, cout) = (ws[0], ws[2]);
            let mut out = vec![0.0; n * cout];
            for m in 0..n {
                for t in 0..k {
                    let pos = m as i64 - offset - (t * dilation) as i64;
                    if pos < 0 || pos >= n as i64 {
                        continue;
                    }
                    let xr = &tx.data()[pos as usize * cin..(pos as usize + 1) * cin];
                    let or = &mut out[m * cout..(m + 1) * cout];
                    for (ci, &xv) in xr.iter().enumerate() {
                        let wr = &tw.data()[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                        for (co, &wv) in wr.iter().enumerate() {
                            or[co] += wv * xv;
                        }
                    }
                }
            }
            (
                Tensor::new(vec![n, cout], out),
                inner.requires[ix as usize] || inner.requires[iw as usize],
            )
        };
        self.push(
            value,
            Op::Conv1d {
                x: ix,
                w: iw,
                dilation,
                offset,
            },
            requires,
        )
    }

    /// Depthwise one-dimensional convolution with zero padding.
    ///
    /// `x` has shape `[n, c]`, the kernel `w` has shape `[k, c]`, and each
    /// channel is filtered independently:
    ///
    /// ```text
    /// out[m, c] = sum_t w[t, c] * x[m - offset - t*dilation, c]
    /// ```
    pub fn conv1d_depthwise(&self, x: Var, w: Var, dilation: usize, offset: i64) -> Var {
        assert!(dilation >= 1, "conv1d_depthwise: dilation must be at least 1");
        let (ix, iw) = (self.check(x), self.check(w));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            let tw = &inner.values[iw as usize];
            let (n, c) = rank2(tx, "conv1d_depthwise");
            let (k, cw) = rank2(tw, "conv1d_depthwise");
            assert!(
                cw == c,
                "conv1d_depthwise: kernel shape {:?} does not match input {:?}",
                tw.shape(),
                tx.shape()
            );
            let mut out = vec![0.0; n * c];
            for m in 0..n {
                for t in 0..k {
                    let pos = m as i64 - offset - (t * dilation) as i64;
                    if pos < 0 || pos >= n as i64 {
                        continue;
                    }
                    let xr = &tx.data()[pos as usize * c..(pos as usize + 1) * c];
                    let wr = &tw.data()[t * c..(t + 1) * c];
                    let or = &mut out[m * c..(m + 1) * c];
                    for j in 0..c {
                        or[j] += wr[j] * xr[j];
                    }
                }
            }
            (
                Tensor::new(vec![n, c], out),
                inner.requires[ix as usize] || inner.requires[iw as usize],
            )
        };
        self.push(
            value,
            Op::ConvDepthwise {
                x: ix,
                w: iw,
                dilation,
                offset,
            },
            requires,
        )
    }

    // ---------------------------------------------------------------
    // Complex pairs
    // ---------------------------------------------------------------

    /// Elementwise complex product of two tensors whose trailing axis holds
    /// `(re, im)` pairs. Shapes must match exactly.
    pub fn complex_mul(&self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let ta = &inner.values[ia as usize];
            let tb = &inner.values[ib as usize];
            assert!(
                ta.shape() == tb.shape(),
                "complex_mul: shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            );
            assert!(
                ta.shape().last() == Some(&2),
                "complex_mul: trailing axis must be 2, got {:?}",
                ta.shape()
            );
            let mut out = Vec::with_capacity(ta.len());
            for (pa, pb) in ta.data().chunks_exact(2).zip(tb.data().chunks_exact(2)) {
                out.push(pa[0] * pb[0] - pa[1] * pb[1]);
                out.push(pa[0] * pb[1] + pa[1] * pb[0]);
            }
            (
                Tensor::new(ta.shape().to_vec(), out),
                inner.requires[ia as usize] || inner.requires[ib as usize],
            )
        };
        self.push(value, Op::ComplexMul(ia, ib), requires)
    }

    /// Complex conjugate of a paired-channel tensor (negates the `im` slots).
    pub fn conj_pairs(&self, x: Var) -> Var {
        let ix = self.check(x);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tx = &inner.values[ix as usize];
            assert!(
                tx.shape().last() == Some(&2),
                "conj_pairs: trailing axis must be 2, got {:?}",
                tx.shape()
            );
            let mut out = Vec::with_capacity(tx.len());
            for p in tx.data().chunks_exact(2) {
                out.push(p[0]);
                out.push(-p[1]);
            }
            (
                Tensor::new(tx.shape().to_vec(), out),
                inner.requires[ix as usize],
            )
        };
        self.push(value, Op::ConjPairs(ix), requires)
    }

    // ---------------------------------------------------------------
    // Banded Toeplitz Cholesky
    // ---------------------------------------------------------------

    /// Cholesky factor of an `n x n` Hermitian Toeplitz matrix given by its
    /// band.
    ///
    /// `band_re` and `band_im` are rank-1 tensors of equal length `b + 1`
    /// holding the first-row entries `rho(0..=b)`; the matrix is
    /// `A[i][j] = conj(rho(i - j))` on and below the diagonal. The imaginary
    /// slot of `rho(0)` is ignored. Returns the lower factor packed as
    /// `[n, b + 1, 2]` with slot `d` of row `i` holding `L[i][i - d]`.
    ///
    /// A non-positive pivot triggers one retry with a diagonal jitter of
    /// `1e-12 * trace(A) / n`; if that also fails, the error names the row.
    pub fn toeplitz_chol(&self, band_re: Var, band_im: Var, n: usize) -> Result<Var, AdError> {
        assert!(n >= 1, "toeplitz_chol: matrix dimension must be at least 1");
        let (ir, ii) = (self.check(band_re), self.check(band_im));
        let result = {
            let inner = self.inner.borrow();
            let tr = &inner.values[ir as usize];
            let ti = &inner.values[ii as usize];
            assert!(
                tr.shape().len() == 1 && tr.shape() == ti.shape(),
                "toeplitz_chol: band shapes must be equal rank-1, got {:?} vs {:?}",
                tr.shape(),
                ti.shape()
            );
            chol::factor_packed(tr.data(), ti.data(), n).map(|(packed, jitter_scale)| {
                let b1 = tr.len();
                (
                    Tensor::new(vec![n, b1, 2], packed),
                    jitter_scale,
                    inner.requires[ir as usize] || inner.requires[ii as usize],
                )
            })
        };
        match result {
            Ok((value, jitter_scale, requires)) => Ok(self.push(
                value,
                Op::ToeplitzChol {
                    band_re: ir,
                    band_im: ii,
                    jitter_scale,
                },
                requires,
            )),
            Err(row) => Err(AdError::NotPositiveDefinite { row }),
        }
    }

    /// Product of a packed banded lower-triangular factor `[n, b + 1, 2]`
    /// (as produced by [`Tape::toeplitz_chol`]) with a paired-channel vector
    /// `[n, 2]`.
    pub fn banded_matvec(&self, l: Var, x: Var) -> Var {
        let (il, ix) = (self.check(l), self.check(x));
        let (value, requires) = {
            let inner = self.inner.borrow();
            let tl = &inner.values[il as usize];
            let tx = &inner.values[ix as usize];
            let ls = tl.shape();
            assert!(
                ls.len() == 3 && ls[2] == 2,
                "banded_matvec: factor shape must be [n, b+1, 2], got {ls:?}"
            );
            let (n, b1) = (ls[0], ls[1]);
            assert!(
                tx.shape() == [n, 2],
                "banded_matvec: vector shape {:?} does not match factor {:?}",
                tx.shape(),
                ls
            );
            let mut out = vec![0.0; n * 2];
            chol::matvec(tl.data(), n, b1, tx.data(), &mut out);
            (
                Tensor::new(vec![n, 2], out),
                inner.requires[il as usize] || inner.requires[ix as usize],
            )
        };
        self.push(value, Op::BandedMatvec { l: il, x: ix }, requires)
    }

    // ---------------------------------------------------------------
    // Backward sweep
    // ---------------------------------------------------------------

    /// Runs the reverse sweep from a scalar output node.
    ///
    /// All gradients are re-zeroed first, so repeated calls never
    /// accumulate across sweeps. Returns an error if `out` is not a
    /// single-element tensor.
    pub fn backward(&self, out: Var) -> Result<(), AdError> {
        let iout = self.check(out) as usize;
        let inner = &mut *self.inner.borrow_mut();
        if !inner.values[iout].is_scalar() {
            return Err(AdError::NonScalarOutput {
                shape: inner.values[iout].shape().to_vec(),
            });
        }
        inner.grads.clear();
        for v in inner.values.iter().take(iout + 1) {
            inner.grads.push(Tensor::zeros(v.shape().to_vec()));
        }
        inner.grads[iout].data_mut()[0] = 1.0;

        let TapeInner {
            values,
            ops,
            requires,
            grads,
        } = inner;

        for i in (0..=iout).rev() {
            if !requires[i] {
                continue;
            }
            let g = std::mem::replace(&mut grads[i], Tensor::new(vec![0], vec![]));
            backward_step(i, &g, values, ops, requires, grads);
            grads[i] = g;
        }
        Ok(())
    }
}

fn rank2(t: &Tensor, name: &str) -> (usize, usize) {
    let s = t.shape();
    assert!(s.len() == 2, "{name}: expected rank-2 tensor, got {s:?}");
    (s[0], s[1])
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

/// Accumulates `alpha * a^T b` into `out` where `a` is `[m, k]`, `b` is
/// `[m, n]`, and `out` is `[k, n]`.
fn matmul_at_b(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            let or = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

/// Accumulates `a b^T` into `out` where `a` is `[m, n]`, `b` is `[k, n]`,
/// and `out` is `[m, k]`.
fn matmul_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        let or = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let br = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += ar[j] * br[j];
            }
            or[kk] += s;
        }
    }
}

#[allow(clippy::too_many_lines)]
fn backward_step(
    i: usize,
    g: &Tensor,
    values: &[Tensor],
    ops: &[Op],
    requires: &[bool],
    grads: &mut [Tensor],
) {
    match &ops[i] {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            for src in [*a as usize, *b as usize] {
                if requires[src] {
                    for (o, &gi) in grads[src].data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a as usize, *b as usize);
            if requires[a] {
                for (o, &gi) in grads[a].data_mut().iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
            if requires[b] {
                for (o, &gi) in grads[b].data_mut().iter_mut().zip(g.data()) {
                    *o -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a as usize, *b as usize);
            if requires[a] {
                let vb = values[b].data();
                for ((o, &gi), &bv) in grads[a].data_mut().iter_mut().zip(g.data()).zip(vb) {
                    *o += gi * bv;
                }
            }
            if requires[b] {
                let va = values[a].data();
                for ((o, &gi), &av) in grads[b].data_mut().iter_mut().zip(g.data()).zip(va) {
                    *o += gi * av;
                }
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a as usize, *b as usize);
            let vb = values[b].data();
            if requires[a] {
                for ((o, &gi), &bv) in grads[a].data_mut().iter_mut().zip(g.data()).zip(vb) {
                    *o += gi / bv;
                }
            }
            if requires[b] {
                let vy = values[i].data();
                for (((o, &gi), &bv), &yv) in
                    grads[b].data_mut().iter_mut().zip(g.data()).zip(vb).zip(vy)
                {
                    *o -= gi * yv / bv;
                }
            }
        }
        Op::Neg(x) => {
            let x = *x as usize;
            if requires[x] {
                for (o, &gi) in grads[x].data_mut().iter_mut().zip(g.data()) {
                    *o -= gi;
                }
            }
        }
        Op::AddScalar(x) => {
            let x = *x as usize;
            if requires[x] {
                for (o, &gi) in grads[x].data_mut().iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
        }
        Op::MulScalar(x, c) => {
            let x = *x as usize;
            if requires[x] {
                for (o, &gi) in grads[x].data_mut().iter_mut().zip(g.data()) {
                    *o += gi * c;
                }
            }
        }
        Op::MulScalarT { x, s } => {
            let (x, s) = (*x as usize, *s as usize);
            let sv = values[s].data()[0];
            if requires[x] {
                for (o, &gi) in grads[x].data_mut().iter_mut().zip(g.data()) {
                    *o += gi * sv;
                }
            }
            if requires[s] {
                let vx = values[x].data();
                let mut acc = 0.0;
                for (&gi, &xv) in g.data().iter().zip(vx) {
                    acc += gi * xv;
                }
                grads[s].data_mut()[0] += acc;
            }
        }
        Op::Relu(x) => {
            let x = *x as usize;
            if requires[x] {
                let vx = values[x].data();
                for ((o, &gi), &xv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vx) {
                    if xv > 0.0 {
                        *o += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let x = *x as usize;
            if requires[x] {
                let vy = values[i].data();
                for ((o, &gi), &yv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vy) {
                    *o += gi * yv * (1.0 - yv);
                }
            }
        }
        Op::Tanh(x) => {
            let x = *x as usize;
            if requires[x] {
                let vy = values[i].data();
                for ((o, &gi), &yv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vy) {
                    *o += gi * (1.0 - yv * yv);
                }
            }
        }
        Op::Exp(x) => {
            let x = *x as usize;
            if requires[x] {
                let vy = values[i].data();
                for ((o, &gi), &yv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vy) {
                    *o += gi * yv;
                }
            }
        }
        Op::Log(x) => {
            let x = *x as usize;
            if requires[x] {
                let vx = values[x].data();
                for ((o, &gi), &xv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vx) {
                    *o += gi / xv;
                }
            }
        }
        Op::Sqrt(x) => {
            let x = *x as usize;
            if requires[x] {
                let vy = values[i].data();
                for ((o, &gi), &yv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vy) {
                    *o += gi / (2.0 * yv);
                }
            }
        }
        Op::Softplus(x) => {
            let x = *x as usize;
            if requires[x] {
                let vx = values[x].data();
                for ((o, &gi), &xv) in grads[x].data_mut().iter_mut().zip(g.data()).zip(vx) {
                    *o += gi * sigmoid_stable(xv);
                }
            }
        }
        Op::SumAll(x) => {
            let x = *x as usize;
            if requires[x] {
                let gv = g.data()[0];
                for o in grads[x].data_mut() {
                    *o += gv;
                }
            }
        }
        Op::MeanAll(x) => {
            let x = *x as usize;
            if requires[x] {
                let n = values[x].len() as f64;
                let gv = g.data()[0] / n;
                for o in grads[x].data_mut() {
                    *o += gv;
                }
            }
        }
        Op::SumAxis0(x) => {
            let x = *x as usize;
            if requires[x] {
                let c = values[x].shape()[1];
                let gx = grads[x].data_mut();
                for (pos, o) in gx.iter_mut().enumerate() {
                    *o += g.data()[pos % c];
                }
            }
        }
        Op::SumAxis1(x) => {
            let x = *x as usize;
            if requires[x] {
                let c = values[x].shape()[1];
                let gx = grads[x].data_mut();
                for (pos, o) in gx.iter_mut().enumerate() {
                    *o += g.data()[pos / c];
                }
            }
        }
        Op::Reshape(x) => {
            let x = *x as usize;
            if requires[x] {
                for (o, &gi) in grads[x].data_mut().iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
        }
        Op::ExpandRows { x } => {
            let x = *x as usize;
            if requires[x] {
                let c = values[x].len();
                let gx = grads[x].data_mut();
                for (pos, &gi) in g.data().iter().enumerate() {
                    gx[pos % c] += gi;
                }
            }
        }
        Op::ConcatRows { a, b } => {
            let (a, b) = (*a as usize, *b as usize);
            let na = values[a].len();
            if requires[a] {
                for (o, &gi) in grads[a].data_mut().iter_mut().zip(&g.data()[..na]) {
                    *o += gi;
                }
            }
            if requires[b] {
                for (o, &gi) in grads[b].data_mut().iter_mut().zip(&g.data()[na..]) {
                    *o += gi;
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let (a, b) = (*a as usize, *b as usize);
            let (r, ca) = (values[a].shape()[0], values[a].shape()[1]);
            let cb = values[b].shape()[1];
            let c = ca + cb;
            if requires[a] {
                let ga = grads[a].data_mut();
                for i2 in 0..r {
                    for j in 0..ca {
                        ga[i2 * ca + j] += g.data()[i2 * c + j];
                    }
                }
            }
            if requires[b] {
                let gb = grads[b].data_mut();
                for i2 in 0..r {
                    for j in 0..cb {
                        gb[i2 * cb + j] += g.data()[i2 * c + ca + j];
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let x = *x as usize;
            if requires[x] {
                let c = values[x].shape()[1];
                let gx = grads[x].data_mut();
                for (pos, &gi) in g.data().iter().enumerate() {
                    gx[start * c + pos] += gi;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let x = *x as usize;
            if requires[x] {
                let c = values[x].shape()[1];
                let len = g.shape()[1];
                let gx = grads[x].data_mut();
                for (pos, &gi) in g.data().iter().enumerate() {
                    let (row, col) = (pos / len, pos % len);
                    gx[row * c + start + col] += gi;
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let x = *x as usize;
            if requires[x] {
                let c = values[x].shape()[1];
                let gx = grads[x].data_mut();
                for (r2, &src) in idx.iter().enumerate() {
                    let dst = src as usize * c;
                    for j in 0..c {
                        gx[dst + j] += g.data()[r2 * c + j];
                    }
                }
            }
        }
        Op::Matmul { a, b } => {
            let (a, b) = (*a as usize, *b as usize);
            let (m, k) = (values[a].shape()[0], values[a].shape()[1]);
            let n = values[b].shape()[1];
            if requires[a] {
                matmul_a_bt(g.data(), values[b].data(), grads[a].data_mut(), m, n, k);
            }
            if requires[b] {
                matmul_at_b(values[a].data(), g.data(), grads[b].data_mut(), m, k, n);
            }
        }
        Op::BiasAdd { x, b } => {
            let (x, b) = (*x as usize, *b as usize);
            if requires[x] {
                for (o, &gi) in grads[x].data_mut().iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }
            if requires[b] {
                let c = values[b].len();
                let gb = grads[b].data_mut();
                for (pos, &gi) in g.data().iter().enumerate() {
                    gb[pos % c] += gi;
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            dilation,
            offset,
        } => {
            let (x, w) = (*x as usize, *w as usize);
            let (n, cin) = (values[x].shape()[0], values[x].shape()[1]);
            let (k, cout) = (values[w].shape()[0], values[w].shape()[2]);
            for m in 0..n {
                for t in 0..k {
                    let pos = m as i64 - offset - (t * dilation) as i64;
                    if pos < 0 || pos >= n as i64 {
                        continue;
                    }
                    let p = pos as usize;
                    let gr = &g.data()[m * cout..(m + 1) * cout];
                    if requires[x] {
                        let wv = values[w].data();
                        let gx = &mut grads[x].data_mut()[p * cin..(p + 1) * cin];
                        for (ci, gxe) in gx.iter_mut().enumerate() {
                            let wr = &wv[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                            let mut s = 0.0;
                            for (co, &gv) in gr.iter().enumerate() {
                                s += wr[co] * gv;
                            }
                            *gxe += s;
                        }
                    }
                    if requires[w] {
                        let xv = values[x].data();
                        let gw = grads[w].data_mut();
                        for ci in 0..cin {
                            let xe = xv[p * cin + ci];
                            if xe == 0.0 {
                                continue;
                            }
                            let wr = &mut gw[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                            for (co, &gv) in gr.iter().enumerate() {
                                wr[co] += xe * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::ConvDepthwise {
            x,
            w,
            dilation,
            offset,
        } => {
            let (x, w) = (*x as usize, *w as usize);
            let (n, c) = (values[x].shape()[0], values[x].shape()[1]);
            let k = values[w].shape()[0];
            for m in 0..n {
                for t in 0..k {
                    let pos = m as i64 - offset - (t * dilation) as i64;
                    if pos < 0 || pos >= n as i64 {
                        continue;
                    }
                    let p = pos as usize;
                    let gr = &g.data()[m * c..(m + 1) * c];
                    if requires[x] {
                        let wv = &values[w].data()[t * c..(t + 1) * c];
                        let gx = &mut grads[x].data_mut()[p * c..(p + 1) * c];
                        for j in 0..c {
                            gx[j] += wv[j] * gr[j];
                        }
                    }
                    if requires[w] {
                        let xv = &values[x].data()[p * c..(p + 1) * c];
                        let gw = &mut grads[w].data_mut()[t * c..(t + 1) * c];
                        for j in 0..c {
                            gw[j] += xv[j] * gr[j];
                        }
                    }
                }
            }
        }
        Op::ComplexMul(a, b) => {
            let (a, b) = (*a as usize, *b as usize);
            if requires[a] {
                let vb = values[b].data();
                let ga = grads[a].data_mut();
                for (pos, (gp, bp)) in g.data().chunks_exact(2).zip(vb.chunks_exact(2)).enumerate()
                {
                    ga[2 * pos] += gp[0] * bp[0] + gp[1] * bp[1];
                    ga[2 * pos + 1] += gp[1] * bp[0] - gp[0] * bp[1];
                }
            }
            if requires[b] {
                let va = values[a].data();
                let gb = grads[b].data_mut();
                for (pos, (gp, ap)) in g.data().chunks_exact(2).zip(va.chunks_exact(2)).enumerate()
                {
                    gb[2 * pos] += gp[0] * ap[0] + gp[1] * ap[1];
                    gb[2 * pos + 1] += gp[1] * ap[0] - gp[0] * ap[1];
                }
            }
        }
        Op::ConjPairs(x) => {
            let x = *x as usize;
            if requires[x] {
                let gx = grads[x].data_mut();
                for (pos, gp) in g.data().chunks_exact(2).enumerate() {
                    gx[2 * pos] += gp[0];
                    gx[2 * pos + 1] -= gp[1];
                }
            }
        }
        Op::ToeplitzChol {
            band_re,
            band_im,
            jitter_scale,
        } => {
            let (br, bi) = (*band_re as usize, *band_im as usize);
            let packed = values[i].data();
            let n = values[i].shape()[0];
            let b1 = values[i].shape()[1];
            let mut gbr = vec![0.0; b1];
            let mut gbi = vec![0.0; b1];
            chol::factor_adjoint(packed, g.data(), n, b1, *jitter_scale, &mut gbr, &mut gbi);
            if requires[br] {
                for (o, v) in grads[br].data_mut().iter_mut().zip(&gbr) {
                    *o += v;
                }
            }
            if requires[bi] {
                for (o, v) in grads[bi].data_mut().iter_mut().zip(&gbi) {
                    *o += v;
                }
            }
        }
        Op::BandedMatvec { l, x } => {
            let (l, x) = (*l as usize, *x as usize);
            let (n, b1) = (values[l].shape()[0], values[l].shape()[1]);
            if requires[l] {
                chol::matvec_adjoint_l(n, b1, values[x].data(), g.data(), grads[l].data_mut());
            }
            if requires[x] {
                chol::matvec_adjoint_x(values[l].data(), n, b1, g.data(), grads[x].data_mut());
            }
        }
    }
}
