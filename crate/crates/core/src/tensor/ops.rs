//! Differentiable primitive ops: forward builders plus the `Op` backpointer
//! enum whose `backward` implements the adjoint of each primitive.
//!
//! Broadcasting rule (deliberately minimal): two operands must either have
//! identical shapes, or one shape must be a trailing suffix of the other; the
//! smaller operand is tiled over the leading axes. The adjoint of tiling is a
//! sum over those leading axes.

use std::rc::Rc;

use super::{debug_check_enabled, grad_enabled, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    /// y = x * mul + add with scalar constants.
    Affine { x: Tensor<T>, mul: T, add: T },
    Matmul { a: Tensor<T>, b: Tensor<T> },
    Transpose { x: Tensor<T>, ax0: usize, ax1: usize },
    Reshape { x: Tensor<T> },
    Concat { xs: Vec<Tensor<T>>, axis: usize },
    Narrow { x: Tensor<T>, axis: usize, start: usize },
    Gather { x: Tensor<T>, axis: usize, idx: Rc<Vec<usize>> },
    ScatterAdd { x: Tensor<T>, axis: usize, idx: Rc<Vec<usize>> },
    Exp(Tensor<T>),
    Log(Tensor<T>),
    Sqrt(Tensor<T>),
    Softplus { x: Tensor<T>, sigma: Vec<T> },
    Silu { x: Tensor<T>, sigma: Vec<T> },
    /// y = (exp(x) - 1) / x with a series fallback near zero.
    Phi1 { x: Tensor<T>, ex: Vec<T> },
    SoftmaxLast { x: Tensor<T> },
    LayerNorm { x: Tensor<T>, xhat: Vec<T>, inv_std: Vec<T> },
    SumAll { x: Tensor<T> },
    MeanAll { x: Tensor<T> },
    SumLast { x: Tensor<T> },
    /// h[t] = a[t] * h[t-1] + b[t] elementwise over [batch, time, chan, state].
    LinearScan { a: Tensor<T>, b: Tensor<T>, h0: Tensor<T> },
    /// Depthwise causal 1-d convolution, x [B, L, C], w [K, C], bias [C].
    Conv1dDepthwise { x: Tensor<T>, w: Tensor<T>, bias: Tensor<T> },
    /// 2x2 stride-2 correlation over the trailing two axes with a fixed kernel.
    Corr2x2Down { x: Tensor<T>, k: [T; 4] },
    /// Transposed counterpart of `Corr2x2Down` (2x upsampling).
    TCorr2x2Up { x: Tensor<T>, k: [T; 4] },
}

// ---------------------------------------------------------------------------
// small shape helpers

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// outer x extent x inner view of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if debug_check_enabled() {
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { op, index: i });
            }
        }
    }
    Ok(())
}

enum BroadcastPlan {
    Equal,
    /// lhs is the larger operand; rhs tiles over its leading axes.
    RhsSmall,
    /// rhs is the larger operand; lhs tiles over its leading axes.
    LhsSmall,
}

fn broadcast_plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<BroadcastPlan> {
    if lhs == rhs {
        return Ok(BroadcastPlan::Equal);
    }
    if lhs.len() > rhs.len() && lhs.ends_with(rhs) {
        return Ok(BroadcastPlan::RhsSmall);
    }
    if rhs.len() > lhs.len() && rhs.ends_with(lhs) {
        return Ok(BroadcastPlan::LhsSmall);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Sum `g` (laid out as `repeats` consecutive blocks of `len`) down to one block.
fn sum_leading<T: Scalar>(g: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for block in g.chunks_exact(len) {
        for (o, v) in out.iter_mut().zip(block) {
            *o = *o + *v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// matmul kernels (row-major; inner loops run over contiguous memory)

/// c += a @ b with a [m,k], b [k,n].
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = aik.mul_add(bv, *cv);
            }
        }
    }
}

/// c += a @ b^T with a [m,n], b [k,n] -> c [m,k]. Rows of both are contiguous.
fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (kk, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = av.mul_add(bv, acc);
            }
            *cv = *cv + acc;
        }
    }
}

/// c += a^T @ b with a [m,k], b [m,n] -> c [k,n].
fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = aik.mul_add(bv, *cv);
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_val<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) computed without overflow on either tail.
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// forward builders

impl<T: Scalar> Tensor<T> {
    fn unary_result(
        &self,
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Tensor<T>> {
        check_finite(name, &data)?;
        let record = grad_enabled() && self.requires_grad();
        Ok(Tensor::make(data, shape, record, record.then(op)))
    }

    fn binary_elementwise(
        &self,
        rhs: &Tensor<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Tensor<T>> {
        let plan = broadcast_plan(name, self.shape(), rhs.shape())?;
        let a = self.data_ref();
        let b = rhs.data_ref();
        let (data, shape): (Vec<T>, Vec<usize>) = match plan {
            BroadcastPlan::Equal => (
                a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
                self.shape().to_vec(),
            ),
            BroadcastPlan::RhsSmall => {
                let bl = b.len().max(1);
                (
                    a.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b[i % bl]))
                        .collect(),
                    self.shape().to_vec(),
                )
            }
            BroadcastPlan::LhsSmall => {
                let al = a.len().max(1);
                (
                    b.iter()
                        .enumerate()
                        .map(|(i, &y)| f(a[i % al], y))
                        .collect(),
                    rhs.shape().to_vec(),
                )
            }
        };
        drop(a);
        drop(b);
        check_finite(name, &data)?;
        let record = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        Ok(Tensor::make(data, shape, record, record.then(op)))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.clone(), rhs.clone());
        self.binary_elementwise(rhs, "add", |x, y| x + y, move || Op::Add(a, b))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.clone(), rhs.clone());
        self.binary_elementwise(rhs, "sub", |x, y| x - y, move || Op::Sub(a, b))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.clone(), rhs.clone());
        self.binary_elementwise(rhs, "mul", |x, y| x * y, move || Op::Mul(a, b))
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.clone(), rhs.clone());
        self.binary_elementwise(rhs, "div", |x, y| x / y, move || Op::Div(a, b))
    }

    /// Elementwise x * mul + add with scalar constants.
    pub fn affine(&self, mul: T, add: T) -> Result<Tensor<T>> {
        let data = self.data_ref().iter().map(|&v| v.mul_add(mul, add)).collect();
        let x = self.clone();
        self.unary_result("affine", data, self.shape().to_vec(), move || Op::Affine {
            x,
            mul,
            add,
        })
    }

    pub fn scale(&self, mul: T) -> Result<Tensor<T>> {
        self.affine(mul, T::zero())
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.affine(-T::one(), T::zero())
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.mul(self)
    }

    /// Matrix product. `self` is [.., m, k]; `rhs` is either [k, n] (applied to
    /// every leading slice) or [.., k, n] with identical leading axes.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls.len() < 2 || rs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (rk, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        let lead_ok = rs.len() == 2 || ls[..ls.len() - 2] == rs[..rs.len() - 2];
        if k != rk || !lead_ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let batches: usize = ls[..ls.len() - 2].iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        {
            let a = self.data_ref();
            let b = rhs.data_ref();
            if rs.len() == 2 {
                // collapse leading axes into rows of one big gemm
                mm_acc(&a, &b, &mut out, batches * m, k, n);
            } else {
                for bi in 0..batches {
                    mm_acc(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = ls[..ls.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        check_finite("matmul", &out)?;
        let record = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let op = record.then(|| Op::Matmul {
            a: self.clone(),
            b: rhs.clone(),
        });
        Ok(Tensor::make(out, shape, record, op))
    }

    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if ax0 >= rank || ax1 >= rank {
            return Err(Error::InvalidArgument {
                op: "transpose",
                detail: format!("axes ({ax0}, {ax1}) out of range for rank {rank}"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax0, ax1);
        let (data, shape) = permuted_copy(&self.data_ref(), self.shape(), &perm);
        let x = self.clone();
        self.unary_result("transpose", data, shape, move || Op::Transpose { x, ax0, ax1 })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                detail: format!("cannot reshape {} elements into {:?}", self.numel(), new_shape),
            });
        }
        let x = self.clone();
        self.unary_result("reshape", self.to_vec(), new_shape.to_vec(), move || {
            Op::Reshape { x }
        })
    }

    pub fn concat(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let base = xs[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total_extent = 0usize;
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_extent += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total_extent;
        let mut out = Vec::with_capacity(outer * total_extent * inner);
        let borrowed: Vec<_> = xs.iter().map(|x| x.data_ref()).collect();
        for o in 0..outer {
            for (x, d) in xs.iter().zip(&borrowed) {
                let ext = x.shape()[axis];
                let chunk = ext * inner;
                out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(borrowed);
        check_finite("concat", &out)?;
        let record = grad_enabled() && xs.iter().any(|x| x.requires_grad());
        let op = record.then(|| Op::Concat {
            xs: xs.to_vec(),
            axis,
        });
        Ok(Tensor::make(out, shape, record, op))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidArgument {
                op: "narrow",
                detail: format!(
                    "slice [{start}, {}) along axis {axis} of {:?}",
                    start + len,
                    shape
                ),
            });
        }
        let (outer, extent, inner) = split_at_axis(shape, axis);
        let data = self.data_ref();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = &data[o * extent * inner..];
            out.extend_from_slice(&row[start * inner..(start + len) * inner]);
        }
        drop(data);
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let x = self.clone();
        self.unary_result("narrow", out, new_shape, move || Op::Narrow { x, axis, start })
    }

    /// Split into parts of the given lengths along `axis`.
    pub fn split(&self, axis: usize, parts: &[usize]) -> Result<Vec<Tensor<T>>> {
        let total: usize = parts.iter().sum();
        if axis >= self.rank() || total != self.shape()[axis] {
            return Err(Error::InvalidArgument {
                op: "split",
                detail: format!("parts {parts:?} along axis {axis} of {:?}", self.shape()),
            });
        }
        let mut out = Vec::with_capacity(parts.len());
        let mut start = 0;
        for &len in parts {
            out.push(self.narrow(axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Split into `n` equal chunks along `axis`.
    pub fn chunk(&self, axis: usize, n: usize) -> Result<Vec<Tensor<T>>> {
        let extent = self.shape().get(axis).copied().unwrap_or(0);
        if n == 0 || extent % n != 0 {
            return Err(Error::InvalidArgument {
                op: "chunk",
                detail: format!("cannot chunk extent {extent} into {n} equal parts"),
            });
        }
        self.split(axis, &vec![extent / n; n])
    }

    /// Index rows along `axis`: out[.., i, ..] = self[.., idx[i], ..].
    pub fn gather(&self, axis: usize, idx: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                op: "gather",
                detail: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        let (outer, extent, inner) = split_at_axis(shape, axis);
        for &i in idx {
            if i >= extent {
                return Err(Error::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    extent,
                });
            }
        }
        let data = self.data_ref();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            let row = &data[o * extent * inner..(o + 1) * extent * inner];
            for &i in idx {
                out.extend_from_slice(&row[i * inner..(i + 1) * inner]);
            }
        }
        drop(data);
        let mut new_shape = shape.to_vec();
        new_shape[axis] = idx.len();
        let x = self.clone();
        let idx_rc = Rc::new(idx.to_vec());
        self.unary_result("gather", out, new_shape, move || Op::Gather {
            x,
            axis,
            idx: idx_rc,
        })
    }

    /// Adjoint-style indexed write: out has `extent` rows along `axis`, and
    /// out[.., idx[i], ..] += self[.., i, ..]. Duplicate indices accumulate.
    pub fn scatter_add(&self, axis: usize, idx: &[usize], extent: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] != idx.len() {
            return Err(Error::InvalidArgument {
                op: "scatter_add",
                detail: format!("idx len {} vs axis extent {:?}[{axis}]", idx.len(), shape),
            });
        }
        for &i in idx {
            if i >= extent {
                return Err(Error::IndexOutOfBounds {
                    op: "scatter_add",
                    index: i,
                    extent,
                });
            }
        }
        let (outer, src_extent, inner) = split_at_axis(shape, axis);
        let mut out = vec![T::zero(); outer * extent * inner];
        let data = self.data_ref();
        for o in 0..outer {
            let src_row = &data[o * src_extent * inner..(o + 1) * src_extent * inner];
            let dst_row = &mut out[o * extent * inner..(o + 1) * extent * inner];
            for (i, &dst) in idx.iter().enumerate() {
                let src = &src_row[i * inner..(i + 1) * inner];
                let d = &mut dst_row[dst * inner..(dst + 1) * inner];
                for (dv, sv) in d.iter_mut().zip(src) {
                    *dv = *dv + *sv;
                }
            }
        }
        drop(data);
        let mut new_shape = shape.to_vec();
        new_shape[axis] = extent;
        let x = self.clone();
        let idx_rc = Rc::new(idx.to_vec());
        self.unary_result("scatter_add", out, new_shape, move || Op::ScatterAdd {
            x,
            axis,
            idx: idx_rc,
        })
    }

    /// Tile `times` copies along `axis` (extent must be 1). Built on gather so
    /// the adjoint (summing the copies) comes for free.
    pub fn repeat_axis(&self, axis: usize, times: usize) -> Result<Tensor<T>> {
        if self.shape().get(axis).copied() != Some(1) {
            return Err(Error::InvalidArgument {
                op: "repeat_axis",
                detail: format!("axis {axis} of {:?} must have extent 1", self.shape()),
            });
        }
        self.gather(axis, &vec![0; times])
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let data = self.data_ref().iter().map(|v| v.exp()).collect();
        let x = self.clone();
        self.unary_result("exp", data, self.shape().to_vec(), move || Op::Exp(x))
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        let data = self.data_ref().iter().map(|v| v.ln()).collect();
        let x = self.clone();
        self.unary_result("log", data, self.shape().to_vec(), move || Op::Log(x))
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        let data = self.data_ref().iter().map(|v| v.sqrt()).collect();
        let x = self.clone();
        self.unary_result("sqrt", data, self.shape().to_vec(), move || Op::Sqrt(x))
    }

    pub fn softplus(&self) -> Result<Tensor<T>> {
        let src = self.data_ref();
        let data = src.iter().map(|&v| softplus_val(v)).collect();
        let sigma: Vec<T> = src.iter().map(|&v| sigmoid(v)).collect();
        drop(src);
        let x = self.clone();
        self.unary_result("softplus", data, self.shape().to_vec(), move || Op::Softplus {
            x,
            sigma,
        })
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        let src = self.data_ref();
        let sigma: Vec<T> = src.iter().map(|&v| sigmoid(v)).collect();
        let data = src.iter().zip(&sigma).map(|(&v, &s)| v * s).collect();
        drop(src);
        let x = self.clone();
        self.unary_result("silu", data, self.shape().to_vec(), move || Op::Silu { x, sigma })
    }

    /// (exp(x) - 1) / x, continuously extended by its series near x = 0.
    /// This is the factor turning a zero-order-hold step into an input weight.
    pub fn expm1_over_x(&self) -> Result<Tensor<T>> {
        let tiny = T::from_f64(1e-6);
        let half = T::from_f64(0.5);
        let src = self.data_ref();
        let ex: Vec<T> = src.iter().map(|&v| v.exp()).collect();
        let data = src
            .iter()
            .zip(&ex)
            .map(|(&v, &e)| {
                if v.abs() < tiny {
                    T::one() + v * half
                } else {
                    (e - T::one()) / v
                }
            })
            .collect();
        drop(src);
        let x = self.clone();
        self.unary_result("expm1_over_x", data, self.shape().to_vec(), move || Op::Phi1 {
            x,
            ex,
        })
    }

    /// Softmax over the last axis (max-shifted for stability).
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or(Error::InvalidShape {
            op: "softmax_last",
            shape: vec![],
            detail: "rank 0".into(),
        })?;
        let src = self.data_ref();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(n) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let base = data.len();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                data.push(e);
            }
            for v in &mut data[base..] {
                *v = *v / sum;
            }
        }
        drop(src);
        let x = self.clone();
        self.unary_result("softmax_last", data, self.shape().to_vec(), move || {
            Op::SoftmaxLast { x }
        })
    }

    /// Layer normalization over the last axis, no affine parameters.
    pub fn layer_norm(&self, eps: T) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            shape: vec![],
            detail: "rank 0".into(),
        })?;
        let inv_n = T::one() / T::from_usize(n);
        let src = self.data_ref();
        let rows = src.len() / n;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in src.chunks_exact(n) {
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = d.mul_add(d, var);
            }
            var = var * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for &v in row {
                xhat.push((v - mean) * is);
            }
        }
        drop(src);
        let x = self.clone();
        let data = xhat.clone();
        self.unary_result("layer_norm", data, self.shape().to_vec(), move || {
            Op::LayerNorm { x, xhat, inv_std }
        })
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data_ref().iter() {
            acc = acc + v;
        }
        let x = self.clone();
        self.unary_result("sum_all", vec![acc], Vec::new(), move || Op::SumAll { x })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(Error::InvalidShape {
                op: "mean_all",
                shape: self.shape().to_vec(),
                detail: "empty tensor".into(),
            });
        }
        let inv = T::one() / T::from_usize(self.numel());
        let mut acc = T::zero();
        for &v in self.data_ref().iter() {
            acc = acc + v;
        }
        let x = self.clone();
        self.unary_result("mean_all", vec![acc * inv], Vec::new(), move || Op::MeanAll { x })
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or(Error::InvalidShape {
            op: "sum_last",
            shape: vec![],
            detail: "rank 0".into(),
        })?;
        let src = self.data_ref();
        let mut out = Vec::with_capacity(src.len() / n);
        for row in src.chunks_exact(n) {
            let mut acc = T::zero();
            for &v in row {
                acc = acc + v;
            }
            out.push(acc);
        }
        drop(src);
        let shape = self.shape()[..self.rank() - 1].to_vec();
        let x = self.clone();
        self.unary_result("sum_last", out, shape, move || Op::SumLast { x })
    }

    /// First-order linear recurrence h[t] = a[t] * h[t-1] + b[t], elementwise
    /// over channels and states. `a`, `b` are [batch, time, chan, state]; `h0`
    /// is [batch, chan, state]. Returns all h as [batch, time, chan, state].
    pub fn linear_scan(a: &Tensor<T>, b: &Tensor<T>, h0: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 || b.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "linear_scan",
                lhs: s.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (bsz, time, chan, state) = (s[0], s[1], s[2], s[3]);
        if h0.shape() != [bsz, chan, state] {
            return Err(Error::ShapeMismatch {
                op: "linear_scan",
                lhs: s.to_vec(),
                rhs: h0.shape().to_vec(),
            });
        }
        if time == 0 {
            return Err(Error::InvalidShape {
                op: "linear_scan",
                shape: s.to_vec(),
                detail: "time axis must be nonempty".into(),
            });
        }
        let gn = chan * state;
        let ad = a.data_ref();
        let bd = b.data_ref();
        let hd = h0.data_ref();
        let mut out = vec![T::zero(); bsz * time * gn];
        for bi in 0..bsz {
            let h0_row = &hd[bi * gn..(bi + 1) * gn];
            let batch = &mut out[bi * time * gn..(bi + 1) * time * gn];
            let ab = &ad[bi * time * gn..(bi + 1) * time * gn];
            let bb = &bd[bi * time * gn..(bi + 1) * time * gn];
            // t = 0 reads h0; later steps read the previous output row in place
            for j in 0..gn {
                batch[j] = ab[j].mul_add(h0_row[j], bb[j]);
            }
            for t in 1..time {
                let (prev, cur) = batch.split_at_mut(t * gn);
                let prev_row = &prev[(t - 1) * gn..];
                let a_row = &ab[t * gn..(t + 1) * gn];
                let b_row = &bb[t * gn..(t + 1) * gn];
                for j in 0..gn {
                    cur[j] = a_row[j].mul_add(prev_row[j], b_row[j]);
                }
            }
        }
        drop(ad);
        drop(bd);
        drop(hd);
        if debug_check_enabled() {
            for (i, v) in out.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        op: "linear_scan",
                        index: i,
                    });
                }
            }
        }
        let record =
            grad_enabled() && (a.requires_grad() || b.requires_grad() || h0.requires_grad());
        let op = record.then(|| Op::LinearScan {
            a: a.clone(),
            b: b.clone(),
            h0: h0.clone(),
        });
        Ok(Tensor::make(out, s.to_vec(), record, op))
    }

    /// Depthwise causal 1-d convolution. `self` is [B, L, C]; `w` is [K, C]
    /// (tap 0 is the oldest sample, tap K-1 multiplies the current one);
    /// `bias` is [C]. Positions before the sequence start contribute zero.
    pub fn conv1d_causal_depthwise(&self, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        let ws = w.shape();
        if s.len() != 3 || ws.len() != 2 || bias.shape() != [s[2]] || ws[1] != s[2] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_causal_depthwise",
                lhs: s.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (bsz, len, chan) = (s[0], s[1], s[2]);
        let k = ws[0];
        let xd = self.data_ref();
        let wd = w.data_ref();
        let bd = bias.data_ref();
        let mut out = vec![T::zero(); bsz * len * chan];
        for bi in 0..bsz {
            for l in 0..len {
                let row = &mut out[(bi * len + l) * chan..(bi * len + l + 1) * chan];
                row.copy_from_slice(&bd);
                for j in 0..k {
                    let src_l = l as isize - (k as isize - 1) + j as isize;
                    if src_l < 0 {
                        continue;
                    }
                    let x_row = &xd[(bi * len + src_l as usize) * chan..][..chan];
                    let w_row = &wd[j * chan..(j + 1) * chan];
                    for c in 0..chan {
                        row[c] = w_row[c].mul_add(x_row[c], row[c]);
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        check_finite("conv1d_causal_depthwise", &out)?;
        let record = grad_enabled()
            && (self.requires_grad() || w.requires_grad() || bias.requires_grad());
        let op = record.then(|| Op::Conv1dDepthwise {
            x: self.clone(),
            w: w.clone(),
            bias: bias.clone(),
        });
        Ok(Tensor::make(out, s.to_vec(), record, op))
    }

    /// Correlate the trailing two axes with a fixed 2x2 kernel at stride 2,
    /// halving both. Kernel layout: [top-left, top-right, bottom-left,
    /// bottom-right], first image axis pointing down.
    pub fn corr2x2_down(&self, k: [T; 4]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 2] % 2 != 0 || s[s.len() - 1] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "corr2x2_down",
                shape: s.to_vec(),
                detail: "trailing two axes must be even".into(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data_ref();
        let mut out = vec![T::zero(); lead * oh * ow];
        for c in 0..lead {
            let plane = &src[c * h * w..(c + 1) * h * w];
            let oplane = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let tl = plane[(2 * i) * w + 2 * j];
                    let tr = plane[(2 * i) * w + 2 * j + 1];
                    let bl = plane[(2 * i + 1) * w + 2 * j];
                    let br = plane[(2 * i + 1) * w + 2 * j + 1];
                    oplane[i * ow + j] = k[0] * tl + k[1] * tr + k[2] * bl + k[3] * br;
                }
            }
        }
        drop(src);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(oh);
        shape.push(ow);
        let x = self.clone();
        self.unary_result("corr2x2_down", out, shape, move || Op::Corr2x2Down { x, k })
    }

    /// Transposed 2x2 stride-2 correlation: doubles the trailing two axes.
    /// Exact adjoint of [`Tensor::corr2x2_down`] with the same kernel.
    pub fn tcorr2x2_up(&self, k: [T; 4]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "tcorr2x2_up",
                shape: s.to_vec(),
                detail: "needs at least two axes".into(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = (h * 2, w * 2);
        let src = self.data_ref();
        let mut out = vec![T::zero(); lead * oh * ow];
        for c in 0..lead {
            let plane = &src[c * h * w..(c + 1) * h * w];
            let oplane = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    let v = plane[i * w + j];
                    oplane[(2 * i) * ow + 2 * j] = k[0] * v;
                    oplane[(2 * i) * ow + 2 * j + 1] = k[1] * v;
                    oplane[(2 * i + 1) * ow + 2 * j] = k[2] * v;
                    oplane[(2 * i + 1) * ow + 2 * j + 1] = k[3] * v;
                }
            }
        }
        drop(src);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(oh);
        shape.push(ow);
        let x = self.clone();
        self.unary_result("tcorr2x2_up", out, shape, move || Op::TCorr2x2Up { x, k })
    }
}

/// Copy with axes permuted: out axis d draws from input axis perm[d].
fn permuted_copy<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        out.push(data[src]);
        // odometer increment over the output index, keeping src in sync
        let mut d = rank;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_shape[d] * src_strides[d];
            idx[d] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// adjoints

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Affine { x, .. }
            | Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Softplus { x, .. }
            | Op::Silu { x, .. }
            | Op::Phi1 { x, .. }
            | Op::SoftmaxLast { x }
            | Op::LayerNorm { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::SumLast { x } => vec![x],
            Op::Matmul { a, b } => vec![a, b],
            Op::Concat { xs, .. } => xs.iter().collect(),
            Op::LinearScan { a, b, h0 } => vec![a, b, h0],
            Op::Conv1dDepthwise { x, w, bias } => vec![x, w, bias],
            Op::Corr2x2Down { x, .. } | Op::TCorr2x2Up { x, .. } => vec![x],
        }
    }

    /// Propagate `node`'s gradient to the op's inputs. `node` is the tensor
    /// this op produced; its gradient is fully accumulated by the time the
    /// reverse sweep reaches it.
    pub(crate) fn backward(&self, node: &Tensor<T>) {
        let g = match node.grad_clone_or_none() {
            Some(g) => g,
            None => return, // no downstream influence
        };
        match self {
            Op::Add(a, b) => {
                backprop_broadcast(a, &g, |gi, _| gi, None);
                backprop_broadcast(b, &g, |gi, _| gi, None);
            }
            Op::Sub(a, b) => {
                backprop_broadcast(a, &g, |gi, _| gi, None);
                backprop_broadcast(b, &g, |gi, _| -gi, None);
            }
            Op::Mul(a, b) => {
                backprop_broadcast(a, &g, |gi, o| gi * o, Some(b));
                backprop_broadcast(b, &g, |gi, o| gi * o, Some(a));
            }
            Op::Div(a, b) => {
                backprop_broadcast(a, &g, |gi, o| gi / o, Some(b));
                // d/db (a/b) = -a / b^2; fold a and b lookups via both sides
                if b.requires_grad() {
                    let ad = a.data_ref();
                    let bd = b.data_ref();
                    let (al, bl) = (ad.len().max(1), bd.len().max(1));
                    let big = g.len();
                    let mut full = Vec::with_capacity(big);
                    for i in 0..big {
                        let av = ad[i % al];
                        let bv = bd[i % bl];
                        full.push(-g[i] * av / (bv * bv));
                    }
                    drop(ad);
                    drop(bd);
                    if b.numel() == big {
                        b.accumulate_grad(full);
                    } else {
                        b.accumulate_grad(sum_leading(&full, b.numel()));
                    }
                }
            }
            Op::Affine { x, mul, .. } => {
                if x.requires_grad() {
                    x.accumulate_grad(g.iter().map(|&gi| gi * *mul).collect());
                }
            }
            Op::Matmul { a, b } => {
                let ls = a.shape();
                let rs = b.shape();
                let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
                let n = rs[rs.len() - 1];
                let batches: usize = ls[..ls.len() - 2].iter().product();
                let ad = a.data_ref();
                let bd = b.data_ref();
                if rs.len() == 2 {
                    if a.requires_grad() {
                        let mut da = vec![T::zero(); ad.len()];
                        mm_nt_acc(&g, &bd, &mut da, batches * m, n, k);
                        drop(ad);
                        a.accumulate_grad(da);
                    } else {
                        drop(ad);
                    }
                    if b.requires_grad() {
                        let ad2 = a.data_ref();
                        let mut db = vec![T::zero(); bd.len()];
                        mm_tn_acc(&ad2, &g, &mut db, batches * m, k, n);
                        drop(ad2);
                        drop(bd);
                        b.accumulate_grad(db);
                    }
                } else {
                    let mut da = a.requires_grad().then(|| vec![T::zero(); ad.len()]);
                    let mut db = b.requires_grad().then(|| vec![T::zero(); bd.len()]);
                    for bi in 0..batches {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        if let Some(da) = da.as_mut() {
                            mm_nt_acc(
                                gb,
                                &bd[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        if let Some(db) = db.as_mut() {
                            mm_tn_acc(
                                &ad[bi * m * k..(bi + 1) * m * k],
                                gb,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    drop(ad);
                    drop(bd);
                    if let Some(da) = da {
                        a.accumulate_grad(da);
                    }
                    if let Some(db) = db {
                        b.accumulate_grad(db);
                    }
                }
            }
            Op::Transpose { x, ax0, ax1 } => {
                if x.requires_grad() {
                    let mut perm: Vec<usize> = (0..node.rank()).collect();
                    perm.swap(*ax0, *ax1);
                    let (gx, _) = permuted_copy(&g, node.shape(), &perm);
                    x.accumulate_grad(gx);
                }
            }
            Op::Reshape { x } => {
                if x.requires_grad() {
                    x.accumulate_grad(g);
                }
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.shape();
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let total_row = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for x in xs {
                    let ext = x.shape()[*axis];
                    let chunk = ext * inner;
                    if x.requires_grad() {
                        let mut gx = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let row = &g[o * total_row + offset..o * total_row + offset + chunk];
                            gx.extend_from_slice(row);
                        }
                        x.accumulate_grad(gx);
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                if x.requires_grad() {
                    let (outer, extent, inner) = split_at_axis(x.shape(), *axis);
                    let len = node.shape()[*axis];
                    let mut gx = vec![T::zero(); x.numel()];
                    for o in 0..outer {
                        let dst = &mut gx[o * extent * inner + start * inner..][..len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.copy_from_slice(src);
                    }
                    x.accumulate_grad(gx);
                }
            }
            Op::Gather { x, axis, idx } => {
                if x.requires_grad() {
                    let (outer, extent, inner) = split_at_axis(x.shape(), *axis);
                    let picks = idx.len();
                    let mut gx = vec![T::zero(); x.numel()];
                    for o in 0..outer {
                        let grow = &g[o * picks * inner..(o + 1) * picks * inner];
                        let xrow = &mut gx[o * extent * inner..(o + 1) * extent * inner];
                        for (i, &src) in idx.iter().enumerate() {
                            let gchunk = &grow[i * inner..(i + 1) * inner];
                            let xchunk = &mut xrow[src * inner..(src + 1) * inner];
                            for (xv, gv) in xchunk.iter_mut().zip(gchunk) {
                                *xv = *xv + *gv;
                            }
                        }
                    }
                    x.accumulate_grad(gx);
                }
            }
            Op::ScatterAdd { x, axis, idx } => {
                if x.requires_grad() {
                    let (outer, extent, inner) = split_at_axis(node.shape(), *axis);
                    let picks = idx.len();
                    let mut gx = Vec::with_capacity(outer * picks * inner);
                    for o in 0..outer {
                        let grow = &g[o * extent * inner..(o + 1) * extent * inner];
                        for &dst in idx.iter() {
                            gx.extend_from_slice(&grow[dst * inner..(dst + 1) * inner]);
                        }
                    }
                    x.accumulate_grad(gx);
                }
            }
            Op::Exp(x) => {
                if x.requires_grad() {
                    let y = node.data_ref();
                    x.accumulate_grad(g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect());
                }
            }
            Op::Log(x) => {
                if x.requires_grad() {
                    let xd = x.data_ref();
                    x.accumulate_grad(g.iter().zip(xd.iter()).map(|(&gi, &xi)| gi / xi).collect());
                }
            }
            Op::Sqrt(x) => {
                if x.requires_grad() {
                    let half = T::from_f64(0.5);
                    let y = node.data_ref();
                    x.accumulate_grad(
                        g.iter()
                            .zip(y.iter())
                            .map(|(&gi, &yi)| gi * half / yi)
                            .collect(),
                    );
                }
            }
            Op::Softplus { x, sigma } => {
                if x.requires_grad() {
                    x.accumulate_grad(
                        g.iter()
                            .zip(sigma.iter())
                            .map(|(&gi, &si)| gi * si)
                            .collect(),
                    );
                }
            }
            Op::Silu { x, sigma } => {
                if x.requires_grad() {
                    let xd = x.data_ref();
                    x.accumulate_grad(
                        g.iter()
                            .zip(xd.iter().zip(sigma.iter()))
                            .map(|(&gi, (&xi, &si))| gi * (si + xi * si * (T::one() - si)))
                            .collect(),
                    );
                }
            }
            Op::Phi1 { x, ex } => {
                if x.requires_grad() {
                    let tiny = T::from_f64(1e-6);
                    let half = T::from_f64(0.5);
                    let third = T::from_f64(1.0 / 3.0);
                    let xd = x.data_ref();
                    x.accumulate_grad(
                        g.iter()
                            .zip(xd.iter().zip(ex.iter()))
                            .map(|(&gi, (&xi, &ei))| {
                                let d = if xi.abs() < tiny {
                                    half + xi * third
                                } else {
                                    (ei * (xi - T::one()) + T::one()) / (xi * xi)
                                };
                                gi * d
                            })
                            .collect(),
                    );
                }
            }
            Op::SoftmaxLast { x } => {
                if x.requires_grad() {
                    let n = *node.shape().last().unwrap();
                    let y = node.data_ref();
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
                        let mut dot = T::zero();
                        for (&gi, &yi) in grow.iter().zip(yrow) {
                            dot = gi.mul_add(yi, dot);
                        }
                        for (&gi, &yi) in grow.iter().zip(yrow) {
                            gx.push(yi * (gi - dot));
                        }
                    }
                    drop(y);
                    x.accumulate_grad(gx);
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                if x.requires_grad() {
                    let n = *x.shape().last().unwrap();
                    let inv_n = T::one() / T::from_usize(n);
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, (grow, hrow)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate()
                    {
                        let is = inv_std[r];
                        let mut gsum = T::zero();
                        let mut ghsum = T::zero();
                        for (&gi, &hi) in grow.iter().zip(hrow) {
                            gsum = gsum + gi;
                            ghsum = gi.mul_add(hi, ghsum);
                        }
                        for (&gi, &hi) in grow.iter().zip(hrow) {
                            gx.push(is * (gi - inv_n * gsum - hi * inv_n * ghsum));
                        }
                    }
                    x.accumulate_grad(gx);
                }
            }
            Op::SumAll { x } => {
                if x.requires_grad() {
                    x.accumulate_grad(vec![g[0]; x.numel()]);
                }
            }
            Op::MeanAll { x } => {
                if x.requires_grad() {
                    let v = g[0] / T::from_usize(x.numel());
                    x.accumulate_grad(vec![v; x.numel()]);
                }
            }
            Op::SumLast { x } => {
                if x.requires_grad() {
                    let n = *x.shape().last().unwrap();
                    let mut gx = Vec::with_capacity(x.numel());
                    for &gi in &g {
                        for _ in 0..n {
                            gx.push(gi);
                        }
                    }
                    x.accumulate_grad(gx);
                }
            }
            Op::LinearScan { a, b, h0 } => {
                let s = a.shape();
                let (bsz, time, chan, state) = (s[0], s[1], s[2], s[3]);
                let gn = chan * state;
                let ad = a.data_ref();
                let hd = node.data_ref(); // forward outputs h[0..time)
                let h0d = h0.data_ref();
                let mut da = a.requires_grad().then(|| vec![T::zero(); ad.len()]);
                let mut db = b.requires_grad().then(|| vec![T::zero(); ad.len()]);
                let mut dh0 = h0.requires_grad().then(|| vec![T::zero(); h0d.len()]);
                // suffix recurrence: gbar[t] = dL/dh[t] + a[t+1] * gbar[t+1]
                let mut gbar = vec![T::zero(); gn];
                for bi in 0..bsz {
                    let base = bi * time * gn;
                    for j in 0..gn {
                        gbar[j] = g[base + (time - 1) * gn + j];
                    }
                    for t in (0..time).rev() {
                        let row = base + t * gn;
                        if t < time - 1 {
                            let a_next = &ad[row + gn..row + 2 * gn];
                            for j in 0..gn {
                                gbar[j] = a_next[j].mul_add(gbar[j], g[row + j]);
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            db[row..row + gn].copy_from_slice(&gbar);
                        }
                        if let Some(da) = da.as_mut() {
                            let h_prev: &[T] = if t == 0 {
                                &h0d[bi * gn..(bi + 1) * gn]
                            } else {
                                &hd[row - gn..row]
                            };
                            for j in 0..gn {
                                da[row + j] = gbar[j] * h_prev[j];
                            }
                        }
                    }
                    if let Some(dh0) = dh0.as_mut() {
                        let a0 = &ad[base..base + gn];
                        let dst = &mut dh0[bi * gn..(bi + 1) * gn];
                        for j in 0..gn {
                            dst[j] = a0[j] * gbar[j];
                        }
                    }
                }
                drop(ad);
                drop(hd);
                drop(h0d);
                if let Some(da) = da {
                    a.accumulate_grad(da);
                }
                if let Some(db) = db {
                    b.accumulate_grad(db);
                }
                if let Some(dh0) = dh0 {
                    h0.accumulate_grad(dh0);
                }
            }
            Op::Conv1dDepthwise { x, w, bias } => {
                let s = x.shape();
                let (bsz, len, chan) = (s[0], s[1], s[2]);
                let k = w.shape()[0];
                let xd = x.data_ref();
                let wd = w.data_ref();
                if x.requires_grad() {
                    let mut dx = vec![T::zero(); xd.len()];
                    for bi in 0..bsz {
                        for l in 0..len {
                            let grow = &g[(bi * len + l) * chan..][..chan];
                            for j in 0..k {
                                let src_l = l as isize - (k as isize - 1) + j as isize;
                                if src_l < 0 {
                                    continue;
                                }
                                let dst = &mut dx[(bi * len + src_l as usize) * chan..][..chan];
                                let w_row = &wd[j * chan..(j + 1) * chan];
                                for c in 0..chan {
                                    dst[c] = w_row[c].mul_add(grow[c], dst[c]);
                                }
                            }
                        }
                    }
                    x.accumulate_grad(dx);
                }
                if w.requires_grad() {
                    let mut dw = vec![T::zero(); wd.len()];
                    for bi in 0..bsz {
                        for l in 0..len {
                            let grow = &g[(bi * len + l) * chan..][..chan];
                            for j in 0..k {
                                let src_l = l as isize - (k as isize - 1) + j as isize;
                                if src_l < 0 {
                                    continue;
                                }
                                let x_row = &xd[(bi * len + src_l as usize) * chan..][..chan];
                                let dw_row = &mut dw[j * chan..(j + 1) * chan];
                                for c in 0..chan {
                                    dw_row[c] = x_row[c].mul_add(grow[c], dw_row[c]);
                                }
                            }
                        }
                    }
                    w.accumulate_grad(dw);
                }
                if bias.requires_grad() {
                    let mut dbias = vec![T::zero(); chan];
                    for row in g.chunks_exact(chan) {
                        for (dv, &gv) in dbias.iter_mut().zip(row) {
                            *dv = *dv + gv;
                        }
                    }
                    bias.accumulate_grad(dbias);
                }
            }
            Op::Corr2x2Down { x, k } => {
                if x.requires_grad() {
                    // adjoint of stride-2 correlation is the transposed spread
                    let s = node.shape();
                    let (oh, ow) = (s[s.len() - 2], s[s.len() - 1]);
                    let lead: usize = s[..s.len() - 2].iter().product();
                    let mut gx = vec![T::zero(); x.numel()];
                    let w = ow * 2;
                    for c in 0..lead {
                        let gplane = &g[c * oh * ow..(c + 1) * oh * ow];
                        let xplane = &mut gx[c * (oh * 2) * w..(c + 1) * (oh * 2) * w];
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = gplane[i * ow + j];
                                xplane[(2 * i) * w + 2 * j] = k[0] * gv;
                                xplane[(2 * i) * w + 2 * j + 1] = k[1] * gv;
                                xplane[(2 * i + 1) * w + 2 * j] = k[2] * gv;
                                xplane[(2 * i + 1) * w + 2 * j + 1] = k[3] * gv;
                            }
                        }
                    }
                    x.accumulate_grad(gx);
                }
            }
            Op::TCorr2x2Up { x, k } => {
                if x.requires_grad() {
                    let s = node.shape();
                    let (oh, ow) = (s[s.len() - 2], s[s.len() - 1]);
                    let lead: usize = s[..s.len() - 2].iter().product();
                    let (ih, iw) = (oh / 2, ow / 2);
                    let mut gx = vec![T::zero(); x.numel()];
                    for c in 0..lead {
                        let gplane = &g[c * oh * ow..(c + 1) * oh * ow];
                        let xplane = &mut gx[c * ih * iw..(c + 1) * ih * iw];
                        for i in 0..ih {
                            for j in 0..iw {
                                let tl = gplane[(2 * i) * ow + 2 * j];
                                let tr = gplane[(2 * i) * ow + 2 * j + 1];
                                let bl = gplane[(2 * i + 1) * ow + 2 * j];
                                let br = gplane[(2 * i + 1) * ow + 2 * j + 1];
                                xplane[i * iw + j] = k[0] * tl + k[1] * tr + k[2] * bl + k[3] * br;
                            }
                        }
                    }
                    x.accumulate_grad(gx);
                }
            }
        }
    }
}

/// Accumulate `map(g_i, other_i)` into `target`, summing over leading axes if
/// `target` is the broadcast (smaller) side. `other` supplies the second
/// operand values, itself broadcast by flat modulo.
fn backprop_broadcast<T: Scalar>(
    target: &Tensor<T>,
    g: &[T],
    map: impl Fn(T, T) -> T,
    other: Option<&Tensor<T>>,
) {
    if !target.requires_grad() {
        return;
    }
    let other_data = other.map(|o| o.data_ref());
    let full: Vec<T> = match &other_data {
        Some(od) => {
            let ol = od.len().max(1);
            g.iter()
                .enumerate()
                .map(|(i, &gi)| map(gi, od[i % ol]))
                .collect()
        }
        None => g.iter().map(|&gi| map(gi, T::zero())).collect(),
    };
    drop(other_data);
    if target.numel() == full.len() {
        target.accumulate_grad(full);
    } else {
        target.accumulate_grad(sum_leading(&full, target.numel()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()
    }

    #[test]
    fn add_broadcasts_trailing_suffix_both_ways() {
        let big = Tensor::<f64>::from_vec((0..6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        let small = Tensor::<f64>::from_vec(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let a = big.add(&small).unwrap();
        assert_eq!(a.to_vec(), vec![10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let b = small.add(&big).unwrap();
        assert_eq!(b.to_vec(), a.to_vec());
        assert_eq!(b.shape(), &[2, 3]);
    }

    #[test]
    fn add_rejects_non_suffix_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn broadcast_adjoint_sums_leading_axes() {
        // loss = sum(big * small); d/dsmall = column sums of big
        let big =
            Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let small = Tensor::<f64>::param(vec![1.0, 1.0, 1.0], &[3]).unwrap();
        let loss = big.mul(&small).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(small.grad_vec().unwrap(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn matmul_hand_value() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_batched_rhs_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::from_vec(randn_vec(2 * 3 * 4, &mut rng), &[2, 3, 4]).unwrap();
        let b = Tensor::<f64>::from_vec(randn_vec(2 * 4 * 5, &mut rng), &[2, 4, 5]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            let ab = a.narrow(0, bi, 1).unwrap().reshape(&[3, 4]).unwrap();
            let bb = b.narrow(0, bi, 1).unwrap().reshape(&[4, 5]).unwrap();
            let cb = ab.matmul(&bb).unwrap();
            let expect = cb.to_vec();
            let got = c.narrow(0, bi, 1).unwrap().to_vec();
            for (x, y) in got.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_vec(randn_vec(24, &mut rng), &[2, 3, 4]).unwrap();
        let t = x.transpose(0, 2).unwrap();
        assert_eq!(t.shape(), &[4, 3, 2]);
        let back = t.transpose(0, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn transpose_is_a_multiset_bijection() {
        let x = Tensor::<f64>::from_vec((0..12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
        let mut a = x.to_vec();
        let mut b = x.transpose(0, 1).unwrap().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn concat_narrow_inverse() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.narrow(1, 2, 1).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn chunk_splits_evenly_and_rejects_ragged() {
        let x = Tensor::<f64>::from_vec((0..6).map(|v| v as f64).collect(), &[6]).unwrap();
        let parts = x.chunk(0, 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1].to_vec(), vec![2.0, 3.0]);
        assert!(x.chunk(0, 4).is_err());
    }

    #[test]
    fn gather_scatter_are_mutually_inverse_for_permutations() {
        let x = Tensor::<f64>::from_vec((0..8).map(|v| v as f64).collect(), &[4, 2]).unwrap();
        let perm = [2usize, 0, 3, 1];
        let g = x.gather(0, &perm).unwrap();
        assert_eq!(g.to_vec(), vec![4.0, 5.0, 0.0, 1.0, 6.0, 7.0, 2.0, 3.0]);
        let back = g.scatter_add(0, &perm, 4).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn gather_checks_bounds() {
        let x = Tensor::<f64>::zeros(&[3]);
        assert!(x.gather(0, &[3]).is_err());
    }

    #[test]
    fn repeat_axis_tiles_and_sums_adjoint() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[1, 2]).unwrap();
        let r = x.repeat_axis(0, 3).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.to_vec(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        r.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let x = Tensor::<f64>::from_vec(vec![0.0], &[1]).unwrap();
        let y = x.softplus().unwrap();
        assert!((y.to_vec()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let x = Tensor::<f64>::from_vec(vec![-745.0, 745.0], &[2]).unwrap();
        let y = x.softplus().unwrap().to_vec();
        assert!(y[0] >= 0.0 && y[0] < 1e-300);
        assert!((y[1] - 745.0).abs() < 1e-9);
    }

    #[test]
    fn silu_gradient_at_zero_is_half() {
        let x = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
        let y = x.silu().unwrap().sum_all().unwrap();
        y.backward().unwrap();
        assert!((x.grad_vec().unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expm1_over_x_values_and_continuity() {
        let ln2 = std::f64::consts::LN_2;
        let x = Tensor::<f64>::from_vec(vec![ln2, 0.0, 1e-7, -1e-7], &[4]).unwrap();
        let y = x.expm1_over_x().unwrap().to_vec();
        assert!((y[0] - 1.0 / ln2).abs() < 1e-12);
        assert!((y[1] - 1.0).abs() < 1e-15);
        // series side and exact side agree across the switch point
        assert!((y[2] - 1.0).abs() < 1e-6);
        assert!((y[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]).unwrap();
        let y = x.softmax_last().unwrap();
        for row in y.to_vec().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // rows differing by a constant shift produce identical distributions
        let a = y.to_vec();
        assert!((a[0] - a[3]).abs() < 1e-12);
        assert!((a[1] - a[4]).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_vec(randn_vec(4 * 8, &mut rng), &[4, 8]).unwrap();
        let y = x.layer_norm(1e-12).unwrap();
        for row in y.to_vec().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_scan_matches_naive_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bsz, time, chan, state) = (2usize, 5, 3, 2);
        let n = bsz * time * chan * state;
        let a = Tensor::<f64>::from_vec(
            (0..n).map(|_| rng.gen::<f64>() * 0.9).collect(),
            &[bsz, time, chan, state],
        )
        .unwrap();
        let b = Tensor::<f64>::from_vec(randn_vec(n, &mut rng), &[bsz, time, chan, state]).unwrap();
        let h0 =
            Tensor::<f64>::from_vec(randn_vec(bsz * chan * state, &mut rng), &[bsz, chan, state])
                .unwrap();
        let h = Tensor::linear_scan(&a, &b, &h0).unwrap();
        let (av, bv, h0v, hv) = (a.to_vec(), b.to_vec(), h0.to_vec(), h.to_vec());
        let gn = chan * state;
        for bi in 0..bsz {
            for j in 0..gn {
                let mut prev = h0v[bi * gn + j];
                for t in 0..time {
                    let idx = (bi * time + t) * gn + j;
                    let expect = av[idx] * prev + bv[idx];
                    assert!((hv[idx] - expect).abs() < 1e-12);
                    prev = expect;
                }
            }
        }
    }

    #[test]
    fn conv1d_causal_matches_naive_and_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (bsz, len, chan, k) = (2usize, 6, 3, 4);
        let x = Tensor::<f64>::from_vec(randn_vec(bsz * len * chan, &mut rng), &[bsz, len, chan])
            .unwrap();
        let w = Tensor::<f64>::from_vec(randn_vec(k * chan, &mut rng), &[k, chan]).unwrap();
        let bias = Tensor::<f64>::from_vec(randn_vec(chan, &mut rng), &[chan]).unwrap();
        let y = x.conv1d_causal_depthwise(&w, &bias).unwrap();
        let (xv, wv, bv, yv) = (x.to_vec(), w.to_vec(), bias.to_vec(), y.to_vec());
        for bi in 0..bsz {
            for l in 0..len {
                for c in 0..chan {
                    let mut acc = bv[c];
                    for j in 0..k {
                        let src = l as isize - (k as isize - 1) + j as isize;
                        if src >= 0 {
                            acc += wv[j * chan + c] * xv[(bi * len + src as usize) * chan + c];
                        }
                    }
                    assert!((yv[(bi * len + l) * chan + c] - acc).abs() < 1e-12);
                }
            }
        }
        // causality: changing a later input never affects an earlier output
        let mut x2v = x.to_vec();
        x2v[(0 * len + 5) * chan] += 10.0;
        let x2 = Tensor::<f64>::from_vec(x2v, &[bsz, len, chan]).unwrap();
        let y2 = x2.conv1d_causal_depthwise(&w, &bias).unwrap().to_vec();
        for l in 0..5 {
            for c in 0..chan {
                assert_eq!(y2[l * chan + c], yv[l * chan + c]);
            }
        }
    }

    #[test]
    fn corr_and_tcorr_are_adjoint() {
        // <corr(x), y> must equal <x, tcorr(y)> for the pair to be exact duals
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = [0.5, 0.5, -0.5, 0.5];
        let x = Tensor::<f64>::from_vec(randn_vec(2 * 4 * 6, &mut rng), &[2, 4, 6]).unwrap();
        let y = Tensor::<f64>::from_vec(randn_vec(2 * 2 * 3, &mut rng), &[2, 2, 3]).unwrap();
        let cx = x.corr2x2_down(k).unwrap();
        let ty = y.tcorr2x2_up(k).unwrap();
        let lhs: f64 = cx.to_vec().iter().zip(y.to_vec()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.to_vec().iter().zip(ty.to_vec()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn corr_rejects_odd_extents() {
        let x = Tensor::<f64>::zeros(&[3, 4]);
        assert!(x.corr2x2_down([1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn debug_check_flags_non_finite() {
        crate::tensor::set_debug_check(true);
        let x = Tensor::<f64>::from_vec(vec![1.0, -1.0], &[2]).unwrap();
        let r = x.log().unwrap_err();
        crate::tensor::set_debug_check(false);
        match r {
            Error::NonFinite { op, index } => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
        // off by default: NaN flows through silently
        assert!(x.log().unwrap().to_vec()[1].is_nan());
    }

    #[test]
    fn every_primitive_passes_a_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tol = 1e-6;
        let check = |name: &str,
                     params: Vec<Tensor<f64>>,
                     f: Box<dyn Fn() -> crate::error::Result<Tensor<f64>>>| {
            let err = finite_diff_check(|| f(), &params, 1e-5).unwrap();
            assert!(err <= tol, "{name}: relative error {err}");
        };

        let p = |v: Vec<f64>, s: &[usize]| Tensor::<f64>::param(v, s).unwrap();

        let a = p(randn_vec(6, &mut rng), &[2, 3]);
        let b = p(randn_vec(3, &mut rng), &[3]);
        {
            let (a, b) = (a.clone(), b.clone());
            check("add", vec![a.clone(), b.clone()], Box::new(move || a.add(&b)?.sum_all()));
        }
        {
            let (a, b) = (a.clone(), b.clone());
            check("sub", vec![a.clone(), b.clone()], Box::new(move || b.sub(&a)?.sum_all()));
        }
        {
            let (a, b) = (a.clone(), b.clone());
            check("mul", vec![a.clone(), b.clone()], Box::new(move || a.mul(&b)?.square()?.sum_all()));
        }
        {
            let den = p(vec![1.5, -2.0, 0.7], &[3]);
            let (a, d) = (a.clone(), den.clone());
            check("div", vec![a.clone(), den], Box::new(move || a.div(&d)?.sum_all()));
        }
        {
            let a = a.clone();
            check("affine", vec![a.clone()], Box::new(move || a.affine(3.0, -1.0)?.square()?.sum_all()));
        }
        {
            let m1 = p(randn_vec(6, &mut rng), &[2, 3]);
            let m2 = p(randn_vec(12, &mut rng), &[3, 4]);
            let (c1, c2) = (m1.clone(), m2.clone());
            check("matmul", vec![m1, m2], Box::new(move || c1.matmul(&c2)?.square()?.sum_all()));
        }
        {
            let m1 = p(randn_vec(12, &mut rng), &[2, 2, 3]);
            let m2 = p(randn_vec(12, &mut rng), &[2, 3, 2]);
            let (c1, c2) = (m1.clone(), m2.clone());
            check("matmul_batched", vec![m1, m2], Box::new(move || c1.matmul(&c2)?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(24, &mut rng), &[2, 3, 4]);
            let c = x.clone();
            check("transpose", vec![x], Box::new(move || c.transpose(1, 2)?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(6, &mut rng), &[2, 3]);
            let c = x.clone();
            check("reshape", vec![x], Box::new(move || c.reshape(&[3, 2])?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(4, &mut rng), &[2, 2]);
            let y = p(randn_vec(2, &mut rng), &[2, 1]);
            let (cx, cy) = (x.clone(), y.clone());
            check("concat", vec![x, y], Box::new(move || {
                Tensor::concat(&[cx.clone(), cy.clone()], 1)?.square()?.sum_all()
            }));
        }
        {
            let x = p(randn_vec(8, &mut rng), &[4, 2]);
            let c = x.clone();
            check("narrow", vec![x], Box::new(move || c.narrow(0, 1, 2)?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(8, &mut rng), &[4, 2]);
            let c = x.clone();
            // repeated index exercises accumulation in the adjoint
            check("gather", vec![x], Box::new(move || c.gather(0, &[1, 1, 3])?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(6, &mut rng), &[3, 2]);
            let c = x.clone();
            check("scatter_add", vec![x], Box::new(move || {
                c.scatter_add(0, &[2, 0, 2], 4)?.square()?.sum_all()
            }));
        }
        {
            let x = p(randn_vec(5, &mut rng), &[5]);
            let c = x.clone();
            check("exp", vec![x], Box::new(move || c.exp()?.sum_all()));
        }
        {
            let x = p(vec![0.5, 1.3, 2.2, 0.9], &[4]);
            let c = x.clone();
            check("log", vec![x], Box::new(move || c.log()?.sum_all()));
        }
        {
            let x = p(vec![0.5, 1.3, 2.2, 0.9], &[4]);
            let c = x.clone();
            check("sqrt", vec![x], Box::new(move || c.sqrt()?.sum_all()));
        }
        {
            let x = p(randn_vec(5, &mut rng), &[5]);
            let c = x.clone();
            check("softplus", vec![x], Box::new(move || c.softplus()?.sum_all()));
        }
        {
            let x = p(randn_vec(5, &mut rng), &[5]);
            let c = x.clone();
            check("silu", vec![x], Box::new(move || c.silu()?.sum_all()));
        }
        {
            let x = p(randn_vec(5, &mut rng), &[5]);
            let c = x.clone();
            check("expm1_over_x", vec![x], Box::new(move || c.expm1_over_x()?.sum_all()));
        }
        {
            let x = p(randn_vec(6, &mut rng), &[2, 3]);
            let c = x.clone();
            check("softmax_last", vec![x], Box::new(move || c.softmax_last()?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(8, &mut rng), &[2, 4]);
            let c = x.clone();
            check("layer_norm", vec![x], Box::new(move || c.layer_norm(1e-5)?.square()?.sum_all()));
        }
        {
            let x = p(randn_vec(6, &mut rng), &[2, 3]);
            let c = x.clone();
            check("mean_all", vec![x], Box::new(move || c.square()?.mean_all()));
        }
        {
            let x = p(randn_vec(6, &mut rng), &[2, 3]);
            let c = x.clone();
            check("sum_last", vec![x], Box::new(move || c.sum_last()?.square()?.sum_all()));
        }
        {
            let (bsz, time, chan, state) = (2usize, 4, 2, 2);
            let n = bsz * time * chan * state;
            let av = p((0..n).map(|_| rng.gen::<f64>() * 0.9).collect(), &[bsz, time, chan, state]);
            let bv = p(randn_vec(n, &mut rng), &[bsz, time, chan, state]);
            let hv = p(randn_vec(bsz * chan * state, &mut rng), &[bsz, chan, state]);
            let (ca, cb, ch) = (av.clone(), bv.clone(), hv.clone());
            check("linear_scan", vec![av, bv, hv], Box::new(move || {
                Tensor::linear_scan(&ca, &cb, &ch)?.square()?.sum_all()
            }));
        }
        {
            let x = p(randn_vec(2 * 5 * 3, &mut rng), &[2, 5, 3]);
            let w = p(randn_vec(4 * 3, &mut rng), &[4, 3]);
            let bias = p(randn_vec(3, &mut rng), &[3]);
            let (cx, cw, cb) = (x.clone(), w.clone(), bias.clone());
            check("conv1d", vec![x, w, bias], Box::new(move || {
                cx.conv1d_causal_depthwise(&cw, &cb)?.square()?.sum_all()
            }));
        }
        {
            let x = p(randn_vec(2 * 4 * 4, &mut rng), &[2, 4, 4]);
            let c = x.clone();
            check("corr2x2_down", vec![x], Box::new(move || {
                c.corr2x2_down([0.5, 0.5, 0.5, 0.5])?.square()?.sum_all()
            }));
        }
        {
            let x = p(randn_vec(2 * 2 * 2, &mut rng), &[2, 2, 2]);
            let c = x.clone();
            check("tcorr2x2_up", vec![x], Box::new(move || {
                c.tcorr2x2_up([0.5, -0.5, 0.5, -0.5])?.square()?.sum_all()
            }));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::from_vec(randn_vec(16, &mut rng), &[4, 4]).unwrap();
        let w = Tensor::<f64>::from_vec(randn_vec(16, &mut rng), &[4, 4]).unwrap();
        let run = || {
            x.matmul(&w)
                .unwrap()
                .silu()
                .unwrap()
                .layer_norm(1e-5)
                .unwrap()
                .softmax_last()
                .unwrap()
                .to_vec()
        };
        let a = run();
        let b = run();
        // bit-identical, not merely close
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
