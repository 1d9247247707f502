//! Differentiable operations on [`Var`].
//!
//! Every op validates shapes, computes its value eagerly, and appends a node
//! to the owning tape together with a closure producing the input gradients.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{strides_of, Tensor};
use crate::error::{invalid, Error, Result};

/// Floor applied inside `log` so that vanishing probabilities stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Slope of the leaky rectifier for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op` optionally
/// transposes. `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides address within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Broadcast layout for binary elementwise ops: the shorter shape must be a
/// suffix of the longer one and is repeated over the leading axes.
struct Broadcast {
    out_shape: Vec<usize>,
    a_small: bool,
    b_small: bool,
    small_len: usize,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        let n = a.iter().product();
        return Ok(Broadcast {
            out_shape: a.to_vec(),
            a_small: false,
            b_small: false,
            small_len: n,
        });
    }
    if a.len() >= b.len() && a.ends_with(b) {
        Ok(Broadcast {
            out_shape: a.to_vec(),
            a_small: false,
            b_small: true,
            small_len: b.iter().product(),
        })
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast {
            out_shape: b.to_vec(),
            a_small: true,
            b_small: false,
            small_len: a.iter().product(),
        })
    } else {
        Err(shape_err(op, a, b))
    }
}

/// Sums a full-size gradient down to a suffix-broadcast operand.
fn reduce_to(grad: &Tensor, small: bool, small_len: usize, shape: &[usize]) -> Tensor {
    if !small {
        return grad.clone();
    }
    let mut out = vec![0.0; small_len];
    if small_len > 0 {
        for chunk in grad.data().chunks(small_len) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    }
    Tensor::new(shape, out).expect("reduced shape")
}

fn binary_values(
    a: &Tensor,
    b: &Tensor,
    bc: &Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let n: usize = bc.out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = if bc.a_small { ad[i % bc.small_len] } else { ad[i] };
        let y = if bc.b_small { bd[i % bc.small_len] } else { bd[i] };
        out.push(f(x, y));
    }
    Tensor::new(&bc.out_shape, out).expect("broadcast shape")
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let bc = broadcast("add", a.shape(), b.shape())?;
        let out = binary_values(&a, &b, &bc, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push_op(
            "add",
            out,
            &[*self, *other],
            Box::new(move |g| {
                vec![
                    reduce_to(g, bc.a_small, bc.small_len, &sa),
                    reduce_to(g, bc.b_small, bc.small_len, &sb),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let bc = broadcast("sub", a.shape(), b.shape())?;
        let out = binary_values(&a, &b, &bc, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push_op(
            "sub",
            out,
            &[*self, *other],
            Box::new(move |g| {
                let gb = reduce_to(g, bc.b_small, bc.small_len, &sb).map(|v| -v);
                vec![reduce_to(g, bc.a_small, bc.small_len, &sa), gb]
            }),
        )
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let bc = broadcast("mul", a.shape(), b.shape())?;
        let out = binary_values(&a, &b, &bc, |x, y| x * y);
        self.tape.push_op(
            "mul",
            out,
            &[*self, *other],
            Box::new(move |g| {
                // d/da = g * b, d/db = g * a, each reduced to its operand
                let ga_full = binary_values(g, &b, &bc_full(&bc, false), |x, y| x * y);
                let gb_full = binary_values(g, &a, &bc_full(&bc, true), |x, y| x * y);
                vec![
                    reduce_to(&ga_full, bc.a_small, bc.small_len, a.shape()),
                    reduce_to(&gb_full, bc.b_small, bc.small_len, b.shape()),
                ]
            }),
        )
    }

    /// Elementwise `(a - b)^2` on equal shapes.
    pub fn sq_diff(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err("sq_diff", a.shape(), b.shape()));
        }
        let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape(), diff.iter().map(|d| d * d).collect())?;
        let shape = a.shape().to_vec();
        self.tape.push_op(
            "sq_diff",
            out,
            &[*self, *other],
            Box::new(move |g| {
                let ga: Vec<f64> = g.data().iter().zip(&diff).map(|(g, d)| 2.0 * g * d).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![
                    Tensor::new(&shape, ga).expect("shape"),
                    Tensor::new(&shape, gb).expect("shape"),
                ]
            }),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * factor);
        self.tape.push_op(
            "scale",
            out,
            &[*self],
            Box::new(move |g| vec![g.map(|v| v * factor)]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push_op("add_scalar", out, &[*self], Box::new(|g| vec![g.clone()]))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let out = Rc::new(self.value().map(f64::exp));
        let saved = Rc::clone(&out);
        self.tape.push_op(
            "exp",
            (*out).clone(),
            &[*self],
            Box::new(move |g| {
                let d = g.data().iter().zip(saved.data()).map(|(g, y)| g * y).collect();
                vec![Tensor::new(saved.shape(), d).expect("shape")]
            }),
        )
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        let out = Rc::new(self.value().map(f64::tanh));
        let saved = Rc::clone(&out);
        self.tape.push_op(
            "tanh",
            (*out).clone(),
            &[*self],
            Box::new(move |g| {
                let d = g.data().iter().zip(saved.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![Tensor::new(saved.shape(), d).expect("shape")]
            }),
        )
    }

    /// `ln(max(v, LOG_FLOOR))`; the gradient is zero where the floor is active.
    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| v.max(LOG_FLOOR).ln());
        self.tape.push_op(
            "log",
            out,
            &[*self],
            Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > LOG_FLOOR { g / v } else { 0.0 })
                    .collect();
                vec![Tensor::new(x.shape(), d).expect("shape")]
            }),
        )
    }

    pub fn leaky_relu(&self) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        self.tape.push_op(
            "leaky_relu",
            out,
            &[*self],
            Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { LEAKY_SLOPE * g })
                    .collect();
                vec![Tensor::new(x.shape(), d).expect("shape")]
            }),
        )
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        self.tape.push_op(
            "matmul",
            Tensor::new(&[m, n], out)?,
            &[*self, *other],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut gb);
                vec![
                    Tensor::new(&[m, k], ga).expect("shape"),
                    Tensor::new(&[k, n], gb).expect("shape"),
                ]
            }),
        )
    }

    /// Outer product of two vectors.
    pub fn outer(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(shape_err("outer", &sa, &sb));
        }
        self.reshape(&[sa[0], 1])?.matmul(&other.reshape(&[1, sb[0]])?)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(shape_err("reshape", x.shape(), shape));
        }
        let out = x.reshaped(shape)?;
        let orig = x.shape().to_vec();
        self.tape.push_op(
            "reshape",
            out,
            &[*self],
            Box::new(move |g| vec![g.reshaped(&orig).expect("shape")]),
        )
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("permute: bad axes {axes:?} for rank {rank}")));
        }
        let out = permute_tensor(&x, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push_op(
            "permute",
            out,
            &[*self],
            Box::new(move |g| vec![permute_tensor(g, &inverse)]),
        )
    }

    /// Transpose of a 2-D value.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid(format!("transpose expects rank 2, got {s:?}")));
        }
        self.permute(&[1, 0])
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(invalid(format!(
                "slice: range {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (extent, len) = (shape[axis], end - start);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape.push_op(
            "slice",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |g| {
                let mut full = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    full[base..base + len * inner].copy_from_slice(src);
                }
                vec![Tensor::new(&shape, full).expect("shape")]
            }),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid(format!("concat: axis {axis} for rank {}", base.len())));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        first.tape.push_op(
            "concat",
            Tensor::new(&out_shape, out)?,
            parts,
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = shapes
                    .iter()
                    .map(|s| Vec::with_capacity(s.iter().product()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &e) in grads.iter_mut().zip(&extents) {
                        gv.extend_from_slice(&g.data()[off..off + e * inner]);
                        off += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Tensor::new(s, d).expect("shape"))
                    .collect()
            }),
        )
    }

    /// Index gather: `out[i] = in[index[i]]`, output shaped `shape`.
    /// Repeated indices accumulate in the backward pass.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != shape.iter().product::<usize>() {
            return Err(shape_err("gather", &[index.len()], shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(invalid(format!("gather: index {bad} out of {}", x.numel())));
        }
        let out: Vec<f64> = index.iter().map(|&i| x.data()[i]).collect();
        let in_shape = x.shape().to_vec();
        self.tape.push_op(
            "gather",
            Tensor::new(shape, out)?,
            &[*self],
            Box::new(move |g| {
                let mut full = Tensor::zeros(&in_shape);
                let d = full.data_mut();
                for (&i, gv) in index.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![full]
            }),
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("softmax: axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * extent + c) * inner + i;
                let max = (0..extent).map(|c| xd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..extent {
                    let e = (xd[at(c)] - max).exp();
                    out[at(c)] = e;
                    total += e;
                }
                for c in 0..extent {
                    out[at(c)] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::new(&shape, out)?);
        let saved = Rc::clone(&y);
        self.tape.push_op(
            "softmax",
            (*y).clone(),
            &[*self],
            Box::new(move |g| {
                let (yd, gd) = (saved.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * extent + c) * inner + i;
                        let dot: f64 = (0..extent).map(|c| gd[at(c)] * yd[at(c)]).sum();
                        for c in 0..extent {
                            gx[at(c)] = yd[at(c)] * (gd[at(c)] - dot);
                        }
                    }
                }
                vec![Tensor::new(saved.shape(), gx).expect("shape")]
            }),
        )
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("sum: axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..extent {
                let src = &x.data()[(o * extent + c) * inner..(o * extent + c + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.tape.push_op(
            "sum_axis",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |g| {
                let mut full = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for _ in 0..extent {
                        full.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Tensor::new(&shape, full).expect("shape")]
            }),
        )
    }

    /// Sum over several axes (given in any order), removing them.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.dedup();
        let mut v = *self;
        for a in sorted {
            v = v.sum_axis(a)?;
        }
        Ok(v)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        if count == 0 {
            return Err(invalid("mean over empty axes"));
        }
        self.sum_axes(axes)?.scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let x = self.value();
        let total = x.sum();
        let shape = x.shape().to_vec();
        self.tape.push_op(
            "sum_all",
            Tensor::scalar(total),
            &[*self],
            Box::new(move |g| vec![Tensor::full(&shape, g.item())]),
        )
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(invalid("mean of empty value"));
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }
}

/// Layout helper for `mul` backward: treats the gradient as the big operand.
fn bc_full(bc: &Broadcast, for_b: bool) -> Broadcast {
    // When computing g * other, `other` keeps its own smallness flag.
    let other_small = if for_b { bc.a_small } else { bc.b_small };
    Broadcast {
        out_shape: bc.out_shape.clone(),
        a_small: false,
        b_small: other_small,
        small_len: bc.small_len,
    }
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x.data()[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}
