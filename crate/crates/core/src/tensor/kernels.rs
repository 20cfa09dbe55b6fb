//! Forward and backward kernels on plain [`Tensor`]s.
//!
//! Kernels never broadcast implicitly: every binary op demands identical
//! shapes and [`broadcast_to`] is the only way to expand an operand. Any
//! internal parallelism partitions the *output* into fixed pieces, so the
//! reduction order of every element is independent of scheduling.

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Rows per task when a single large matrix product is split up.
const GEMM_ROW_CHUNK: usize = 256;
/// Elements per task for elementwise and row-wise kernels.
const ELEM_CHUNK: usize = 1 << 14;

/// Single-threaded `c (+)= op(a)·op(b)` where `a` is stored `[m,k]`
/// (or `[k,m]` when `a_t`) and `b` is stored `[k,n]` (or `[n,k]` when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm_seq<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reachable through the
    // strides, and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Matrix product with row-chunk parallelism for tall left operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    if m <= GEMM_ROW_CHUNK || n == 0 || !parallel::parallel_enabled() {
        gemm_seq(m, k, n, a, a_t, b, b_t, c, accumulate);
        return;
    }
    parallel::for_each_chunk_mut(&mut c[..m * n], GEMM_ROW_CHUNK * n, |ci, cc| {
        let r0 = ci * GEMM_ROW_CHUNK;
        let rows = cc.len() / n;
        if a_t {
            // Column slice of the stored [k, m] matrix: copy it out so the
            // sub-problem stays in the contiguous layout gemm_seq expects.
            let mut sub = vec![T::zero(); k * rows];
            for p in 0..k {
                sub[p * rows..(p + 1) * rows].copy_from_slice(&a[p * m + r0..p * m + r0 + rows]);
            }
            gemm_seq(rows, k, n, &sub, true, b, b_t, cc, accumulate);
        } else {
            gemm_seq(rows, k, n, &a[r0 * k..(r0 + rows) * k], false, b, b_t, cc, accumulate);
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn batched_gemm<T: Element>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    if batch == 1 {
        gemm(m, k, n, a, a_t, b, b_t, c, false);
        return;
    }
    if m * n == 0 {
        return;
    }
    parallel::for_each_chunk_mut(c, m * n, |bi, cc| {
        gemm_seq(
            m,
            k,
            n,
            &a[bi * m * k..(bi + 1) * m * k],
            a_t,
            &b[bi * k * n..(bi + 1) * k * n],
            b_t,
            cc,
            false,
        );
    });
}

fn split_matmul_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 || a.len() != b.len() {
        return Err(Error::shape("matmul", a, b));
    }
    let r = a.len();
    let (m, k) = (a[r - 2], a[r - 1]);
    let (k2, n) = (b[r - 2], b[r - 1]);
    if k != k2 || a[..r - 2] != b[..r - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((a[..r - 2].to_vec(), m, k, n))
}

/// Batched contraction `[.., m, k] · [.., k, n] -> [.., m, n]`; batch extents must be equal.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch_dims, m, k, n) = split_matmul_shape(a.shape(), b.shape())?;
    let batch = numel(&batch_dims);
    let mut out = vec![T::zero(); batch * m * n];
    batched_gemm(batch, m, k, n, a.data(), false, b.data(), false, &mut out);
    let mut shape = batch_dims;
    shape.extend([m, n]);
    Tensor::from_vec(shape, out)
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (batch_dims, m, k, n) = split_matmul_shape(a.shape(), b.shape()).expect("checked in forward");
    let batch = numel(&batch_dims);
    let mut da = vec![T::zero(); batch * m * k];
    let mut db = vec![T::zero(); batch * k * n];
    batched_gemm(batch, m, n, k, g.data(), false, b.data(), true, &mut da);
    batched_gemm(batch, k, m, n, a.data(), true, g.data(), false, &mut db);
    (
        Tensor::from_vec(a.shape().to_vec(), da).unwrap(),
        Tensor::from_vec(b.shape().to_vec(), db).unwrap(),
    )
}

/// `x[.., in] · w[in, out] + bias[out]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.is_empty() || w.rank() != 2 || xs[xs.len() - 1] != w.shape()[0] {
        return Err(Error::shape("linear", xs, w.shape()));
    }
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = bias {
        if b.shape() != [fan_out] {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    let rows = x.len() / fan_in.max(1);
    let mut out = vec![T::zero(); rows * fan_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(fan_out.max(1)) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(rows, fan_in, fan_out, x.data(), false, w.data(), false, &mut out, bias.is_some());
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = fan_out;
    Tensor::from_vec(shape, out)
}

/// Returns `(dx, dw, dbias)` for [`linear`].
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / fan_in.max(1);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    gemm(rows, fan_out, fan_in, g.data(), false, w.data(), true, &mut dx, false);
    gemm_seq(fan_in, rows, fan_out, x.data(), true, g.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); fan_out];
    for row in g.data().chunks(fan_out.max(1)) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx).unwrap(),
        Tensor::from_vec(w.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(vec![fan_out], db).unwrap(),
    )
}

fn zip_same<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T + Sync + Send,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let mut out = a.data().to_vec();
    let bd = b.data();
    parallel::for_each_chunk_mut(&mut out, ELEM_CHUNK, |ci, chunk| {
        let off = ci * ELEM_CHUNK;
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = f(*v, bd[off + i]);
        }
    });
    Tensor::from_vec(a.shape().to_vec(), out)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Element>(x: &Tensor<T>, c: T) -> Tensor<T> {
    x.map(|v| v * c)
}

/// Expands `x` to `shape` by numpy rules, aligned on trailing axes; size-1
/// (or missing leading) axes are repeated.
pub fn broadcast_to<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() > shape.len() {
        return Err(Error::shape("broadcast", xs, shape));
    }
    let lead = shape.len() - xs.len();
    let mut padded = vec![1usize; lead];
    padded.extend_from_slice(xs);
    for (s, t) in padded.iter().zip(shape) {
        if *s != *t && *s != 1 {
            return Err(Error::shape("broadcast", xs, shape));
        }
    }
    // Trailing axes that are not expanded form contiguous runs copied whole.
    let mut split = shape.len();
    while split > 0 && padded[split - 1] == shape[split - 1] {
        split -= 1;
    }
    let run: usize = shape[split..].iter().product();
    let src_strides = strides(&padded);
    let out_len = numel(shape);
    let mut out = Vec::with_capacity(out_len);
    let mut idx = vec![0usize; split];
    for _ in 0..out_len / run.max(1) {
        let mut off = 0;
        for d in 0..split {
            if padded[d] != 1 {
                off += idx[d] * src_strides[d];
            }
        }
        out.extend_from_slice(&x.data()[off..off + run]);
        for d in (0..split).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// Adjoint of [`broadcast_to`]: sums `g` back down to `shape`.
pub fn sum_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let gs = g.shape();
    let lead = gs.len() - shape.len();
    let mut padded = vec![1usize; lead];
    padded.extend_from_slice(shape);
    let dst_strides = strides(&padded);
    let mut out = vec![T::zero(); numel(shape)];
    let mut idx = vec![0usize; gs.len()];
    for &v in g.data() {
        let mut off = 0;
        for d in 0..gs.len() {
            if padded[d] != 1 {
                off += idx[d] * dst_strides[d];
            }
        }
        out[off] += v;
        for d in (0..gs.len()).rev() {
            idx[d] += 1;
            if idx[d] < gs[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(shape.to_vec(), out).unwrap()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Numerically stable softmax (max subtraction) along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    if inner == 1 {
        parallel::for_each_chunk_mut(&mut out, len.max(1) * (ELEM_CHUNK / len.max(1)).max(1), |_, chunk| {
            for row in chunk.chunks_mut(len.max(1)) {
                softmax_row(row);
            }
        });
    } else {
        let mut row = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = out[(o * len + j) * inner + i];
                }
                softmax_row(&mut row);
                for (j, r) in row.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *r;
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let sum: T = row.iter().copied().sum();
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dx = y ⊙ (g − Σ g⊙y)` along `axis`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut dx = vec![T::zero(); y.len()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx).unwrap()
}

/// Saved statistics for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalizes over the last axis then applies `gamma`/`beta`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (y, xhat, rstd) = layer_norm_impl(x, gamma, beta, eps, true)?;
    Ok((
        y,
        LayerNormCache {
            xhat: xhat.expect("requested"),
            rstd,
        },
    ))
}

/// [`layer_norm`] without the saved statistics, for untracked inputs.
pub fn layer_norm_forward<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    Ok(layer_norm_impl(x, gamma, beta, eps, false)?.0)
}

#[allow(clippy::type_complexity)]
fn layer_norm_impl<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    keep: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>, Vec<T>)> {
    let c = *x.shape().last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.len() / c.max(1);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = if keep { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut rstd = vec![T::zero(); rows];
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let (g, b) = (gamma.data(), beta.data());
    let rows_per_chunk = (ELEM_CHUNK / c.max(1)).max(1);
    let hchunks = xhat.chunks_mut(rows_per_chunk * c).map(Some).chain(std::iter::repeat_with(|| None));
    // Chunk over rows; y, xhat and rstd are filled chunk by chunk.
    let mut packed: Vec<(&mut [T], Option<&mut [T]>, &mut [T])> = y
        .chunks_mut(rows_per_chunk * c)
        .zip(hchunks)
        .zip(rstd.chunks_mut(rows_per_chunk))
        .map(|((a, h), r)| (a, h, r))
        .collect();
    parallel::for_each_chunk_mut(&mut packed, 1, |ci, item| {
        let (yc, hc, rc) = &mut item[0];
        let row0 = ci * rows_per_chunk;
        for (ri, r) in rc.iter_mut().enumerate() {
            let src = &x.data()[(row0 + ri) * c..(row0 + ri + 1) * c];
            let mean = src.iter().copied().sum::<T>() * inv_c;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            *r = rs;
            let yrow = &mut yc[ri * c..(ri + 1) * c];
            for j in 0..c {
                yrow[j] = (src[j] - mean) * rs;
            }
            if let Some(h) = hc {
                h[ri * c..(ri + 1) * c].copy_from_slice(yrow);
            }
            for j in 0..c {
                yrow[j] = yrow[j] * g[j] + b[j];
            }
        }
    });
    drop(packed);
    let xhat = if keep {
        Some(Tensor::from_vec(x.shape().to_vec(), xhat)?)
    } else {
        None
    };
    Ok((Tensor::from_vec(x.shape().to_vec(), y)?, xhat, rstd))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let rows = g.len() / c.max(1);
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let (xh, gd, gm) = (cache.xhat.data(), g.data(), gamma.data());
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        let span = r * c..(r + 1) * c;
        let (h, gg) = (&xh[span.clone()], &gd[span.clone()]);
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..c {
            let dh = gg[j] * gm[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
            dgamma[j] += gg[j] * h[j];
            dbeta[j] += gg[j];
        }
        let rs = cache.rstd[r];
        for j in 0..c {
            let dh = gg[j] * gm[j];
            dx[r * c + j] = rs * (dh - inv_c * sum_dh - h[j] * inv_c * sum_dh_h);
        }
    }
    (
        Tensor::from_vec(g.shape().to_vec(), dx).unwrap(),
        Tensor::from_vec(vec![c], dgamma).unwrap(),
        Tensor::from_vec(vec![c], dbeta).unwrap(),
    )
}

/// Coefficient of the cubic term in the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`, evaluated through the
/// identity `0.5·(1 + tanh(u)) = 1 / (1 + e^(−2u))`, which needs one `exp`
/// instead of a much slower `tanh`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (k2, a) = (T::lit(2.0 * SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
    let mut out = x.data().to_vec();
    parallel::for_each_chunk_mut(&mut out, ELEM_CHUNK, |_, chunk| {
        for v in chunk.iter_mut() {
            let x = *v;
            *v = x / (T::one() + (-k2 * (x + a * x * x * x)).exp());
        }
    });
    Tensor::from_vec(x.shape().to_vec(), out).unwrap()
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (k, a) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
    let (two, three) = (T::lit(2.0), T::lit(3.0));
    let mut out = g.data().to_vec();
    let xd = x.data();
    parallel::for_each_chunk_mut(&mut out, ELEM_CHUNK, |ci, chunk| {
        let off = ci * ELEM_CHUNK;
        for (i, g) in chunk.iter_mut().enumerate() {
            let x = xd[off + i];
            // s = sigmoid(2u), so tanh(u) = 2s − 1 and 1 − tanh² = 4s(1 − s).
            let s = T::one() / (T::one() + (-two * k * (x + a * x * x * x)).exp());
            let d = s + two * x * s * (T::one() - s) * k * (T::one() + three * a * x * x);
            *g *= d;
        }
    });
    Tensor::from_vec(x.shape().to_vec(), out).unwrap()
}

/// Mean along `axis`; the axis is removed from the result.
pub fn mean_reduce<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("mean_reduce", x.shape(), axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let inv = T::one() / T::from_usize(len).unwrap();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += x.data()[(o * len + j) * inner + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::from_vec(shape, out)
}

pub fn mean_reduce_backward<T: Element>(g: &Tensor<T>, in_shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let inv = T::one() / T::from_usize(len).unwrap();
    let mut dx = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                dx[(o * len + j) * inner + i] = g.data()[o * inner + i] * inv;
            }
        }
    }
    Tensor::from_vec(in_shape.to_vec(), dx).unwrap()
}

pub fn sum_all<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

/// Reorders axes: output axis `d` is input axis `perm[d]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let xs = x.shape();
    let mut seen = vec![false; xs.len()];
    if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {} axes", xs.len())));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    if x.is_empty() {
        return Tensor::from_vec(out_shape, Vec::new());
    }
    let (dims, merged) = merge_axes(xs, perm);
    let out = match merged.as_slice() {
        [] | [_] => x.data().to_vec(),
        [0, 1] | [0, 1, 2] => x.data().to_vec(),
        [1, 0] => transpose_batched(x.data(), 1, dims[0], dims[1]),
        [0, 2, 1] => transpose_batched(x.data(), dims[0], dims[1], dims[2]),
        _ => permute_generic(x.data(), &dims, &merged),
    };
    Tensor::from_vec(out_shape, out)
}

/// Drops unit axes and fuses runs of axes that stay adjacent and in order,
/// returning the reduced input extents and permutation.
fn merge_axes(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = perm.iter().copied().filter(|&p| shape[p] != 1).collect();
    // Groups of input axes, in output order.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &p in &kept {
        match groups.last_mut() {
            Some(g) if *g.last().unwrap() + 1 == p || (p > *g.last().unwrap() && (g.last().unwrap() + 1..p).all(|q| shape[q] == 1)) => {
                g.push(p)
            }
            _ => groups.push(vec![p]),
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&g| groups[g][0]);
    let dims: Vec<usize> = order.iter().map(|&g| groups[g].iter().map(|&a| shape[a]).product()).collect();
    let mut rank_of = vec![0; groups.len()];
    for (r, &g) in order.iter().enumerate() {
        rank_of[g] = r;
    }
    (dims, (0..groups.len()).map(|g| rank_of[g]).collect())
}

/// `[b, r, c] -> [b, c, r]` in cache-sized tiles.
fn transpose_batched<T: Element>(src: &[T], b: usize, r: usize, c: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let o = &mut out[bi * r * c..(bi + 1) * r * c];
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        o[j * r + i] = s[i * c + j];
                    }
                }
            }
        }
    }
    out
}

fn permute_generic<T: Element>(src: &[T], xs: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(xs);
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    for _ in 0..n / inner_len {
        let base: usize = (0..last).map(|d| idx[d] * src_strides[d]).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

/// Geometry of a strided patch projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    /// Zero padding before the first patch; `kernel - stride` is split evenly,
    /// any odd remainder going after.
    pub fn pad(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn patch_geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<PatchGeometry> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::invalid("patch_projection", format!("expected [B,C,H,W], got {xs:?}")));
    }
    if stride == 0 || kernel < stride {
        return Err(Error::invalid("patch_projection", format!("need kernel {kernel} >= stride {stride} > 0")));
    }
    if xs[2] % stride != 0 || xs[3] % stride != 0 {
        return Err(Error::invalid(
            "patch_projection",
            format!("spatial extent {}x{} not divisible by stride {stride}", xs[2], xs[3]),
        ));
    }
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != xs[1] || ws[2] != kernel || ws[3] != kernel {
        return Err(Error::shape("patch_projection", xs, ws));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape("patch_projection bias", ws, bias.shape()));
    }
    Ok(PatchGeometry {
        batch: xs[0],
        in_channels: xs[1],
        height: xs[2],
        width: xs[3],
        kernel,
        stride,
    })
}

fn unfold<T: Element>(x: &[T], geo: &PatchGeometry) -> Vec<T> {
    let (ho, wo) = geo.out_hw();
    let (k, s, pad) = (geo.kernel, geo.stride, geo.pad() as isize);
    let plen = geo.patch_len();
    let mut cols = vec![T::zero(); geo.batch * ho * wo * plen];
    let hw = geo.height * geo.width;
    parallel::for_each_chunk_mut(&mut cols, wo * plen, |row, chunk| {
        let (b, oi) = (row / ho, row % ho);
        for oj in 0..wo {
            let dst = &mut chunk[oj * plen..(oj + 1) * plen];
            for c in 0..geo.in_channels {
                let plane = &x[(b * geo.in_channels + c) * hw..(b * geo.in_channels + c + 1) * hw];
                for di in 0..k {
                    let ii = (oi * s) as isize - pad + di as isize;
                    if ii < 0 || ii >= geo.height as isize {
                        continue;
                    }
                    for dj in 0..k {
                        let jj = (oj * s) as isize - pad + dj as isize;
                        if jj < 0 || jj >= geo.width as isize {
                            continue;
                        }
                        dst[(c * k + di) * k + dj] = plane[ii as usize * geo.width + jj as usize];
                    }
                }
            }
        }
    });
    cols
}

fn fold<T: Element>(cols: &[T], geo: &PatchGeometry) -> Vec<T> {
    let (ho, wo) = geo.out_hw();
    let (k, s, pad) = (geo.kernel, geo.stride, geo.pad() as isize);
    let plen = geo.patch_len();
    let hw = geo.height * geo.width;
    let mut dx = vec![T::zero(); geo.batch * geo.in_channels * hw];
    for b in 0..geo.batch {
        for oi in 0..ho {
            for oj in 0..wo {
                let src = &cols[((b * ho + oi) * wo + oj) * plen..][..plen];
                for c in 0..geo.in_channels {
                    let base = (b * geo.in_channels + c) * hw;
                    for di in 0..k {
                        let ii = (oi * s) as isize - pad + di as isize;
                        if ii < 0 || ii >= geo.height as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let jj = (oj * s) as isize - pad + dj as isize;
                            if jj < 0 || jj >= geo.width as isize {
                                continue;
                            }
                            dx[base + ii as usize * geo.width + jj as usize] += src[(c * k + di) * k + dj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Patch projection `x[B,C,H,W] -> tokens[B, (H/s)·(W/s), E]` with weights
/// `[E, C, k, k]`. Returns the unfolded patch matrix for the backward pass.
pub fn patch_tokens<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, PatchGeometry)> {
    let geo = patch_geometry(x, w, bias, kernel, stride)?;
    let (ho, wo) = geo.out_hw();
    let e = w.shape()[0];
    let rows = geo.batch * ho * wo;
    let plen = geo.patch_len();
    let cols = if kernel == stride && stride == 1 {
        // 1×1 projection: patches are the channel vectors.
        permute(x, &[0, 2, 3, 1])?.into_data()
    } else {
        unfold(x.data(), &geo)
    };
    let mut out = vec![T::zero(); rows * e];
    for row in out.chunks_mut(e.max(1)) {
        row.copy_from_slice(bias.data());
    }
    gemm(rows, plen, e, &cols, false, w.data(), true, &mut out, true);
    Ok((
        Tensor::from_vec(vec![geo.batch, ho * wo, e], out)?,
        Tensor::from_vec(vec![rows, plen], cols)?,
        geo,
    ))
}

/// Returns `(dx, dw, dbias)` for [`patch_tokens`] given the token-layout gradient.
pub fn patch_tokens_backward<T: Element>(
    cols: &Tensor<T>,
    w: &Tensor<T>,
    geo: &PatchGeometry,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let e = w.shape()[0];
    let plen = geo.patch_len();
    let rows = cols.shape()[0];
    let mut dw = vec![T::zero(); e * plen];
    gemm_seq(e, rows, plen, g.data(), true, cols.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); e];
    for row in g.data().chunks(e.max(1)) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dcols = vec![T::zero(); rows * plen];
    gemm(rows, e, plen, g.data(), false, w.data(), false, &mut dcols, false);
    let dx = if geo.kernel == geo.stride && geo.stride == 1 {
        let t = Tensor::from_vec(vec![geo.batch, geo.height, geo.width, geo.in_channels], dcols).unwrap();
        permute(&t, &[0, 3, 1, 2]).unwrap().into_data()
    } else {
        fold(&dcols, geo)
    };
    (
        Tensor::from_vec(vec![geo.batch, geo.in_channels, geo.height, geo.width], dx).unwrap(),
        Tensor::from_vec(w.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(vec![e], db).unwrap(),
    )
}

/// Sampling table for one axis of an align-corners=false bilinear resize.
///
/// Output index `o` samples source coordinate
/// `src = max((o + 0.5)·in/out − 0.5, 0)`, `i0 = ⌊src⌋`,
/// `i1 = min(i0 + 1, in − 1)`, `λ = src − i0`, and interpolates
/// `v = x[i0] + λ·(x[i1] − x[i0])`.
#[derive(Debug, Clone)]
pub struct ResizeAxis<T> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub lambda: Vec<T>,
}

impl<T: Element> ResizeAxis<T> {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut i0 = Vec::with_capacity(output);
        let mut i1 = Vec::with_capacity(output);
        let mut lambda = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            i0.push(lo);
            i1.push((lo + 1).min(input - 1));
            lambda.push(T::lit(src - lo as f64));
        }
        Self { i0, i1, lambda }
    }
}

/// Bilinear resize of `x[B,C,h,w]` to `[B,C,out_h,out_w]` (align-corners=false).
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::invalid("bilinear_resize", format!("expected [B,C,H,W], got {xs:?}")));
    }
    if out_h == 0 || out_w == 0 || xs[2] == 0 || xs[3] == 0 {
        return Err(Error::invalid("bilinear_resize", "extents must be >= 1"));
    }
    let (h, w) = (xs[2], xs[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = ResizeAxis::<T>::new(h, out_h);
    let rx = ResizeAxis::<T>::new(w, out_w);
    let planes = xs[0] * xs[1];
    let mut out = vec![T::zero(); planes * out_h * out_w];
    parallel::for_each_chunk_mut(&mut out, out_h * out_w, |p, dst| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (r0, r1, ly) = (&src[ry.i0[oy] * w..][..w], &src[ry.i1[oy] * w..][..w], ry.lambda[oy]);
            for ox in 0..out_w {
                let (c0, c1, lx) = (rx.i0[ox], rx.i1[ox], rx.lambda[ox]);
                let top = r0[c0] + lx * (r0[c1] - r0[c0]);
                let bot = r1[c0] + lx * (r1[c1] - r1[c0]);
                dst[oy * out_w + ox] = top + ly * (bot - top);
            }
        }
    });
    Tensor::from_vec(vec![xs[0], xs[1], out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Element>(g: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let gs = g.shape();
    let (out_h, out_w) = (gs[2], gs[3]);
    if (in_h, in_w) == (out_h, out_w) {
        return g.clone();
    }
    let ry = ResizeAxis::<T>::new(in_h, out_h);
    let rx = ResizeAxis::<T>::new(in_w, out_w);
    let planes = gs[0] * gs[1];
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    parallel::for_each_chunk_mut(&mut dx, in_h * in_w, |p, dst| {
        let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, ly) = (ry.i0[oy], ry.i1[oy], ry.lambda[oy]);
            for ox in 0..out_w {
                let (x0, x1, lx) = (rx.i0[ox], rx.i1[ox], rx.lambda[ox]);
                let v = src[oy * out_w + ox];
                let (top, bot) = (v * (T::one() - ly), v * ly);
                dst[y0 * in_w + x0] += top * (T::one() - lx);
                dst[y0 * in_w + x1] += top * lx;
                dst[y1 * in_w + x0] += bot * (T::one() - lx);
                dst[y1 * in_w + x1] += bot * lx;
            }
        }
    });
    Tensor::from_vec(vec![gs[0], gs[1], in_h, in_w], dx).unwrap()
}

/// Average-pools a token sequence `[B, h·w, C]` laid out on an `h×w` grid
/// over non-overlapping `r×r` windows.
pub fn avg_pool_tokens<T: Element>(x: &Tensor<T>, grid: (usize, usize), r: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (h, w) = grid;
    if xs.len() != 3 || xs[1] != h * w || r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(
            "avg_pool_tokens",
            format!("tokens {xs:?} on grid {h}x{w} cannot be pooled by {r}"),
        ));
    }
    let (b, c) = (xs[0], xs[2]);
    let (ph, pw) = (h / r, w / r);
    let inv = T::one() / T::from_usize(r * r).unwrap();
    let mut out = vec![T::zero(); b * ph * pw * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let src = &x.data()[((bi * h + i) * w + j) * c..][..c];
                let dst = &mut out[((bi * ph + i / r) * pw + j / r) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_vec(vec![b, ph * pw, c], out)
}

pub fn avg_pool_tokens_backward<T: Element>(
    g: &Tensor<T>,
    in_shape: &[usize],
    grid: (usize, usize),
    r: usize,
) -> Tensor<T> {
    let (h, w) = grid;
    let (b, c) = (in_shape[0], in_shape[2]);
    let (ph, pw) = (h / r, w / r);
    let inv = T::one() / T::from_usize(r * r).unwrap();
    let mut dx = vec![T::zero(); numel(in_shape)];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let src = &g.data()[((bi * ph + i / r) * pw + j / r) * c..][..c];
                let dst = &mut dx[((bi * h + i) * w + j) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * inv;
                }
            }
        }
    }
    Tensor::from_vec(in_shape.to_vec(), dx).unwrap()
}

/// Softmax cross-entropy state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CrossEntropyCache<T> {
    pub probs: Tensor<T>,
    pub targets: Vec<u8>,
    pub ignore_index: Option<u8>,
    pub counted: usize,
}

/// Mean over non-ignored pixels of `−log softmax(logits)[target]` for
/// `logits[B,K,H,W]` and row-major `targets[B,H,W]`. When every pixel is
/// ignored the loss is defined as 0 and `counted` is 0.
pub fn cross_entropy<T: Element>(
    logits: &Tensor<T>,
    targets: &[u8],
    ignore_index: Option<u8>,
) -> Result<(T, CrossEntropyCache<T>)> {
    let ls = logits.shape();
    if ls.len() != 4 {
        return Err(Error::invalid("cross_entropy", format!("expected [B,K,H,W], got {ls:?}")));
    }
    let (b, k, hw) = (ls[0], ls[1], ls[2] * ls[3]);
    if targets.len() != b * hw {
        return Err(Error::shape("cross_entropy", ls, &[targets.len()]));
    }
    if let Some(bad) = targets
        .iter()
        .find(|&&t| Some(t) != ignore_index && t as usize >= k)
    {
        return Err(Error::Validation(format!("target class {bad} outside [0, {k})")));
    }
    let probs = softmax(logits, 1)?;
    let mut total = T::zero();
    let mut counted = 0usize;
    for bi in 0..b {
        for p in 0..hw {
            let t = targets[bi * hw + p];
            if Some(t) == ignore_index {
                continue;
            }
            // log-softmax straight from the logits for accuracy.
            let at = |c: usize| logits.data()[(bi * k + c) * hw + p];
            let max = (0..k).map(at).fold(T::neg_infinity(), T::max);
            let lse = (0..k).map(|c| (at(c) - max).exp()).sum::<T>().ln() + max;
            total += lse - at(t as usize);
            counted += 1;
        }
    }
    let loss = if counted == 0 {
        T::zero()
    } else {
        total / T::from_usize(counted).unwrap()
    };
    Ok((
        loss,
        CrossEntropyCache {
            probs,
            targets: targets.to_vec(),
            ignore_index,
            counted,
        },
    ))
}

pub fn cross_entropy_backward<T: Element>(cache: &CrossEntropyCache<T>, g: T) -> Tensor<T> {
    let ps = cache.probs.shape();
    let (b, k, hw) = (ps[0], ps[1], ps[2] * ps[3]);
    let mut dx = vec![T::zero(); cache.probs.len()];
    if cache.counted == 0 {
        return Tensor::from_vec(ps.to_vec(), dx).unwrap();
    }
    let s = g / T::from_usize(cache.counted).unwrap();
    for bi in 0..b {
        for p in 0..hw {
            let t = cache.targets[bi * hw + p];
            if Some(t) == cache.ignore_index {
                continue;
            }
            for c in 0..k {
                let i = (bi * k + c) * hw + p;
                let onehot = if c == t as usize { T::one() } else { T::zero() };
                dx[i] = s * (cache.probs.data()[i] - onehot);
            }
        }
    }
    Tensor::from_vec(ps.to_vec(), dx).unwrap()
}
