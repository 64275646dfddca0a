//! Eager array primitives used by the attention pipelines.

use crate::error::{shape_err, Error, Result};

use super::array::{gemm, MatRef, NdArray, Real};
use super::flops::{self, Category};

fn split_matrix<'a>(shape: &'a [usize], op: &'static str) -> Result<(&'a [usize], usize, usize)> {
    if shape.len() < 2 {
        return shape_err(op, shape, &[]);
    }
    let n = shape.len();
    Ok((&shape[..n - 2], shape[n - 2], shape[n - 1]))
}

/// Batched matrix product `a[.., M, K] @ b[.., K, N]`.
///
/// `b` is either a plain matrix shared across every batch entry of `a`, or
/// carries exactly the same leading batch dims as `a`.
pub fn matmul<F: Real>(a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
    matmul_ex(a, false, b, false)
}

/// [`matmul`] with either operand's last two axes optionally transposed.
pub fn matmul_ex<F: Real>(
    a: &NdArray<F>,
    trans_a: bool,
    b: &NdArray<F>,
    trans_b: bool,
) -> Result<NdArray<F>> {
    let (a_batch, a_r, a_c) = split_matrix(a.shape(), "matmul")?;
    let (b_batch, b_r, b_c) = split_matrix(b.shape(), "matmul")?;
    let (m, k) = if trans_a { (a_c, a_r) } else { (a_r, a_c) };
    let (kb, n) = if trans_b { (b_c, b_r) } else { (b_r, b_c) };
    let shared_b = b_batch.is_empty();
    if k != kb || !(shared_b || a_batch == b_batch) {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let batch: usize = a_batch.iter().product();
    let mut shape = a_batch.to_vec();
    shape.extend([m, n]);
    let mut out = NdArray::zeros(&shape);
    flops::record_matmul(2 * (batch * m * k * n) as u64);

    let (a_rs, a_cs) = if trans_a { (1, a_c) } else { (a_c, 1) };
    let (b_rs, b_cs) = if trans_b { (1, b_c) } else { (b_c, 1) };
    if shared_b && !trans_a {
        // Fold the batch into the row dimension: one large gemm.
        gemm(
            MatRef { data: a.data(), offset: 0, rows: batch * m, cols: k, rs: a_rs, cs: a_cs },
            MatRef { data: b.data(), offset: 0, rows: k, cols: n, rs: b_rs, cs: b_cs },
            out.data_mut(),
            0,
            n,
            false,
        );
        return Ok(out);
    }
    for i in 0..batch {
        let b_off = if shared_b { 0 } else { i * b_r * b_c };
        gemm(
            MatRef { data: a.data(), offset: i * a_r * a_c, rows: m, cols: k, rs: a_rs, cs: a_cs },
            MatRef { data: b.data(), offset: b_off, rows: k, cols: n, rs: b_rs, cs: b_cs },
            out.data_mut(),
            i * m * n,
            n,
            false,
        );
    }
    Ok(out)
}

pub fn transpose_last2<F: Real>(a: &NdArray<F>) -> Result<NdArray<F>> {
    let n = a.ndim();
    if n < 2 {
        return shape_err("transpose", a.shape(), &[]);
    }
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    permute(a, &axes)
}

/// General axis permutation: `out.shape[i] = a.shape[axes[i]]`.
pub fn permute<F: Real>(a: &NdArray<F>, axes: &[usize]) -> Result<NdArray<F>> {
    let n = a.ndim();
    let mut seen = vec![false; n];
    if axes.len() != n || axes.iter().any(|&ax| ax >= n || std::mem::replace(&mut seen[ax], true)) {
        return shape_err("permute", a.shape(), axes);
    }
    let in_strides = strides(a.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let total = a.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut src = 0usize;
    let input = a.data();
    for _ in 0..total {
        data.push(input[src]);
        for d in (0..n).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    NdArray::from_vec(&out_shape, data)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn add<F: Real>(a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<F: Real>(a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul<F: Real>(a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale<F: Real>(a: &NdArray<F>, s: F) -> NdArray<F> {
    a.map(|x| x * s)
}

/// Row-wise `softmax(scale · x)` over the last axis, stabilized by the row max.
pub fn softmax_rows<F: Real>(x: &NdArray<F>, scale: F) -> Result<NdArray<F>> {
    softmax_impl(x, scale, false)
}

/// [`softmax_rows`] on score matrices `[.., Sq, Sk]` where query `i` may only
/// see keys `j ≤ i + (Sk − Sq)`. Rows with no visible key come out as zeros.
pub fn softmax_rows_causal<F: Real>(x: &NdArray<F>, scale: F) -> Result<NdArray<F>> {
    softmax_impl(x, scale, true)
}

fn softmax_impl<F: Real>(x: &NdArray<F>, scale: F, causal: bool) -> Result<NdArray<F>> {
    let (_, sq, sk) = if causal {
        split_matrix(x.shape(), "softmax_rows_causal")?
    } else {
        let n = *x.shape().last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        })?;
        (&[][..], 1, n)
    };
    let mut out = x.clone();
    if sk == 0 {
        return Ok(out);
    }
    flops::record(Category::Elementwise, 4 * x.len() as u64);
    let offset = sk as isize - sq as isize;
    for (r, row) in out.data_mut().chunks_mut(sk).enumerate() {
        let visible = if causal {
            let i = (r % sq) as isize;
            (i + offset + 1).clamp(0, sk as isize) as usize
        } else {
            sk
        };
        softmax_row(row, visible, scale);
    }
    Ok(out)
}

/// Softmax of `scale · row[..visible]` in place; entries past `visible` are zeroed.
pub(crate) fn softmax_row<F: Real>(row: &mut [F], visible: usize, scale: F) {
    let (live, masked) = row.split_at_mut(visible);
    masked.fill(F::zero());
    if live.is_empty() {
        return;
    }
    let max = live.iter().fold(F::neg_infinity(), |m, &v| m.max(v * scale));
    let mut total = F::zero();
    for v in live.iter_mut() {
        *v = (*v * scale - max).exp();
        total = total + *v;
    }
    let inv = F::one() / total;
    for v in live.iter_mut() {
        *v = *v * inv;
    }
}

/// Causal grouped 1-D convolution over the sequence axis, no bias.
///
/// `x` is `[S, B, Ch]`, `kernel` is `[Ch_out, Ch / groups, k]`. Inputs are
/// implicitly left-padded with `k − 1` zero rows, so output row `t` depends on
/// `x[t−k+1 ..= t]` and tap `k − 1` multiplies the current row.
pub fn causal_conv1d<F: Real>(x: &NdArray<F>, kernel: &NdArray<F>, groups: usize) -> Result<NdArray<F>> {
    if x.ndim() != 3 || kernel.ndim() != 3 {
        return shape_err("causal_conv1d", x.shape(), kernel.shape());
    }
    let (s, b, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if groups == 0 || ch % groups != 0 {
        return Err(Error::GroupMismatch { op: "causal_conv1d", channels: ch, groups });
    }
    if c_out % groups != 0 {
        return Err(Error::GroupMismatch { op: "causal_conv1d", channels: c_out, groups });
    }
    if c_in != ch / groups || k == 0 {
        return shape_err("causal_conv1d", x.shape(), kernel.shape());
    }
    let out_per_group = c_out / groups;
    flops::record(Category::Conv, 2 * (s * b * c_out * c_in * k) as u64);

    let mut out = NdArray::zeros(&[s, b, c_out]);
    let xd = x.data();
    // [c_out, k, c_in] so each tap reads a contiguous kernel row
    let mut wd = vec![F::zero(); c_out * k * c_in];
    for (o, w_o) in kernel.data().chunks(c_in * k).enumerate() {
        for i in 0..c_in {
            for j in 0..k {
                wd[(o * k + j) * c_in + i] = w_o[i * k + j];
            }
        }
    }
    let od = out.data_mut();
    for t in 0..s {
        // Taps that land on real (non-padding) rows.
        let j0 = (k - 1).saturating_sub(t);
        for bi in 0..b {
            let orow = (t * b + bi) * c_out;
            for o in 0..c_out {
                let g = o / out_per_group;
                let w_o = &wd[o * c_in * k..(o + 1) * c_in * k];
                let mut acc = F::zero();
                for j in j0..k {
                    let src = t + j + 1 - k;
                    let xrow = &xd[(src * b + bi) * ch + g * c_in..(src * b + bi) * ch + (g + 1) * c_in];
                    for (&wv, &xv) in w_o[j * c_in..(j + 1) * c_in].iter().zip(xrow) {
                        acc = acc + wv * xv;
                    }
                }
                od[orow + o] = acc;
            }
        }
    }
    Ok(out)
}

/// Normalize every vector along the last axis: `x / max(‖x‖, eps)`.
pub fn l2_normalize_heads<F: Real>(x: &NdArray<F>, eps: F) -> Result<NdArray<F>> {
    let d = match x.shape().last() {
        Some(&d) if d > 0 => d,
        _ => return shape_err("l2_normalize_heads", x.shape(), &[]),
    };
    flops::record(Category::Elementwise, 3 * x.len() as u64);
    let mut out = x.clone();
    for v in out.data_mut().chunks_mut(d) {
        let n = v.iter().map(|&a| a * a).sum::<F>().sqrt().max(eps);
        for a in v.iter_mut() {
            *a = *a / n;
        }
    }
    Ok(out)
}

/// Channels `[start, start + len)` of the last axis.
pub fn slice_last<F: Real>(x: &NdArray<F>, start: usize, len: usize) -> Result<NdArray<F>> {
    let d = *x.shape().last().unwrap_or(&0);
    if start + len > d {
        return shape_err("slice_last", x.shape(), &[start, len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    NdArray::from_vec(&shape, data)
}

pub fn concat_last<F: Real>(a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
    let (na, nb) = (a.ndim(), b.ndim());
    if na == 0 || na != nb || a.shape()[..na - 1] != b.shape()[..nb - 1] {
        return shape_err("concat_last", a.shape(), b.shape());
    }
    let (da, db) = (a.shape()[na - 1], b.shape()[nb - 1]);
    let mut shape = a.shape().to_vec();
    shape[na - 1] = da + db;
    let rows = if da + db == 0 { 0 } else { a.len() / da.max(1) };
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
        data.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
    }
    NdArray::from_vec(&shape, data)
}

/// Shift one step along axis 0: `out[0] = 0`, `out[t] = x[t − 1]`.
pub fn shift_seq<F: Real>(x: &NdArray<F>) -> Result<NdArray<F>> {
    let Some(&s) = x.shape().first() else {
        return shape_err("shift_seq", x.shape(), &[]);
    };
    let mut out = NdArray::zeros(x.shape());
    if s > 1 {
        let row = x.len() / s;
        out.data_mut()[row..].copy_from_slice(&x.data()[..(s - 1) * row]);
    }
    Ok(out)
}

/// `[.., H, D] → [.., H·n, D]`, each head repeated `n` times consecutively.
pub fn repeat_heads<F: Real>(x: &NdArray<F>, n: usize) -> Result<NdArray<F>> {
    let nd = x.ndim();
    if nd < 2 || n == 0 {
        return shape_err("repeat_heads", x.shape(), &[n]);
    }
    let d = x.shape()[nd - 1];
    let mut shape = x.shape().to_vec();
    shape[nd - 2] *= n;
    let mut data = Vec::with_capacity(x.len() * n);
    for head in x.data().chunks(d.max(1)) {
        for _ in 0..n {
            data.extend_from_slice(head);
        }
    }
    NdArray::from_vec(&shape, data)
}

/// `[.., H, D] → [.., H/n, D]`, averaging each run of `n` consecutive heads.
pub fn group_mean<F: Real>(x: &NdArray<F>, n: usize) -> Result<NdArray<F>> {
    let nd = x.ndim();
    if nd < 2 {
        return shape_err("group_mean", x.shape(), &[n]);
    }
    let h = x.shape()[nd - 2];
    if n == 0 || !h.is_multiple_of(n) {
        return Err(Error::GroupMismatch { op: "group_mean", channels: h, groups: n });
    }
    let d = x.shape()[nd - 1];
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = h / n;
    let inv = F::one() / F::of(n as f64);
    let mut data = Vec::with_capacity(x.len() / n);
    for group in x.data().chunks(n * d) {
        for c in 0..d {
            let s: F = (0..n).map(|j| group[j * d + c]).sum();
            data.push(s * inv);
        }
    }
    NdArray::from_vec(&shape, data)
}

/// Multiply head `h` of `x[.., H, D]` by `exp(beta[h])`.
pub fn mul_head_exp<F: Real>(x: &NdArray<F>, beta: &NdArray<F>) -> Result<NdArray<F>> {
    let nd = x.ndim();
    if nd < 2 || beta.len() != x.shape()[nd - 2] {
        return shape_err("mul_head_exp", x.shape(), beta.shape());
    }
    let (h, d) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let factors: Vec<F> = beta.data().iter().map(|b| b.exp()).collect();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * factors[(i / d.max(1)) % h];
    }
    Ok(out)
}
