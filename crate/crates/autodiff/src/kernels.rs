//! Forward and VJP slice kernels shared by graph construction and backward.

use crate::scalar::Scalar;
use crate::shape::{axis_split, broadcast_strides, for_each_broadcast3, numel, row_major_strides};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sigmoid,
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) fn unary_forward<T: Scalar>(kind: UnaryKind, x: &[T]) -> Vec<T> {
    let one = T::one();
    x.iter()
        .map(|&v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Sigmoid => one / (one + (-v).exp()),
            UnaryKind::Elu => {
                if v > T::zero() {
                    v
                } else {
                    v.exp() - one
                }
            }
        })
        .collect()
}

/// gx += gy * d(unary)/dx, given input x and output y.
pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind, x: &[T], y: &[T], gy: &[T], gx: &mut [T]) {
    let one = T::one();
    let half = T::from_f64(0.5);
    for i in 0..x.len() {
        let d = match kind {
            UnaryKind::Neg => -one,
            UnaryKind::Exp => y[i],
            UnaryKind::Ln => one / x[i],
            UnaryKind::Sqrt => half / y[i],
            UnaryKind::Abs => {
                if x[i] > T::zero() {
                    one
                } else if x[i] < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            UnaryKind::Sigmoid => y[i] * (one - y[i]),
            UnaryKind::Elu => {
                if x[i] > T::zero() {
                    one
                } else {
                    y[i] + one
                }
            }
        };
        gx[i] += gy[i] * d;
    }
}

pub(crate) fn binary_forward<T: Scalar>(
    kind: BinaryKind,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    let mut out = vec![T::zero(); numel(out_shape)];
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_broadcast3(out_shape, &sa, &sb, |o, ia, ib| {
        let (x, y) = (a[ia], b[ib]);
        out[o] = match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
    });
    out
}

/// Accumulate grads of both operands of a broadcasting binary op.
#[allow(clippy::too_many_arguments)]
pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    gy: &[T],
    ga: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    match (ga, gb) {
        (Some(ga), Some(gb)) => {
            for_each_broadcast3(out_shape, &sa, &sb, |o, ia, ib| {
                let g = gy[o];
                match kind {
                    BinaryKind::Add => {
                        ga[ia] += g;
                        gb[ib] += g;
                    }
                    BinaryKind::Sub => {
                        ga[ia] += g;
                        gb[ib] -= g;
                    }
                    BinaryKind::Mul => {
                        ga[ia] += g * b[ib];
                        gb[ib] += g * a[ia];
                    }
                    BinaryKind::Div => {
                        let inv = T::one() / b[ib];
                        ga[ia] += g * inv;
                        gb[ib] -= g * a[ia] * inv * inv;
                    }
                }
            });
        }
        (Some(ga), None) => {
            for_each_broadcast3(out_shape, &sa, &sb, |o, ia, ib| {
                let g = gy[o];
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => ga[ia] += g,
                    BinaryKind::Mul => ga[ia] += g * b[ib],
                    BinaryKind::Div => ga[ia] += g / b[ib],
                }
            });
        }
        (None, Some(gb)) => {
            for_each_broadcast3(out_shape, &sa, &sb, |o, ia, ib| {
                let g = gy[o];
                match kind {
                    BinaryKind::Add => gb[ib] += g,
                    BinaryKind::Sub => gb[ib] -= g,
                    BinaryKind::Mul => gb[ib] += g * a[ia],
                    BinaryKind::Div => {
                        let inv = T::one() / b[ib];
                        gb[ib] -= g * a[ia] * inv * inv;
                    }
                }
            });
        }
        (None, None) => {}
    }
}

/// Batched matmul forward: [lead.., m, k] x [lead.., k, n] -> [lead.., m, n].
pub(crate) fn bmm_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * m * k..(i + 1) * m * k],
            &b[i * k * n..(i + 1) * k * n],
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    out
}

/// gA += gY·Bᵀ and gB += Aᵀ·gY per batch slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    gy: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ga: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(ga) = ga {
        // gA[m,k] = gY[m,n] · Bᵀ[n,k]; Bᵀ strides over row-major B[k,n]: (1, n)
        for i in 0..batch {
            let gys = &gy[i * m * n..(i + 1) * m * n];
            let bs = &b[i * k * n..(i + 1) * k * n];
            let gas = &mut ga[i * m * k..(i + 1) * m * k];
            unsafe {
                gemm_strided(m, n, k, gys, n as isize, 1, bs, 1, n as isize, gas);
            }
        }
    }
    if let Some(gb) = gb {
        // gB[k,n] = Aᵀ[k,m] · gY[m,n]; Aᵀ strides over row-major A[m,k]: (1, k)
        for i in 0..batch {
            let gys = &gy[i * m * n..(i + 1) * m * n];
            let as_ = &a[i * m * k..(i + 1) * m * k];
            let gbs = &mut gb[i * k * n..(i + 1) * k * n];
            unsafe {
                gemm_strided(k, m, n, as_, 1, k as isize, gys, n as isize, 1, gbs);
            }
        }
    }
}

/// C += A·B with arbitrary operand strides, C row-major.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    // matrixmultiply exposes strided gemm only per concrete type; route
    // through a small shim keyed on the dtype tag.
    if T::DTYPE == 4 {
        let a32 = std::slice::from_raw_parts(a.as_ptr() as *const f32, a.len());
        let b32 = std::slice::from_raw_parts(b.as_ptr() as *const f32, b.len());
        let c32 = std::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut f32, c.len());
        matrixmultiply::sgemm(
            m, k, n, 1.0, a32.as_ptr(), rsa, csa, b32.as_ptr(), rsb, csb, 1.0,
            c32.as_mut_ptr(), n as isize, 1,
        );
    } else {
        let a64 = std::slice::from_raw_parts(a.as_ptr() as *const f64, a.len());
        let b64 = std::slice::from_raw_parts(b.as_ptr() as *const f64, b.len());
        let c64 = std::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut f64, c.len());
        matrixmultiply::dgemm(
            m, k, n, 1.0, a64.as_ptr(), rsa, csa, b64.as_ptr(), rsb, csb, 1.0,
            c64.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Numerically stable softmax over the last axis.
pub(crate) fn softmax_last_forward<T: Scalar>(x: &[T], row: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let mut mx = xr[0];
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub(crate) fn softmax_last_backward<T: Scalar>(y: &[T], gy: &[T], row: usize, gx: &mut [T]) {
    for ((yr, gyr), gxr) in y.chunks(row).zip(gy.chunks(row)).zip(gx.chunks_mut(row)) {
        let mut dot = T::zero();
        for i in 0..row {
            dot += yr[i] * gyr[i];
        }
        for i in 0..row {
            gxr[i] += yr[i] * (gyr[i] - dot);
        }
    }
}

/// Layer normalization over the last axis, no affine.
pub(crate) fn layer_norm_forward<T: Scalar>(x: &[T], row: usize, eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let n = T::from_f64(row as f64);
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * inv;
        }
    }
    out
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    y: &[T],
    gy: &[T],
    row: usize,
    eps: T,
    gx: &mut [T],
) {
    let n = T::from_f64(row as f64);
    for (((xr, yr), gyr), gxr) in x
        .chunks(row)
        .zip(y.chunks(row))
        .zip(gy.chunks(row))
        .zip(gx.chunks_mut(row))
    {
        let mean = xr.iter().copied().sum::<T>() / n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv = T::one() / (var + eps).sqrt();
        let gmean = gyr.iter().copied().sum::<T>() / n;
        let mut gydoty = T::zero();
        for i in 0..row {
            gydoty += gyr[i] * yr[i];
        }
        gydoty /= n;
        for i in 0..row {
            gxr[i] += inv * (gyr[i] - gmean - yr[i] * gydoty);
        }
    }
}

pub(crate) fn sum_axis_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += x[base + i];
            }
        }
    }
    out
}

pub(crate) fn sum_axis_backward<T: Scalar>(
    gy: &[T],
    shape: &[usize],
    axis: usize,
    scale: T,
    gx: &mut [T],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let obase = o * inner;
            for i in 0..inner {
                gx[base + i] += gy[obase + i] * scale;
            }
        }
    }
}

/// Map output flat index -> input flat index for an axis permutation.
pub(crate) fn permute_forward<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let mut out = vec![T::zero(); x.len()];
    let ndim = shape.len();
    let mut idx = vec![0usize; ndim];
    let mut in_flat = 0usize;
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for o in out.iter_mut() {
        *o = x[in_flat];
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            in_flat += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            in_flat -= perm_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn permute_backward<T: Scalar>(
    gy: &[T],
    shape: &[usize],
    perm: &[usize],
    gx: &mut [T],
) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let ndim = shape.len();
    let mut idx = vec![0usize; ndim];
    let mut in_flat = 0usize;
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for &g in gy.iter() {
        gx[in_flat] += g;
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            in_flat += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            in_flat -= perm_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn index_select_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * indices.len() * inner];
    for o in 0..outer {
        for (ii, &src) in indices.iter().enumerate() {
            debug_assert!(src < len);
            let src_base = (o * len + src) * inner;
            let dst_base = (o * indices.len() + ii) * inner;
            out[dst_base..dst_base + inner].copy_from_slice(&x[src_base..src_base + inner]);
        }
    }
    out
}

pub(crate) fn index_select_backward<T: Scalar>(
    gy: &[T],
    shape: &[usize],
    axis: usize,
    indices: &[usize],
    gx: &mut [T],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for (ii, &src) in indices.iter().enumerate() {
            let src_base = (o * len + src) * inner;
            let dst_base = (o * indices.len() + ii) * inner;
            for i in 0..inner {
                gx[src_base + i] += gy[dst_base + i];
            }
        }
    }
}

pub(crate) fn broadcast_to_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    out_shape: &[usize],
) -> Vec<T> {
    let sa = broadcast_strides(shape, out_shape);
    let zero_strides = vec![0usize; out_shape.len()];
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_broadcast3(out_shape, &sa, &zero_strides, |o, ia, _| out[o] = x[ia]);
    out
}

pub(crate) fn broadcast_to_backward<T: Scalar>(
    gy: &[T],
    shape: &[usize],
    out_shape: &[usize],
    gx: &mut [T],
) {
    let sa = broadcast_strides(shape, out_shape);
    let zero_strides = vec![0usize; out_shape.len()];
    for_each_broadcast3(out_shape, &sa, &zero_strides, |o, ia, _| gx[ia] += gy[o]);
}
