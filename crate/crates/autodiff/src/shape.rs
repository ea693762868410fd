//! Shape arithmetic: broadcasting, strides, axis permutation.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// NumPy-style broadcast of two shapes (right-aligned; 1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides for reading `shape` as if broadcast to `out_shape` (stride 0 on
/// stretched axes). `shape` must be broadcast-compatible with `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = row_major_strides(shape);
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut strides = vec![0; ndim];
    for i in 0..shape.len() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    strides
}

/// Iterate flat indices of a broadcast operand aligned with a row-major walk
/// of `out_shape`. Calls `f(out_flat, a_flat, b_flat)` for each element.
pub fn for_each_broadcast3(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; ndim];
    let mut a_flat = 0usize;
    let mut b_flat = 0usize;
    for out_flat in 0..n {
        f(out_flat, a_flat, b_flat);
        // odometer increment
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            a_flat += a_strides[ax];
            b_flat += b_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            a_flat -= a_strides[ax] * out_shape[ax];
            b_flat -= b_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Split a shape at `axis` into (outer, axis_len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
