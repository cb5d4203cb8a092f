//! Tensor operations, split by flavor: shape surgery, arithmetic/matmul, and
//! neural-network primitives. Shared indexing helpers live here.

mod math;
mod nn;
mod shape;

use crate::scalar::Scalar;

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Right-aligned broadcast of two shapes (each axis pair must match or one
/// side must be 1). Returns `None` when the shapes are incompatible.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides that map a multi-index over `out_shape` to a flat offset in a
/// buffer of shape `in_shape`, right-aligned, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - in_shape.len();
    let in_strides = strides_for(in_shape);
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..in_shape.len() {
        out[pad + i] = if in_shape[i] == 1 && out_shape[pad + i] != 1 {
            0
        } else {
            in_strides[i]
        };
    }
    out
}

/// Walks every multi-index of `shape` in row-major order, maintaining two
/// flat offsets under the given per-axis strides, and calls
/// `f(flat_out_index, offset_a, offset_b)` for each position.
///
/// The offsets are updated incrementally (add on increment, subtract on
/// carry), so the walk is allocation-free and O(numel · rank) worst case.
pub(crate) fn zip_offsets(
    shape: &[usize],
    strides_a: &[usize],
    strides_b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for flat in 0..numel {
        f(flat, off_a, off_b);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += strides_a[ax];
            off_b += strides_b[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= strides_a[ax] * shape[ax];
            off_b -= strides_b[ax] * shape[ax];
        }
    }
}

/// Sums a gradient of shape `from_shape` down to `to_shape` (the reverse of
/// broadcasting `to_shape` up to `from_shape`).
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    from_shape: &[usize],
    to_shape: &[usize],
) -> Vec<T> {
    let numel: usize = to_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    let strides = broadcast_strides(from_shape, to_shape);
    let zeros = vec![0usize; from_shape.len()];
    zip_offsets(from_shape, &strides, &zeros, |flat, off, _| {
        out[off] += grad[flat];
    });
    out
}
