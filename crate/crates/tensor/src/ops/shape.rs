//! Shape surgery: permute, reshape, narrow, concat.

use super::{strides_for, zip_offsets};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardFn, Tensor};

/// Copies `data` (row-major over `shape`) into a buffer whose axis `i` is the
/// source axis `axes[i]`.
fn permute_copy<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides_for(shape);
    let walk_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = vec![T::zero(); data.len()];
    let zeros = vec![0usize; out_shape.len()];
    zip_offsets(&out_shape, &walk_strides, &zeros, |flat, src, _| {
        out[flat] = data[src];
    });
    (out, out_shape)
}

impl<T: Scalar> Tensor<T> {
    /// Reorders axes: `out.shape[i] == self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(TensorError::InvalidShape {
                context: "permute: axes length does not match rank",
                shape: axes.to_vec(),
            });
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(TensorError::InvalidShape {
                    context: "permute: axes is not a permutation of 0..rank",
                    shape: axes.to_vec(),
                });
            }
            seen[a] = true;
        }

        let (out, out_shape) = permute_copy(&self.borrow_data(), self.shape(), axes);
        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let mut inverse = vec![0usize; rank];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let fwd_shape = out_shape.clone();
            Box::new(move |g: &[T]| {
                let (gp, _) = permute_copy(g, &fwd_shape, &inverse);
                parent.accumulate_grad(&gp);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], backward))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let new_numel: usize = new_shape.iter().product();
        if new_numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                context: "reshape: element count mismatch",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let out = self.to_vec();
        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            Box::new(move |g: &[T]| parent.accumulate_grad(g)) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            out,
            new_shape.to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    /// Slice of length `len` starting at `start` along `axis`; other axes are
    /// kept whole.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(TensorError::IndexOutOfRange {
                context: "narrow: axis",
                index: axis,
                bound: self.rank(),
            });
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(TensorError::IndexOutOfRange {
                context: "narrow: start + len exceeds axis extent",
                index: start + len,
                bound: dim,
            });
        }

        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * len * inner];
        {
            let data = self.borrow_data();
            for o in 0..outer {
                let src = (o * dim + start) * inner;
                let dst = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;

        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let parent_numel = self.numel();
            Box::new(move |g: &[T]| {
                let mut gp = vec![T::zero(); parent_numel];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                parent.accumulate_grad(&gp);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], backward))
    }

    /// Joins tensors along `axis`; all other axis extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| {
            TensorError::InvalidOperation("concat: no tensors given".to_string())
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::IndexOutOfRange {
                context: "concat: axis",
                index: axis,
                bound: rank,
            });
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for p in parts {
            if p.rank() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    context: "concat: shapes differ outside the join axis",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_lens.push(p.shape()[axis]);
        }
        let total: usize = axis_lens.iter().sum();
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();

        let mut out = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let mut at = 0usize;
            for (p, &plen) in parts.iter().zip(&axis_lens) {
                let data = p.borrow_data();
                let src = o * plen * inner;
                let dst = (o * total + at) * inner;
                out[dst..dst + plen * inner].copy_from_slice(&data[src..src + plen * inner]);
                at += plen;
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;

        let owned: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let backward = {
            let refs: Vec<&Tensor<T>> = owned.iter().collect();
            Tensor::graph_needed(&refs).then(|| {
                let owned = owned.clone();
                let lens = axis_lens.clone();
                Box::new(move |g: &[T]| {
                    let mut at = 0usize;
                    for (p, &plen) in owned.iter().zip(&lens) {
                        let mut gp = vec![T::zero(); outer * plen * inner];
                        for o in 0..outer {
                            let src = (o * total + at) * inner;
                            let dst = o * plen * inner;
                            gp[dst..dst + plen * inner]
                                .copy_from_slice(&g[src..src + plen * inner]);
                        }
                        p.accumulate_grad(&gp);
                        at += plen;
                    }
                }) as BackwardFn<T>
            })
        };
        Ok(Tensor::from_op(out, out_shape, owned, backward))
    }
}
