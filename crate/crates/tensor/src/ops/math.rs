//! Arithmetic: broadcasting add/mul, scalar scale, full-sum, batched matmul,
//! and 3-D average pooling.

use rayon::prelude::*;

use super::{broadcast_shapes, broadcast_strides, reduce_to_shape, zip_offsets};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardFn, Tensor};

/// Work threshold (multiply-accumulate count) above which matmul rows are
/// computed on the rayon pool. Each output row is one unit of work with a
/// fixed sequential inner loop, so results are bit-identical for any thread
/// count.
const MATMUL_PAR_THRESHOLD: usize = 1 << 20;

/// Dot product with four independent accumulators to break the add latency
/// chain. Fixed association order, so results are deterministic.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc0 = T::zero();
    let mut acc1 = T::zero();
    let mut acc2 = T::zero();
    let mut acc3 = T::zero();
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc0 += a[i] * b[i];
        acc1 += a[i + 1] * b[i + 1];
        acc2 += a[i + 2] * b[i + 2];
        acc3 += a[i + 3] * b[i + 3];
    }
    let mut tail = (acc0 + acc1) + (acc2 + acc3);
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    tail
}

/// Batched matrix product on raw buffers.
///
/// `a` has shape `ashape = [batch.., p, q]`, `b` has `bshape = [batch.., r, s]`;
/// the batch prefixes broadcast right-aligned. `ta`/`tb` transpose the
/// trailing two axes logically (no copy on the `tb` path). Returns the output
/// buffer and its full shape `[batch.., m, n]`.
pub(crate) fn batched_matmul_raw<T: Scalar>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(Vec<T>, Vec<usize>)> {
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(TensorError::InvalidShape {
            context: "matmul: operands must have rank >= 2",
            shape: if ashape.len() < 2 { ashape.to_vec() } else { bshape.to_vec() },
        });
    }
    let (p, q) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (r, s) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    let (m, ka) = if ta { (q, p) } else { (p, q) };
    let (kb, n) = if tb { (s, r) } else { (r, s) };
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            context: "matmul: inner dimensions disagree",
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        });
    }
    let k = ka;

    let abatch = &ashape[..ashape.len() - 2];
    let bbatch = &bshape[..bshape.len() - 2];
    let batch = broadcast_shapes(abatch, bbatch).ok_or_else(|| TensorError::ShapeMismatch {
        context: "matmul: batch prefixes are not broadcastable",
        lhs: ashape.to_vec(),
        rhs: bshape.to_vec(),
    })?;
    let nbatch: usize = batch.iter().product();

    // Flat element offset of each batch's block in a and b.
    let mut offsets: Vec<(usize, usize)> = Vec::with_capacity(nbatch);
    {
        let sa: Vec<usize> = broadcast_strides(&batch, abatch)
            .iter()
            .map(|&st| st * p * q)
            .collect();
        let sb: Vec<usize> = broadcast_strides(&batch, bbatch)
            .iter()
            .map(|&st| st * r * s)
            .collect();
        zip_offsets(&batch, &sa, &sb, |_, oa, ob| offsets.push((oa, ob)));
        if batch.is_empty() {
            // zip_offsets already emitted the single (0, 0) entry.
            debug_assert_eq!(offsets.len(), 1);
        }
    }

    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); nbatch * m * n];

    match (ta, tb) {
        // C[i,j] = dot(a_row_i, bt_row_j); bt is B's block transposed (or B
        // itself on the tb path, where rows are already contraction-major).
        (false, false) | (false, true) => {
            // Per-batch right-hand blocks laid out row-contiguous in k.
            let bt_blocks: Vec<Vec<T>> = offsets
                .iter()
                .map(|&(_, ob)| {
                    if tb {
                        b[ob..ob + k * n].to_vec()
                    } else {
                        let mut bt = vec![T::zero(); n * k];
                        for l in 0..k {
                            for j in 0..n {
                                bt[j * k + l] = b[ob + l * n + j];
                            }
                        }
                        bt
                    }
                })
                .collect();

            let fill_row = |row: usize, out_row: &mut [T]| {
                let bi = row / m;
                let i = row % m;
                let (oa, _) = offsets[bi];
                let a_row = &a[oa + i * k..oa + (i + 1) * k];
                let bt = &bt_blocks[bi];
                for (j, slot) in out_row.iter_mut().enumerate() {
                    *slot = dot(a_row, &bt[j * k..(j + 1) * k]);
                }
            };

            if nbatch * m * n * k >= MATMUL_PAR_THRESHOLD {
                out.par_chunks_mut(n)
                    .enumerate()
                    .for_each(|(row, out_row)| fill_row(row, out_row));
            } else {
                for (row, out_row) in out.chunks_mut(n).enumerate() {
                    fill_row(row, out_row);
                }
            }
        }
        // C[l,j] = sum_i A[i,l] * B[i,j]: accumulate row-by-row of A so both
        // B and C are touched contiguously; i ascends for every (l,j).
        (true, false) => {
            for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                let c = &mut out[bi * m * n..(bi + 1) * m * n];
                for i in 0..k {
                    for l in 0..m {
                        let av = a[oa + i * m + l];
                        let b_row = &b[ob + i * n..ob + (i + 1) * n];
                        let c_row = &mut c[l * n..(l + 1) * n];
                        for (cv, bv) in c_row.iter_mut().zip(b_row) {
                            *cv += av * *bv;
                        }
                    }
                }
            }
        }
        // C[i,j] = sum_l A[l,i] * B[j,l]; cold path, plain index arithmetic.
        (true, true) => {
            for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                let c = &mut out[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for l in 0..k {
                            acc += a[oa + l * m + i] * b[ob + j * k + l];
                        }
                        c[i * n + j] = acc;
                    }
                }
            }
        }
    }

    Ok((out, out_shape))
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary_broadcast(self, other, |x, y| x + y, BinaryKind::Add)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary_broadcast(self, other, |x, y| x * y, BinaryKind::Mul)
    }

    /// Multiplies every element by a compile-time-known constant.
    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let out: Vec<T> = self.borrow_data().iter().map(|&v| v * factor).collect();
        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            Box::new(move |g: &[T]| {
                let gp: Vec<T> = g.iter().map(|&v| v * factor).collect();
                parent.accumulate_grad(&gp);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    /// Sum of all elements, in ascending index order, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.borrow_data().iter() {
            acc += v;
        }
        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let numel = self.numel();
            Box::new(move |g: &[T]| {
                parent.accumulate_grad(&vec![g[0]; numel]);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            vec![acc],
            vec![1],
            vec![self.clone()],
            backward,
        ))
    }

    /// Batched matrix product: `[.., m, k] × [.., k, n] -> [.., m, n]`, batch
    /// prefixes broadcasting right-aligned.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, out_shape) = {
            let a = self.borrow_data();
            let b = other.borrow_data();
            batched_matmul_raw(&a, self.shape(), &b, other.shape(), false, false)?
        };

        let backward = Tensor::graph_needed(&[self, other]).then(|| {
            let pa = self.clone();
            let pb = other.clone();
            let gshape = out_shape.clone();
            Box::new(move |g: &[T]| {
                // dA = g · Bᵀ, reduced over broadcast batch axes.
                {
                    let b = pb.borrow_data();
                    let (ga, ga_shape) =
                        batched_matmul_raw(g, &gshape, &b, pb.shape(), false, true)
                            .expect("matmul backward shapes were validated in forward");
                    if ga_shape == pa.shape() {
                        pa.accumulate_grad(&ga);
                    } else {
                        pa.accumulate_grad(&reduce_to_shape(&ga, &ga_shape, pa.shape()));
                    }
                }
                // dB = Aᵀ · g, reduced over broadcast batch axes.
                {
                    let a = pa.borrow_data();
                    let (gb, gb_shape) =
                        batched_matmul_raw(&a, pa.shape(), g, &gshape, true, false)
                            .expect("matmul backward shapes were validated in forward");
                    if gb_shape == pb.shape() {
                        pb.accumulate_grad(&gb);
                    } else {
                        pb.accumulate_grad(&reduce_to_shape(&gb, &gb_shape, pb.shape()));
                    }
                }
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    /// Non-overlapping cubic average pooling over the last three axes of a
    /// rank-5 tensor `[B, C, d1, d2, d3]`, stride == kernel, no padding.
    ///
    /// Each output cell sums its k³ block in ascending (dz, dy, dx) order and
    /// divides once by k³; that exact order is part of the op's determinism
    /// contract and is relied on by bit-level equivalence tests.
    pub fn avg_pool3d(&self, kernel: usize) -> Result<Tensor<T>> {
        if self.rank() != 5 {
            return Err(TensorError::InvalidShape {
                context: "avg_pool3d: expected rank-5 input [B, C, d1, d2, d3]",
                shape: self.shape().to_vec(),
            });
        }
        if kernel == 0 {
            return Err(TensorError::InvalidOperation(
                "avg_pool3d: kernel must be positive".to_string(),
            ));
        }
        let [bsz, ch, d1, d2, d3] = [
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
            self.shape()[4],
        ];
        if d1 % kernel != 0 || d2 % kernel != 0 || d3 % kernel != 0 {
            return Err(TensorError::InvalidShape {
                context: "avg_pool3d: spatial axes must be divisible by kernel",
                shape: self.shape().to_vec(),
            });
        }
        let (o1, o2, o3) = (d1 / kernel, d2 / kernel, d3 / kernel);
        let count = T::from_usize_c(kernel * kernel * kernel);

        let mut out = vec![T::zero(); bsz * ch * o1 * o2 * o3];
        {
            let data = self.borrow_data();
            let mut w = 0usize;
            for b in 0..bsz {
                for c in 0..ch {
                    let plane = ((b * ch) + c) * d1 * d2 * d3;
                    for oz in 0..o1 {
                        for oy in 0..o2 {
                            for ox in 0..o3 {
                                let mut acc = T::zero();
                                for dz in 0..kernel {
                                    for dy in 0..kernel {
                                        for dx in 0..kernel {
                                            let z = oz * kernel + dz;
                                            let y = oy * kernel + dy;
                                            let x = ox * kernel + dx;
                                            acc += data[plane + (z * d2 + y) * d3 + x];
                                        }
                                    }
                                }
                                out[w] = acc / count;
                                w += 1;
                            }
                        }
                    }
                }
            }
        }

        let out_shape = vec![bsz, ch, o1, o2, o3];
        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let parent_numel = self.numel();
            Box::new(move |g: &[T]| {
                let mut gp = vec![T::zero(); parent_numel];
                let mut r = 0usize;
                for b in 0..bsz {
                    for c in 0..ch {
                        let plane = ((b * ch) + c) * d1 * d2 * d3;
                        for oz in 0..o1 {
                            for oy in 0..o2 {
                                for ox in 0..o3 {
                                    let share = g[r] / count;
                                    r += 1;
                                    for dz in 0..kernel {
                                        for dy in 0..kernel {
                                            for dx in 0..kernel {
                                                let z = oz * kernel + dz;
                                                let y = oy * kernel + dy;
                                                let x = ox * kernel + dx;
                                                gp[plane + (z * d2 + y) * d3 + x] += share;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                parent.accumulate_grad(&gp);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], backward))
    }
}

enum BinaryKind {
    Add,
    Mul,
}

fn binary_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    apply: fn(T, T) -> T,
    kind: BinaryKind,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
        TensorError::ShapeMismatch {
            context: "elementwise op: shapes are not broadcastable",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    })?;
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    {
        let da = a.borrow_data();
        let db = b.borrow_data();
        if a.shape() == b.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da.iter()).zip(db.iter()) {
                *o = apply(x, y);
            }
        } else {
            let sa = broadcast_strides(&out_shape, a.shape());
            let sb = broadcast_strides(&out_shape, b.shape());
            zip_offsets(&out_shape, &sa, &sb, |flat, oa, ob| {
                out[flat] = apply(da[oa], db[ob]);
            });
        }
    }

    let backward = Tensor::graph_needed(&[a, b]).then(|| {
        let pa = a.clone();
        let pb = b.clone();
        let oshape = out_shape.clone();
        match kind {
            BinaryKind::Add => Box::new(move |g: &[T]| {
                for p in [&pa, &pb] {
                    if p.shape() == oshape.as_slice() {
                        p.accumulate_grad(g);
                    } else {
                        p.accumulate_grad(&reduce_to_shape(g, &oshape, p.shape()));
                    }
                }
            }) as BackwardFn<T>,
            BinaryKind::Mul => Box::new(move |g: &[T]| {
                let da = pa.borrow_data();
                let db = pb.borrow_data();
                let sa = broadcast_strides(&oshape, pa.shape());
                let sb = broadcast_strides(&oshape, pb.shape());
                let mut ga = vec![T::zero(); pa.numel()];
                let mut gb = vec![T::zero(); pb.numel()];
                zip_offsets(&oshape, &sa, &sb, |flat, oa, ob| {
                    ga[oa] += g[flat] * db[ob];
                    gb[ob] += g[flat] * da[oa];
                });
                drop(da);
                drop(db);
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }) as BackwardFn<T>,
        }
    });
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        backward,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_broadcasts_vector_over_rows() {
        let m = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let v = Tensor::from_vec(vec![10.0f64, 20.0, 30.0], &[3]).unwrap();
        let s = m.add(&v).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        assert_eq!(s.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn add_gradient_reduces_over_broadcast_axes() {
        let m = Tensor::<f64>::zeros(&[2, 3]).with_requires_grad(true);
        let v = Tensor::<f64>::zeros(&[3]).with_requires_grad(true);
        let loss = m.add(&v).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(v.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn mul_gradient_routes_opposite_operand() {
        let a = Tensor::from_vec(vec![2.0f64, 3.0], &[2])
            .unwrap()
            .with_requires_grad(true);
        let b = Tensor::from_vec(vec![5.0f64, 7.0], &[2])
            .unwrap()
            .with_requires_grad(true);
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 3]);
        assert!(matches!(
            a.add(&b).unwrap_err(),
            TensorError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::from_vec(
            vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        )
        .unwrap();
        let v = Tensor::from_vec(vec![4.0f64, -2.5, 9.0], &[3, 1]).unwrap();
        let out = eye.matmul(&v).unwrap();
        assert_eq!(out.to_vec(), vec![4.0, -2.5, 9.0]);

        // [1,2]·[[3],[4]] = [11]
        let a = Tensor::from_vec(vec![1.0f64, 2.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0f64, 4.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_batch_broadcasts_shared_weights() {
        // [2,2,3] × [3,2]: the weight matrix is shared across the batch.
        let x = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[2, 2, 3]).unwrap();
        let w = Tensor::from_vec((0..6).map(|v| v as f64).collect(), &[3, 2]).unwrap();
        let y = x.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        // First row: [0,1,2] · cols of [[0,1],[2,3],[4,5]] = [10, 13]
        assert_eq!(y.to_vec()[..2], [10.0, 13.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_gradients_match_manual() {
        // loss = sum(A·B); dA = ones·Bᵀ, dB = Aᵀ·ones.
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2])
            .unwrap()
            .with_requires_grad(true);
        let b = Tensor::from_vec(vec![5.0f64, 6.0, 7.0, 8.0], &[2, 2])
            .unwrap()
            .with_requires_grad(true);
        let loss = a.matmul(&b).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn avg_pool_contract_examples() {
        // 2×2×2 block of ones pools to exactly 1.0.
        let ones = Tensor::from_vec(vec![1.0f64; 8], &[1, 1, 2, 2, 2]).unwrap();
        assert_eq!(ones.avg_pool3d(2).unwrap().to_vec(), vec![1.0]);
        // 0..7 pools to the arithmetic mean 3.5.
        let ramp = Tensor::from_vec((0..8).map(|v| v as f64).collect(), &[1, 1, 2, 2, 2]).unwrap();
        assert_eq!(ramp.avg_pool3d(2).unwrap().to_vec(), vec![3.5]);
        // Shape law on the grid geometry used downstream.
        let t = Tensor::<f32>::zeros(&[1, 16, 8, 8, 8]);
        assert_eq!(t.avg_pool3d(2).unwrap().shape(), &[1, 16, 4, 4, 4]);
    }

    #[test]
    fn avg_pool_rejects_bad_inputs() {
        let t = Tensor::<f32>::zeros(&[1, 1, 3, 4, 4]);
        assert!(t.avg_pool3d(2).is_err());
        let t4 = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(t4.avg_pool3d(2).is_err());
    }

    #[test]
    fn avg_pool_gradient_distributes_evenly() {
        let t = Tensor::from_vec((0..8).map(|v| v as f64).collect(), &[1, 1, 2, 2, 2])
            .unwrap()
            .with_requires_grad(true);
        let loss = t.avg_pool3d(2).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![0.125; 8]);
    }

    #[test]
    fn scale_and_sum_all() {
        let t = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3])
            .unwrap()
            .with_requires_grad(true);
        let loss = t.scale(2.0).unwrap().sum_all().unwrap();
        assert_eq!(loss.item().unwrap(), 12.0);
        loss.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn parallel_and_serial_matmul_agree_bitwise() {
        // Same kernel runs serial below the work threshold; force both paths
        // and compare. The parallel path must be bit-identical.
        let n = 130; // 130³ ≈ 2.2M MACs > threshold
        let mut a = Vec::with_capacity(n * n);
        let mut b = Vec::with_capacity(n * n);
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32) / (u32::MAX as f32) - 0.5
        };
        for _ in 0..n * n {
            a.push(next());
        }
        for _ in 0..n * n {
            b.push(next());
        }
        let (par, _) = batched_matmul_raw(&a, &[n, n], &b, &[n, n], false, false).unwrap();
        // Serial reference: same dot kernel, same order, one thread.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (ser, _) = pool
            .install(|| batched_matmul_raw(&a, &[n, n], &b, &[n, n], false, false))
            .unwrap();
        assert_eq!(par, ser);
    }
}
