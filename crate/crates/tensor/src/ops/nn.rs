//! Neural-network primitives: GELU, softmax, layer norm, embedding gather,
//! and masked cross-entropy.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardFn, Tensor};

/// tanh-approximation constants for GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

impl<T: Scalar> Tensor<T> {
    /// GELU activation (tanh approximation):
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c1 = T::from_f64_c(GELU_SQRT_2_OVER_PI);
        let c2 = T::from_f64_c(GELU_CUBIC_COEF);
        let half = T::from_f64_c(0.5);
        let one = T::one();

        let out: Vec<T> = self
            .borrow_data()
            .iter()
            .map(|&x| {
                let inner = c1 * (x + c2 * x * x * x);
                half * x * (one + inner.tanh())
            })
            .collect();

        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            Box::new(move |g: &[T]| {
                let data = parent.borrow_data();
                let three = T::from_f64_c(3.0);
                let gp: Vec<T> = data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let u = c1 * (x + c2 * x * x * x);
                        let t = u.tanh();
                        let du = c1 * (one + three * c2 * x * x);
                        let d = half * (one + t) + half * x * (one - t * t) * du;
                        gv * d
                    })
                    .collect();
                drop(data);
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

    /// Softmax over the last axis, computed with max-subtraction for
    /// stability.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 || self.numel() == 0 {
            return Err(TensorError::InvalidShape {
                context: "softmax: empty tensor",
                shape: self.shape().to_vec(),
            });
        }
        let width = *self.shape().last().expect("rank checked above");
        let rows = self.numel() / width;
        let mut out = vec![T::zero(); self.numel()];
        {
            let data = self.borrow_data();
            for r in 0..rows {
                let row = &data[r * width..(r + 1) * width];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let dst = &mut out[r * width..(r + 1) * width];
                let mut sum = T::zero();
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - max).exp();
                    sum += *d;
                }
                for d in dst.iter_mut() {
                    *d = *d / sum;
                }
            }
        }

        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let saved = out.clone();
            Box::new(move |g: &[T]| {
                // dx = y ⊙ (g − Σⱼ gⱼ·yⱼ) per row.
                let mut gp = vec![T::zero(); saved.len()];
                for r in 0..rows {
                    let y = &saved[r * width..(r + 1) * width];
                    let gr = &g[r * width..(r + 1) * width];
                    let mut inner = T::zero();
                    for (&yj, &gj) in y.iter().zip(gr) {
                        inner += yj * gj;
                    }
                    let dst = &mut gp[r * width..(r + 1) * width];
                    for ((d, &yj), &gj) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yj * (gj - inner);
                    }
                }
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

    /// Layer normalization over the last axis with learnable `gamma`/`beta`
    /// (each shaped `[width]`); variance is the biased (1/n) estimate.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let width = *self.shape().last().ok_or_else(|| TensorError::InvalidShape {
            context: "layer_norm: input must have rank >= 1",
            shape: self.shape().to_vec(),
        })?;
        if gamma.shape() != [width] || beta.shape() != [width] {
            return Err(TensorError::ShapeMismatch {
                context: "layer_norm: gamma/beta must match the last axis",
                lhs: vec![width],
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / width;
        let n = T::from_usize_c(width);
        let eps_t = T::from_f64_c(eps);

        let mut out = vec![T::zero(); self.numel()];
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        {
            let data = self.borrow_data();
            let ga = gamma.borrow_data();
            let be = beta.borrow_data();
            for r in 0..rows {
                let row = &data[r * width..(r + 1) * width];
                let mut mean = T::zero();
                for &x in row {
                    mean += x;
                }
                mean = mean / n;
                let mut var = T::zero();
                for &x in row {
                    let d = x - mean;
                    var += d * d;
                }
                var = var / n;
                let inv = (var + eps_t).sqrt().recip();
                inv_std[r] = inv;
                for i in 0..width {
                    let xh = (row[i] - mean) * inv;
                    xhat[r * width + i] = xh;
                    out[r * width + i] = xh * ga[i] + be[i];
                }
            }
        }

        let backward = Tensor::graph_needed(&[self, gamma, beta]).then(|| {
            let px = self.clone();
            let pg = gamma.clone();
            let pb = beta.clone();
            let xhat = xhat.clone();
            let inv_std = inv_std.clone();
            Box::new(move |g: &[T]| {
                let ga = pg.borrow_data();
                let mut dgamma = vec![T::zero(); width];
                let mut dbeta = vec![T::zero(); width];
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * width..(r + 1) * width];
                    let xh = &xhat[r * width..(r + 1) * width];
                    // Row-wise means of dxhat and dxhat·xhat.
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..width {
                        let dxh = gr[i] * ga[i];
                        m1 += dxh;
                        m2 += dxh * xh[i];
                        dgamma[i] += gr[i] * xh[i];
                        dbeta[i] += gr[i];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    let inv = inv_std[r];
                    let dst = &mut dx[r * width..(r + 1) * width];
                    for i in 0..width {
                        let dxh = gr[i] * ga[i];
                        dst[i] = inv * (dxh - m1 - xh[i] * m2);
                    }
                }
                drop(ga);
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgamma);
                pb.accumulate_grad(&dbeta);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        ))
    }

    /// Gathers rows of an embedding table (`self`, shaped `[vocab, dim]`) at
    /// the given indices, producing `[ids.len(), dim]`. The gradient
    /// scatter-adds back into the gathered rows.
    pub fn embedding_gather(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                context: "embedding_gather: table must be [vocab, dim]",
                shape: self.shape().to_vec(),
            });
        }
        let (vocab, dim) = (self.shape()[0], self.shape()[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    context: "embedding_gather: id",
                    index: id,
                    bound: vocab,
                });
            }
        }

        let mut out = vec![T::zero(); ids.len() * dim];
        {
            let data = self.borrow_data();
            for (i, &id) in ids.iter().enumerate() {
                out[i * dim..(i + 1) * dim].copy_from_slice(&data[id * dim..(id + 1) * dim]);
            }
        }

        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let ids = ids.to_vec();
            let table_numel = self.numel();
            Box::new(move |g: &[T]| {
                let mut gp = vec![T::zero(); table_numel];
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g[i * dim..(i + 1) * dim];
                    let dst = &mut gp[id * dim..(id + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                parent.accumulate_grad(&gp);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), dim],
            vec![self.clone()],
            backward,
        ))
    }

    /// Masked token-level cross-entropy over logits `[seq, vocab]`.
    ///
    /// Each position's loss is `logsumexp(row) − row[target]`; the result is
    /// the mean over positions where `mask` is true. Positions with a false
    /// mask contribute nothing (their targets are ignored). An all-false mask
    /// is an argument error.
    pub fn cross_entropy_masked(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                context: "cross_entropy: logits must be [seq, vocab]",
                shape: self.shape().to_vec(),
            });
        }
        let (seq, vocab) = (self.shape()[0], self.shape()[1]);
        if targets.len() != seq || mask.len() != seq {
            return Err(TensorError::InvalidOperation(format!(
                "cross_entropy: logits have {} positions but {} targets / {} mask entries",
                seq,
                targets.len(),
                mask.len()
            )));
        }
        let active: usize = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(TensorError::InvalidOperation(
                "cross_entropy: mask selects no positions".to_string(),
            ));
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    context: "cross_entropy: target id",
                    index: t,
                    bound: vocab,
                });
            }
        }

        let count = T::from_usize_c(active);
        let mut total = T::zero();
        {
            let data = self.borrow_data();
            for i in 0..seq {
                if !mask[i] {
                    continue;
                }
                let row = &data[i * vocab..(i + 1) * vocab];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for &x in row {
                    sum += (x - max).exp();
                }
                let lse = max + sum.ln();
                total += lse - row[targets[i]];
            }
        }
        let loss = total / count;

        let backward = Tensor::graph_needed(&[self]).then(|| {
            let parent = self.clone();
            let targets = targets.to_vec();
            let mask = mask.to_vec();
            Box::new(move |g: &[T]| {
                // d(loss)/d(logit) = (softmax − onehot(target)) / active, on
                // masked rows only; probabilities recomputed from the saved
                // parent rather than stored.
                let data = parent.borrow_data();
                let mut gp = vec![T::zero(); data.len()];
                let scale = g[0] / count;
                for i in 0..seq {
                    if !mask[i] {
                        continue;
                    }
                    let row = &data[i * vocab..(i + 1) * vocab];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    let dst = &mut gp[i * vocab..(i + 1) * vocab];
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = (x - max).exp();
                        sum += *d;
                    }
                    for d in dst.iter_mut() {
                        *d = *d / sum * scale;
                    }
                    dst[targets[i]] -= scale;
                }
                drop(data);
                parent.accumulate_grad(&gp);
            }) as BackwardFn<T>
        });
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            backward,
        ))
    }
}
