//! Fused multi-head scaled dot-product attention.
//!
//! Logits for head `h` are `q_h k_h^T / sqrt(d_h)`, optionally plus a learned
//! bias `table[h, clamp(i - j, -M, M) + M]` shared across the batch.

use crate::autodiff::gemm::{gemm, Mat, MatMut};
use crate::autodiff::ops::elementwise::softmax_rows;
use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

fn offset_index(i: usize, j: usize, max_dist: usize) -> usize {
    let d = i as isize - j as isize;
    (d.clamp(-(max_dist as isize), max_dist as isize) + max_dist as isize) as usize
}

struct AttentionRule {
    batch: usize,
    time: usize,
    dim: usize,
    heads: usize,
    max_dist: usize,
    /// Softmax probabilities `[B, H, T, T]`.
    probs: Vec<f64>,
}

impl Backward for AttentionRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, t, d, h) = (self.batch, self.time, self.dim, self.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let has_bias = inputs.len() == 4;
        let mut dq = vec![0.0; b * t * d];
        let mut dk = vec![0.0; b * t * d];
        let mut dv = vec![0.0; b * t * d];
        let mut dbias = has_bias.then(|| vec![0.0; inputs[3].numel()]);
        let mut dp = vec![0.0; t * t];
        for bi in 0..b {
            for hi in 0..h {
                let off = bi * t * d + hi * dh;
                let p = &self.probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                // dV = P^T dO
                if needs[2] {
                    gemm(
                        t,
                        t,
                        dh,
                        1.0,
                        Mat::t(p, 0, t),
                        Mat::strided(g, off, d, 1),
                        0.0,
                        MatMut::strided(&mut dv, off, d, 1),
                    );
                }
                // dP = dO V^T
                gemm(
                    t,
                    dh,
                    t,
                    1.0,
                    Mat::strided(g, off, d, 1),
                    Mat::strided(v, off, 1, d),
                    0.0,
                    MatMut::rows(&mut dp, 0, t),
                );
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..t {
                    let row = i * t..(i + 1) * t;
                    let dot: f64 = dp[row.clone()]
                        .iter()
                        .zip(&p[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in 0..t {
                        dp[i * t + j] = p[i * t + j] * (dp[i * t + j] - dot);
                    }
                }
                if let Some(db) = dbias.as_mut() {
                    let w = 2 * self.max_dist + 1;
                    for i in 0..t {
                        for j in 0..t {
                            db[hi * w + offset_index(i, j, self.max_dist)] += dp[i * t + j];
                        }
                    }
                }
                if needs[0] {
                    gemm(
                        t,
                        t,
                        dh,
                        scale,
                        Mat::rows(&dp, 0, t),
                        Mat::strided(k, off, d, 1),
                        0.0,
                        MatMut::strided(&mut dq, off, d, 1),
                    );
                }
                if needs[1] {
                    gemm(
                        t,
                        t,
                        dh,
                        scale,
                        Mat::t(&dp, 0, t),
                        Mat::strided(q, off, d, 1),
                        0.0,
                        MatMut::strided(&mut dk, off, d, 1),
                    );
                }
            }
        }
        let mut out = vec![Some(dq), Some(dk), Some(dv)];
        if has_bias {
            out.push(dbias);
        }
        out
    }
}

impl Tape {
    /// Attention over `q, k, v: [B, T, D]` split into `heads` heads.
    /// `rel_bias` is an optional `[heads, 2 * max_dist + 1]` table.
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        rel_bias: Option<(Var, usize)>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let &[b, t, d] = shape.as_slice() else {
            return Err(Error::dim("attention", &shape, &[0, 0, 0]));
        };
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("attention", &shape, self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention dimension {d} is not divisible by {heads} heads"
            )));
        }
        let max_dist = rel_bias.map(|(_, m)| m).unwrap_or(0);
        if let Some((tab, m)) = rel_bias {
            let ts = self.shape(tab);
            if ts != [heads, 2 * m + 1] {
                return Err(Error::dim(
                    "attention relative bias",
                    ts,
                    &[heads, 2 * m + 1],
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let table = rel_bias.map(|(tab, _)| self.value(tab).data());
        let mut probs = vec![0.0; b * heads * t * t];
        let mut y = vec![0.0; b * t * d];
        for bi in 0..b {
            for hi in 0..heads {
                let off = bi * t * d + hi * dh;
                let p_off = (bi * heads + hi) * t * t;
                gemm(
                    t,
                    dh,
                    t,
                    scale,
                    Mat::strided(qd, off, d, 1),
                    Mat::strided(kd, off, 1, d),
                    0.0,
                    MatMut::rows(&mut probs, p_off, t),
                );
                if let Some(tab) = table {
                    let w = 2 * max_dist + 1;
                    for i in 0..t {
                        for j in 0..t {
                            probs[p_off + i * t + j] += tab[hi * w + offset_index(i, j, max_dist)];
                        }
                    }
                }
                softmax_rows(&mut probs[p_off..p_off + t * t], t);
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    Mat::rows(&probs, p_off, t),
                    Mat::strided(vd, off, d, 1),
                    0.0,
                    MatMut::strided(&mut y, off, d, 1),
                );
            }
        }
        let out = Tensor::new(&shape, y)?;
        let rule = Box::new(AttentionRule {
            batch: b,
            time: t,
            dim: d,
            heads,
            max_dist,
            probs,
        });
        Ok(match rel_bias {
            Some((tab, _)) => self.record(&[q, k, v, tab], out, rule),
            None => self.record(&[q, k, v], out, rule),
        })
    }
}

/// Sinusoidal absolute position encodings `[T, D]`.
pub fn sinusoidal_positions(time: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; time * dim];
    for t in 0..time {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
