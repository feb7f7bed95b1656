//! Layer and batch normalization.
//!
//! Batch normalization in training mode normalizes over fixed-size groups of
//! consecutive batch elements ("ghost" batches). With a fixed group size the
//! statistics do not depend on how a batch is split into micro-batches, so
//! gradient accumulation stays exact.

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Normalization family, as selected by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
}

/// Shared backward for `y = gamma * xhat + beta` where `xhat` is normalized
/// over sets of `n` elements of one channel (batch norm) or over one row
/// (layer norm).
struct LayerNormRule {
    width: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl Backward for LayerNormRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let c = self.width;
        let gamma = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            let n = c as f64;
            for (r, ((dxr, gr), xr)) in dx
                .chunks_exact_mut(c)
                .zip(g.chunks_exact(c))
                .zip(self.xhat.chunks_exact(c))
                .enumerate()
            {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for i in 0..c {
                    let d = gr[i] * gamma[i];
                    s1 += d;
                    s2 += d * xr[i];
                }
                let rs = self.rstd[r];
                for i in 0..c {
                    let d = gr[i] * gamma[i];
                    dxr[i] = rs / n * (n * d - s1 - xr[i] * s2);
                }
            }
            dx
        });
        let (dg, db) = affine_grads(g, &self.xhat, c, needs[1], needs[2]);
        vec![dx, dg, db]
    }
}

fn affine_grads(
    g: &[f64],
    xhat: &[f64],
    c: usize,
    need_g: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let dg = need_g.then(|| {
        let mut dg = vec![0.0; c];
        for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for i in 0..c {
                dg[i] += gr[i] * xr[i];
            }
        }
        dg
    });
    let db = need_b.then(|| {
        let mut db = vec![0.0; c];
        for gr in g.chunks_exact(c) {
            db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
        }
        db
    });
    (dg, db)
}

struct BatchNormTrainRule {
    channels: usize,
    /// Rows (of width `channels`) per normalization group.
    group_rows: usize,
    xhat: Vec<f64>,
    /// `[groups, channels]`
    rstd: Vec<f64>,
}

impl Backward for BatchNormTrainRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let gamma = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            let n = self.group_rows as f64;
            let span = self.group_rows * c;
            for (gi, ((dxg, gg), xg)) in dx
                .chunks_mut(span)
                .zip(g.chunks(span))
                .zip(self.xhat.chunks(span))
                .enumerate()
            {
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for (gr, xr) in gg.chunks_exact(c).zip(xg.chunks_exact(c)) {
                    for i in 0..c {
                        let d = gr[i] * gamma[i];
                        s1[i] += d;
                        s2[i] += d * xr[i];
                    }
                }
                let rs = &self.rstd[gi * c..(gi + 1) * c];
                for ((dxr, gr), xr) in dxg
                    .chunks_exact_mut(c)
                    .zip(gg.chunks_exact(c))
                    .zip(xg.chunks_exact(c))
                {
                    for i in 0..c {
                        let d = gr[i] * gamma[i];
                        dxr[i] = rs[i] / n * (n * d - s1[i] - xr[i] * s2[i]);
                    }
                }
            }
            dx
        });
        let (dg, db) = affine_grads(g, &self.xhat, c, needs[1], needs[2]);
        vec![dx, dg, db]
    }
}

struct BatchNormEvalRule {
    channels: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNormEvalRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let gamma = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = g.to_vec();
            for row in dx.chunks_exact_mut(c) {
                for i in 0..c {
                    row[i] *= gamma[i] * self.inv_std[i];
                }
            }
            dx
        });
        let (dg, db) = affine_grads(g, &self.xhat, c, needs[1], needs[2]);
        vec![dx, dg, db]
    }
}

/// Statistics of one batch-norm group, used to update running estimates.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl Tape {
    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if vx.shape().is_empty() || self.value(gamma).numel() != c || self.value(beta).numel() != c
        {
            return Err(Error::dim(op, vx.shape(), self.value(gamma).shape()));
        }
        Ok(c)
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.check_affine("layer_norm", x, gamma, beta)?;
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / c;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (row[i] - mean) * rs;
                xhat[r * c + i] = h;
                y[r * c + i] = vg[i] * h + vb[i];
            }
        }
        let out = Tensor::new(vx.shape(), y)?;
        Ok(self.record(
            &[x, gamma, beta],
            out,
            Box::new(LayerNormRule {
                width: c,
                xhat,
                rstd,
            }),
        ))
    }

    /// Training-mode batch normalization over groups of `group` consecutive
    /// batch elements (`None` = the whole batch). `x` is `[B, ..., C]`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group: Option<usize>,
    ) -> Result<(Var, Vec<GroupStats>)> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        let vx = self.value(x);
        if vx.shape().len() < 2 {
            return Err(Error::dim("batch_norm", vx.shape(), &[0, c]));
        }
        let batch = vx.shape()[0];
        let group = group.unwrap_or(batch);
        if batch < 2 || group < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm in training mode needs at least 2 batch elements per group (batch {batch}, group {group})"
            )));
        }
        if !batch.is_multiple_of(group) {
            return Err(Error::Config(format!(
                "batch {batch} is not a multiple of the batch-norm group {group}"
            )));
        }
        let rows_per_item = vx.numel() / (batch * c);
        let group_rows = group * rows_per_item;
        let groups = batch / group;
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let n = group_rows as f64;

        let mut xhat = vec![0.0; vx.numel()];
        let mut y = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; groups * c];
        let mut stats = Vec::with_capacity(groups);
        for gi in 0..groups {
            let span = gi * group_rows * c..(gi + 1) * group_rows * c;
            let data = &vx.data()[span.clone()];
            let mut mean = vec![0.0; c];
            for row in data.chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; c];
            for row in data.chunks_exact(c) {
                for i in 0..c {
                    let d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
            let ss = var.clone();
            var.iter_mut().for_each(|v| *v /= n);
            let rs: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            for (r, row) in data.chunks_exact(c).enumerate() {
                let o = span.start + r * c;
                for i in 0..c {
                    let h = (row[i] - mean[i]) * rs[i];
                    xhat[o + i] = h;
                    y[o + i] = vg[i] * h + vb[i];
                }
            }
            rstd[gi * c..(gi + 1) * c].copy_from_slice(&rs);
            stats.push(GroupStats {
                mean,
                var: ss.iter().map(|s| s / (n - 1.0)).collect(),
            });
        }
        let out = Tensor::new(vx.shape(), y)?;
        let rule = BatchNormTrainRule {
            channels: c,
            group_rows,
            xhat,
            rstd,
        };
        Ok((self.record(&[x, gamma, beta], out, Box::new(rule)), stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(
                "batch_norm running stats",
                self.shape(x),
                &[running_mean.len()],
            ));
        }
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        let mut xhat = vec![0.0; vx.numel()];
        let mut y = vec![0.0; vx.numel()];
        for (r, row) in vx.data().chunks_exact(c).enumerate() {
            for i in 0..c {
                let h = (row[i] - running_mean[i]) * inv_std[i];
                xhat[r * c + i] = h;
                y[r * c + i] = vg[i] * h + vb[i];
            }
        }
        let out = Tensor::new(vx.shape(), y)?;
        Ok(self.record(
            &[x, gamma, beta],
            out,
            Box::new(BatchNormEvalRule {
                channels: c,
                xhat,
                inv_std,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 5], 3.25), true);
        let g = tape.leaf(Tensor::full(&[5], 1.0), true);
        let b = tape.leaf(Tensor::zeros(&[5]), true);
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap(),
            true,
        );
        let g = tape.leaf(Tensor::new(&[2], vec![2.0, 3.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(&[2], vec![0.5, -1.0]).unwrap(), true);
        let y = tape
            .batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0])
            .unwrap();
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        let expect = [2.0 * s + 0.5, -6.0 * s - 1.0, 1.0 * s + 0.5, 12.0 * s - 1.0];
        for (a, e) in tape.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 3]), true);
        let g = tape.leaf(Tensor::full(&[3], 1.0), true);
        let b = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(
            tape.batch_norm_train(x, g, b, None),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn ghost_groups_match_separate_batches() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::full(&[3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let x = tape.leaf(Tensor::new(&[4, 2, 3], data.clone()).unwrap(), false);
        let (y, stats) = tape.batch_norm_train(x, g, b, Some(2)).unwrap();
        assert_eq!(stats.len(), 2);
        let full = tape.value(y).data().to_vec();
        let x2 = tape.leaf(Tensor::new(&[2, 2, 3], data[12..].to_vec()).unwrap(), false);
        let (y2, _) = tape.batch_norm_train(x2, g, b, None).unwrap();
        assert_eq!(&full[12..], tape.value(y2).data());
    }
}
