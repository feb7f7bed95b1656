//! Dense layers: affine maps, batched products, a tanh recurrence and
//! softmax cross-entropy.

use crate::autodiff::gemm::{gemm, Mat, MatMut};
use crate::autodiff::ops::elementwise::softmax_rows;
use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

struct Linear {
    rows: usize,
    din: usize,
    dout: usize,
}

impl Backward for Linear {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (r, di, d) = (self.rows, self.din, self.dout);
        let x = inputs[0].data();
        let w = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; r * di];
            gemm(
                r,
                d,
                di,
                1.0,
                Mat::rows(g, 0, d),
                Mat::t(w, 0, d),
                0.0,
                MatMut::rows(&mut dx, 0, di),
            );
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; di * d];
            gemm(
                di,
                r,
                d,
                1.0,
                Mat::t(x, 0, di),
                Mat::rows(g, 0, d),
                0.0,
                MatMut::rows(&mut dw, 0, d),
            );
            dw
        });
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            }));
        }
        out
    }
}

/// `c[G, M, N] = a[G, M, K] * b[G, N, K]^T`
struct BmmNt {
    groups: usize,
    m: usize,
    n: usize,
    k: usize,
}

impl Backward for BmmNt {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (gr, m, n, k) = (self.groups, self.m, self.n, self.k);
        let a = inputs[0].data();
        let b = inputs[1].data();
        let da = needs[0].then(|| {
            let mut da = vec![0.0; gr * m * k];
            for i in 0..gr {
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    Mat::rows(g, i * m * n, n),
                    Mat::rows(b, i * n * k, k),
                    0.0,
                    MatMut::rows(&mut da, i * m * k, k),
                );
            }
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; gr * n * k];
            for i in 0..gr {
                gemm(
                    n,
                    m,
                    k,
                    1.0,
                    Mat::t(g, i * m * n, n),
                    Mat::rows(a, i * m * k, k),
                    0.0,
                    MatMut::rows(&mut db, i * n * k, k),
                );
            }
            db
        });
        vec![da, db]
    }
}

struct CrossEntropy {
    probs: Vec<f64>,
    targets: Vec<usize>,
    classes: usize,
}

impl Backward for CrossEntropy {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.targets.len();
        let scale = g[0] / n as f64;
        let mut dx = self.probs.clone();
        for (i, &t) in self.targets.iter().enumerate() {
            dx[i * self.classes + t] -= 1.0;
        }
        dx.iter_mut().for_each(|v| *v *= scale);
        vec![Some(dx)]
    }
}

/// Elman recurrence `h_t = tanh(x_t Wx + h_{t-1} Wh + b)` with `h_{-1} = 0`.
struct Rnn {
    batch: usize,
    time: usize,
    din: usize,
    hidden: usize,
}

impl Backward for Rnn {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, t, di, h) = (self.batch, self.time, self.din, self.hidden);
        let x = inputs[0].data();
        let wx = inputs[1].data();
        let wh = inputs[2].data();
        let hs = out.data();

        // dpre[b, t, :] = (g_t + dpre_{t+1} Wh^T) * (1 - h_t^2)
        let mut dpre = vec![0.0; b * t * h];
        let mut carry = vec![0.0; h];
        for bi in 0..b {
            carry.iter_mut().for_each(|c| *c = 0.0);
            for ti in (0..t).rev() {
                let o = (bi * t + ti) * h;
                for j in 0..h {
                    let hv = hs[o + j];
                    dpre[o + j] = (g[o + j] + carry[j]) * (1.0 - hv * hv);
                }
                if ti > 0 {
                    gemm(
                        1,
                        h,
                        h,
                        1.0,
                        Mat::rows(&dpre, o, h),
                        Mat::t(wh, 0, h),
                        0.0,
                        MatMut::rows(&mut carry, 0, h),
                    );
                }
            }
        }

        let rows = b * t;
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; rows * di];
            gemm(
                rows,
                h,
                di,
                1.0,
                Mat::rows(&dpre, 0, h),
                Mat::t(wx, 0, h),
                0.0,
                MatMut::rows(&mut dx, 0, di),
            );
            dx
        });
        let dwx = needs[1].then(|| {
            let mut dw = vec![0.0; di * h];
            gemm(
                di,
                rows,
                h,
                1.0,
                Mat::t(x, 0, di),
                Mat::rows(&dpre, 0, h),
                0.0,
                MatMut::rows(&mut dw, 0, h),
            );
            dw
        });
        let dwh = needs[2].then(|| {
            let mut dw = vec![0.0; h * h];
            for bi in 0..b {
                if t > 1 {
                    // sum_t h_{t-1}^T dpre_t
                    let base = bi * t * h;
                    gemm(
                        h,
                        t - 1,
                        h,
                        1.0,
                        Mat::t(hs, base, h),
                        Mat::rows(&dpre, base + h, h),
                        1.0,
                        MatMut::rows(&mut dw, 0, h),
                    );
                }
            }
            dw
        });
        let db = needs[3].then(|| {
            let mut db = vec![0.0; h];
            for row in dpre.chunks_exact(h) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            db
        });
        vec![dx, dwx, dwh, db]
    }
}

impl Tape {
    /// `y = x W + b` over the last axis of `x`; leading axes are batch axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let &[din, dout] = vw.shape() else {
            return Err(Error::dim("linear", vx.shape(), vw.shape()));
        };
        if vx.shape().is_empty() || vx.last_dim() != din {
            return Err(Error::dim("linear", vx.shape(), vw.shape()));
        }
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.numel() != dout {
                return Err(Error::dim("linear bias", vw.shape(), vb.shape()));
            }
        }
        let rows = vx.numel() / din;
        let mut y = vec![0.0; rows * dout];
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in y.chunks_exact_mut(dout) {
                row.copy_from_slice(vb);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            din,
            dout,
            1.0,
            Mat::rows(vx.data(), 0, din),
            Mat::rows(vw.data(), 0, dout),
            beta,
            MatMut::rows(&mut y, 0, dout),
        );
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, y)?;
        let rule = Box::new(Linear { rows, din, dout });
        Ok(match b {
            Some(b) => self.record(&[x, w, b], out, rule),
            None => self.record(&[x, w], out, rule),
        })
    }

    /// Batched `a[G, M, K] * b[G, N, K]^T -> [G, M, N]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[ga, m, k], &[gb, n, kb]) = (va.shape(), vb.shape()) else {
            return Err(Error::dim("bmm_nt", va.shape(), vb.shape()));
        };
        if ga != gb || k != kb {
            return Err(Error::dim("bmm_nt", va.shape(), vb.shape()));
        }
        let mut c = vec![0.0; ga * m * n];
        for i in 0..ga {
            gemm(
                m,
                k,
                n,
                1.0,
                Mat::rows(va.data(), i * m * k, k),
                Mat::t(vb.data(), i * n * k, k),
                0.0,
                MatMut::rows(&mut c, i * m * n, n),
            );
        }
        let out = Tensor::new(&[ga, m, n], c)?;
        Ok(self.record(
            &[a, b],
            out,
            Box::new(BmmNt {
                groups: ga,
                m,
                n,
                k,
            }),
        ))
    }

    /// Mean softmax cross-entropy of `logits[.., C]` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let c = v.last_dim();
        let rows = v.numel() / c.max(1);
        if rows != targets.len() || rows == 0 {
            return Err(Error::dim("cross_entropy", v.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let mut probs = v.data().to_vec();
        softmax_rows(&mut probs, c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[i * c + t].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / rows as f64;
        let rule = CrossEntropy {
            probs,
            targets: targets.to_vec(),
            classes: c,
        };
        Ok(self.record(&[logits], Tensor::scalar(loss), Box::new(rule)))
    }

    /// Single-layer tanh recurrence over `x[B, T, Din]` returning all hidden states `[B, T, H]`.
    pub fn rnn_tanh(&mut self, x: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        let (vx, vwx, vwh, vb) = (self.value(x), self.value(wx), self.value(wh), self.value(b));
        let (&[bs, t, di], &[di2, h]) = (vx.shape(), vwx.shape()) else {
            return Err(Error::dim("rnn_tanh", vx.shape(), vwx.shape()));
        };
        if di != di2 || vwh.shape() != [h, h] || vb.numel() != h {
            return Err(Error::dim("rnn_tanh", vx.shape(), vwh.shape()));
        }
        let rows = bs * t;
        let mut hs = vec![0.0; rows * h];
        for row in hs.chunks_exact_mut(h) {
            row.copy_from_slice(vb.data());
        }
        gemm(
            rows,
            di,
            h,
            1.0,
            Mat::rows(vx.data(), 0, di),
            Mat::rows(vwx.data(), 0, h),
            1.0,
            MatMut::rows(&mut hs, 0, h),
        );
        for bi in 0..bs {
            for ti in 0..t {
                let o = (bi * t + ti) * h;
                if ti > 0 {
                    let (prev, cur) = hs.split_at_mut(o);
                    gemm(
                        1,
                        h,
                        h,
                        1.0,
                        Mat::rows(prev, o - h, h),
                        Mat::rows(vwh.data(), 0, h),
                        1.0,
                        MatMut::rows(cur, 0, h),
                    );
                }
                hs[o..o + h].iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        let out = Tensor::new(&[bs, t, h], hs)?;
        let rule = Rnn {
            batch: bs,
            time: t,
            din: di,
            hidden: h,
        };
        Ok(self.record(&[x, wx, wh, b], out, Box::new(rule)))
    }
}
