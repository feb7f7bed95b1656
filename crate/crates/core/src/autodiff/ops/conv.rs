//! Same-padded 1-D convolution over the time axis of `[B, T, C]` tensors.

use crate::autodiff::gemm::{gemm, Mat, MatMut};
use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// One `K`-tap filter per channel; kernel `[K, C]`.
    Depthwise,
    /// Kernel width 1; kernel `[Cin, Cout]`.
    Pointwise,
    /// Dense over channels; kernel `[K, Cin, Cout]`.
    Full,
}

/// Output rows `t` for which input row `t + k - pad` exists.
fn valid_range(t: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (t + pad).saturating_sub(k).min(t);
    (lo, hi.max(lo))
}

struct Depthwise {
    batch: usize,
    time: usize,
    channels: usize,
    width: usize,
}

impl Backward for Depthwise {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, t, c, kw) = (self.batch, self.time, self.channels, self.width);
        let pad = kw / 2;
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            let base = bi * t * c;
            for k in 0..kw {
                let (lo, hi) = valid_range(t, k, pad);
                let wk = &w[k * c..(k + 1) * c];
                for ti in lo..hi {
                    let o = base + ti * c;
                    let s = base + (ti + k - pad) * c;
                    if let Some(dx) = dx.as_mut() {
                        for ci in 0..c {
                            dx[s + ci] += g[o + ci] * wk[ci];
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for ci in 0..c {
                            dw[k * c + ci] += g[o + ci] * x[s + ci];
                        }
                    }
                }
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| bias_grad(g, c)));
        }
        out
    }
}

struct FullConv {
    batch: usize,
    time: usize,
    cin: usize,
    cout: usize,
    width: usize,
}

impl Backward for FullConv {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, t, ci, co, kw) = (self.batch, self.time, self.cin, self.cout, self.width);
        let pad = kw / 2;
        let x = inputs[0].data();
        let w = inputs[1].data();
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            for k in 0..kw {
                let (lo, hi) = valid_range(t, k, pad);
                if hi <= lo {
                    continue;
                }
                let rows = hi - lo;
                let g_off = (bi * t + lo) * co;
                let x_off = (bi * t + lo + k - pad) * ci;
                let w_off = k * ci * co;
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        rows,
                        co,
                        ci,
                        1.0,
                        Mat::rows(g, g_off, co),
                        Mat::t(w, w_off, co),
                        1.0,
                        MatMut::rows(dx, x_off, ci),
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(
                        ci,
                        rows,
                        co,
                        1.0,
                        Mat::t(x, x_off, ci),
                        Mat::rows(g, g_off, co),
                        1.0,
                        MatMut::rows(dw, w_off, co),
                    );
                }
            }
        }
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| bias_grad(g, co)));
        }
        out
    }
}

fn bias_grad(g: &[f64], c: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for row in g.chunks_exact(c) {
        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
    }
    db
}

impl Tape {
    /// Same-padded convolution of `x[B, T, C]` along time.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        mode: ConvMode,
    ) -> Result<Var> {
        match mode {
            ConvMode::Pointwise => self.linear(x, kernel, bias),
            ConvMode::Depthwise => self.conv_depthwise(x, kernel, bias),
            ConvMode::Full => self.conv_full(x, kernel, bias),
        }
    }

    fn conv_depthwise(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (&[b, t, c], &[kw, kc]) = (vx.shape(), vk.shape()) else {
            return Err(Error::dim("conv1d depthwise", vx.shape(), vk.shape()));
        };
        if kc != c {
            return Err(Error::dim("conv1d depthwise", vx.shape(), vk.shape()));
        }
        check_width(kw)?;
        let pad = kw / 2;
        let mut y = vec![0.0; b * t * c];
        if let Some(bias) = bias {
            let vb = self.value(bias);
            if vb.numel() != c {
                return Err(Error::dim("conv1d bias", vk.shape(), vb.shape()));
            }
            for row in y.chunks_exact_mut(c) {
                row.copy_from_slice(vb.data());
            }
        }
        let (xd, wd) = (vx.data(), vk.data());
        for bi in 0..b {
            let base = bi * t * c;
            for k in 0..kw {
                let (lo, hi) = valid_range(t, k, pad);
                let wk = &wd[k * c..(k + 1) * c];
                for ti in lo..hi {
                    let o = base + ti * c;
                    let s = base + (ti + k - pad) * c;
                    for ci in 0..c {
                        y[o + ci] += xd[s + ci] * wk[ci];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, t, c], y)?;
        let rule = Box::new(Depthwise {
            batch: b,
            time: t,
            channels: c,
            width: kw,
        });
        Ok(match bias {
            Some(bias) => self.record(&[x, kernel, bias], out, rule),
            None => self.record(&[x, kernel], out, rule),
        })
    }

    fn conv_full(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (&[b, t, ci], &[kw, kci, co]) = (vx.shape(), vk.shape()) else {
            return Err(Error::dim("conv1d full", vx.shape(), vk.shape()));
        };
        if kci != ci {
            return Err(Error::dim("conv1d full", vx.shape(), vk.shape()));
        }
        check_width(kw)?;
        let pad = kw / 2;
        let mut y = vec![0.0; b * t * co];
        if let Some(bias) = bias {
            let vb = self.value(bias);
            if vb.numel() != co {
                return Err(Error::dim("conv1d bias", vk.shape(), vb.shape()));
            }
            for row in y.chunks_exact_mut(co) {
                row.copy_from_slice(vb.data());
            }
        }
        for bi in 0..b {
            for k in 0..kw {
                let (lo, hi) = valid_range(t, k, pad);
                if hi <= lo {
                    continue;
                }
                gemm(
                    hi - lo,
                    ci,
                    co,
                    1.0,
                    Mat::rows(vx.data(), (bi * t + lo + k - pad) * ci, ci),
                    Mat::rows(vk.data(), k * ci * co, co),
                    1.0,
                    MatMut::rows(&mut y, (bi * t + lo) * co, co),
                );
            }
        }
        let out = Tensor::new(&[b, t, co], y)?;
        let rule = Box::new(FullConv {
            batch: b,
            time: t,
            cin: ci,
            cout: co,
            width: kw,
        });
        Ok(match bias {
            Some(bias) => self.record(&[x, kernel, bias], out, rule),
            None => self.record(&[x, kernel], out, rule),
        })
    }
}

fn check_width(kw: usize) -> Result<()> {
    if kw.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "convolution kernel width must be odd for same padding, got {kw}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_delta_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x = tape.leaf(Tensor::new(&[1, 4, 3], data.clone()).unwrap(), true);
        let k = tape.leaf(
            Tensor::new(&[3, 3], vec![0., 0., 0., 1., 1., 1., 0., 0., 0.]).unwrap(),
            true,
        );
        let y = tape.conv1d(x, k, None, ConvMode::Depthwise).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn even_width_is_a_configuration_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 2]), true);
        let k = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(
            tape.conv1d(x, k, None, ConvMode::Depthwise),
            Err(Error::Config(_))
        ));
        let k = tape.leaf(Tensor::zeros(&[4, 2, 2]), true);
        assert!(matches!(
            tape.conv1d(x, k, None, ConvMode::Full),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn valid_ranges() {
        assert_eq!(valid_range(5, 0, 1), (1, 5));
        assert_eq!(valid_range(5, 1, 1), (0, 5));
        assert_eq!(valid_range(5, 2, 1), (0, 4));
        assert_eq!(valid_range(2, 6, 3), (0, 0));
    }
}
