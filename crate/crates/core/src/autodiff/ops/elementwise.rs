//! Elementwise arithmetic, activations, reductions and reshapes.

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Nonlinearities selectable by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Swish,
    Tanh,
    SoftmaxLastDim,
    GluLastDim,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Swish,
    Tanh,
    Exp,
    Abs,
    Log1p,
    Square,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Swish => x * sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Log1p => x.ln_1p(),
            UnaryKind::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Exp => y,
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Log1p => 1.0 / (1.0 + x),
            UnaryKind::Square => 2.0 * x,
        }
    }
}

struct Unary(UnaryKind);

impl Backward for Unary {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = out.data();
        let dx = g
            .iter()
            .zip(x.iter().zip(y))
            .map(|(g, (&x, &y))| g * self.0.deriv(x, y))
            .collect();
        vec![Some(dx)]
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary(BinaryKind);

impl Backward for Binary {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        match self.0 {
            BinaryKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            BinaryKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            BinaryKind::Mul => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                let da = needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect());
                let db = needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect());
                vec![da, db]
            }
        }
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

/// Gradient passes through unchanged (shift by a constant, reshape).
struct Identity;

impl Backward for Identity {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// `x[..., C] + b[C]`
struct AddLast {
    channels: usize,
}

impl Backward for AddLast {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let db = needs[1].then(|| {
            let mut db = vec![0.0; self.channels];
            for row in g.chunks_exact(self.channels) {
                db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
            }
            db
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }
}

/// `x[B, T, C] * s[B, C]`, broadcasting over T.
struct MulChannels {
    batch: usize,
    time: usize,
    channels: usize,
}

impl Backward for MulChannels {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (b, t, c) = (self.batch, self.time, self.channels);
        let x = inputs[0].data();
        let s = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; b * t * c];
            for bi in 0..b {
                let sc = &s[bi * c..(bi + 1) * c];
                for ti in 0..t {
                    let o = (bi * t + ti) * c;
                    for ci in 0..c {
                        dx[o + ci] = g[o + ci] * sc[ci];
                    }
                }
            }
            dx
        });
        let ds = needs[1].then(|| {
            let mut ds = vec![0.0; b * c];
            for bi in 0..b {
                for ti in 0..t {
                    let o = (bi * t + ti) * c;
                    for ci in 0..c {
                        ds[bi * c + ci] += g[o + ci] * x[o + ci];
                    }
                }
            }
            ds
        });
        vec![dx, ds]
    }
}

struct SumAll {
    scale: f64,
    n: usize,
}

impl Backward for SumAll {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; self.n])]
    }
}

/// Mean over the middle axis of `[B, T, C]`.
struct MeanTime {
    batch: usize,
    time: usize,
    channels: usize,
}

impl Backward for MeanTime {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (b, t, c) = (self.batch, self.time, self.channels);
        let inv = 1.0 / t as f64;
        let mut dx = vec![0.0; b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                for ci in 0..c {
                    dx[o + ci] = g[bi * c + ci] * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct Select {
    index: usize,
    n: usize,
}

impl Backward for Select {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.n];
        dx[self.index] = g[0];
        vec![Some(dx)]
    }
}

/// Keeps the first `keep` entries of the last axis.
struct CropLast {
    rows: usize,
    from: usize,
    keep: usize,
}

impl Backward for CropLast {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.rows * self.from];
        for r in 0..self.rows {
            dx[r * self.from..r * self.from + self.keep]
                .copy_from_slice(&g[r * self.keep..(r + 1) * self.keep]);
        }
        vec![Some(dx)]
    }
}

struct SoftmaxLast {
    width: usize,
}

impl Backward for SoftmaxLast {
    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; g.len()];
        for ((d, y), g) in dx
            .chunks_exact_mut(self.width)
            .zip(out.data().chunks_exact(self.width))
            .zip(g.chunks_exact(self.width))
        {
            let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
            for ((d, y), g) in d.iter_mut().zip(y).zip(g) {
                *d = y * (g - dot);
            }
        }
        vec![Some(dx)]
    }
}

pub(crate) fn softmax_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

struct GluLast {
    half: usize,
}

impl Backward for GluLast {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let h = self.half;
        let x = inputs[0].data();
        let mut dx = vec![0.0; x.len()];
        for ((xr, dr), gr) in x
            .chunks_exact(2 * h)
            .zip(dx.chunks_exact_mut(2 * h))
            .zip(g.chunks_exact(h))
        {
            for i in 0..h {
                let a = xr[i];
                let s = sigmoid(xr[h + i]);
                dr[i] = gr[i] * s;
                dr[h + i] = gr[i] * a * s * (1.0 - s);
            }
        }
        vec![Some(dx)]
    }
}

impl Tape {
    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| kind.apply(a)).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        self.record(&[x], out, Box::new(Unary(kind)))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.record(&[a, b], out, Box::new(Binary(kind))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| a * factor).collect())
            .expect("same shape");
        self.record(&[x], out, Box::new(Scale(factor)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape(), v.data().iter().map(|a| a + c).collect()).expect("same shape");
        self.record(&[x], out, Box::new(Identity))
    }

    /// Adds a constant tensor of the same shape; no gradient flows to it.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != c.shape() {
            return Err(Error::dim("add_const", v.shape(), c.shape()));
        }
        let out = Tensor::new(
            v.shape(),
            v.data().iter().zip(c.data()).map(|(a, b)| a + b).collect(),
        )?;
        Ok(self.record(&[x], out, Box::new(Identity)))
    }

    /// `x[..., C] + b[C]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.last_dim();
        if vb.numel() != c || vx.shape().is_empty() {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(vb.data()).for_each(|(r, b)| *r += b);
        }
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.record(&[x, b], out, Box::new(AddLast { channels: c })))
    }

    /// Per-channel rescale `x[B, T, C] * s[B, C]`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let &[b, t, c] = vx.shape() else {
            return Err(Error::dim("mul_channels", vx.shape(), vs.shape()));
        };
        if vs.shape() != [b, c] {
            return Err(Error::dim("mul_channels", vx.shape(), vs.shape()));
        }
        let mut data = vx.data().to_vec();
        for bi in 0..b {
            let sc = &vs.data()[bi * c..(bi + 1) * c];
            for row in data[bi * t * c..(bi + 1) * t * c].chunks_exact_mut(c) {
                row.iter_mut().zip(sc).for_each(|(r, s)| *r *= s);
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.record(
            &[x, s],
            out,
            Box::new(MulChannels {
                batch: b,
                time: t,
                channels: c,
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Swish)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    /// `ln(1 + x)`; used for log-compressing nonnegative magnitudes.
    pub fn log1p(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log1p)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        Ok(match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Swish => self.swish(x),
            Activation::Tanh => self.tanh(x),
            Activation::SoftmaxLastDim => self.softmax(x),
            Activation::GluLastDim => self.glu(x)?,
        })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = v.last_dim();
        let mut data = v.data().to_vec();
        softmax_rows(&mut data, w);
        let out = Tensor::new(v.shape(), data).expect("same shape");
        self.record(&[x], out, Box::new(SoftmaxLast { width: w }))
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` for `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let w = v.last_dim();
        if v.shape().is_empty() || !w.is_multiple_of(2) {
            return Err(Error::Dimension {
                op: "glu (last dimension must be even)",
                lhs: v.shape().to_vec(),
                rhs: vec![w],
            });
        }
        let h = w / 2;
        let mut data = Vec::with_capacity(v.numel() / 2);
        for row in v.data().chunks_exact(w) {
            data.extend((0..h).map(|i| row[i] * sigmoid(row[h + i])));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(&[x], out, Box::new(GluLast { half: h })))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.numel();
        let s = v.data().iter().sum();
        self.record(&[x], Tensor::scalar(s), Box::new(SumAll { scale: 1.0, n }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.numel();
        let s: f64 = v.data().iter().sum();
        self.record(
            &[x],
            Tensor::scalar(s / n as f64),
            Box::new(SumAll {
                scale: 1.0 / n as f64,
                n,
            }),
        )
    }

    /// Mean of `|a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// `[B, T, C] -> [B, C]` mean over time.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let &[b, t, c] = v.shape() else {
            return Err(Error::dim("mean_time", v.shape(), &[0, 0, 0]));
        };
        if t == 0 {
            return Err(Error::Input("mean over an empty time axis".into()));
        }
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            for row in v.data()[bi * t * c..(bi + 1) * t * c].chunks_exact(c) {
                data[bi * c..(bi + 1) * c]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, r)| *d += r);
            }
        }
        data.iter_mut().for_each(|d| *d /= t as f64);
        let out = Tensor::new(&[b, c], data)?;
        Ok(self.record(
            &[x],
            out,
            Box::new(MeanTime {
                batch: b,
                time: t,
                channels: c,
            }),
        ))
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        let n = v.numel();
        if index >= n {
            return Err(Error::Contract(format!(
                "select index {index} out of range for {n} elements"
            )));
        }
        let out = Tensor::scalar(v.data()[index]);
        Ok(self.record(&[x], out, Box::new(Select { index, n })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(&[x], out, Box::new(Identity)))
    }

    /// Keeps the leading `keep` entries along the last axis.
    pub fn crop_last(&mut self, x: Var, keep: usize) -> Result<Var> {
        let v = self.value(x);
        let from = v.last_dim();
        if keep > from || v.shape().is_empty() {
            return Err(Error::dim("crop_last", v.shape(), &[keep]));
        }
        let rows = v.numel() / from.max(1);
        let mut data = Vec::with_capacity(rows * keep);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * from..r * from + keep]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = keep;
        let out = Tensor::new(&shape, data)?;
        Ok(self.record(&[x], out, Box::new(CropLast { rows, from, keep })))
    }

    /// Splits `[B, N]` into non-overlapping frames `[B, N / len, len]`, dropping the remainder.
    pub fn frames(&mut self, x: Var, len: usize) -> Result<Var> {
        let v = self.value(x);
        let &[b, n] = v.shape() else {
            return Err(Error::dim("frames", v.shape(), &[0, 0]));
        };
        if len == 0 || n < len {
            return Err(Error::Input(format!(
                "cannot cut {n} samples into frames of {len}"
            )));
        }
        let count = n / len;
        let cropped = if count * len == n {
            x
        } else {
            self.crop_last(x, count * len)?
        };
        self.reshape(cropped, &[b, count, len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(Tensor::new(shape, data.to_vec()).unwrap(), true)
    }

    #[test]
    fn swish_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.swish(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[0.0, 0.0]);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn glu_rejects_odd_width() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[1.0, 2.0, 3.0]);
        assert!(matches!(tape.glu(x), Err(Error::Dimension { .. })));
        assert!(tape.activation(x, Activation::GluLastDim).is_err());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let b = leaf(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn frames_drop_remainder() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 7], &[1., 2., 3., 4., 5., 6., 7.]);
        let f = tape.frames(x, 3).unwrap();
        assert_eq!(tape.shape(f), &[1, 2, 3]);
        let s = tape.sum(f);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1., 1., 1., 1., 0.]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
