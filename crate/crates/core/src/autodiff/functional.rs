//! Composite layers built from tape primitives.

use super::ops::attention::sinusoidal_positions;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Projection weights of one multi-head self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    /// `[heads, 2 * max_dist + 1]` relative-position bias table and its max distance.
    pub rel_bias: Option<(Var, usize)>,
}

/// Multi-head self-attention over `x[B, T, D]`.
///
/// With `rel_pe` the logits receive the learned relative-position bias;
/// otherwise sinusoidal absolute encodings are added to `x` first.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    p: &AttentionParams,
    rel_pe: bool,
) -> Result<Var> {
    let &[b, t, d] = tape.shape(x) else {
        return Err(Error::dim("self_attention", tape.shape(x), &[0, 0, 0]));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention dimension {d} is not divisible by {heads} heads"
        )));
    }
    let input = if rel_pe {
        x
    } else {
        let pe = sinusoidal_positions(t, d);
        let mut full = Vec::with_capacity(b * t * d);
        for _ in 0..b {
            full.extend_from_slice(&pe);
        }
        tape.add_const(x, &Tensor::new(&[b, t, d], full)?)?
    };
    let q = tape.linear(input, p.wq, Some(p.bq))?;
    let k = tape.linear(input, p.wk, Some(p.bk))?;
    let v = tape.linear(input, p.wv, Some(p.bv))?;
    let rel = if rel_pe {
        Some(p.rel_bias.ok_or_else(|| {
            Error::Config("relative position encoding requested without a bias table".into())
        })?)
    } else {
        None
    };
    let ctx = tape.attention_core(q, k, v, heads, rel)?;
    tape.linear(ctx, p.wo, Some(p.bo))
}

/// Bottleneck and expansion weights of a squeeze-and-excitation gate.
#[derive(Clone, Copy, Debug)]
pub struct SqueezeExciteParams {
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// Time-average pool, `C -> C / factor` ReLU bottleneck, sigmoid gates,
/// then a per-channel rescale of `x[B, T, C]`.
pub fn squeeze_excite(
    tape: &mut Tape,
    x: Var,
    p: &SqueezeExciteParams,
    factor: usize,
) -> Result<Var> {
    let &[_, _, c] = tape.shape(x) else {
        return Err(Error::dim("squeeze_excite", tape.shape(x), &[0, 0, 0]));
    };
    if factor == 0 || c < factor {
        return Err(Error::Config(format!(
            "squeeze factor {factor} needs at least that many channels, got {c}"
        )));
    }
    let expect = [c, c / factor];
    if tape.shape(p.w_down) != expect {
        return Err(Error::dim("squeeze_excite", tape.shape(p.w_down), &expect));
    }
    let pooled = tape.mean_time(x)?;
    let h = tape.linear(pooled, p.w_down, Some(p.b_down))?;
    let h = tape.relu(h);
    let gate = tape.linear(h, p.w_up, Some(p.b_up))?;
    let gate = tape.sigmoid(gate);
    tape.mul_channels(x, gate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gate_path_halves_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = tape.leaf(Tensor::new(&[1, 2, 16], data.clone()).unwrap(), true);
        let p = SqueezeExciteParams {
            w_down: tape.leaf(Tensor::full(&[16, 2], 0.3), true),
            b_down: tape.leaf(Tensor::zeros(&[2]), true),
            w_up: tape.leaf(Tensor::zeros(&[2, 16]), true),
            b_up: tape.leaf(Tensor::zeros(&[16]), true),
        };
        let y = squeeze_excite(&mut tape, x, &p, 8).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn too_few_channels_for_squeeze() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4]), true);
        let z = tape.leaf(Tensor::zeros(&[1]), true);
        let p = SqueezeExciteParams {
            w_down: z,
            b_down: z,
            w_up: z,
            b_up: z,
        };
        assert!(matches!(
            squeeze_excite(&mut tape, x, &p, 8),
            Err(Error::Config(_))
        ));
    }
}
