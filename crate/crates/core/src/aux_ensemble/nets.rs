//! Toy frozen feature extractors.
//!
//! Every net is a front transform followed by exactly `n_layers` blocks; the
//! post-activation output of each block is one tap. A small task head on the
//! last block is used only during pretraining.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Term;
use crate::autodiff::functional::{self_attention, AttentionParams};
use crate::autodiff::{Bound, ConvMode, ParamId, ParamSet, Tape, Tensor, Var};
use crate::corpus::{NUM_PROSODY, NUM_SPEAKERS, NUM_UNITS};
use crate::error::{Error, Result};

/// Samples per frame of the waveform front ends.
pub const WAVE_FRAME: usize = 128;
const CH: usize = 32;
const ATTN_HEADS: usize = 2;
const ATTN_MAX_DIST: usize = 16;
/// Self-supervised regression targets per frame.
pub const PASE_TARGETS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `[B, N]` samples.
    Waveform,
    /// `[B, T, F]` STFT magnitudes.
    Magnitude,
}

/// What the pretraining head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// One class per utterance.
    Utterance(usize),
    /// One class per frame.
    Frame(usize),
    /// Per-frame real targets.
    Regression(usize),
    /// Per-frame projection for a contrastive task.
    Contrastive,
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Conv {
        w: ParamId,
        b: ParamId,
        mode: ConvMode,
        residual: bool,
    },
    Rnn {
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
    },
    Attention {
        ln1: (ParamId, ParamId),
        q: (ParamId, ParamId),
        k: (ParamId, ParamId),
        v: (ParamId, ParamId),
        o: (ParamId, ParamId),
        rel: ParamId,
        ln2: (ParamId, ParamId),
        up: (ParamId, ParamId),
        down: (ParamId, ParamId),
    },
}

/// One frozen toy auxiliary network.
#[derive(Clone, Debug)]
pub struct AuxNet {
    term: Term,
    params: ParamSet,
    blocks: Vec<Block>,
    head: (ParamId, ParamId),
    head_kind: HeadKind,
}

struct Builder {
    ps: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn glorot(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.ps.add(name, Tensor::new(shape, data).expect("shape"))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.ps.add(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> (ParamId, ParamId) {
        (
            self.glorot(format!("{name}.w"), &[din, dout], din, dout),
            self.zeros(format!("{name}.b"), &[dout]),
        )
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        (
            self.ps
                .add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            self.zeros(format!("{name}.beta"), &[c]),
        )
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, residual: bool) -> Block {
        let (w, mode) = if k == 1 {
            (
                self.glorot(format!("{name}.w"), &[cin, cout], cin, cout),
                ConvMode::Pointwise,
            )
        } else {
            (
                self.glorot(format!("{name}.w"), &[k, cin, cout], k * cin, k * cout),
                ConvMode::Full,
            )
        };
        Block::Conv {
            w,
            b: self.zeros(format!("{name}.b"), &[cout]),
            mode,
            residual,
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Block {
        Block::Attention {
            ln1: self.norm(&format!("{name}.ln1"), d),
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            rel: self.zeros(
                format!("{name}.rel_bias"),
                &[ATTN_HEADS, 2 * ATTN_MAX_DIST + 1],
            ),
            ln2: self.norm(&format!("{name}.ln2"), d),
            up: self.linear(&format!("{name}.up"), d, 2 * d),
            down: self.linear(&format!("{name}.down"), 2 * d, d),
        }
    }
}

impl AuxNet {
    /// Randomly initialized (untrained) network for `term`.
    pub fn build(term: Term, f_bins: usize, seed: u64) -> Result<Self> {
        let mut b = Builder {
            ps: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (blocks, head_kind) = match term {
            Term::Event => (
                vec![
                    b.conv("b0", 3, f_bins, CH, false),
                    b.conv("b1", 3, CH, CH, false),
                    b.conv("b2", 3, CH, CH, false),
                    b.conv("b3", 3, CH, CH, false),
                ],
                HeadKind::Utterance(4),
            ),
            Term::Acoustic => {
                let c0 = b.conv("b0", 3, f_bins, CH, false);
                let c1 = b.conv("b1", 3, CH, CH, false);
                let rnn = Block::Rnn {
                    wx: b.glorot("b2.wx".into(), &[CH, CH], CH, CH),
                    wh: b.glorot("b2.wh".into(), &[CH, CH], CH, CH),
                    b: b.zeros("b2.b".into(), &[CH]),
                };
                (vec![c0, c1, rnn], HeadKind::Frame(NUM_UNITS))
            }
            Term::Speaker => (
                vec![
                    b.conv("b0", 1, WAVE_FRAME, CH, false),
                    b.conv("b1", 3, CH, CH, true),
                    b.conv("b2", 3, CH, CH, true),
                ],
                HeadKind::Utterance(NUM_SPEAKERS),
            ),
            Term::Emotion => (
                vec![
                    b.conv("b0", 1, WAVE_FRAME, CH, false),
                    b.conv("b1", 5, CH, CH, false),
                    b.conv("b2", 5, CH, CH, false),
                ],
                HeadKind::Utterance(NUM_PROSODY),
            ),
            Term::Pase => {
                let mut v = vec![b.conv("b0", 1, WAVE_FRAME, CH, false)];
                for i in 1..6 {
                    v.push(b.conv(&format!("b{i}"), 3, CH, CH, false));
                }
                (v, HeadKind::Regression(PASE_TARGETS))
            }
            Term::Wav2vec => {
                let mut v = vec![b.conv("b0", 1, WAVE_FRAME, CH, false)];
                for i in 1..5 {
                    v.push(b.attention(&format!("b{i}"), CH));
                }
                (v, HeadKind::Contrastive)
            }
            Term::L1 => return Err(Error::Config("l1 has no auxiliary network".into())),
        };
        let head_out = match head_kind {
            HeadKind::Utterance(c) | HeadKind::Frame(c) | HeadKind::Regression(c) => c,
            HeadKind::Contrastive => CH,
        };
        let head = b.linear("head", CH, head_out);
        debug_assert_eq!(blocks.len(), term.n_layers());
        Ok(Self {
            term,
            params: b.ps,
            blocks,
            head,
            head_kind,
        })
    }

    pub fn term(&self) -> Term {
        self.term
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_kind(&self) -> InputKind {
        self.term.input_kind().expect("aux term")
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, tape: &Tape, x: Var, kind: InputKind) -> Result<()> {
        if kind != self.input_kind() {
            return Err(Error::Contract(format!(
                "{} network takes {:?} input, got {:?}",
                self.term,
                self.input_kind(),
                kind
            )));
        }
        let rank = tape.shape(x).len();
        let ok = match kind {
            InputKind::Waveform => rank == 2 && tape.shape(x)[1] >= WAVE_FRAME,
            InputKind::Magnitude => rank == 3 && tape.shape(x)[2] == self.in_bins(),
        };
        if !ok {
            return Err(Error::Contract(format!(
                "{} network got input of shape {:?}",
                self.term,
                tape.shape(x)
            )));
        }
        Ok(())
    }

    fn in_bins(&self) -> usize {
        match self.blocks[0] {
            Block::Conv { w, .. } => self.params.get(w).shape()[1],
            _ => 0,
        }
    }

    fn front(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.input_kind() {
            InputKind::Magnitude => Ok(tape.log1p(x)),
            InputKind::Waveform => tape.frames(x, WAVE_FRAME),
        }
    }

    fn block(&self, tape: &mut Tape, p: &Bound, blk: &Block, x: Var) -> Result<Var> {
        match *blk {
            Block::Conv {
                w,
                b,
                mode,
                residual,
            } => {
                let h = tape.conv1d(x, p.get(w), Some(p.get(b)), mode)?;
                let h = tape.relu(h);
                if residual {
                    tape.add(x, h)
                } else {
                    Ok(h)
                }
            }
            Block::Rnn { wx, wh, b } => tape.rnn_tanh(x, p.get(wx), p.get(wh), p.get(b)),
            Block::Attention {
                ln1,
                q,
                k,
                v,
                o,
                rel,
                ln2,
                up,
                down,
            } => {
                let h = tape.layer_norm(x, p.get(ln1.0), p.get(ln1.1))?;
                let ap = AttentionParams {
                    wq: p.get(q.0),
                    bq: p.get(q.1),
                    wk: p.get(k.0),
                    bk: p.get(k.1),
                    wv: p.get(v.0),
                    bv: p.get(v.1),
                    wo: p.get(o.0),
                    bo: p.get(o.1),
                    rel_bias: Some((p.get(rel), ATTN_MAX_DIST)),
                };
                let h = self_attention(tape, h, ATTN_HEADS, &ap, true)?;
                let x = tape.add(x, h)?;
                let h = tape.layer_norm(x, p.get(ln2.0), p.get(ln2.1))?;
                let h = tape.linear(h, p.get(up.0), Some(p.get(up.1)))?;
                let h = tape.relu(h);
                let h = tape.linear(h, p.get(down.0), Some(p.get(down.1)))?;
                tape.add(x, h)
            }
        }
    }

    /// Activations of the first `n_layers` blocks. `frame_mask` (one flag per
    /// front-end frame, `true` = keep) zeroes masked frames after the first block.
    pub fn forward_taps(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        kind: InputKind,
        frame_mask: Option<&Tensor>,
    ) -> Result<Vec<Var>> {
        self.check_input(tape, x, kind)?;
        let mut h = self.front(tape, x)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            h = self.block(tape, p, blk, h)?;
            taps.push(h);
            if i == 0 {
                if let Some(m) = frame_mask {
                    let mv = tape.constant(m.clone());
                    h = tape.mul(h, mv)?;
                }
            }
        }
        Ok(taps)
    }

    /// Head output on the last tap: `[B, C]` for utterance heads, `[B, T, C]` otherwise.
    pub fn head(&self, tape: &mut Tape, p: &Bound, last: Var) -> Result<Var> {
        let x = match self.head_kind {
            HeadKind::Utterance(_) => tape.mean_time(last)?,
            _ => last,
        };
        tape.linear(x, p.get(self.head.0), Some(p.get(self.head.1)))
    }
}

/// Binds frozen aux parameters: values on the tape, no gradients.
pub fn bind_frozen(net: &AuxNet, tape: &mut Tape) -> Bound {
    net.params.bind(tape, false)
}
