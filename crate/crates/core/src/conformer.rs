//! Conformer mask-estimation network.
//!
//! Batch-norm + linear front end (no time subsampling), a stack of Conformer
//! blocks, and a sigmoid mask head. Four switches remove or replace block
//! components: Swish -> ReLU, convolution module, Macaron FFN pair, and
//! relative -> absolute position encoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::functional::{
    self_attention, squeeze_excite, AttentionParams, SqueezeExciteParams,
};
use crate::autodiff::{
    Activation, BnRecord, Bound, ConvMode, ParamId, ParamSet, Pass, Tape, Tensor, Var,
};
use crate::checkpoint::Checkpoint;
use crate::dsp::{reconstruct_with_noisy_phase, Spectrogram, Stft, Waveform};
use crate::error::{Error, Result};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformerConfig {
    pub attention_dim: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub se_factor: usize,
    pub rel_max_distance: usize,
    pub use_swish: bool,
    pub use_conv_module: bool,
    pub use_macaron: bool,
    pub use_relative_pe: bool,
    /// Feed `ln(1 + |X|)` instead of the raw magnitude to the front end.
    pub log_input: bool,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            attention_dim: 240,
            num_blocks: 4,
            heads: 4,
            ffn_expansion: 4,
            conv_kernel: 15,
            se_factor: 8,
            rel_max_distance: 64,
            use_swish: true,
            use_conv_module: true,
            use_macaron: true,
            use_relative_pe: true,
            log_input: true,
        }
    }
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.attention_dim;
        if d == 0 || self.num_blocks == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config(
                "attention_dim, num_blocks and ffn_expansion must be positive".into(),
            ));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention_dim {d} is not divisible by heads {}",
                self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.use_conv_module
            && (self.se_factor == 0 || !d.is_multiple_of(self.se_factor) || d < self.se_factor)
        {
            return Err(Error::Config(format!(
                "se_factor {} must divide the convolution-module channels {d}",
                self.se_factor
            )));
        }
        Ok(())
    }

    fn activation(&self) -> Activation {
        if self.use_swish {
            Activation::Swish
        } else {
            Activation::Relu
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BatchNormIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    ln: NormIds,
    up: LinearIds,
    down: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    ln: NormIds,
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
    rel: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct ConvModuleIds {
    ln: NormIds,
    pw_in: LinearIds,
    dw: LinearIds,
    bn: BatchNormIds,
    se_down: LinearIds,
    se_up: LinearIds,
    pw_out: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ffn_first: Option<FfnIds>,
    attn: AttnIds,
    conv: Option<ConvModuleIds>,
    ffn_last: FfnIds,
    ln_out: NormIds,
}

/// Seeded Glorot-uniform initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        Tensor::new(shape, data).expect("shape product")
    }

    pub(crate) fn linear(
        &mut self,
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
    ) -> (ParamId, ParamId) {
        let w = ps.add(format!("{name}.w"), self.glorot(&[din, dout], din, dout));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        (w, b)
    }
}

fn add_linear(
    ps: &mut ParamSet,
    init: &mut Init,
    name: &str,
    din: usize,
    dout: usize,
) -> LinearIds {
    let (w, b) = init.linear(ps, name, din, dout);
    LinearIds { w, b }
}

fn add_norm(ps: &mut ParamSet, name: &str, c: usize) -> NormIds {
    NormIds {
        gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
        beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[c])),
    }
}

fn add_batch_norm(ps: &mut ParamSet, name: &str, c: usize) -> BatchNormIds {
    let n = add_norm(ps, name, c);
    BatchNormIds {
        gamma: n.gamma,
        beta: n.beta,
        mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
        var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
    }
}

fn add_ffn(ps: &mut ParamSet, init: &mut Init, name: &str, d: usize, e: usize) -> FfnIds {
    FfnIds {
        ln: add_norm(ps, &format!("{name}.ln"), d),
        up: add_linear(ps, init, &format!("{name}.up"), d, d * e),
        down: add_linear(ps, init, &format!("{name}.down"), d * e, d),
    }
}

/// Conformer mask estimator and its parameters.
#[derive(Clone, Debug)]
pub struct MaskNet {
    cfg: ConformerConfig,
    f_bins: usize,
    params: ParamSet,
    front_bn: BatchNormIds,
    front_proj: LinearIds,
    blocks: Vec<BlockIds>,
    head: LinearIds,
}

impl MaskNet {
    pub fn build(cfg: &ConformerConfig, f_bins: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if f_bins == 0 {
            return Err(Error::Config("f_bins must be positive".into()));
        }
        let d = cfg.attention_dim;
        let mut ps = ParamSet::new();
        let mut init = Init::new(seed);
        let front_bn = add_batch_norm(&mut ps, "front.bn", f_bins);
        let front_proj = add_linear(&mut ps, &mut init, "front.proj", f_bins, d);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let p = format!("blocks.{i}");
            let ffn_first = cfg.use_macaron.then(|| {
                add_ffn(
                    &mut ps,
                    &mut init,
                    &format!("{p}.ffn1"),
                    d,
                    cfg.ffn_expansion,
                )
            });
            let attn = AttnIds {
                ln: add_norm(&mut ps, &format!("{p}.attn.ln"), d),
                q: add_linear(&mut ps, &mut init, &format!("{p}.attn.q"), d, d),
                k: add_linear(&mut ps, &mut init, &format!("{p}.attn.k"), d, d),
                v: add_linear(&mut ps, &mut init, &format!("{p}.attn.v"), d, d),
                o: add_linear(&mut ps, &mut init, &format!("{p}.attn.o"), d, d),
                rel: cfg.use_relative_pe.then(|| {
                    ps.add(
                        format!("{p}.attn.rel_bias"),
                        Tensor::zeros(&[cfg.heads, 2 * cfg.rel_max_distance + 1]),
                    )
                }),
            };
            let conv = cfg.use_conv_module.then(|| {
                let k = cfg.conv_kernel;
                ConvModuleIds {
                    ln: add_norm(&mut ps, &format!("{p}.conv.ln"), d),
                    pw_in: add_linear(&mut ps, &mut init, &format!("{p}.conv.pw_in"), d, 2 * d),
                    dw: LinearIds {
                        w: ps.add(format!("{p}.conv.dw.w"), init.glorot(&[k, d], k, k)),
                        b: ps.add(format!("{p}.conv.dw.b"), Tensor::zeros(&[d])),
                    },
                    bn: add_batch_norm(&mut ps, &format!("{p}.conv.bn"), d),
                    se_down: add_linear(
                        &mut ps,
                        &mut init,
                        &format!("{p}.conv.se.down"),
                        d,
                        d / cfg.se_factor,
                    ),
                    se_up: add_linear(
                        &mut ps,
                        &mut init,
                        &format!("{p}.conv.se.up"),
                        d / cfg.se_factor,
                        d,
                    ),
                    pw_out: add_linear(&mut ps, &mut init, &format!("{p}.conv.pw_out"), d, d),
                }
            });
            let ffn_last = add_ffn(
                &mut ps,
                &mut init,
                &format!("{p}.ffn2"),
                d,
                cfg.ffn_expansion,
            );
            let ln_out = add_norm(&mut ps, &format!("{p}.ln_out"), d);
            blocks.push(BlockIds {
                ffn_first,
                attn,
                conv,
                ffn_last,
                ln_out,
            });
        }
        let head = add_linear(&mut ps, &mut init, "head", d, f_bins);
        Ok(Self {
            cfg: cfg.clone(),
            f_bins,
            params: ps,
            front_bn,
            front_proj,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.cfg
    }

    pub fn f_bins(&self) -> usize {
        self.f_bins
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: BatchNormIds,
        x: Var,
        pass: &mut Pass,
    ) -> Result<Var> {
        let (g, b) = (p.get(ids.gamma), p.get(ids.beta));
        if pass.training {
            let (y, groups) = tape.batch_norm_train(x, g, b, pass.bn_group)?;
            pass.bn_updates.push(BnRecord {
                running_mean: ids.mean,
                running_var: ids.var,
                groups,
            });
            Ok(y)
        } else {
            tape.batch_norm_eval(
                x,
                g,
                b,
                self.params.get(ids.mean).data(),
                self.params.get(ids.var).data(),
            )
        }
    }

    fn ffn(&self, tape: &mut Tape, p: &Bound, ids: &FfnIds, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, p.get(ids.ln.gamma), p.get(ids.ln.beta))?;
        let h = tape.linear(h, p.get(ids.up.w), Some(p.get(ids.up.b)))?;
        let h = tape.activation(h, self.cfg.activation())?;
        tape.linear(h, p.get(ids.down.w), Some(p.get(ids.down.b)))
    }

    fn conv_module(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: &ConvModuleIds,
        x: Var,
        pass: &mut Pass,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, p.get(ids.ln.gamma), p.get(ids.ln.beta))?;
        let h = tape.linear(h, p.get(ids.pw_in.w), Some(p.get(ids.pw_in.b)))?;
        let h = tape.glu(h)?;
        let h = tape.conv1d(
            h,
            p.get(ids.dw.w),
            Some(p.get(ids.dw.b)),
            ConvMode::Depthwise,
        )?;
        let h = self.batch_norm(tape, p, ids.bn, h, pass)?;
        let h = tape.activation(h, self.cfg.activation())?;
        let se = SqueezeExciteParams {
            w_down: p.get(ids.se_down.w),
            b_down: p.get(ids.se_down.b),
            w_up: p.get(ids.se_up.w),
            b_up: p.get(ids.se_up.b),
        };
        let h = squeeze_excite(tape, h, &se, self.cfg.se_factor)?;
        tape.linear(h, p.get(ids.pw_out.w), Some(p.get(ids.pw_out.b)))
    }

    fn residual(tape: &mut Tape, x: Var, branch: Var, weight: f64) -> Result<Var> {
        let b = if weight == 1.0 {
            branch
        } else {
            tape.scale(branch, weight)
        };
        tape.add(x, b)
    }

    /// One Conformer block: ½FFN, self-attention, convolution module, ½FFN,
    /// final layer norm (each residual), with the configured removals.
    fn block_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: &BlockIds,
        x: Var,
        pass: &mut Pass,
    ) -> Result<Var> {
        let mut x = x;
        if let Some(f) = &ids.ffn_first {
            let h = self.ffn(tape, p, f, x)?;
            x = Self::residual(tape, x, h, 0.5)?;
        }
        let a = &ids.attn;
        let h = tape.layer_norm(x, p.get(a.ln.gamma), p.get(a.ln.beta))?;
        let ap = AttentionParams {
            wq: p.get(a.q.w),
            bq: p.get(a.q.b),
            wk: p.get(a.k.w),
            bk: p.get(a.k.b),
            wv: p.get(a.v.w),
            bv: p.get(a.v.b),
            wo: p.get(a.o.w),
            bo: p.get(a.o.b),
            rel_bias: a.rel.map(|r| (p.get(r), self.cfg.rel_max_distance)),
        };
        let h = self_attention(tape, h, self.cfg.heads, &ap, self.cfg.use_relative_pe)?;
        x = Self::residual(tape, x, h, 1.0)?;
        if let Some(c) = &ids.conv {
            let h = self.conv_module(tape, p, c, x, pass)?;
            x = Self::residual(tape, x, h, 1.0)?;
        }
        let h = self.ffn(tape, p, &ids.ffn_last, x)?;
        x = Self::residual(tape, x, h, if self.cfg.use_macaron { 0.5 } else { 1.0 })?;
        tape.layer_norm(x, p.get(ids.ln_out.gamma), p.get(ids.ln_out.beta))
    }

    /// Applies block `index` to `x[B, T, D]`.
    pub fn conformer_block_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        index: usize,
        x: Var,
        pass: &mut Pass,
    ) -> Result<Var> {
        let d = self.cfg.attention_dim;
        if tape.shape(x).len() != 3 || tape.shape(x)[2] != d {
            return Err(Error::Contract(format!(
                "block input {:?} must be [B, T, {d}]",
                tape.shape(x)
            )));
        }
        let ids = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no block {index}")))?;
        self.block_forward(tape, p, ids, x, pass)
    }

    /// Mask in (0, 1) for noisy magnitudes `[B, T, F]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        noisy_mag: Var,
        pass: &mut Pass,
    ) -> Result<Var> {
        let shape = tape.shape(noisy_mag);
        if shape.len() != 3 || shape[2] != self.f_bins {
            return Err(Error::Contract(format!(
                "noisy magnitude {shape:?} must be [B, T, {}]",
                self.f_bins
            )));
        }
        let x = if self.cfg.log_input {
            tape.log1p(noisy_mag)
        } else {
            noisy_mag
        };
        let x = self.batch_norm(tape, p, self.front_bn, x, pass)?;
        let mut x = tape.linear(x, p.get(self.front_proj.w), Some(p.get(self.front_proj.b)))?;
        for ids in &self.blocks {
            x = self.block_forward(tape, p, ids, x, pass)?;
        }
        let m = tape.linear(x, p.get(self.head.w), Some(p.get(self.head.b)))?;
        Ok(tape.sigmoid(m))
    }

    /// Inference-mode mask for `[B, T, F]` or `[T, F]` magnitudes.
    pub fn predict_mask(&self, noisy_mag: &Tensor) -> Result<Tensor> {
        let batched = match noisy_mag.shape() {
            [_, _, _] => noisy_mag.clone(),
            &[t, f] => noisy_mag.clone().reshape(&[1, t, f])?,
            s => {
                return Err(Error::Contract(format!(
                    "noisy magnitude {s:?} must be [B, T, F] or [T, F]"
                )))
            }
        };
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(batched);
        let m = self.forward(&mut tape, &p, x, &mut Pass::eval())?;
        tape.value(m).clone().reshape(noisy_mag.shape())
    }

    /// Enhanced magnitude `mask * |Y|` and its waveform using the noisy phase.
    pub fn enhance(&self, stft: &Stft, noisy: &Spectrogram) -> Result<(Tensor, Waveform)> {
        let mask = self.predict_mask(&noisy.magnitude)?;
        let mag = apply_mask(&mask, &noisy.magnitude)?;
        let wave = reconstruct_with_noisy_phase(stft, &mag, noisy)?;
        Ok((mag, wave))
    }
}

/// Checkpoint tag of mask networks.
pub const CHECKPOINT_TAG: &str = "conformer";

impl MaskNet {
    /// Checkpoint whose config echo is `{"conformer": .., "f_bins": .., "extra": extra}`.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let echo = serde_json::json!({
            "conformer": self.cfg,
            "f_bins": self.f_bins,
            "extra": extra,
        });
        Checkpoint {
            tag: CHECKPOINT_TAG.into(),
            config_json: echo.to_string(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        ckpt.expect_tag(CHECKPOINT_TAG, origin)?;
        let echo: serde_json::Value = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::format(origin, format!("config echo: {e}")))?;
        let cfg: ConformerConfig = serde_json::from_value(echo["conformer"].clone())
            .map_err(|e| Error::format(origin, format!("conformer config: {e}")))?;
        let f_bins = echo["f_bins"]
            .as_u64()
            .ok_or_else(|| Error::format(origin, "config echo lacks f_bins"))?
            as usize;
        let mut net = Self::build(&cfg, f_bins, 0)?;
        net.params.load_from(&ckpt.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Elementwise `mask * magnitude`.
pub fn apply_mask(mask: &Tensor, magnitude: &Tensor) -> Result<Tensor> {
    if mask.shape() != magnitude.shape() {
        return Err(Error::dim("apply_mask", mask.shape(), magnitude.shape()));
    }
    Tensor::new(
        magnitude.shape(),
        mask.data()
            .iter()
            .zip(magnitude.data())
            .map(|(m, x)| m * x)
            .collect(),
    )
}
