//! Small supervised and self-supervised tasks that give the toy extractors
//! meaningful features before they are frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{AuxNet, HeadKind, InputKind, PASE_TARGETS, WAVE_FRAME};
use super::{AuxSpec, Term};
use crate::autodiff::{AdamConfig, AdamState, Bound, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::Example;
use crate::dsp::Stft;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of front-end frames hidden in the contrastive task.
    pub mask_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            mask_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub term: Term,
    pub n_layers: usize,
    pub epochs: usize,
    /// `accuracy` (higher is better) or `mse` (lower is better).
    pub metric: String,
    pub val_metric: f64,
    pub train_loss: Vec<f64>,
}

impl PretrainReport {
    /// Checkpoint with this report as its config echo.
    pub fn checkpoint(&self, net: &AuxNet) -> Result<Checkpoint> {
        Ok(Checkpoint {
            tag: AuxSpec::checkpoint_tag(self.term),
            config_json: serde_json::to_string(self).map_err(|e| Error::Contract(e.to_string()))?,
            params: net.params().clone(),
        })
    }
}

struct Item {
    input: Tensor,
    labels: Vec<usize>,
    targets: Vec<f64>,
}

fn pase_targets(samples: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for f in samples.chunks_exact(WAVE_FRAME) {
        let e = f.iter().map(|v| v * v).sum::<f64>() / WAVE_FRAME as f64;
        let zc = f
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count() as f64
            / WAVE_FRAME as f64;
        let d = f.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / WAVE_FRAME as f64;
        let le = (1e-6 + e).ln();
        out.extend_from_slice(&[le / 5.0, zc * 4.0, ((1e-6 + d).ln() - le) / 2.0]);
    }
    out
}

fn prepare(term: Term, ex: &Example, stft: &Stft) -> Result<Item> {
    let kind = term
        .input_kind()
        .ok_or_else(|| Error::Config("l1 has no auxiliary task".into()))?;
    let input = match (term, kind) {
        (Term::Event, _) => stft.analyze(&ex.noisy.samples)?.magnitude,
        (_, InputKind::Magnitude) => stft.analyze(&ex.clean.samples)?.magnitude,
        (_, InputKind::Waveform) => Tensor::new(&[ex.clean.len()], ex.clean.samples.clone())?,
    };
    let labels = match term {
        Term::Event => vec![ex.noise_class.index()],
        Term::Acoustic => ex.clean_spec.frame_units(&stft.config()),
        Term::Speaker => vec![ex.speaker_id],
        Term::Emotion => vec![ex.prosody_class],
        _ => Vec::new(),
    };
    if term == Term::Acoustic && labels.len() != input.shape()[0] {
        return Err(Error::Corpus(format!(
            "{}: frame labels do not match spectrogram frames",
            ex.id
        )));
    }
    let targets = if term == Term::Pase {
        pase_targets(&ex.clean.samples)
    } else {
        Vec::new()
    };
    Ok(Item {
        input,
        labels,
        targets,
    })
}

fn stack(items: &[&Item]) -> Result<Tensor> {
    let shape = items[0].input.shape().to_vec();
    if items.iter().any(|i| i.input.shape() != shape.as_slice()) {
        return Err(Error::Corpus(
            "examples in one batch differ in length".into(),
        ));
    }
    let mut data = Vec::with_capacity(items.len() * items[0].input.numel());
    for i in items {
        data.extend_from_slice(i.input.data());
    }
    let mut s = vec![items.len()];
    s.extend_from_slice(&shape);
    Tensor::new(&s, data)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Loss, its parameter binding, and (correct, counted) or (squared-error sum, counted).
fn batch_loss(
    net: &AuxNet,
    tape: &mut Tape,
    train: bool,
    items: &[&Item],
    rng: &mut ChaCha8Rng,
    mask_fraction: f64,
) -> Result<(Var, Bound, f64, usize)> {
    let p = net.params().bind(tape, train);
    let x = tape.constant(stack(items)?);
    let kind = net.input_kind();
    let b = items.len();
    let mask = if net.head_kind() == HeadKind::Contrastive {
        let t = tape.shape(x)[1] / WAVE_FRAME;
        let c = net
            .params()
            .get(net.params().find("b0.b").expect("front bias"))
            .numel();
        let mut m = Vec::with_capacity(b * t * c);
        for _ in 0..b * t {
            let keep = if rng.random::<f64>() < mask_fraction {
                0.0
            } else {
                1.0
            };
            m.extend(std::iter::repeat_n(keep, c));
        }
        Some(Tensor::new(&[b, t, c], m)?)
    } else {
        None
    };
    let taps = net.forward_taps(tape, &p, x, kind, mask.as_ref())?;
    let out = net.head(tape, &p, *taps.last().expect("taps"))?;
    match net.head_kind() {
        HeadKind::Utterance(_) | HeadKind::Frame(_) => {
            let labels: Vec<usize> = items
                .iter()
                .flat_map(|i| i.labels.iter().copied())
                .collect();
            let loss = tape.cross_entropy(out, &labels)?;
            let v = tape.value(out);
            let c = v.last_dim();
            let correct = v
                .data()
                .chunks_exact(c)
                .zip(&labels)
                .filter(|(r, l)| argmax(r) == **l)
                .count();
            Ok((loss, p, correct as f64, labels.len()))
        }
        HeadKind::Regression(_) => {
            let t = tape.shape(out)[1];
            let mut tg = Vec::with_capacity(b * t * PASE_TARGETS);
            for i in items {
                tg.extend_from_slice(&i.targets[..t * PASE_TARGETS]);
            }
            let tg = tape.constant(Tensor::new(tape.shape(out), tg)?);
            let d = tape.sub(out, tg)?;
            let sq = tape.square(d);
            let se: f64 = tape.value(sq).data().iter().sum();
            let n = tape.value(sq).numel();
            Ok((tape.mean(sq), p, se, n))
        }
        HeadKind::Contrastive => {
            let z = tape.value(taps[0]).clone();
            let z = tape.constant(z);
            let logits = tape.bmm_nt(out, z)?;
            let t = tape.shape(logits)[1];
            let labels: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let v = tape.value(logits);
            let m = mask.expect("mask");
            let c = m.last_dim();
            let mut correct = 0;
            let mut counted = 0;
            for (r, row) in v.data().chunks_exact(t).enumerate() {
                if m.data()[r * c] == 0.0 {
                    counted += 1;
                    if argmax(row) == r % t {
                        correct += 1;
                    }
                }
            }
            Ok((loss, p, correct as f64, counted))
        }
    }
}

/// Trains a fresh toy network for `term`, returning it (to be frozen) and a report.
///
/// Speaker identification validates on a held-out fifth of `train` because the
/// validation split's speakers never occur in training.
pub fn pretrain_toy_aux(
    term: Term,
    train: &[Example],
    val: &[Example],
    stft: &Stft,
    cfg: &PretrainConfig,
) -> Result<(AuxNet, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::Corpus(format!(
            "no training examples for the {term} task"
        )));
    }
    let (fit, check): (Vec<&Example>, Vec<&Example>) = if term == Term::Speaker {
        let fit = train
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 5 != 4)
            .map(|(_, e)| e)
            .collect();
        let check = train
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 5 == 4)
            .map(|(_, e)| e)
            .collect();
        (fit, check)
    } else {
        (train.iter().collect(), val.iter().collect())
    };
    if check.is_empty() {
        return Err(Error::Corpus(format!(
            "no validation examples for the {term} task"
        )));
    }
    let fit: Vec<Item> = fit
        .iter()
        .map(|e| prepare(term, e, stft))
        .collect::<Result<_>>()?;
    let check: Vec<Item> = check
        .iter()
        .map(|e| prepare(term, e, stft))
        .collect::<Result<_>>()?;
    let f_bins = stft.config().bins();
    let mut net = AuxNet::build(term, f_bins, cfg.seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::for_params(net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items: Vec<&Item> = chunk.iter().map(|&i| &fit[i]).collect();
            let mut tape = Tape::new();
            let (loss, bound, _, _) =
                batch_loss(&net, &mut tape, true, &items, &mut rng, cfg.mask_fraction)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "{term} pretraining loss became {lv}"
                )));
            }
            sum += lv;
            n += 1;
            tape.backward(loss)?;
            net.params_mut().collect_grads(&tape, &bound);
            net.params_mut().adam_update(&mut state, &adam)?;
            net.params_mut().zero_grads();
        }
        train_loss.push(sum / n.max(1) as f64);
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let (mut num, mut den) = (0.0, 0usize);
    for chunk in check.chunks(cfg.batch_size.max(1)) {
        let items: Vec<&Item> = chunk.iter().collect();
        let mut tape = Tape::new();
        let (_, _, a, c) = batch_loss(
            &net,
            &mut tape,
            false,
            &items,
            &mut eval_rng,
            cfg.mask_fraction,
        )?;
        num += a;
        den += c;
    }
    let (metric, val_metric) = match net.head_kind() {
        HeadKind::Regression(_) => ("mse", num / den.max(1) as f64),
        _ => ("accuracy", num / den.max(1) as f64),
    };
    let report = PretrainReport {
        term,
        n_layers: net.n_layers(),
        epochs: cfg.epochs,
        metric: metric.into(),
        val_metric,
        train_loss,
    };
    Ok((net, report))
}
