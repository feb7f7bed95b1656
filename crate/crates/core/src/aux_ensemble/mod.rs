//! Frozen auxiliary feature extractors and the seven-term training objective
//! `sum_i lambda_i L_i` over six deep-feature losses and a spectral l1 loss.

mod nets;
mod pretrain;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use nets::{bind_frozen, AuxNet, HeadKind, InputKind, PASE_TARGETS, WAVE_FRAME};
pub use pretrain::{pretrain_toy_aux, PretrainConfig, PretrainReport};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dsp::Stft;
use crate::error::{Error, Result};

/// Loss terms in weight-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Event,
    Acoustic,
    Speaker,
    Emotion,
    Pase,
    Wav2vec,
    L1,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Event,
        Term::Acoustic,
        Term::Speaker,
        Term::Emotion,
        Term::Pase,
        Term::Wav2vec,
        Term::L1,
    ];
    pub const AUX: [Term; 6] = [
        Term::Event,
        Term::Acoustic,
        Term::Speaker,
        Term::Emotion,
        Term::Pase,
        Term::Wav2vec,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Term::Event => "event",
            Term::Acoustic => "acoustic",
            Term::Speaker => "speaker",
            Term::Emotion => "emotion",
            Term::Pase => "pase",
            Term::Wav2vec => "wav2vec",
            Term::L1 => "l1",
        }
    }

    /// Number of tapped layers `n_i` (0 for l1).
    pub fn n_layers(self) -> usize {
        match self {
            Term::Event => 4,
            Term::Acoustic | Term::Speaker | Term::Emotion => 3,
            Term::Pase => 6,
            Term::Wav2vec => 5,
            Term::L1 => 0,
        }
    }

    pub fn input_kind(self) -> Option<InputKind> {
        match self {
            Term::Event | Term::Acoustic => Some(InputKind::Magnitude),
            Term::Speaker | Term::Emotion | Term::Pase | Term::Wav2vec => Some(InputKind::Waveform),
            Term::L1 => None,
        }
    }

    pub fn is_aux(self) -> bool {
        self != Term::L1
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Term {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term {s:?}")))
    }
}

/// `(lambda_event, lambda_acoustic, lambda_speaker, lambda_emotion, lambda_pase, lambda_wav2vec, lambda_l1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub event: f64,
    pub acoustic: f64,
    pub speaker: f64,
    pub emotion: f64,
    pub pase: f64,
    pub wav2vec: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::hand_tuned()
    }
}

impl LossWeights {
    /// Hand-tuned default weights.
    pub fn hand_tuned() -> Self {
        Self::from_array([5e-03, 1e-04, 1.25e-04, 4e-05, 1.7e-04, 3.5e-05, 1.1e-01])
    }

    /// Every weight `1/7`.
    pub fn equal() -> Self {
        Self::from_array([1.0 / 7.0; 7])
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            event: a[0],
            acoustic: a[1],
            speaker: a[2],
            emotion: a[3],
            pase: a[4],
            wav2vec: a[5],
            l1: a[6],
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.event,
            self.acoustic,
            self.speaker,
            self.emotion,
            self.pase,
            self.wav2vec,
            self.l1,
        ]
    }

    pub fn get(&self, t: Term) -> f64 {
        self.to_array()[t.index()]
    }

    pub fn set(&mut self, t: Term, v: f64) {
        let mut a = self.to_array();
        a[t.index()] = v;
        *self = Self::from_array(a);
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * c))
    }

    pub fn validate(&self) -> Result<()> {
        for t in Term::ALL {
            let v = self.get(t);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "weight for {t} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Where an auxiliary network's weights come from.
pub const RANDOM_FROZEN: &str = "random_frozen";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxSpec {
    pub name: Term,
    pub n_layers: usize,
    pub input_kind: InputKind,
    /// Checkpoint path, or `"random_frozen"` for an untrained extractor.
    pub checkpoint: String,
}

impl AuxSpec {
    pub fn new(name: Term, checkpoint: impl Into<String>) -> Result<Self> {
        let input_kind = name
            .input_kind()
            .ok_or_else(|| Error::Config("l1 has no auxiliary network".into()))?;
        Ok(Self {
            name,
            n_layers: name.n_layers(),
            input_kind,
            checkpoint: checkpoint.into(),
        })
    }

    pub fn random_frozen(name: Term) -> Result<Self> {
        Self::new(name, RANDOM_FROZEN)
    }

    pub fn checkpoint_tag(name: Term) -> String {
        format!("aux:{name}")
    }

    /// Builds or loads the network.
    pub fn instantiate(&self, f_bins: usize, seed: u64) -> Result<AuxNet> {
        if self.n_layers != self.name.n_layers() {
            return Err(Error::Config(format!(
                "{} taps {} layers, spec says {}",
                self.name,
                self.name.n_layers(),
                self.n_layers
            )));
        }
        let mut net = AuxNet::build(self.name, f_bins, seed)?;
        if self.checkpoint != RANDOM_FROZEN {
            let path = PathBuf::from(&self.checkpoint);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "missing {} auxiliary checkpoint {}",
                    self.name,
                    path.display()
                )));
            }
            let ckpt = Checkpoint::load(&path)?;
            ckpt.expect_tag(&Self::checkpoint_tag(self.name), &path)?;
            net.params_mut().load_from(&ckpt.params)?;
        }
        Ok(net)
    }
}

/// Aux network input on a tape.
#[derive(Clone, Copy, Debug)]
pub enum AuxInput {
    Waveform(Var),
    Magnitude(Var),
}

impl AuxInput {
    fn parts(self) -> (Var, InputKind) {
        match self {
            AuxInput::Waveform(v) => (v, InputKind::Waveform),
            AuxInput::Magnitude(v) => (v, InputKind::Magnitude),
        }
    }
}

/// Tapped activations of a frozen network; gradients reach only the input.
pub fn aux_forward_taps(tape: &mut Tape, net: &AuxNet, input: AuxInput) -> Result<Vec<Var>> {
    let p = bind_frozen(net, tape);
    let (x, kind) = input.parts();
    net.forward_taps(tape, &p, x, kind, None)
}

/// `(1/n) sum_k mean|tap_k(enhanced) - tap_k(clean)|`.
pub fn perceptual_loss(
    tape: &mut Tape,
    net: &AuxNet,
    enhanced: AuxInput,
    clean: AuxInput,
) -> Result<Var> {
    let (e, _) = enhanced.parts();
    let (c, _) = clean.parts();
    if tape.shape(e) != tape.shape(c) {
        return Err(Error::Contract(format!(
            "perceptual loss inputs differ in shape: {:?} vs {:?}",
            tape.shape(e),
            tape.shape(c)
        )));
    }
    let p = bind_frozen(net, tape);
    let (x, kind) = enhanced.parts();
    let te = net.forward_taps(tape, &p, x, kind, None)?;
    let (x, kind) = clean.parts();
    let tc = net.forward_taps(tape, &p, x, kind, None)?;
    let mut acc: Option<Var> = None;
    for (a, b) in te.into_iter().zip(tc) {
        let d = tape.mean_abs_diff(a, b)?;
        acc = Some(match acc {
            None => d,
            Some(s) => tape.add(s, d)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::Contract("network has no taps".into()))?;
    Ok(tape.scale(sum, 1.0 / net.n_layers() as f64))
}

/// Mean absolute magnitude difference.
pub fn l1_stft_loss(tape: &mut Tape, enhanced_mag: Var, clean_mag: Var) -> Result<Var> {
    if tape.shape(enhanced_mag) != tape.shape(clean_mag) {
        return Err(Error::Contract(format!(
            "l1 loss shapes differ: {:?} vs {:?}",
            tape.shape(enhanced_mag),
            tape.shape(clean_mag)
        )));
    }
    tape.mean_abs_diff(enhanced_mag, clean_mag)
}

/// The six auxiliary networks (absent ones are never evaluated).
#[derive(Clone, Debug, Default)]
pub struct AuxEnsemble {
    nets: Vec<AuxNet>,
}

impl AuxEnsemble {
    pub fn new(nets: Vec<AuxNet>) -> Self {
        Self { nets }
    }

    /// Instantiates `specs` with per-network seeds derived from `seed`.
    pub fn from_specs(specs: &[AuxSpec], f_bins: usize, seed: u64) -> Result<Self> {
        let nets = specs
            .iter()
            .map(|s| {
                s.instantiate(
                    f_bins,
                    crate::util::derive_seed(seed, "aux", s.name.index() as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nets })
    }

    pub fn get(&self, t: Term) -> Option<&AuxNet> {
        self.nets.iter().find(|n| n.term() == t)
    }

    pub fn nets(&self) -> &[AuxNet] {
        &self.nets
    }

    /// Checksums of every network's parameters, in ensemble order.
    pub fn checksums(&self) -> Vec<(Term, u64)> {
        self.nets
            .iter()
            .map(|n| (n.term(), n.params().checksum()))
            .collect()
    }
}

/// Tape inputs for one batch.
pub struct PerlInputs<'a> {
    pub stft: &'a Stft,
    /// Enhanced magnitudes `[B, T, F]` (the differentiable path).
    pub enhanced_mag: Var,
    /// Clean magnitudes `[B, T, F]`.
    pub clean_mag: Var,
    /// Clean waveforms `[B, N]`.
    pub clean_wave: Var,
    /// Noisy phases, `B * T * F` values.
    pub noisy_phase: &'a [f64],
}

/// Raw per-term losses on the tape, in `enabled` order. Disabled terms cost nothing.
pub fn term_losses(
    tape: &mut Tape,
    aux: &AuxEnsemble,
    enabled: &[Term],
    x: &PerlInputs,
) -> Result<Vec<(Term, Var)>> {
    if enabled.is_empty() {
        return Err(Error::Config("no loss terms enabled".into()));
    }
    let mut enhanced_wave = None;
    let mut out = Vec::with_capacity(enabled.len());
    for &t in enabled {
        let v = match t.input_kind() {
            None => l1_stft_loss(tape, x.enhanced_mag, x.clean_mag)?,
            Some(kind) => {
                let net = aux.get(t).ok_or_else(|| {
                    Error::Config(format!("{t} loss enabled but no {t} network is loaded"))
                })?;
                match kind {
                    InputKind::Magnitude => perceptual_loss(
                        tape,
                        net,
                        AuxInput::Magnitude(x.enhanced_mag),
                        AuxInput::Magnitude(x.clean_mag),
                    )?,
                    InputKind::Waveform => {
                        let w = match enhanced_wave {
                            Some(w) => w,
                            None => {
                                let n = tape.shape(x.clean_wave)[1];
                                let w = x.stft.synthesize_on_tape(
                                    tape,
                                    x.enhanced_mag,
                                    x.noisy_phase,
                                    n,
                                )?;
                                enhanced_wave = Some(w);
                                w
                            }
                        };
                        perceptual_loss(
                            tape,
                            net,
                            AuxInput::Waveform(w),
                            AuxInput::Waveform(x.clean_wave),
                        )?
                    }
                }
            }
        };
        out.push((t, v));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: Term,
    pub raw: f64,
    pub weight: f64,
    pub weighted: f64,
}

/// Per-term raw values, applied weights, and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<TermReport>,
    pub total: f64,
}

impl LossReport {
    pub fn raw(&self, t: Term) -> Option<f64> {
        self.terms.iter().find(|r| r.term == t).map(|r| r.raw)
    }
}

/// `sum_i w_i L_i` on the tape plus its report.
pub fn weighted_total(
    tape: &mut Tape,
    losses: &[(Term, Var)],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(losses.len());
    for &(t, v) in losses {
        let w = weights.get(t);
        let raw = tape.value(v).item();
        let s = tape.scale(v, w);
        terms.push(TermReport {
            term: t,
            raw,
            weight: w,
            weighted: tape.value(s).item(),
        });
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss terms enabled".into()))?;
    let report = LossReport {
        terms,
        total: tape.value(total).item(),
    };
    Ok((total, report))
}

/// Weighted objective over the enabled terms.
pub fn perl_total(
    tape: &mut Tape,
    aux: &AuxEnsemble,
    weights: &LossWeights,
    enabled: &[Term],
    x: &PerlInputs,
) -> Result<(Var, LossReport)> {
    let losses = term_losses(tape, aux, enabled, x)?;
    weighted_total(tape, &losses, weights)
}

/// Default checkpoint location of an aux network under `dir`.
pub fn aux_checkpoint_path(dir: &Path, t: Term) -> PathBuf {
    dir.join(format!("aux_{t}.ckpt"))
}
