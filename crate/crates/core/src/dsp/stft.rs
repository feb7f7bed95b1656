//! Short-time Fourier transform with weighted overlap-add synthesis.
//!
//! Frames start at multiples of `hop`; frame count is
//! `floor((N - frame_len) / hop) + 1`. Synthesis applies the analysis window
//! again and divides by the constant overlap-add gain, so any COLA
//! configuration reconstructs every interior sample (those covered by a full
//! set of overlapping frames); edge samples come out tapered.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::autodiff::{Backward, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 128,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

/// Magnitude and phase planes, both `[frames, bins]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Tensor,
    pub phase: Vec<f64>,
    pub config: StftConfig,
    /// Length of the analysed signal; synthesis pads back to it.
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.magnitude.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.magnitude.shape()[1]
    }
}

/// Planned transforms and window for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        if cfg.frame_len < 2 || !cfg.frame_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "frame length must be even and >= 2, got {}",
                cfg.frame_len
            )));
        }
        if cfg.hop == 0 || cfg.hop > cfg.frame_len {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                cfg.hop, cfg.frame_len
            )));
        }
        let n = cfg.frame_len;
        let window: Vec<f64> = match cfg.window {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; n],
        };
        // COLA for weighted overlap-add: sum_k w^2[n - k hop] constant in n.
        let mut acc = vec![0.0; cfg.hop];
        for (i, w) in window.iter().enumerate() {
            acc[i % cfg.hop] += w * w;
        }
        let (lo, hi) = acc.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
        if lo <= 0.0 || (hi - lo) / hi > 1e-9 {
            return Err(Error::Config(format!(
                "window {:?} with frame {} and hop {} does not satisfy constant overlap-add",
                cfg.window, cfg.frame_len, cfg.hop
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, signal: &[f64]) -> Result<Spectrogram> {
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        if signal.len() < n {
            return Err(Error::Input(format!(
                "signal of {} samples is shorter than one {n}-sample frame",
                signal.len()
            )));
        }
        let frames = self.cfg.frames_for(signal.len());
        let bins = self.cfg.bins();
        let mut mag = Vec::with_capacity(frames * bins);
        let mut phase = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let seg = &signal[t * hop..t * hop + n];
            for ((b, s), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(s * w, 0.0);
            }
            self.fwd.process(&mut buf);
            for c in &buf[..bins] {
                mag.push(c.norm());
                phase.push(c.arg());
            }
        }
        Ok(Spectrogram {
            magnitude: Tensor::new(&[frames, bins], mag)?,
            phase,
            config: self.cfg,
            signal_len: signal.len(),
        })
    }

    /// Constant overlap-add gain `sum_i w^2[i] / hop`. Dividing by the local
    /// window sum instead would blow up the edge samples of a modified
    /// spectrogram, where that sum approaches zero.
    fn cola_gain(&self) -> f64 {
        self.window.iter().map(|w| w * w).sum::<f64>() / self.cfg.hop as f64
    }

    /// Overlap-add synthesis of `frames x bins` magnitude/phase planes into `out_len` samples.
    fn synthesize(&self, mag: &[f64], phase: &[f64], frames: usize, out_len: usize) -> Vec<f64> {
        let (n, hop) = (self.cfg.frame_len, self.cfg.hop);
        let bins = self.cfg.bins();
        let mut out = vec![0.0; out_len.max((frames.saturating_sub(1)) * hop + n)];
        if frames == 0 {
            out.truncate(out_len);
            return out;
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let scale = 1.0 / (n as f64 * self.cola_gain());
        for t in 0..frames {
            let (m, p) = (
                &mag[t * bins..(t + 1) * bins],
                &phase[t * bins..(t + 1) * bins],
            );
            for k in 0..bins {
                buf[k] = Complex64::from_polar(m[k], p[k]);
            }
            for k in 1..n - bins + 1 {
                buf[n - k] = buf[k].conj();
            }
            self.inv.process(&mut buf);
            for i in 0..n {
                out[t * hop + i] += buf[i].re * scale * self.window[i];
            }
        }
        out.truncate(out_len);
        out
    }

    pub fn synthesize_spectrogram(&self, spec: &Spectrogram) -> Result<Waveform> {
        if spec.config != self.cfg {
            return Err(Error::Config(format!(
                "spectrogram made with {:?}, synthesizer is {:?}",
                spec.config, self.cfg
            )));
        }
        let samples = self.synthesize(
            spec.magnitude.data(),
            &spec.phase,
            spec.frames(),
            spec.signal_len,
        );
        Waveform::new(samples)
    }

    /// Differentiable synthesis of a batch of magnitudes `[B, T, F]` with fixed
    /// phases (`B * T * F` values), producing `[B, out_len]`.
    pub fn synthesize_on_tape(
        &self,
        tape: &mut Tape,
        mag: Var,
        phase: &[f64],
        out_len: usize,
    ) -> Result<Var> {
        let &[b, t, f] = tape.shape(mag) else {
            return Err(Error::dim(
                "istft",
                tape.shape(mag),
                &[0, 0, self.cfg.bins()],
            ));
        };
        if f != self.cfg.bins() || phase.len() != b * t * f {
            return Err(Error::dim("istft", tape.shape(mag), &[phase.len()]));
        }
        if t == 0 {
            return Err(Error::Input("cannot synthesize zero frames".into()));
        }
        let m = tape.value(mag).data();
        let mut out = Vec::with_capacity(b * out_len);
        for bi in 0..b {
            let r = bi * t * f..(bi + 1) * t * f;
            out.extend(self.synthesize(&m[r.clone()], &phase[r], t, out_len));
        }
        let value = Tensor::new(&[b, out_len], out)?;
        let rule = IstftRule {
            stft: self.clone(),
            phase: phase.to_vec(),
            batch: b,
            frames: t,
            out_len,
        };
        Ok(tape.record(&[mag], value, Box::new(rule)))
    }
}

struct IstftRule {
    stft: Stft,
    phase: Vec<f64>,
    batch: usize,
    frames: usize,
    out_len: usize,
}

impl Backward for IstftRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let cfg = self.stft.cfg;
        let (n, hop, bins) = (cfg.frame_len, cfg.hop, cfg.bins());
        let gain = self.stft.cola_gain();
        let mut dmag = vec![0.0; self.batch * self.frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for bi in 0..self.batch {
            let gb = &g[bi * self.out_len..(bi + 1) * self.out_len];
            for t in 0..self.frames {
                for i in 0..n {
                    let s = t * hop + i;
                    let gs = if s < self.out_len { gb[s] / gain } else { 0.0 };
                    buf[i] = Complex64::new(gs * self.stft.window[i], 0.0);
                }
                self.stft.fwd.process(&mut buf);
                let o = (bi * self.frames + t) * bins;
                for k in 0..bins {
                    let c = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                    let (s, co) = self.phase[o + k].sin_cos();
                    dmag[o + k] = c * inv_n * (co * buf[k].re + s * buf[k].im);
                }
            }
        }
        vec![Some(dmag)]
    }
}

/// Waveform from an enhanced magnitude `[frames, bins]` and the noisy phase.
pub fn reconstruct_with_noisy_phase(
    stft: &Stft,
    enhanced_mag: &Tensor,
    noisy: &Spectrogram,
) -> Result<Waveform> {
    if enhanced_mag.shape() != noisy.magnitude.shape() {
        return Err(Error::Contract(format!(
            "enhanced magnitude {:?} does not match noisy phase {:?}",
            enhanced_mag.shape(),
            noisy.magnitude.shape()
        )));
    }
    let spec = Spectrogram {
        magnitude: enhanced_mag.clone(),
        phase: noisy.phase.clone(),
        config: noisy.config,
        signal_len: noisy.signal_len,
    };
    stft.synthesize_spectrogram(&spec)
}

/// Energy estimate from a spectrogram: two-sided power summed over frames,
/// divided by `frame_len * sum(w^2) / hop`.
pub fn spectral_energy(stft: &Stft, spec: &Spectrogram) -> f64 {
    let cfg = stft.cfg;
    let bins = cfg.bins();
    let mut total = 0.0;
    for row in spec.magnitude.data().chunks_exact(bins) {
        for (k, m) in row.iter().enumerate() {
            let c = if k == 0 || k == cfg.frame_len / 2 {
                1.0
            } else {
                2.0
            };
            total += c * m * m;
        }
    }
    let wsum: f64 = stft.window.iter().map(|w| w * w).sum();
    total / (cfg.frame_len as f64 * wsum / cfg.hop as f64)
}
