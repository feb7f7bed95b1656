//! Objective metrics: STOI, SI-SDR and spectral l1 distance.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::conformer::MaskNet;
use crate::corpus::Example;
use crate::dsp::{Spectrogram, Stft, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// SI-SDR reported for a perfect estimate.
pub const SI_SDR_CAP_DB: f64 = 100.0;

const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Rational resampler `up/down` with a Blackman-windowed sinc low-pass.
pub fn resample_poly(x: &[f64], up: usize, down: usize, cutoff_hz: f64, in_rate: f64) -> Vec<f64> {
    let half_taps = 16 * up.max(down);
    let taps = 2 * half_taps + 1;
    let hi_rate = in_rate * up as f64;
    let fc = cutoff_hz / hi_rate;
    let h: Vec<f64> = (0..taps)
        .map(|i| {
            let m = i as f64 - half_taps as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * m).sin() / (PI * m)
            };
            let w = 0.42 - 0.5 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos()
                + 0.08 * (4.0 * PI * i as f64 / (taps - 1) as f64).cos();
            sinc * w * up as f64
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|m| {
            // y[m] = sum_j h[j] * xu[m*down + half_taps - j], xu nonzero at multiples of up
            let centre = m * down + half_taps;
            let j_lo = centre.saturating_sub((x.len() - 1) * up);
            let mut j = j_lo + (centre - j_lo) % up;
            let mut acc = 0.0;
            while j < taps && j <= centre {
                acc += h[j] * x[(centre - j) / up];
                j += up;
            }
            acc
        })
        .collect()
}

fn hann_stoi() -> Vec<f64> {
    // symmetric Hann of length N+2 with the zero end-points dropped
    let n = STOI_FRAME + 2;
    (1..n - 1)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Drops frames more than 40 dB below the loudest clean frame and
/// overlap-adds the survivors of both signals.
fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    if x.len() < STOI_FRAME {
        return (Vec::new(), Vec::new());
    }
    let starts: Vec<usize> = (0..=x.len() - STOI_FRAME).step_by(hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = x[s..s + STOI_FRAME]
                .iter()
                .zip(w)
                .map(|(a, b)| (a * b) * (a * b))
                .sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, e)| max - **e < STOI_DYN_RANGE_DB)
        .map(|(s, _)| *s)
        .collect();
    let len = if kept.is_empty() {
        0
    } else {
        (kept.len() - 1) * hop + STOI_FRAME
    };
    let (mut xs, mut ys) = (vec![0.0; len], vec![0.0; len]);
    for (k, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xs[k * hop + i] += x[s + i] * w[i];
            ys[k * hop + i] += y[s + i] * w[i];
        }
    }
    (xs, ys)
}

/// One-third-octave band envelopes `[bands][frames]`.
fn third_octave_envelopes(x: &[f64], w: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let hop = STOI_FRAME / 2;
    let fft = FftPlanner::new().plan_fft_forward(STOI_FFT);
    let frames = if x.len() < STOI_FRAME {
        0
    } else {
        (x.len() - STOI_FRAME) / hop + 1
    };
    let mut env = vec![Vec::with_capacity(frames); bands.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_FFT];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..STOI_FRAME {
            buf[i].re = x[t * hop + i] * w[i];
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[b].push(e.sqrt());
        }
    }
    env
}

/// FFT-bin ranges `[lo, hi)` of the 15 one-third-octave bands.
fn third_octave_bins() -> Vec<(usize, usize)> {
    let bins = STOI_FFT / 2 + 1;
    let freq = |k: usize| k as f64 * f64::from(STOI_RATE) / STOI_FFT as f64;
    let nearest = |f: f64| {
        (0..bins)
            .min_by(|&a, &b| (freq(a) - f).abs().total_cmp(&(freq(b) - f).abs()))
            .unwrap_or(0)
    };
    (0..STOI_BANDS)
        .map(|k| {
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Short-time objective intelligibility of `degraded` against `clean`.
///
/// Both signals are resampled to 10 kHz; 256-sample Hann frames (512-point
/// FFT, 50% overlap) feed 15 one-third-octave bands starting at 150 Hz;
/// clipped, normalized 30-frame envelope segments are correlated and averaged.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::Input(format!(
            "stoi needs equal lengths, got {} and {}",
            clean.len(),
            degraded.len()
        )));
    }
    if clean.duration_s() < 0.5 {
        return Err(Error::Input(format!(
            "stoi needs at least 0.5 s, got {:.3} s",
            clean.duration_s()
        )));
    }
    let sr = f64::from(SAMPLE_RATE);
    // 16 kHz -> 10 kHz; anti-alias cutoff at 0.45 of the 10 kHz rate
    let cutoff = 0.45 * f64::from(STOI_RATE);
    let x = resample_poly(&clean.samples, 5, 8, cutoff, sr);
    let y = resample_poly(&degraded.samples, 5, 8, cutoff, sr);
    let w = hann_stoi();
    let (x, y) = remove_silent_frames(&x, &y, &w);
    let bands = third_octave_bins();
    let xe = third_octave_envelopes(&x, &w, &bands);
    let ye = third_octave_envelopes(&y, &w, &bands);
    let frames = xe.first().map_or(0, Vec::len);
    if frames < STOI_SEGMENT {
        return Err(Error::Input(format!(
            "only {frames} non-silent frames; stoi needs {STOI_SEGMENT}"
        )));
    }
    let clip = 1.0 + 10f64.powf(-STOI_BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut yc = vec![0.0; STOI_SEGMENT];
    for m in STOI_SEGMENT..=frames {
        for b in 0..STOI_BANDS {
            let xs = &xe[b][m - STOI_SEGMENT..m];
            let ys = &ye[b][m - STOI_SEGMENT..m];
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = nx / (ny + f64::EPSILON);
            for ((c, xv), yv) in yc.iter_mut().zip(xs).zip(ys) {
                *c = (alpha * yv).min(clip * xv);
            }
            let mx = xs.iter().sum::<f64>() / STOI_SEGMENT as f64;
            let my = yc.iter().sum::<f64>() / STOI_SEGMENT as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (xv, yv) in xs.iter().zip(&yc) {
                let (a, c) = (xv - mx, yv - my);
                sxy += a * c;
                sxx += a * a;
                syy += c * c;
            }
            total += sxy / (sxx.sqrt() * syy.sqrt() + f64::EPSILON);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`]. No mean removal.
pub fn si_sdr(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    if clean.len() != estimate.len() {
        return Err(Error::Input(format!(
            "si_sdr needs equal lengths, got {} and {}",
            clean.len(),
            estimate.len()
        )));
    }
    let ss: f64 = clean.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::Input("si_sdr reference is all zeros".into()));
    }
    let dot: f64 = clean.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let alpha = dot / ss;
    let (mut target, mut resid) = (0.0, 0.0);
    for (c, e) in clean.iter().zip(estimate) {
        let t = alpha * c;
        target += t * t;
        resid += (e - t) * (e - t);
    }
    if resid == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / resid).log10()).min(SI_SDR_CAP_DB))
}

/// Mean absolute magnitude difference.
pub fn spec_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("spec_l1", a.shape(), b.shape()));
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub utt_id: String,
    /// Raw STOI in [-1, 1].
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub spec_l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
}

impl EvalResult {
    pub fn mean(&self) -> EvalRow {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        EvalRow {
            utt_id: "MEAN".into(),
            stoi: avg(|r| r.stoi),
            si_sdr_db: avg(|r| r.si_sdr_db),
            spec_l1: avg(|r| r.spec_l1),
        }
    }

    /// Rows whose id satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&EvalRow) -> bool) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// CSV with STOI reported in percent, clamped to [0, 100].
    pub fn to_csv(&self) -> String {
        let mut s = String::from("utt_id,stoi,si_sdr_db,spec_l1\n");
        let line = |s: &mut String, r: &EvalRow| {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.6}",
                r.utt_id,
                100.0 * r.stoi.clamp(0.0, 1.0),
                r.si_sdr_db,
                r.spec_l1
            );
        };
        for r in &self.rows {
            line(&mut s, r);
        }
        line(&mut s, &self.mean());
        s
    }
}

/// Metrics of one enhanced utterance against its clean reference.
pub fn score(
    stft: &Stft,
    id: &str,
    clean: &Waveform,
    enhanced_mag: &Tensor,
    enhanced: &Waveform,
) -> Result<EvalRow> {
    let clean_spec = stft.analyze(&clean.samples)?;
    Ok(EvalRow {
        utt_id: id.to_string(),
        stoi: stoi(clean, enhanced)?,
        si_sdr_db: si_sdr(&clean.samples, &enhanced.samples)?,
        spec_l1: spec_l1(enhanced_mag, &clean_spec.magnitude)?,
    })
}

/// Evaluates `enhance` over `examples` in order.
pub fn evaluate_with(
    stft: &Stft,
    examples: &[Example],
    mut enhance: impl FnMut(&Spectrogram) -> Result<(Tensor, Waveform)>,
) -> Result<EvalResult> {
    let rows = examples
        .iter()
        .map(|ex| {
            let noisy = stft.analyze(&ex.noisy.samples)?;
            let (mag, wave) = enhance(&noisy)?;
            score(stft, &ex.id, &ex.clean, &mag, &wave)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult { rows })
}

/// Metrics of the unprocessed noisy input.
pub fn evaluate_noisy(stft: &Stft, examples: &[Example]) -> Result<EvalResult> {
    let rows = examples
        .iter()
        .map(|ex| {
            let noisy = stft.analyze(&ex.noisy.samples)?;
            score(stft, &ex.id, &ex.clean, &noisy.magnitude, &ex.noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult { rows })
}

pub fn evaluate(net: &MaskNet, stft: &Stft, examples: &[Example]) -> Result<EvalResult> {
    evaluate_with(stft, examples, |spec| net.enhance(stft, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampler_preserves_low_tone() {
        let sr = 16_000.0;
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / sr).sin())
            .collect();
        let y = resample_poly(&x, 5, 8, 4500.0, sr);
        assert_eq!(y.len(), 10_000);
        for (i, v) in y.iter().enumerate().skip(200).take(9_600) {
            let expect = (2.0 * PI * 440.0 * i as f64 / 10_000.0).sin();
            assert!((v - expect).abs() < 1e-3, "{i}: {v} vs {expect}");
        }
    }

    #[test]
    fn resampler_rejects_high_tone() {
        let sr = 16_000.0;
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * 6_500.0 * i as f64 / sr).sin())
            .collect();
        let y = resample_poly(&x, 5, 8, 4500.0, sr);
        let rms = (y[200..9_800].iter().map(|v| v * v).sum::<f64>() / 9_600.0).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }

    #[test]
    fn band_edges_increase() {
        let b = third_octave_bins();
        assert_eq!(b.len(), 15);
        assert!(b
            .windows(2)
            .all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].0 + 1));
        assert!(b[14].1 <= STOI_FFT / 2 + 1);
    }

    #[test]
    fn si_sdr_basics() {
        let x = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(si_sdr(&x, &x).unwrap(), SI_SDR_CAP_DB);
        assert!(matches!(si_sdr(&[0.0; 4], &x), Err(Error::Input(_))));
        assert!(si_sdr(&x, &x[..3]).is_err());
    }

    #[test]
    fn short_input_rejected() {
        let w = Waveform::new(vec![0.1; 4000]).unwrap();
        assert!(matches!(stoi(&w, &w), Err(Error::Input(_))));
    }
}
