//! Synthetic noisy-speech corpus.
//!
//! Clean "speech" is harmonic source-filter audio: a pitch contour set by the
//! prosody class drives a harmonic series whose amplitudes follow formant-like
//! resonances chosen by the current content unit and scaled per speaker.
//! Four noise classes are mixed in at an exact SNR.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{wav, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv64};

pub const NUM_SPEAKERS: usize = 10;
pub const TRAIN_SPEAKERS: std::ops::Range<usize> = 0..8;
pub const VAL_SPEAKERS: std::ops::Range<usize> = 8..10;
pub const NUM_PROSODY: usize = 4;
/// Unit 0 is silence; 1..NUM_UNITS are vowel-like.
pub const NUM_UNITS: usize = 8;
pub const PEAK_LIMIT: f64 = 0.5;

const FORMANTS: [[f64; 3]; NUM_UNITS] = [
    [0.0, 0.0, 0.0],
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
];
const FORMANT_GAIN: [f64; 3] = [1.0, 0.55, 0.3];
const FORMANT_BW: [f64; 3] = [90.0, 110.0, 160.0];

struct Voice {
    f0: f64,
    formant_scale: f64,
    bandwidth_scale: f64,
    tilt: f64,
}

const VOICES: [Voice; NUM_SPEAKERS] = [
    Voice {
        f0: 100.0,
        formant_scale: 0.90,
        bandwidth_scale: 1.0,
        tilt: 0.9,
    },
    Voice {
        f0: 185.0,
        formant_scale: 1.12,
        bandwidth_scale: 1.2,
        tilt: 0.7,
    },
    Voice {
        f0: 120.0,
        formant_scale: 0.95,
        bandwidth_scale: 0.9,
        tilt: 1.1,
    },
    Voice {
        f0: 215.0,
        formant_scale: 1.17,
        bandwidth_scale: 1.3,
        tilt: 0.6,
    },
    Voice {
        f0: 140.0,
        formant_scale: 1.00,
        bandwidth_scale: 1.0,
        tilt: 0.8,
    },
    Voice {
        f0: 108.0,
        formant_scale: 0.92,
        bandwidth_scale: 0.8,
        tilt: 1.2,
    },
    Voice {
        f0: 198.0,
        formant_scale: 1.10,
        bandwidth_scale: 1.1,
        tilt: 0.75,
    },
    Voice {
        f0: 160.0,
        formant_scale: 1.05,
        bandwidth_scale: 1.0,
        tilt: 1.0,
    },
    Voice {
        f0: 128.0,
        formant_scale: 0.97,
        bandwidth_scale: 1.1,
        tilt: 0.95,
    },
    Voice {
        f0: 176.0,
        formant_scale: 1.08,
        bandwidth_scale: 0.9,
        tilt: 0.85,
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseClass {
    White,
    Pink,
    TonalEvent,
    ModulatedBurst,
}

impl NoiseClass {
    pub const ALL: [NoiseClass; 4] = [
        Self::White,
        Self::Pink,
        Self::TonalEvent,
        Self::ModulatedBurst,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::TonalEvent => "tonal_event",
            Self::ModulatedBurst => "modulated_burst",
        }
    }
}

impl fmt::Display for NoiseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Corpus(format!("unknown noise class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanSpec {
    pub speaker_id: usize,
    pub prosody_class: usize,
    /// (unit, duration in samples); durations sum to the signal length.
    pub content_seq: Vec<(usize, usize)>,
    pub duration_s: f64,
    pub seed: u64,
}

impl CleanSpec {
    /// Draws prosody and content for `speaker_id` from `seed`.
    pub fn draw(seed: u64, speaker_id: usize, duration_s: f64) -> Result<Self> {
        if speaker_id >= NUM_SPEAKERS {
            return Err(Error::Corpus(format!("speaker {speaker_id} out of range")));
        }
        if !(0.5..=4.0).contains(&duration_s) {
            return Err(Error::Corpus(format!(
                "duration {duration_s} s outside [0.5, 4]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "clean", 0));
        let prosody_class = rng.random_range(0..NUM_PROSODY);
        let total = (duration_s * f64::from(SAMPLE_RATE)).round() as usize;
        let mut content_seq = Vec::new();
        let mut used = 0;
        let mut prev = 0;
        while used < total {
            let silence = prev != 0 && !content_seq.is_empty() && rng.random::<f64>() < 0.15;
            let unit = if silence {
                0
            } else {
                loop {
                    let u = rng.random_range(1..NUM_UNITS);
                    if u != prev {
                        break u;
                    }
                }
            };
            let ms = if silence {
                rng.random_range(60.0..140.0)
            } else {
                rng.random_range(90.0..220.0)
            };
            let len = ((ms * 1e-3 * f64::from(SAMPLE_RATE)) as usize).min(total - used);
            content_seq.push((unit, len));
            used += len;
            prev = unit;
        }
        Ok(Self {
            speaker_id,
            prosody_class,
            content_seq,
            duration_s,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.content_seq.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unit label at every sample.
    pub fn sample_units(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for &(u, n) in &self.content_seq {
            out.extend(std::iter::repeat_n(u, n));
        }
        out
    }

    /// Unit label at the centre of every STFT frame.
    pub fn frame_units(&self, cfg: &StftConfig) -> Vec<usize> {
        let units = self.sample_units();
        (0..cfg.frames_for(units.len()))
            .map(|t| units[t * cfg.hop + cfg.frame_len / 2])
            .collect()
    }
}

fn pitch_factor(prosody: usize, pos: f64, t: f64) -> f64 {
    match prosody {
        0 => 1.0 - 0.1 * pos,
        1 => 1.0 + 0.4 * pos,
        2 => 1.25 * (1.0 + 0.08 * (2.0 * PI * 5.0 * t).sin()),
        _ => 1.0 - 0.3 * pos,
    }
}

fn energy_factor(prosody: usize, pos: f64, t: f64) -> f64 {
    match prosody {
        2 => 0.75 + 0.25 * (2.0 * PI * 4.0 * t).sin(),
        3 => 1.0 - 0.6 * pos,
        _ => 1.0,
    }
}

/// Deterministic harmonic source-filter rendering of `spec`.
pub fn synth_clean(spec: &CleanSpec) -> Result<Waveform> {
    let voice = VOICES
        .get(spec.speaker_id)
        .ok_or_else(|| Error::Corpus(format!("speaker {} out of range", spec.speaker_id)))?;
    let units = spec.sample_units();
    let n = units.len();
    let sr = f64::from(SAMPLE_RATE);
    let nyq = sr / 2.0 - 200.0;
    // ~8 ms one-pole smoothing of formant targets and gate
    let alpha = 1.0 - (-1.0 / (0.008 * sr)).exp();
    let first = units.iter().copied().find(|u| *u != 0).unwrap_or(1);
    let mut formants = FORMANTS[first].map(|f| f * voice.formant_scale);
    let mut gate = 0.0;
    let mut phase = 0.0f64;
    let mut amps: Vec<f64> = Vec::new();
    let mut out = vec![0.0; n];
    const BLOCK: usize = 32;
    for (i, sample) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let pos = i as f64 / n.max(1) as f64;
        let u = units[i];
        let target_gate = if u == 0 { 0.0 } else { 1.0 };
        gate += alpha * (target_gate - gate);
        if u != 0 {
            for (k, f) in formants.iter_mut().enumerate() {
                *f += alpha * (FORMANTS[u][k] * voice.formant_scale - *f);
            }
        }
        let f0 = voice.f0 * pitch_factor(spec.prosody_class, pos, t);
        if i % BLOCK == 0 {
            let h_max = (nyq / f0).floor() as usize;
            amps.clear();
            for h in 1..=h_max {
                let fh = h as f64 * f0;
                let env: f64 = (0..3)
                    .map(|k| {
                        let bw = FORMANT_BW[k] * voice.bandwidth_scale;
                        FORMANT_GAIN[k] / (1.0 + ((fh - formants[k]) / bw).powi(2))
                    })
                    .sum();
                amps.push((env + 0.01) / (h as f64).powf(voice.tilt));
            }
        }
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let mut s = 0.0;
        for (h, a) in amps.iter().enumerate() {
            s += a * ((h + 1) as f64 * phase).sin();
        }
        *sample = s * gate * energy_factor(spec.prosody_class, pos, t);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "level", 0));
        let level = 0.45 * rng.random_range(0.6..1.0);
        for v in &mut out {
            *v *= level / peak;
        }
    }
    Waveform::new(out)
}

/// Unit-scale noise of `class`, `len` samples.
pub fn synth_noise(class: NoiseClass, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise", class.index() as u64));
    let sr = f64::from(SAMPLE_RATE);
    let white = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    match class {
        NoiseClass::White => (0..len).map(|_| white(&mut rng)).collect(),
        NoiseClass::Pink => {
            // Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = white(&mut rng);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseClass::TonalEvent => {
            let mut out: Vec<f64> = (0..len).map(|_| 0.02 * white(&mut rng)).collect();
            let events = (len as f64 / sr * 3.0).ceil() as usize + 1;
            for _ in 0..events {
                let start = rng.random_range(0..len.max(1));
                let dur = (rng.random_range(0.15..0.4) * sr) as usize;
                let f1 = rng.random_range(400.0..3500.0);
                let f2 = f1 * rng.random_range(1.2..1.6);
                let ph: f64 = rng.random_range(0.0..2.0 * PI);
                let ramp = 0.01 * sr;
                for j in 0..dur.min(len - start) {
                    let jf = j as f64;
                    let env = (jf / ramp).min(1.0).min((dur as f64 - jf) / ramp).max(0.0);
                    let tt = jf / sr;
                    out[start + j] +=
                        env * ((2.0 * PI * f1 * tt + ph).sin() + 0.5 * (2.0 * PI * f2 * tt).sin());
                }
            }
            out
        }
        NoiseClass::ModulatedBurst => {
            let fc = rng.random_range(500.0..3000.0);
            let fm = rng.random_range(3.0..8.0);
            let mph: f64 = rng.random_range(0.0..2.0 * PI);
            // two-pole resonator
            let r: f64 = 0.97;
            let a1 = 2.0 * r * (2.0 * PI * fc / sr).cos();
            let a2 = -r * r;
            let (mut y1, mut y2) = (0.0, 0.0);
            (0..len)
                .map(|i| {
                    let y = white(&mut rng) + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    let m = 0.5 + 0.5 * (2.0 * PI * fm * i as f64 / sr + mph).sin();
                    y * m * m
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub clean: CleanSpec,
    pub noise_class: NoiseClass,
    /// `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    pub clean: Waveform,
    /// Scaled noise actually added (`noisy - clean`).
    pub noise: Vec<f64>,
    /// Joint factor applied to avoid clipping (1 if none).
    pub rescale: f64,
}

pub fn mix(spec: &MixSpec) -> Result<Mixture> {
    if !(spec.snr_db == f64::INFINITY || (0.0..=20.0).contains(&spec.snr_db)) {
        return Err(Error::Corpus(format!(
            "snr_db {} outside [0, 20]",
            spec.snr_db
        )));
    }
    let clean = synth_clean(&spec.clean)?;
    let n = clean.len();
    let mut noise = if spec.snr_db.is_infinite() {
        vec![0.0; n]
    } else {
        let raw = synth_noise(spec.noise_class, n, spec.seed);
        let p_noise = crate::dsp::signal_power(&raw);
        let p_clean = clean.power();
        if p_noise <= 0.0 {
            return Err(Error::Corpus("generated noise has zero power".into()));
        }
        let gain = (p_clean / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        raw.into_iter().map(|v| v * gain).collect()
    };
    let mut clean_s = clean.samples;
    let mut noisy: Vec<f64> = clean_s.iter().zip(&noise).map(|(x, v)| x + v).collect();
    let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rescale = if peak > 1.0 { 0.99 / peak } else { 1.0 };
    if rescale != 1.0 {
        for v in clean_s
            .iter_mut()
            .chain(noise.iter_mut())
            .chain(noisy.iter_mut())
        {
            *v *= rescale;
        }
    }
    Ok(Mixture {
        noisy: Waveform::new(noisy)?,
        clean: Waveform::new(clean_s)?,
        noise,
        rescale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub duration_s: f64,
    pub snr_grid_db: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_size: 500,
            val_size: 50,
            duration_s: 2.0,
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub noisy_path: PathBuf,
    pub clean_path: PathBuf,
    pub speaker_id: usize,
    pub noise_class: NoiseClass,
    pub snr_db: f64,
    pub seed: u64,
}

impl ManifestRow {
    pub fn utt_id(&self) -> String {
        self.noisy_path
            .file_stem()
            .map(|s| s.to_string_lossy().trim_end_matches("_noisy").to_string())
            .unwrap_or_default()
    }

    /// Mixture spec regenerated from the row seed.
    pub fn mix_spec(&self, duration_s: f64) -> Result<MixSpec> {
        Ok(MixSpec {
            clean: CleanSpec::draw(self.seed, self.speaker_id, duration_s)?,
            noise_class: self.noise_class,
            snr_db: self.snr_db,
            seed: self.seed,
        })
    }
}

pub const MANIFEST_HEADER: &str = "noisy_path\tclean_path\tspeaker_id\tnoise_class\tsnr_db\tseed";

/// Train and validation manifests, paths relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub train: Vec<ManifestRow>,
    pub val: Vec<ManifestRow>,
}

fn manifest_file(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.tsv", split.as_str()))
}

fn render_rows(rows: &[ManifestRow]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.noisy_path.display(),
            r.clean_path.display(),
            r.speaker_id,
            r.noise_class,
            r.snr_db,
            r.seed
        ));
    }
    s
}

fn parse_rows(text: &str, origin: &Path) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("noisy_path\t") {
            continue;
        }
        let bad = |m: String| Error::format(origin, format!("line {}: {m}", ln + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!(
                "expected 6 tab-separated fields, found {}",
                f.len()
            )));
        }
        rows.push(ManifestRow {
            noisy_path: PathBuf::from(f[0]),
            clean_path: PathBuf::from(f[1]),
            speaker_id: f[2].parse().map_err(|e| bad(format!("speaker_id: {e}")))?,
            noise_class: f[3].parse().map_err(|e: Error| bad(e.to_string()))?,
            snr_db: f[4].parse().map_err(|e| bad(format!("snr_db: {e}")))?,
            seed: f[5].parse().map_err(|e| bad(format!("seed: {e}")))?,
        });
    }
    Ok(rows)
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let read = |split| -> Result<Vec<ManifestRow>> {
            let p = manifest_file(root, split);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            parse_rows(&text, &p)
        };
        Ok(Self {
            root: root.to_path_buf(),
            train: read(Split::Train)?,
            val: read(Split::Val)?,
        })
    }

    pub fn save(&self) -> Result<()> {
        for (split, rows) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            let p = manifest_file(&self.root, split);
            fs::write(&p, render_rows(rows)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn rows(&self, split: Split) -> &[ManifestRow] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// FNV-1a over both manifest texts.
    pub fn checksum(&self) -> u64 {
        fnv64(format!("{}{}", render_rows(&self.train), render_rows(&self.val)).as_bytes())
    }

    /// Loads the audio of one split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Example>> {
        self.rows(split)
            .iter()
            .map(|row| {
                let noisy = wav::read(&self.root.join(&row.noisy_path))?;
                let clean = wav::read(&self.root.join(&row.clean_path))?;
                if noisy.len() != clean.len() {
                    return Err(Error::Corpus(format!(
                        "{}: noisy and clean lengths differ ({} vs {})",
                        row.noisy_path.display(),
                        noisy.len(),
                        clean.len()
                    )));
                }
                let spec = row.mix_spec(clean.duration_s())?;
                Ok(Example {
                    id: row.utt_id(),
                    noisy,
                    clean,
                    speaker_id: row.speaker_id,
                    noise_class: row.noise_class,
                    snr_db: row.snr_db,
                    prosody_class: spec.clean.prosody_class,
                    clean_spec: spec.clean,
                })
            })
            .collect()
    }
}

/// One loaded mixture with its regenerated labels.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Waveform,
    pub speaker_id: usize,
    pub noise_class: NoiseClass,
    pub snr_db: f64,
    pub prosody_class: usize,
    pub clean_spec: CleanSpec,
}

/// Mixture spec for item `index` of `split`.
pub fn draw_mix_spec(cfg: &CorpusConfig, split: Split, index: usize) -> Result<MixSpec> {
    if cfg.snr_grid_db.is_empty() {
        return Err(Error::Corpus("empty SNR grid".into()));
    }
    let seed = derive_seed(cfg.seed, split.as_str(), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = match split {
        Split::Train => TRAIN_SPEAKERS,
        Split::Val => VAL_SPEAKERS,
    };
    let speaker = rng.random_range(pool);
    let noise_class = NoiseClass::ALL[index % 4];
    let snr_db = cfg.snr_grid_db[rng.random_range(0..cfg.snr_grid_db.len())];
    Ok(MixSpec {
        clean: CleanSpec::draw(seed, speaker, cfg.duration_s)?,
        noise_class,
        snr_db,
        seed,
    })
}

/// Renders every mixture to WAV under `out_dir` and writes the manifests.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.train_size == 0 || cfg.val_size == 0 {
        return Err(Error::Corpus(
            "train_size and val_size must be positive".into(),
        ));
    }
    let mut manifest = Manifest {
        root: out_dir.to_path_buf(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (split, size) in [(Split::Train, cfg.train_size), (Split::Val, cfg.val_size)] {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..size {
            let spec = draw_mix_spec(cfg, split, i)?;
            let m = mix(&spec)?;
            let stem = format!("{}_{i:05}", split.as_str());
            let noisy_rel = PathBuf::from(split.as_str()).join(format!("{stem}_noisy.wav"));
            let clean_rel = PathBuf::from(split.as_str()).join(format!("{stem}_clean.wav"));
            wav::write(&out_dir.join(&noisy_rel), &m.noisy)?;
            wav::write(&out_dir.join(&clean_rel), &m.clean)?;
            let row = ManifestRow {
                noisy_path: noisy_rel,
                clean_path: clean_rel,
                speaker_id: spec.clean.speaker_id,
                noise_class: spec.noise_class,
                snr_db: spec.snr_db,
                seed: spec.seed,
            };
            match split {
                Split::Train => manifest.train.push(row),
                Split::Val => manifest.val.push(row),
            }
        }
    }
    manifest.save()?;
    Ok(manifest)
}
