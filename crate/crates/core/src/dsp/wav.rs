//! RIFF/WAVE: 16-bit signed little-endian PCM, mono, 16 kHz only.

use std::fs;
use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32767.0;

pub fn encode(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Waveform> {
    let bad = |msg: &str| Error::format(origin, msg);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated chunk"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let b = &bytes[body..end];
                let tag = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                if tag != 1 {
                    return Err(bad(&format!(
                        "unsupported format tag {tag}, expected 1 (PCM)"
                    )));
                }
                if channels != 1 {
                    return Err(bad(&format!(
                        "expected mono audio, found {channels} channels"
                    )));
                }
                if rate != SAMPLE_RATE {
                    return Err(bad(&format!("expected {SAMPLE_RATE} Hz, found {rate} Hz")));
                }
                if bits != 16 {
                    return Err(bad(&format!("expected 16-bit samples, found {bits}-bit")));
                }
                if !size.is_multiple_of(2) {
                    return Err(bad("odd data chunk length"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / PCM_SCALE)
                    .collect();
                return Waveform::new(samples);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(bad("no data chunk"))
}

pub fn read(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, w: &Waveform) -> Result<()> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "refusing to write {} Hz audio",
            w.sample_rate
        )));
    }
    fs::write(path, encode(w)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let w = Waveform::new((0..300).map(|i| ((i as f64) * 0.05).sin() * 0.7).collect()).unwrap();
        let back = decode(&encode(&w), Path::new("mem")).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 0.5 / PCM_SCALE + 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_rate_and_channels() {
        let w = Waveform::new(vec![0.0; 10]).unwrap();
        let mut bytes = encode(&w);
        bytes[24..28].copy_from_slice(&44100u32.to_le_bytes());
        let err = decode(&bytes, Path::new("x.wav")).unwrap_err().to_string();
        assert!(err.contains("16000 Hz") && err.contains("44100"), "{err}");

        let mut bytes = encode(&w);
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        assert!(decode(&bytes, Path::new("x.wav"))
            .unwrap_err()
            .to_string()
            .contains("mono"));

        let mut bytes = encode(&w);
        bytes[34..36].copy_from_slice(&24u16.to_le_bytes());
        assert!(decode(&bytes, Path::new("x.wav"))
            .unwrap_err()
            .to_string()
            .contains("16-bit"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"hello world, not audio", Path::new("g")).is_err());
    }
}
