mod common;

use perceptual_denoise::autodiff::Tensor;
use perceptual_denoise::corpus::{mix, CleanSpec, MixSpec, NoiseClass};
use perceptual_denoise::dsp::Waveform;
use perceptual_denoise::metrics::{
    resample_poly, si_sdr, spec_l1, stoi, EvalResult, EvalRow, SI_SDR_CAP_DB,
};

fn speech(seed: u64) -> Waveform {
    perceptual_denoise::corpus::synth_clean(
        &CleanSpec::draw(seed, (seed % 10) as usize, 2.0).unwrap(),
    )
    .unwrap()
}

#[test]
fn stoi_of_identical_signals_is_one() {
    for s in 0..5 {
        let x = speech(s);
        let v = stoi(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn stoi_rejects_bad_inputs() {
    let x = speech(1);
    let short = Waveform::new(x.samples[..4000].to_vec()).unwrap();
    assert!(stoi(&short, &short).is_err());
    let y = Waveform::new(x.samples[..20000].to_vec()).unwrap();
    assert!(stoi(&x, &y).is_err());
}

#[test]
fn stoi_increases_with_snr() {
    for (seed, class) in [
        (3, NoiseClass::White),
        (4, NoiseClass::Pink),
        (5, NoiseClass::TonalEvent),
        (6, NoiseClass::ModulatedBurst),
    ] {
        let mut prev = -1.0;
        for snr in [0.0, 5.0, 10.0, 15.0, 20.0] {
            let m = mix(&MixSpec {
                clean: CleanSpec::draw(seed, seed as usize, 2.0).unwrap(),
                noise_class: class,
                snr_db: snr,
                seed,
            })
            .unwrap();
            let v = stoi(&m.clean, &m.noisy).unwrap();
            assert!(v > prev, "{class}: STOI {v} at {snr} dB not above {prev}");
            prev = v;
        }
    }
}

#[test]
fn si_sdr_is_scale_invariant_and_matches_orthogonal_oracle() {
    let mut r = common::rng(7);
    let s = common::randn(&mut r, &[4000]).into_data();
    let n = common::randn(&mut r, &[4000]).into_data();
    // Remove the component of n along s so the oracle is exact.
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let proj: f64 = s.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / ss;
    let n: Vec<f64> = n.iter().zip(&s).map(|(b, a)| b - proj * a).collect();
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let g = (ss / (nn * 10.0)).sqrt();
    let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + g * b).collect();
    let v = si_sdr(&s, &est).unwrap();
    assert!((v - 10.0).abs() < 1e-9, "{v}");
    // Power-of-two scales are exact in floating point, so the value must not move at all.
    for c in [0.125, 0.5, 2.0, 1024.0] {
        let scaled: Vec<f64> = est.iter().map(|x| c * x).collect();
        assert_eq!(
            si_sdr(&s, &scaled).unwrap().to_bits(),
            v.to_bits(),
            "scale {c}"
        );
    }
    for c in [1e-3, 0.3, 7.0, 1234.5] {
        let scaled: Vec<f64> = est.iter().map(|x| c * x).collect();
        assert!(
            (si_sdr(&s, &scaled).unwrap() - v).abs() < 1e-12,
            "scale {c}"
        );
    }
    assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CAP_DB);
    assert!(si_sdr(&s, &s[..10]).is_err());
    assert!(si_sdr(&[0.0; 4], &[1.0; 4]).is_err());
}

#[test]
fn resampler_preserves_a_passband_tone() {
    let x: Vec<f64> = (0..16000)
        .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 16000.0).sin())
        .collect();
    let y = resample_poly(&x, 5, 8, 4500.0, 16000.0);
    assert_eq!(y.len(), 10000);
    let mut worst: f64 = 0.0;
    for (i, v) in y.iter().enumerate().skip(200).take(9600) {
        let want = (std::f64::consts::TAU * 1000.0 * i as f64 / 10000.0).sin();
        worst = worst.max((v - want).abs());
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn spec_l1_and_csv() {
    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![1.5, 2.0, 2.0, 4.0]).unwrap();
    assert_eq!(spec_l1(&a, &b).unwrap(), 0.375);
    assert!(spec_l1(&a, &Tensor::zeros(&[4])).is_err());
    let r = EvalResult {
        rows: vec![
            EvalRow {
                utt_id: "a".into(),
                stoi: 0.5,
                si_sdr_db: 2.0,
                spec_l1: 0.1,
            },
            EvalRow {
                utt_id: "b".into(),
                stoi: 1.2,
                si_sdr_db: 4.0,
                spec_l1: 0.3,
            },
        ],
    };
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "utt_id,stoi,si_sdr_db,spec_l1");
    assert_eq!(lines[1], "a,50.0000,2.0000,0.100000");
    assert_eq!(lines[2], "b,100.0000,4.0000,0.300000");
    assert!(lines[3].starts_with("MEAN,85.0000,3.0000,0.2"));
}
