mod common;

use perceptual_denoise::autodiff::{Pass, Tape, Tensor};
use perceptual_denoise::conformer::{ConformerConfig, MaskNet};
use perceptual_denoise::dsp::{Stft, StftConfig};
use perceptual_denoise::metrics::si_sdr;
use perceptual_denoise::trainer::ablation_configs;

/// Trainable scalars, counted from the layer inventory.
fn expected_params(c: &ConformerConfig, f: usize) -> usize {
    let d = c.attention_dim;
    let e = c.ffn_expansion;
    let ln = 2 * d;
    let lin = |i: usize, o: usize| i * o + o;
    let ffn = ln + lin(d, e * d) + lin(e * d, d);
    let mut block = ffn + ln + ln + 4 * lin(d, d);
    if c.use_macaron {
        block += ffn;
    }
    if c.use_relative_pe {
        block += c.heads * (2 * c.rel_max_distance + 1);
    }
    if c.use_conv_module {
        let s = d / c.se_factor;
        block +=
            ln + lin(d, 2 * d) + c.conv_kernel * d + d + 2 * d + lin(d, s) + lin(s, d) + lin(d, d);
    }
    2 * f + lin(f, d) + c.num_blocks * block + lin(d, f)
}

fn small() -> ConformerConfig {
    ConformerConfig {
        attention_dim: 16,
        num_blocks: 2,
        heads: 2,
        ffn_expansion: 2,
        conv_kernel: 5,
        se_factor: 4,
        rel_max_distance: 8,
        ..ConformerConfig::default()
    }
}

fn noisy_batch(seed: u64, b: usize, t: usize, f: usize) -> Tensor {
    common::rand_away(&mut common::rng(seed), &[b, t, f], 0.0, 2.0, false)
}

#[test]
fn parameter_count_matches_closed_form_for_all_toggles() {
    assert_eq!(
        MaskNet::build(&ConformerConfig::default(), 257, 0)
            .unwrap()
            .num_parameters(),
        expected_params(&ConformerConfig::default(), 257)
    );
    for bits in 0..16u32 {
        let cfg = ConformerConfig {
            use_swish: bits & 1 != 0,
            use_conv_module: bits & 2 != 0,
            use_macaron: bits & 4 != 0,
            use_relative_pe: bits & 8 != 0,
            ..small()
        };
        let net = MaskNet::build(&cfg, 33, 1).unwrap();
        assert_eq!(net.num_parameters(), expected_params(&cfg, 33), "{cfg:?}");
        let mask = net.predict_mask(&noisy_batch(2, 2, 7, 33)).unwrap();
        assert_eq!(mask.shape(), &[2, 7, 33]);
        assert!(mask.data().iter().all(|m| *m > 0.0 && *m < 1.0));
    }
}

#[test]
fn ablation_steps_never_add_parameters() {
    let counts: Vec<usize> = ablation_configs(&small())
        .iter()
        .map(|(_, c)| MaskNet::build(c, 33, 0).unwrap().num_parameters())
        .collect();
    assert_eq!(counts.len(), 5);
    assert_eq!(counts[0], counts[1], "activation swap keeps the count");
    assert!(
        counts[1] > counts[2] && counts[2] > counts[3] && counts[3] > counts[4],
        "{counts:?}"
    );
}

#[test]
fn invalid_configs_rejected() {
    for bad in [
        ConformerConfig {
            heads: 3,
            ..small()
        },
        ConformerConfig {
            conv_kernel: 4,
            ..small()
        },
        ConformerConfig {
            se_factor: 5,
            ..small()
        },
        ConformerConfig {
            num_blocks: 0,
            ..small()
        },
    ] {
        assert!(MaskNet::build(&bad, 33, 0).is_err(), "{bad:?}");
    }
    let net = MaskNet::build(&small(), 33, 0).unwrap();
    assert!(net.predict_mask(&noisy_batch(0, 1, 4, 32)).is_err());
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 4, 15]));
    assert!(net
        .conformer_block_forward(&mut tape, &bound, 0, x, &mut Pass::eval())
        .is_err());
}

#[test]
fn forced_masks_pass_or_silence_the_input() {
    let stft = Stft::new(StftConfig::default()).unwrap();
    let x = common::randn(&mut common::rng(3), &[4000]).into_data();
    let spec = stft.analyze(&x).unwrap();
    for (bias, expect_pass) in [(1000.0, true), (-1000.0, false)] {
        let mut net = MaskNet::build(&small(), 257, 4).unwrap();
        let ps = net.params_mut();
        let w = ps.find("head.w").unwrap();
        let b = ps.find("head.b").unwrap();
        *ps.get_mut(w) = Tensor::zeros(&[16, 257]);
        *ps.get_mut(b) = Tensor::full(&[257], bias);
        let (mag, wave) = net.enhance(&stft, &spec).unwrap();
        if expect_pass {
            assert_eq!(mag, spec.magnitude);
            assert!(si_sdr(&x[512..3400], &wave.samples[512..3400]).unwrap() > 99.0);
        } else {
            assert!(mag.data().iter().all(|m| *m == 0.0));
            assert!(wave.samples.iter().all(|s| *s == 0.0));
        }
    }
}

#[test]
fn frames_are_preserved_and_batch_items_independent_in_eval() {
    let net = MaskNet::build(&small(), 33, 5).unwrap();
    let batch = noisy_batch(6, 3, 11, 33);
    let m = net.predict_mask(&batch).unwrap();
    assert_eq!(m.shape(), &[3, 11, 33]);
    let one = Tensor::new(&[11, 33], batch.data()[11 * 33..2 * 11 * 33].to_vec()).unwrap();
    let m1 = net.predict_mask(&one).unwrap();
    for (a, b) in m1.data().iter().zip(&m.data()[11 * 33..2 * 11 * 33]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn evaluation_leaves_parameters_untouched_and_training_updates_statistics() {
    let mut net = MaskNet::build(&small(), 33, 7).unwrap();
    let before = net.params().checksum();
    net.predict_mask(&noisy_batch(8, 2, 9, 33)).unwrap();
    assert_eq!(net.params().checksum(), before);

    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, true);
    let x = tape.constant(noisy_batch(9, 4, 9, 33));
    let mut pass = Pass::train(Some(2));
    net.forward(&mut tape, &bound, x, &mut pass).unwrap();
    assert!(!pass.bn_updates.is_empty());
    net.params_mut().apply_bn_updates(&pass.bn_updates);
    assert_ne!(net.params().checksum(), before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net = MaskNet::build(&small(), 33, 10).unwrap();
    let p = dir.path().join("net.ckpt");
    net.save(&p, serde_json::json!({"note": "x"})).unwrap();
    let back = MaskNet::load(&p).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.params().checksum(), net.params().checksum());
    let x = noisy_batch(11, 2, 6, 33);
    assert_eq!(
        back.predict_mask(&x).unwrap(),
        net.predict_mask(&x).unwrap()
    );
    let bytes = std::fs::read(&p).unwrap();
    back.save(
        &dir.path().join("again.ckpt"),
        serde_json::json!({"note": "x"}),
    )
    .unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.ckpt")).unwrap(), bytes);
}

#[test]
fn same_seed_same_weights() {
    let a = MaskNet::build(&small(), 33, 12).unwrap();
    let b = MaskNet::build(&small(), 33, 12).unwrap();
    let c = MaskNet::build(&small(), 33, 13).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
}
