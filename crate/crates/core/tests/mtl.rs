mod common;

use perceptual_denoise::aux_ensemble::{LossWeights, Term};
use perceptual_denoise::mtl::{
    dwa_from_history, gradcosine_filter, CovState, DwaState, Strategy, DWA_TEMPERATURE,
};
use rand::Rng;

#[test]
fn uncertainty_optimum_is_log_loss() {
    for l in [0.01, 0.3, 1.0, 2.5, 40.0] {
        let s = common::uncertainty_optimum(l);
        assert!((s - f64::ln(l)).abs() < 1e-8, "L={l}: s*={s}");
    }
}

#[test]
fn cov_matches_full_history_recomputation() {
    let mut r = common::rng(1);
    for trial in 0..20 {
        let k = 2 + trial % 5;
        let mut st = CovState::new(k);
        let mut hist = Vec::new();
        for _ in 0..30 {
            let l: Vec<f64> = (0..k)
                .map(|i| (i as f64 + 1.0) * r.random_range(0.2..2.0))
                .collect();
            hist.push(l.clone());
            let w = st.update(&l).unwrap();
            let o = common::cov_oracle(&hist);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in w.iter().zip(&o) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
    assert!(CovState::new(2).update(&[1.0]).is_err());
}

#[test]
fn dwa_two_term_example() {
    let w = dwa_from_history(&[1.0, 0.5], &[1.0, 1.0], DWA_TEMPERATURE);
    let (a, b) = ((0.5f64).exp(), (0.25f64).exp());
    let oracle = [2.0 * a / (a + b), 2.0 * b / (a + b)];
    assert!((w[0] - oracle[0]).abs() < 1e-12 && (w[1] - oracle[1]).abs() < 1e-12);
    assert!((w[0] - 1.124_353).abs() < 1e-6 && (w[1] - 0.875_647).abs() < 1e-6);
    assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);

    let mut st = DwaState::new(DWA_TEMPERATURE).unwrap();
    st.observe_epoch(&[1.0, 1.0]);
    st.observe_epoch(&[1.0, 0.5]);
    assert_eq!(st.weights(2), w);
    let mut r = common::rng(2);
    for _ in 0..100 {
        let k = r.random_range(1..8);
        let p: Vec<f64> = (0..k).map(|_| r.random_range(0.1..3.0)).collect();
        let q: Vec<f64> = (0..k).map(|_| r.random_range(0.1..3.0)).collect();
        let w = dwa_from_history(&p, &q, r.random_range(0.5..4.0));
        assert!((w.iter().sum::<f64>() - k as f64).abs() < 1e-12);
    }
}

#[test]
fn gradcosine_agrees_with_dot_product_oracle() {
    let mut r = common::rng(3);
    for _ in 0..1000 {
        let n = r.random_range(1..20);
        let main: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let aux: Vec<Vec<f64>> = (0..r.random_range(1..5))
            .map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let f = gradcosine_filter(&main, &aux).unwrap();
        let mut combined = main.clone();
        for (a, ok) in aux.iter().zip(&f.accepted) {
            let dot: f64 = a.iter().zip(&main).map(|(x, y)| x * y).sum();
            assert_eq!(*ok, dot > 0.0);
            if dot > 0.0 {
                combined.iter_mut().zip(a).for_each(|(c, v)| *c += v);
            }
        }
        for (a, b) in f.combined.iter().zip(&combined) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(gradcosine_filter(&[1.0, 2.0], &[vec![1.0]]).is_err());
}

#[test]
fn strategies_round_trip_through_toml_and_validate() {
    #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Wrap {
        strategy: Strategy,
    }
    for s in [
        Strategy::default(),
        Strategy::Equal,
        Strategy::Uncertainty,
        Strategy::Cov,
        Strategy::Dwa { temperature: 2.0 },
        Strategy::GradCosine {
            weights: LossWeights::hand_tuned(),
            main: Term::L1,
        },
    ] {
        let w = Wrap { strategy: s };
        let text = toml::to_string(&w).unwrap();
        assert_eq!(toml::from_str::<Wrap>(&text).unwrap(), w);
        w.strategy.validate().unwrap();
    }
    assert!(Strategy::Dwa { temperature: 0.0 }.validate().is_err());
    let h = LossWeights::hand_tuned().to_array();
    assert_eq!(h, [5e-3, 1e-4, 1.25e-4, 4e-5, 1.7e-4, 3.5e-5, 1.1e-1]);
    assert_eq!(LossWeights::equal().to_array(), [1.0 / 7.0; 7]);
}

proptest::proptest! {
    #[test]
    fn dwa_weights_sum_to_task_count(
        prev in proptest::collection::vec(0.01f64..10.0, 1..8),
        ratio in 0.1f64..3.0,
        t in 0.5f64..5.0,
    ) {
        let before: Vec<f64> = prev.iter().map(|p| p * ratio).collect();
        let w = dwa_from_history(&prev, &before, t);
        proptest::prop_assert!((w.iter().sum::<f64>() - prev.len() as f64).abs() < 1e-12);
        proptest::prop_assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn cov_weights_form_a_distribution(
        steps in proptest::collection::vec(proptest::collection::vec(0.01f64..5.0, 3), 1..20),
    ) {
        let mut st = CovState::new(3);
        for l in &steps {
            let w = st.update(l).unwrap();
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(w.iter().all(|v| *v >= 0.0));
        }
    }
}
