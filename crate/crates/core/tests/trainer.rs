mod common;

use common::{max_param_diff, tiny_corpus, tiny_train_config};
use perceptual_denoise::aux_ensemble::Term;
use perceptual_denoise::conformer::MaskNet;
use perceptual_denoise::mtl::Strategy;
use perceptual_denoise::trainer::{
    ablation_configs, comb_term_sets, train_on, LrSchedule, TableSetup, TrainConfig, TrainData,
};
use perceptual_denoise::Error;

fn data(cfg: &TrainConfig) -> TrainData {
    TrainData::load(cfg).unwrap()
}

fn base(out: &std::path::Path) -> TrainConfig {
    let mut cfg = tiny_train_config(tiny_corpus(16, 4), out);
    cfg.train_limit = Some(8);
    cfg
}

#[test]
fn accumulation_steps_do_not_change_the_update() {
    let dir = tempfile::tempdir().unwrap();
    let mut nets = Vec::new();
    for acc in [1, 2, 4] {
        let mut cfg = base(&dir.path().join(format!("acc{acc}")));
        cfg.epochs = 1;
        cfg.accumulation_steps = acc;
        nets.push(train_on(&cfg, &data(&cfg)).unwrap().last);
    }
    for n in &nets[1..] {
        let d = max_param_diff(nets[0].params(), n.params());
        assert!(d < 1e-8, "max parameter difference {d:e}");
    }
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let mut cfg = base(&dir.path().join(format!("run{i}")));
        cfg.enabled_losses = vec![Term::L1, Term::Event];
        train_on(&cfg, &data(&cfg)).unwrap();
        runs.push(cfg.checkpoint_dir);
    }
    for f in ["best.ckpt", "last.ckpt", "weights.csv", "val_best.csv"] {
        assert_eq!(
            read(&runs[0].join(f)),
            read(&runs[1].join(f)),
            "{f} differs"
        );
    }
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = base(&dir.path().join("a"));
    a.epochs = 1;
    let mut b = a.clone();
    b.seed = 1;
    b.checkpoint_dir = dir.path().join("b");
    let na = train_on(&a, &data(&a)).unwrap().last;
    let nb = train_on(&b, &data(&b)).unwrap().last;
    assert!(max_param_diff(na.params(), nb.params()) > 0.0);
}

#[test]
fn run_record_and_frozen_aux() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(dir.path());
    cfg.enabled_losses = vec![Term::L1, Term::Event, Term::Pase];
    let out = train_on(&cfg, &data(&cfg)).unwrap();
    let r = &out.record;
    assert_eq!(r.epochs.len(), 2);
    assert!((1..=2).contains(&r.best_epoch));
    assert_eq!(r.aux_checksums_before, r.aux_checksums_after);
    assert_eq!(r.aux_checksums_before.len(), 2);
    assert_eq!(r.num_parameters, out.best.num_parameters());
    for e in &r.epochs {
        assert_eq!(e.raw_losses.len(), 3);
        assert!(e.raw_losses.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
        assert!(e.val.stoi.is_finite() && e.val.si_sdr_db.is_finite());
    }
    let best_val = r.best().val.si_sdr_db;
    assert!(r.epochs.iter().all(|e| e.val.si_sdr_db <= best_val));
    let csv = r.weight_trajectory_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.starts_with("epoch,term,raw_loss,weight"));
    let reloaded = MaskNet::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(max_param_diff(reloaded.params(), out.best.params()), 0.0);
    assert!(dir.path().join("run.json").exists());
}

#[test]
fn every_strategy_trains() {
    let dir = tempfile::tempdir().unwrap();
    for (i, s) in [
        Strategy::Equal,
        Strategy::Cov,
        Strategy::Uncertainty,
        Strategy::Dwa { temperature: 2.0 },
        Strategy::GradCosine {
            weights: perceptual_denoise::aux_ensemble::LossWeights::hand_tuned(),
            main: Term::L1,
        },
    ]
    .into_iter()
    .enumerate()
    {
        let mut cfg = base(&dir.path().join(format!("s{i}")));
        cfg.enabled_losses = vec![Term::L1, Term::Event];
        cfg.strategy = s;
        cfg.epochs = 3;
        let out = train_on(&cfg, &data(&cfg)).unwrap();
        for e in &out.record.epochs {
            assert!(e.train_total.is_finite());
            assert!(e.weights.iter().all(|(_, w)| w.is_finite() && *w >= 0.0));
        }
    }
}

#[test]
fn nan_parameters_report_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(&dir.path().join("run"));
    let mut net = MaskNet::build(&cfg.conformer, cfg.stft.bins(), 0).unwrap();
    let id = net
        .params()
        .find("head.b")
        .or_else(|| net.params().ids().next())
        .unwrap();
    let t = net.params_mut().get_mut(id);
    t.data_mut().fill(f64::NAN);
    let init = dir.path().join("nan.ckpt");
    net.save(&init, serde_json::Value::Null).unwrap();
    cfg.init_checkpoint = Some(init);
    match train_on(&cfg, &data(&cfg)) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.record.best_epoch)
        ),
    }
}

#[test]
fn missing_aux_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(&dir.path().join("run"));
    cfg.enabled_losses = vec![Term::L1, Term::Speaker];
    cfg.aux_dir = Some(dir.path().join("nowhere"));
    let err = train_on(&cfg, &data(&cfg)).err().expect("must fail");
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    assert_eq!(ok.micro_batch(), 4);
    let bad = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = TrainConfig::default();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(&|c| c.batch_size = 30));
    assert!(bad(&|c| c.accumulation_steps = 0));
    assert!(bad(&|c| c.epochs = 0));
    assert!(bad(&|c| c.lr = 0.0));
    assert!(bad(&|c| c.bn_group = 1));
    assert!(bad(&|c| c.bn_group = 3));
    assert!(bad(&|c| c.enabled_losses.clear()));
    assert!(bad(&|c| c.enabled_losses = vec![Term::L1, Term::L1]));
    assert!(bad(&|c| {
        c.enabled_losses = vec![Term::Event];
        c.strategy = Strategy::GradCosine {
            weights: perceptual_denoise::aux_ensemble::LossWeights::hand_tuned(),
            main: Term::L1,
        };
    }));
    let msg = {
        let mut c = TrainConfig::default();
        c.batch_size = 30;
        c.validate().unwrap_err().to_string()
    };
    assert!(msg.contains("batch_size 30"), "{msg}");
}

#[test]
fn config_toml_round_trip_and_unknown_keys() {
    let mut c = TrainConfig::default();
    c.enabled_losses = vec![Term::L1, Term::Emotion];
    c.strategy = Strategy::Dwa { temperature: 2.0 };
    let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back.to_toml().unwrap(), c.to_toml().unwrap());
    assert!(TrainConfig::from_toml("epochs = 3\nbogus = 1\n").is_err());
    assert!(TrainConfig::from_toml("[conformer]\nattention_dim = 64\nwidth = 2\n").is_err());
    let partial = TrainConfig::from_toml("epochs = 3\n").unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.batch_size, 32);
    assert_eq!(partial.lr, 0.00075);
}

#[test]
fn default_training_hyperparameters() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size), (10, 32));
    assert_eq!(c.lr, 0.00075);
    assert_eq!(c.enabled_losses, vec![Term::L1]);
}

#[test]
fn lr_schedules() {
    let step = LrSchedule::StepDecay {
        milestones: vec![3, 5],
        factor: 0.5,
    };
    let lrs: Vec<f64> = (1..=6).map(|e| step.lr(1.0, e)).collect();
    assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    assert!((1..=10).all(|e| LrSchedule::Constant.lr(0.1, e) == 0.1));
}

#[test]
fn data_limits_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(dir.path());
    let d = data(&cfg);
    assert_eq!((d.train.len(), d.val.len()), (8, 4));
    cfg.val_limit = Some(2);
    assert_eq!(data(&cfg).val.len(), 2);
    cfg.train_limit = Some(4);
    assert!(TrainData::load(&cfg).is_err());
    cfg.manifest = dir.path().join("missing");
    assert!(TrainData::load(&cfg).is_err());
}

#[test]
fn table_shapes() {
    let comb = comb_term_sets();
    assert_eq!(comb.len(), 10);
    assert!(comb.iter().all(|s| s.contains(&Term::L1)));
    assert_eq!(comb.last().unwrap().len(), 7);

    let full = TrainConfig::default().conformer;
    let ab = ablation_configs(&full);
    let names: Vec<&str> = ab.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["full", "relu", "-conv", "-macaron", "-relpe"]);
    assert!(
        !ab[4].1.use_swish
            && !ab[4].1.use_conv_module
            && !ab[4].1.use_macaron
            && !ab[4].1.use_relative_pe
    );

    let dir = tempfile::tempdir().unwrap();
    let mut b = base(&dir.path().join("unused"));
    b.epochs = 1;
    let setup = TableSetup {
        base: b.clone(),
        seeds: vec![0],
        out_dir: dir.path().to_path_buf(),
    };
    let d = data(&b);
    let rows = perceptual_denoise::trainer::run_ablation(&setup, &d).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows
        .windows(2)
        .all(|w| w[0].num_parameters >= w[1].num_parameters));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
