//! Training loop, learning-rate schedule, checkpoints and experiment tables.

mod tables;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tables::{
    ablation_configs, comb_term_sets, rows_to_csv, run_ablation, run_event_check, run_mtl_compare,
    run_table_base, run_table_comb, EventCheck, TableRow, TableSetup,
};

use crate::autodiff::{AdamConfig, AdamState, ParamSet, Pass, Tape, Tensor};
use crate::aux_ensemble::{
    aux_checkpoint_path, term_losses, weighted_total, AuxEnsemble, AuxSpec, LossWeights,
    PerlInputs, Term,
};
use crate::conformer::{ConformerConfig, MaskNet};
use crate::corpus::{Example, Manifest, Split};
use crate::dsp::{Stft, StftConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, evaluate_noisy, EvalResult, EvalRow};
use crate::mtl::{gradcosine_filter, uncertainty_total, CovState, DwaState, Strategy};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` at the start of each listed (1-based) epoch.
    StepDecay {
        milestones: Vec<usize>,
        factor: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay {
            milestones: vec![6, 8],
            factor: 0.5,
        }
    }
}

impl LrSchedule {
    /// Learning rate for 1-based `epoch`.
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { milestones, factor } => {
                base * factor.powi(milestones.iter().filter(|m| **m <= epoch).count() as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub conformer: ConformerConfig,
    pub stft: StftConfig,
    pub enabled_losses: Vec<Term>,
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Utterances per batch-norm statistics group; must divide the micro-batch.
    pub bn_group: usize,
    pub seed: u64,
    /// Corpus directory holding `train.tsv` and `val.tsv`.
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Directory of `aux_<name>.ckpt` files; unset means untrained frozen extractors.
    pub aux_dir: Option<PathBuf>,
    /// Mask-network checkpoint to start from (fine-tuning).
    pub init_checkpoint: Option<PathBuf>,
    /// Use only the first N training mixtures.
    pub train_limit: Option<usize>,
    /// Use only the first N validation mixtures.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            conformer: ConformerConfig::default(),
            stft: StftConfig::default(),
            enabled_losses: vec![Term::L1],
            strategy: Strategy::default(),
            epochs: 10,
            batch_size: 32,
            accumulation_steps: 8,
            lr: 0.00075,
            lr_schedule: LrSchedule::default(),
            bn_group: 4,
            seed: 0,
            manifest: PathBuf::from("corpus"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            aux_dir: None,
            init_checkpoint: None,
            train_limit: None,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.accumulation_steps.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.conformer.validate()?;
        self.strategy.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.accumulation_steps == 0
            || self.batch_size == 0
            || !self.batch_size.is_multiple_of(self.accumulation_steps)
        {
            return Err(Error::Config(format!(
                "batch_size {} must be a positive multiple of accumulation_steps {}",
                self.batch_size, self.accumulation_steps
            )));
        }
        let micro = self.micro_batch();
        if self.bn_group < 2 || !micro.is_multiple_of(self.bn_group) {
            return Err(Error::Config(format!(
                "bn_group {} must be >= 2 and divide the micro-batch {micro}",
                self.bn_group
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.enabled_losses.is_empty() {
            return Err(Error::Config("enabled_losses is empty".into()));
        }
        let mut seen = self.enabled_losses.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.enabled_losses.len() {
            return Err(Error::Config("enabled_losses lists a term twice".into()));
        }
        if let Strategy::GradCosine { main, .. } = &self.strategy {
            if !self.enabled_losses.contains(main) {
                return Err(Error::Config(format!(
                    "GradCosine main term {main} is not enabled"
                )));
            }
        }
        Ok(())
    }

    /// Aux specs for the enabled perceptual terms.
    pub fn aux_specs(&self) -> Result<Vec<AuxSpec>> {
        self.enabled_losses
            .iter()
            .filter(|t| t.is_aux())
            .map(|&t| match &self.aux_dir {
                Some(dir) => AuxSpec::new(
                    t,
                    aux_checkpoint_path(dir, t).to_string_lossy().into_owned(),
                ),
                None => AuxSpec::random_frozen(t),
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Loaded train and validation mixtures.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let m = Manifest::load(&cfg.manifest)?;
        let mut train = m.load_split(Split::Train)?;
        let mut val = m.load_split(Split::Val)?;
        if let Some(n) = cfg.train_limit {
            train.truncate(n);
        }
        if let Some(n) = cfg.val_limit {
            val.truncate(n);
        }
        if train.len() < cfg.batch_size {
            return Err(Error::Corpus(format!(
                "{} training mixtures cannot fill one batch of {}",
                train.len(),
                cfg.batch_size
            )));
        }
        if val.is_empty() {
            return Err(Error::Corpus("validation split is empty".into()));
        }
        Ok(Self { train, val })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub spec_l1: f64,
}

impl From<EvalRow> for Metrics {
    fn from(r: EvalRow) -> Self {
        Self {
            stoi: r.stoi,
            si_sdr_db: r.si_sdr_db,
            spec_l1: r.spec_l1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    /// Epoch-mean raw loss per enabled term.
    pub raw_losses: Vec<(Term, f64)>,
    /// Epoch-mean applied weight per enabled term.
    pub weights: Vec<(Term, f64)>,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub num_parameters: usize,
    pub noisy_baseline: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation SI-SDR.
    pub best_epoch: usize,
    pub aux_checksums_before: Vec<(Term, u64)>,
    pub aux_checksums_after: Vec<(Term, u64)>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// `epoch,term,raw_loss,weight` rows.
    pub fn weight_trajectory_csv(&self) -> String {
        let mut s = String::from("epoch,term,raw_loss,weight\n");
        for e in &self.epochs {
            for ((t, raw), (_, w)) in e.raw_losses.iter().zip(&e.weights) {
                let _ = writeln!(s, "{},{},{:.9e},{:.9e}", e.epoch, t, raw, w);
            }
        }
        s
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub best: MaskNet,
    pub last: MaskNet,
    /// Validation metrics of the best network, per utterance.
    pub best_eval: EvalResult,
}

/// Per-step weighting state.
enum Weighting {
    Fixed(LossWeights),
    Uncertainty { params: ParamSet, adam: AdamState },
    Cov(CovState),
    Dwa { state: DwaState, current: Vec<f64> },
    GradCosine { weights: LossWeights, main: Term },
}

impl Weighting {
    fn new(strategy: &Strategy, enabled: &[Term]) -> Result<Self> {
        Ok(match strategy {
            Strategy::Fixed { weights } => Weighting::Fixed(*weights),
            Strategy::Equal => Weighting::Fixed(LossWeights::equal()),
            Strategy::Uncertainty => {
                let mut params = ParamSet::new();
                for t in enabled {
                    params.add(format!("log_var.{t}"), Tensor::scalar(0.0));
                }
                let adam = AdamState::for_params(&params);
                Weighting::Uncertainty { params, adam }
            }
            Strategy::Cov => Weighting::Cov(CovState::new(enabled.len())),
            Strategy::Dwa { temperature } => Weighting::Dwa {
                state: DwaState::new(*temperature)?,
                current: vec![1.0; enabled.len()],
            },
            Strategy::GradCosine { weights, main } => Weighting::GradCosine {
                weights: *weights,
                main: *main,
            },
        })
    }
}

fn weights_from(enabled: &[Term], w: &[f64]) -> LossWeights {
    let mut out = LossWeights::from_array([0.0; 7]);
    for (t, v) in enabled.iter().zip(w) {
        out.set(*t, *v);
    }
    out
}

/// Stacked `[B, T, F]` noisy magnitudes, clean magnitudes, noisy phases, and `[B, N]` clean waves.
struct Batch {
    noisy_mag: Tensor,
    clean_mag: Tensor,
    phase: Vec<f64>,
    clean_wave: Tensor,
}

fn make_batch(stft: &Stft, items: &[&Example]) -> Result<Batch> {
    let b = items.len();
    let n = items[0].clean.len();
    let (mut nm, mut cm, mut ph, mut cw) = (
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::with_capacity(b * n),
    );
    let mut tf = (0, 0);
    for ex in items {
        if ex.clean.len() != n {
            return Err(Error::Corpus(format!(
                "{}: utterance lengths differ within a batch",
                ex.id
            )));
        }
        let ns = stft.analyze(&ex.noisy.samples)?;
        let cs = stft.analyze(&ex.clean.samples)?;
        tf = (ns.frames(), ns.bins());
        nm.extend_from_slice(ns.magnitude.data());
        ph.extend_from_slice(&ns.phase);
        cm.extend_from_slice(cs.magnitude.data());
        cw.extend_from_slice(&ex.clean.samples);
    }
    Ok(Batch {
        noisy_mag: Tensor::new(&[b, tf.0, tf.1], nm)?,
        clean_mag: Tensor::new(&[b, tf.0, tf.1], cm)?,
        phase: ph,
        clean_wave: Tensor::new(&[b, n], cw)?,
    })
}

fn mean_metrics(r: &EvalResult) -> Metrics {
    r.mean().into()
}

/// Trains per `cfg` on already loaded data. Writes `best.ckpt`, `last.ckpt`,
/// `run.json` and `weights.csv` under `cfg.checkpoint_dir`.
pub fn train_on(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let stft = Stft::new(cfg.stft)?;
    let f_bins = cfg.stft.bins();
    let aux = AuxEnsemble::from_specs(&cfg.aux_specs()?, f_bins, cfg.seed)?;
    let aux_before = aux.checksums();
    let mut net = MaskNet::build(&cfg.conformer, f_bins, derive_seed(cfg.seed, "net", 0))?;
    if let Some(p) = &cfg.init_checkpoint {
        let init = MaskNet::load(p)?;
        net.params_mut().load_from(init.params())?;
    }
    let enabled = cfg.enabled_losses.clone();
    let k = enabled.len();
    let mut weighting = Weighting::new(&cfg.strategy, &enabled)?;
    let mut adam = AdamState::for_params(net.params());
    let micro = cfg.micro_batch();
    let acc = cfg.accumulation_steps;
    let noisy_baseline = mean_metrics(&evaluate_noisy(&stft, &data.val)?);
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, MaskNet, EvalResult)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_schedule.lr(cfg.lr, epoch);
        let adam_cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut raw_sum = vec![0.0; k];
        let mut w_sum = vec![0.0; k];
        let mut total_sum = 0.0;
        let mut micro_count = 0usize;
        for (step, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let mut term_grads: Vec<Vec<f64>> = Vec::new();
            for mb in batch.chunks(micro) {
                let items: Vec<&Example> = mb.iter().map(|&i| &data.train[i]).collect();
                let b = make_batch(&stft, &items)?;
                let mut tape = Tape::new();
                let bound = net.params().bind(&mut tape, true);
                let noisy = tape.constant(b.noisy_mag);
                let mut pass = Pass::train(Some(cfg.bn_group));
                let mask = net.forward(&mut tape, &bound, noisy, &mut pass)?;
                let enhanced = tape.mul(mask, noisy)?;
                let clean_mag = tape.constant(b.clean_mag);
                let clean_wave = tape.constant(b.clean_wave);
                let inputs = PerlInputs {
                    stft: &stft,
                    enhanced_mag: enhanced,
                    clean_mag,
                    clean_wave,
                    noisy_phase: &b.phase,
                };
                let losses = term_losses(&mut tape, &aux, &enabled, &inputs)?;
                let raws: Vec<f64> = losses.iter().map(|(_, v)| tape.value(*v).item()).collect();
                let diverged = |what: &str, v: f64| {
                    Error::Diverged(format!(
                        "{what} became {v} at epoch {epoch}, step {}, raw losses {:?}",
                        step + 1,
                        enabled.iter().zip(&raws).collect::<Vec<_>>()
                    ))
                };
                if let Some(bad) = raws.iter().find(|v| !v.is_finite()) {
                    return Err(diverged("a raw loss", *bad));
                }
                let applied: Vec<f64>;
                let total_value: f64;
                match &mut weighting {
                    Weighting::Fixed(w) => {
                        let (total, report) = weighted_total(&mut tape, &losses, w)?;
                        applied = enabled.iter().map(|t| w.get(*t)).collect();
                        total_value = report.total;
                        let scaled = tape.scale(total, 1.0 / acc as f64);
                        tape.backward(scaled)?;
                    }
                    Weighting::Cov(state) => {
                        let w = state.update(&raws)?;
                        let lw = weights_from(&enabled, &w);
                        let (total, report) = weighted_total(&mut tape, &losses, &lw)?;
                        applied = w;
                        total_value = report.total;
                        let scaled = tape.scale(total, 1.0 / acc as f64);
                        tape.backward(scaled)?;
                    }
                    Weighting::Dwa { current, .. } => {
                        let lw = weights_from(&enabled, current);
                        let (total, report) = weighted_total(&mut tape, &losses, &lw)?;
                        applied = current.clone();
                        total_value = report.total;
                        let scaled = tape.scale(total, 1.0 / acc as f64);
                        tape.backward(scaled)?;
                    }
                    Weighting::Uncertainty { params, .. } => {
                        let sb = params.bind(&mut tape, true);
                        let s: Vec<_> = params.ids().map(|id| sb.get(id)).collect();
                        let lv: Vec<_> = losses.iter().map(|(_, v)| *v).collect();
                        let total = uncertainty_total(&mut tape, &lv, &s)?;
                        applied = params
                            .ids()
                            .map(|id| (-params.get(id).item()).exp())
                            .collect();
                        total_value = tape.value(total).item();
                        let scaled = tape.scale(total, 1.0 / acc as f64);
                        tape.backward(scaled)?;
                        params.collect_grads(&tape, &sb);
                    }
                    Weighting::GradCosine { weights, .. } => {
                        applied = enabled.iter().map(|t| weights.get(*t)).collect();
                        total_value = raws.iter().zip(&applied).map(|(r, w)| r * w).sum();
                        if term_grads.is_empty() {
                            term_grads = vec![vec![0.0; net.params().num_trainable()]; k];
                        }
                        for (i, (_, v)) in losses.iter().enumerate() {
                            tape.zero_grad();
                            let s = tape.scale(*v, applied[i] / acc as f64);
                            tape.backward(s)?;
                            net.params_mut().zero_grads();
                            net.params_mut().collect_grads(&tape, &bound);
                            term_grads[i]
                                .iter_mut()
                                .zip(net.params().flat_grads())
                                .for_each(|(a, g)| *a += g);
                        }
                        net.params_mut().zero_grads();
                        tape.zero_grad();
                    }
                }
                if !total_value.is_finite() {
                    return Err(diverged("the total loss", total_value));
                }
                if !matches!(weighting, Weighting::GradCosine { .. }) {
                    net.params_mut().collect_grads(&tape, &bound);
                }
                net.params_mut().apply_bn_updates(&pass.bn_updates);
                for i in 0..k {
                    raw_sum[i] += raws[i];
                    w_sum[i] += applied[i];
                }
                total_sum += total_value;
                micro_count += 1;
            }
            if let Weighting::GradCosine { main, .. } = &weighting {
                let mi = enabled.iter().position(|t| t == main).expect("validated");
                let aux_grads: Vec<Vec<f64>> = term_grads
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != mi)
                    .map(|(_, g)| g.clone())
                    .collect();
                let f = gradcosine_filter(&term_grads[mi], &aux_grads)?;
                net.params_mut().set_flat_grads(&f.combined)?;
            }
            net.params_mut().adam_update(&mut adam, &adam_cfg)?;
            net.params_mut().zero_grads();
            if let Weighting::Uncertainty { params, adam: sa } = &mut weighting {
                params.adam_update(sa, &adam_cfg)?;
                params.zero_grads();
            }
        }
        let n = micro_count.max(1) as f64;
        let raw_means: Vec<f64> = raw_sum.iter().map(|v| v / n).collect();
        let w_means: Vec<f64> = w_sum.iter().map(|v| v / n).collect();
        if let Weighting::Dwa { state, current } = &mut weighting {
            state.observe_epoch(&raw_means);
            *current = state.weights(k);
        }
        let val = evaluate(&net, &stft, &data.val)?;
        let vm = mean_metrics(&val);
        log::info!(
            "epoch {epoch}/{}: lr {lr:.2e} train {:.5} val SI-SDR {:.2} dB STOI {:.3}",
            cfg.epochs,
            total_sum / n,
            vm.si_sdr_db,
            vm.stoi
        );
        let echo = serde_json::json!({ "epoch": epoch, "seed": cfg.seed });
        net.save(&cfg.checkpoint_dir.join("last.ckpt"), echo.clone())?;
        if best.as_ref().is_none_or(|b| vm.si_sdr_db > b.1) {
            net.save(&cfg.checkpoint_dir.join("best.ckpt"), echo)?;
            best = Some((epoch, vm.si_sdr_db, net.clone(), val));
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_total: total_sum / n,
            raw_losses: enabled.iter().copied().zip(raw_means).collect(),
            weights: enabled.iter().copied().zip(w_means).collect(),
            val: vm,
        });
    }
    let (best_epoch, _, best_net, best_eval) = best.expect("at least one epoch");
    let record = RunRecord {
        config: cfg.clone(),
        num_parameters: net.num_parameters(),
        noisy_baseline,
        epochs,
        best_epoch,
        aux_checksums_before: aux_before,
        aux_checksums_after: aux.checksums(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Contract(e.to_string()))?;
    let p = cfg.checkpoint_dir.join("run.json");
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = cfg.checkpoint_dir.join("weights.csv");
    fs::write(&p, record.weight_trajectory_csv()).map_err(|e| Error::io(&p, e))?;
    let p = cfg.checkpoint_dir.join("val_best.csv");
    fs::write(&p, best_eval.to_csv()).map_err(|e| Error::io(&p, e))?;
    Ok(TrainOutcome {
        record,
        best: best_net,
        last: net,
        best_eval,
    })
}

/// Loads the manifest named in `cfg` and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainData::load(cfg)?;
    train_on(cfg, &data)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
