//! Experiment tables: baselines, loss combinations, architecture ablation and weighting strategies.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{train_on, write_text, RunRecord, TrainConfig, TrainData, TrainOutcome};
use crate::aux_ensemble::{LossWeights, Term};
use crate::conformer::ConformerConfig;
use crate::corpus::NoiseClass;
use crate::error::{Error, Result};
use crate::mtl::{Strategy, DWA_TEMPERATURE};

/// Shared inputs of every table: the base config, the seeds, and the output directory.
#[derive(Clone, Debug)]
pub struct TableSetup {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub seed: u64,
    pub num_parameters: usize,
    pub best_epoch: usize,
    /// Raw STOI in [0, 1].
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub spec_l1: f64,
    /// Mean STOI over validation mixtures with the tonal-event noise class.
    pub tonal_event_stoi: f64,
}

const CSV_HEADER: &str = "name,seed,params,best_epoch,stoi,si_sdr_db,spec_l1,tonal_event_stoi";

/// Renders rows; STOI columns are reported on a 0-100 scale.
pub fn rows_to_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.6},{:.4}",
            r.name,
            r.seed,
            r.num_parameters,
            r.best_epoch,
            100.0 * r.stoi,
            r.si_sdr_db,
            r.spec_l1,
            100.0 * r.tonal_event_stoi
        );
    }
    s
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn terms_name(terms: &[Term]) -> String {
    terms
        .iter()
        .map(|t| t.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn row_from(name: &str, seed: u64, out: &TrainOutcome, data: &TrainData) -> TableRow {
    let m = out.best_eval.mean();
    let tonal = out.best_eval.filter(|r| {
        data.val
            .iter()
            .any(|e| e.id == r.utt_id && e.noise_class == NoiseClass::TonalEvent)
    });
    TableRow {
        name: name.to_string(),
        seed,
        num_parameters: out.record.num_parameters,
        best_epoch: out.record.best_epoch,
        stoi: m.stoi,
        si_sdr_db: m.si_sdr_db,
        spec_l1: m.spec_l1,
        tonal_event_stoi: if tonal.rows.is_empty() {
            f64::NAN
        } else {
            tonal.mean().stoi
        },
    }
}

struct Variant {
    name: String,
    cfg: TrainConfig,
}

fn run_variants(
    setup: &TableSetup,
    table: &str,
    data: &TrainData,
    variants: &[Variant],
) -> Result<(Vec<TableRow>, Vec<(String, u64, RunRecord)>)> {
    if setup.seeds.is_empty() {
        return Err(Error::Config("table needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for v in variants {
        for &seed in &setup.seeds {
            let mut cfg = v.cfg.clone();
            cfg.seed = seed;
            cfg.checkpoint_dir = setup
                .out_dir
                .join(table)
                .join(slug(&v.name))
                .join(format!("seed{seed}"));
            log::info!("{table}: {} seed {seed}", v.name);
            let out = train_on(&cfg, data)?;
            rows.push(row_from(&v.name, seed, &out, data));
            records.push((v.name.clone(), seed, out.record));
        }
    }
    write_text(
        &setup.out_dir.join(format!("{table}.csv")),
        &rows_to_csv(&rows),
    )?;
    Ok((rows, records))
}

fn with_losses(base: &TrainConfig, terms: &[Term], strategy: Strategy) -> TrainConfig {
    TrainConfig {
        enabled_losses: terms.to_vec(),
        strategy,
        ..base.clone()
    }
}

fn hand_tuned() -> Strategy {
    Strategy::Fixed {
        weights: LossWeights::hand_tuned(),
    }
}

/// Spectral L1 alone, then each perceptual term alone with no L1 term.
pub fn run_table_base(setup: &TableSetup, data: &TrainData) -> Result<Vec<TableRow>> {
    let mut variants = vec![Variant {
        name: "l1".into(),
        cfg: with_losses(&setup.base, &[Term::L1], hand_tuned()),
    }];
    for t in Term::AUX {
        variants.push(Variant {
            name: t.as_str().into(),
            cfg: with_losses(&setup.base, &[t], hand_tuned()),
        });
    }
    Ok(run_variants(setup, "base", data, &variants)?.0)
}

/// Term sets of the combination table, in row order.
pub fn comb_term_sets() -> Vec<Vec<Term>> {
    let mut sets = vec![vec![Term::L1]];
    for t in Term::AUX {
        sets.push(vec![Term::L1, t]);
    }
    sets.push(vec![Term::L1, Term::Pase, Term::Event]);
    sets.push(vec![Term::L1, Term::Pase, Term::Event, Term::Speaker]);
    sets.push(Term::ALL.to_vec());
    sets
}

/// Verdict on whether adding the event term helps tonal-event noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCheck {
    /// Per seed: (seed, l1 spec_l1, l1+event spec_l1, l1 tonal STOI, l1+event tonal STOI).
    pub per_seed: Vec<(u64, f64, f64, f64, f64)>,
    /// Every seed keeps spectral L1 within 10% of the l1-only run.
    pub spec_l1_within_10pct: bool,
    /// Seeds where l1+event has strictly higher tonal-event STOI.
    pub tonal_wins: usize,
    pub met: bool,
}

impl EventCheck {
    pub fn from_rows(rows: &[TableRow], seeds: &[u64]) -> Result<Self> {
        let find = |name: &str, seed: u64| {
            rows.iter()
                .find(|r| r.name == name && r.seed == seed)
                .ok_or_else(|| Error::Contract(format!("missing row {name} seed {seed}")))
        };
        let mut per_seed = Vec::new();
        for &s in seeds {
            let a = find("l1", s)?;
            let b = find("l1+event", s)?;
            per_seed.push((
                s,
                a.spec_l1,
                b.spec_l1,
                a.tonal_event_stoi,
                b.tonal_event_stoi,
            ));
        }
        let spec_l1_within_10pct = per_seed.iter().all(|p| p.2 <= 1.1 * p.1);
        let tonal_wins = per_seed.iter().filter(|p| p.4 > p.3).count();
        let met = spec_l1_within_10pct && 2 * tonal_wins > seeds.len();
        Ok(Self {
            per_seed,
            spec_l1_within_10pct,
            tonal_wins,
            met,
        })
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        for (seed, a, b, ta, tb) in &self.per_seed {
            let _ = writeln!(
                s,
                "seed {seed}: spec_l1 l1={a:.6} l1+event={b:.6}; tonal-event STOI l1={:.2} l1+event={:.2}",
                100.0 * ta,
                100.0 * tb
            );
        }
        let _ = writeln!(
            s,
            "spec_l1 within 10%: {}; tonal-event STOI wins: {}/{}",
            self.spec_l1_within_10pct,
            self.tonal_wins,
            self.per_seed.len()
        );
        if self.met {
            s.push_str("event term: expected benefit observed\n");
        } else {
            s.push_str("FLAG: event term did not show the expected tonal-event benefit\n");
        }
        s
    }
}

/// Combination table. Also writes `comb_event_check.txt`.
pub fn run_table_comb(setup: &TableSetup, data: &TrainData) -> Result<(Vec<TableRow>, EventCheck)> {
    let variants: Vec<Variant> = comb_term_sets()
        .into_iter()
        .map(|terms| Variant {
            name: if terms.len() == Term::ALL.len() {
                "perl".into()
            } else {
                terms_name(&terms)
            },
            cfg: with_losses(&setup.base, &terms, hand_tuned()),
        })
        .collect();
    let rows = run_variants(setup, "comb", data, &variants)?.0;
    let check = EventCheck::from_rows(&rows, &setup.seeds)?;
    write_text(&setup.out_dir.join("comb_event_check.txt"), &check.report())?;
    Ok((rows, check))
}

/// Just the l1 and l1+event rows of the combination table plus the verdict.
/// Writes `event.csv` and `event_check.txt`.
pub fn run_event_check(
    setup: &TableSetup,
    data: &TrainData,
) -> Result<(Vec<TableRow>, EventCheck)> {
    let variants: Vec<Variant> = [vec![Term::L1], vec![Term::L1, Term::Event]]
        .iter()
        .map(|terms| Variant {
            name: terms_name(terms),
            cfg: with_losses(&setup.base, terms, hand_tuned()),
        })
        .collect();
    let rows = run_variants(setup, "event", data, &variants)?.0;
    let check = EventCheck::from_rows(&rows, &setup.seeds)?;
    write_text(&setup.out_dir.join("event_check.txt"), &check.report())?;
    Ok((rows, check))
}

/// Cumulative ablation: full, then swish to ReLU, then no conv module, no macaron, no relative PE.
pub fn ablation_configs(full: &ConformerConfig) -> Vec<(String, ConformerConfig)> {
    let mut out = vec![("full".to_string(), full.clone())];
    let mut c = full.clone();
    c.use_swish = false;
    out.push(("relu".into(), c.clone()));
    c.use_conv_module = false;
    out.push(("-conv".into(), c.clone()));
    c.use_macaron = false;
    out.push(("-macaron".into(), c.clone()));
    c.use_relative_pe = false;
    out.push(("-relpe".into(), c));
    out
}

/// Ablation table; losses and weighting come from the base config.
pub fn run_ablation(setup: &TableSetup, data: &TrainData) -> Result<Vec<TableRow>> {
    let variants: Vec<Variant> = ablation_configs(&setup.base.conformer)
        .into_iter()
        .map(|(name, conformer)| Variant {
            name,
            cfg: TrainConfig {
                conformer,
                ..setup.base.clone()
            },
        })
        .collect();
    Ok(run_variants(setup, "ablation", data, &variants)?.0)
}

/// Weighting-strategy comparison with all seven terms. Also writes
/// `mtl_weights.csv` (strategy, seed, epoch, term, raw loss, weight).
///
/// The fine-tune row first trains l1+event, then continues from its best
/// checkpoint with the full hand-tuned objective.
pub fn run_mtl_compare(setup: &TableSetup, data: &TrainData) -> Result<Vec<TableRow>> {
    let all = Term::ALL.to_vec();
    let base = &setup.base;
    let hand = LossWeights::hand_tuned();
    let plain = [
        ("hand_tuned", hand_tuned()),
        ("equal", Strategy::Equal),
        ("cov", Strategy::Cov),
        ("uncertainty", Strategy::Uncertainty),
        (
            "dwa",
            Strategy::Dwa {
                temperature: DWA_TEMPERATURE,
            },
        ),
        (
            "gradcosine",
            Strategy::GradCosine {
                weights: hand,
                main: Term::L1,
            },
        ),
    ];
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let (r, rec) = run_variants(
        setup,
        "mtl",
        data,
        &[Variant {
            name: plain[0].0.into(),
            cfg: with_losses(base, &all, plain[0].1.clone()),
        }],
    )?;
    rows.extend(r);
    records.extend(rec);

    // Fine-tune: pretrain l1+event per seed, then the full objective from its best checkpoint.
    let mut ft_variants = Vec::new();
    for &seed in &setup.seeds {
        let mut pre = with_losses(base, &[Term::L1, Term::Event], hand_tuned());
        pre.seed = seed;
        pre.checkpoint_dir = setup
            .out_dir
            .join("mtl")
            .join("finetune_init")
            .join(format!("seed{seed}"));
        train_on(&pre, data)?;
        let mut cfg = with_losses(base, &all, hand_tuned());
        cfg.init_checkpoint = Some(pre.checkpoint_dir.join("best.ckpt"));
        ft_variants.push((seed, cfg));
    }
    for (seed, cfg) in ft_variants {
        let one = TableSetup {
            base: base.clone(),
            seeds: vec![seed],
            out_dir: setup.out_dir.clone(),
        };
        let (r, rec) = run_variants(
            &one,
            "mtl",
            data,
            &[Variant {
                name: "finetune_l1+event".into(),
                cfg,
            }],
        )?;
        rows.extend(r);
        records.extend(rec);
    }
    for (name, strategy) in plain.iter().skip(1) {
        let (r, rec) = run_variants(
            setup,
            "mtl",
            data,
            &[Variant {
                name: (*name).into(),
                cfg: with_losses(base, &all, strategy.clone()),
            }],
        )?;
        rows.extend(r);
        records.extend(rec);
    }
    write_text(&setup.out_dir.join("mtl.csv"), &rows_to_csv(&rows))?;
    let mut traj = String::from("strategy,seed,epoch,term,raw_loss,weight\n");
    for (name, seed, rec) in &records {
        for line in rec.weight_trajectory_csv().lines().skip(1) {
            let _ = writeln!(traj, "{name},{seed},{line}");
        }
    }
    write_text(&setup.out_dir.join("mtl_weights.csv"), &traj)?;
    Ok(rows)
}
