use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use perceptual_denoise::aux_ensemble::{
    aux_checkpoint_path, pretrain_toy_aux, PretrainConfig, Term,
};
use perceptual_denoise::conformer::MaskNet;
use perceptual_denoise::corpus::{build_corpus, CorpusConfig, Manifest, Split};
use perceptual_denoise::dsp::Stft;
use perceptual_denoise::metrics::{evaluate, evaluate_noisy};
use perceptual_denoise::trainer::{
    rows_to_csv, run_ablation, run_event_check, run_mtl_compare, run_table_base, run_table_comb,
    train, TableSetup, TrainConfig, TrainData,
};

/// Speech denoiser trained with an ensemble of perceptual losses.
///
/// Relative paths in configs and flags resolve against the output root
/// (`PDENOISE_OUT`, default `pdenoise_out`).
#[derive(Parser, Debug)]
#[command(name = "pdenoise", version)]
struct Cli {
    /// Output root for corpora, checkpoints and tables.
    #[arg(
        long,
        env = "PDENOISE_OUT",
        default_value = "pdenoise_out",
        global = true
    )]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthetic corpus generation.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Auxiliary feature networks.
    Aux {
        #[command(subcommand)]
        cmd: AuxCmd,
    },
    /// Train a mask network from a TOML config.
    Train { config: PathBuf },
    /// Score a checkpoint (or the unprocessed mixtures) on a corpus split.
    Eval(EvalArgs),
    /// Run an experiment grid and write its CSV.
    Table(TableArgs),
    /// Print a config with every field at its default.
    DefaultConfig,
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    Build {
        /// Corpus directory, relative to the output root.
        #[arg(long, default_value = "corpus")]
        dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        train_size: usize,
        #[arg(long, default_value_t = 50)]
        val_size: usize,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
enum AuxCmd {
    /// Pretrain the toy auxiliary networks and write `aux_<name>.ckpt`.
    Pretrain {
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, default_value = "aux")]
        dir: PathBuf,
        /// Terms to pretrain; all six when omitted.
        #[arg(long, value_delimiter = ',')]
        terms: Vec<Term>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Mask-network checkpoint; omit to score the noisy input.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "corpus")]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Per-utterance CSV; printed to stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableKind {
    Base,
    Comb,
    /// Only the l1 and l1+event rows, with the tonal-event verdict.
    Event,
    Ablation,
    Mtl,
}

#[derive(Args, Debug)]
struct TableArgs {
    #[arg(value_enum)]
    kind: TableKind,
    /// Base TOML config shared by every row.
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Table directory, relative to the output root.
    #[arg(long, default_value = "tables")]
    dir: PathBuf,
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_config(root: &Path, path: &Path) -> Result<TrainConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg =
        TrainConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    cfg.manifest = under(root, &cfg.manifest);
    cfg.checkpoint_dir = under(root, &cfg.checkpoint_dir);
    cfg.aux_dir = cfg.aux_dir.map(|d| under(root, &d));
    cfg.init_checkpoint = cfg.init_checkpoint.map(|d| under(root, &d));
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out;
    match cli.cmd {
        Cmd::Corpus {
            cmd:
                CorpusCmd::Build {
                    dir,
                    train_size,
                    val_size,
                    duration,
                    seed,
                },
        } => {
            let cfg = CorpusConfig {
                train_size,
                val_size,
                duration_s: duration,
                seed,
                ..CorpusConfig::default()
            };
            let dir = under(&root, &dir);
            let m = build_corpus(&cfg, &dir)?;
            println!(
                "wrote {} train and {} validation mixtures to {} (manifest checksum {:016x})",
                m.train.len(),
                m.val.len(),
                dir.display(),
                m.checksum()
            );
        }
        Cmd::Aux {
            cmd:
                AuxCmd::Pretrain {
                    corpus,
                    dir,
                    terms,
                    epochs,
                    seed,
                },
        } => {
            let terms = if terms.is_empty() {
                Term::AUX.to_vec()
            } else {
                terms
            };
            if let Some(t) = terms.iter().find(|t| !t.is_aux()) {
                bail!("{t} has no auxiliary network");
            }
            let m = Manifest::load(&under(&root, &corpus))?;
            let train = m.load_split(Split::Train)?;
            let val = m.load_split(Split::Val)?;
            let stft = Stft::new(Default::default())?;
            let dir = under(&root, &dir);
            let cfg = PretrainConfig {
                epochs,
                seed,
                ..PretrainConfig::default()
            };
            for t in terms {
                let (net, report) = pretrain_toy_aux(t, &train, &val, &stft, &cfg)?;
                let path = aux_checkpoint_path(&dir, t);
                report.checkpoint(&net)?.save(&path)?;
                println!(
                    "{t}: validation {} {:.4} -> {}",
                    report.metric,
                    report.val_metric,
                    path.display()
                );
            }
        }
        Cmd::Train { config } => {
            let cfg = load_config(&root, &config)?;
            let out = train(&cfg)?;
            let r = &out.record;
            let b = r.best();
            println!(
                "best epoch {}: SI-SDR {:.2} dB (noisy {:.2}), STOI {:.2} (noisy {:.2}), spec_l1 {:.5}; {:.0} s; outputs in {}",
                r.best_epoch,
                b.val.si_sdr_db,
                r.noisy_baseline.si_sdr_db,
                100.0 * b.val.stoi,
                100.0 * r.noisy_baseline.stoi,
                b.val.spec_l1,
                r.wall_time_s,
                cfg.checkpoint_dir.display()
            );
        }
        Cmd::Eval(a) => {
            let m = Manifest::load(&under(&root, &a.corpus))?;
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let examples = m.load_split(split)?;
            let result = match &a.checkpoint {
                Some(p) => {
                    let net = MaskNet::load(&under(&root, p))?;
                    let stft = Stft::new(Default::default())?;
                    evaluate(&net, &stft, &examples)?
                }
                None => evaluate_noisy(&Stft::new(Default::default())?, &examples)?,
            };
            let csv = result.to_csv();
            match a.csv {
                Some(p) => {
                    let p = under(&root, &p);
                    if let Some(d) = p.parent() {
                        fs::create_dir_all(d)?;
                    }
                    fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
                    let mean = result.mean();
                    println!(
                        "{} utterances: STOI {:.2}, SI-SDR {:.2} dB, spec_l1 {:.5}",
                        result.rows.len(),
                        100.0 * mean.stoi,
                        mean.si_sdr_db,
                        mean.spec_l1
                    );
                }
                None => print!("{csv}"),
            }
        }
        Cmd::Table(a) => {
            let base = load_config(&root, &a.config)?;
            let data = TrainData::load(&base)?;
            let setup = TableSetup {
                base,
                seeds: a.seeds,
                out_dir: under(&root, &a.dir),
            };
            let rows = match a.kind {
                TableKind::Base => run_table_base(&setup, &data)?,
                TableKind::Comb => {
                    let (rows, check) = run_table_comb(&setup, &data)?;
                    print!("{}", check.report());
                    rows
                }
                TableKind::Event => {
                    let (rows, check) = run_event_check(&setup, &data)?;
                    print!("{}", check.report());
                    rows
                }
                TableKind::Ablation => run_ablation(&setup, &data)?,
                TableKind::Mtl => run_mtl_compare(&setup, &data)?,
            };
            print!("{}", rows_to_csv(&rows));
        }
        Cmd::DefaultConfig => print!("{}", TrainConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
