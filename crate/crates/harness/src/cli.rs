//! Command-line verbs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use twbert_core::data::{generate_corpus, write_jsonl, Split};
use twbert_core::Scalar;

use crate::ablate::{ablate, to_csv, to_markdown};
use crate::checkpoint::{self, read_manifest};
use crate::config::{Preset, RunConfig};
use crate::export::export_attention;
use crate::gradsuite::grad_check_suite;
use crate::retrieval::{evaluate, EvalMode};
use crate::train::{corpus_for, split_items, train_items, train_until, TrainState};

#[derive(Debug, Parser)]
#[command(name = "twbert", version, about = "Toy TW-BERT video-language model")]
pub struct Cli {
    /// Flat JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "twbert-out")]
    pub out: PathBuf,
    /// Floating-point width of the run.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("expected 32 or 64, got `{s}`")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch, or continue a checkpoint, writing
    /// `checkpoint/` and `loss.csv`.
    Pretrain {
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured step budget.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Rank every caption against every video of a split.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// `vtc_zero_shot` or `vtm_reranked`.
        #[arg(long, default_value = "vtc_zero_shot", value_parser = parse_mode)]
        mode: EvalMode,
        /// VTC candidates reranked by the matching head.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train each variant under each seed and tabulate test retrieval.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "base,t2w,concat,tw-bert", value_parser = parse_preset)]
        variants: Vec<Preset>,
        /// Defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "vtc_zero_shot", value_parser = parse_mode)]
        mode: EvalMode,
    },
    /// Write trajectory attention of one caption word as heatmaps.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id in the checkpoint's corpus.
        #[arg(long)]
        sample: u64,
        /// Zero-based caption word, `[CLS]` not counted.
        #[arg(long)]
        word: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Write the configured corpus as JSON lines plus the vocabulary.
    GenCorpus,
    /// Central-difference gradient check of a small full model.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train, val, test)")),
    }
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    EvalMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (vtc_zero_shot, vtm_reranked)"))
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown variant `{s}` (base, t2w, concat, tw-bert)"))
}

impl Cli {
    /// Config file (or defaults) with the command-line overrides applied.
    pub fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Precision of an existing checkpoint, or the requested one.
    fn checkpoint_precision(&self, dir: &Path) -> anyhow::Result<u32> {
        let m = read_manifest(dir)?;
        Ok(self.precision.unwrap_or(m.precision))
    }
}

macro_rules! dispatch {
    ($bits:expr, $f:ident ( $($arg:expr),* )) => {
        match $bits {
            32 => $f::<f32>($($arg),*),
            64 => $f::<f64>($($arg),*),
            b => bail!("unsupported precision {b}"),
        }
    };
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Pretrain { resume, steps } => match resume {
            Some(dir) => dispatch!(cli.checkpoint_precision(dir)?, resume_run(cli, dir, *steps)),
            None => {
                let mut cfg = cli.run_config()?;
                if let Some(s) = steps {
                    cfg.steps = *s;
                }
                dispatch!(cfg.precision, fresh_run(cli, cfg))
            }
        },
        Command::EvalRetrieval {
            checkpoint,
            split,
            mode,
            k,
        } => dispatch!(
            cli.checkpoint_precision(checkpoint)?,
            eval_run(cli, checkpoint, *split, *mode, *k)
        ),
        Command::Ablate { variants, seeds, mode } => {
            let cfg = cli.run_config()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
            dispatch!(cfg.precision, ablate_run(cli, &cfg, variants, &seeds, *mode))
        }
        Command::ExportAttention {
            checkpoint,
            sample,
            word,
            layer,
        } => dispatch!(
            cli.checkpoint_precision(checkpoint)?,
            export_run(cli, checkpoint, *sample, *word, *layer)
        ),
        Command::GenCorpus => gen_corpus(cli),
        Command::GradCheck { step, tol } => {
            if cli.precision == Some(32) {
                bail!("gradient checking runs in 64-bit only");
            }
            grad_check_run(cli, *step, *tol)
        }
    }
}

fn fresh_run<T: Scalar>(cli: &Cli, cfg: RunConfig) -> anyhow::Result<()> {
    fs::write(cli.out.join("config.json"), cfg.to_json())?;
    let corpus = corpus_for(&cfg)?;
    let items = train_items::<T>(&corpus);
    let steps = cfg.steps;
    let mut state = TrainState::<T>::new(cfg)?;
    train_until(&mut state, &items, steps, Some(&cli.out))?;
    print_last(&state);
    Ok(())
}

fn resume_run<T: Scalar>(cli: &Cli, dir: &Path, steps: Option<usize>) -> anyhow::Result<()> {
    let mut state = checkpoint::load::<T>(dir)?;
    if let Some(s) = steps {
        state.config.steps = s;
    }
    let corpus = corpus_for(&state.config)?;
    let items = train_items::<T>(&corpus);
    let until = state.config.steps;
    if until < state.step {
        bail!("checkpoint is at step {} beyond the budget {until}", state.step);
    }
    fs::write(cli.out.join("config.json"), state.config.to_json())?;
    train_until(&mut state, &items, until, Some(&cli.out))?;
    print_last(&state);
    Ok(())
}

fn print_last<T>(state: &TrainState<T>) {
    match state.log.rows.last() {
        Some((step, l)) => println!(
            "step {step}: l_c {:.4} l_f {:.4} l_mlm {:.4} l_vtm {:.4} total {:.4}",
            l.l_c, l.l_f, l.l_mlm, l.l_vtm, l.total
        ),
        None => println!("step {}: no steps run", state.step),
    }
}

fn eval_run<T: Scalar>(
    cli: &Cli,
    dir: &Path,
    split: Split,
    mode: EvalMode,
    k: Option<usize>,
) -> anyhow::Result<()> {
    let state = checkpoint::load::<T>(dir)?;
    let corpus = corpus_for(&state.config)?;
    let items = split_items::<T>(&corpus, split);
    let k = k.unwrap_or(state.config.rerank_k);
    let reports = evaluate(&state.model, &items, mode, k)?;
    let mut md = format!("# Retrieval on {} ({} pairs)\n\n", split.name(), items.len());
    for r in &reports {
        md.push_str(&r.to_markdown());
        md.push('\n');
        let name = format!("retrieval_{}_{}.csv", mode.name(), r.direction.name());
        fs::write(cli.out.join(name), r.to_csv())?;
    }
    fs::write(cli.out.join(format!("retrieval_{}.md", mode.name())), &md)?;
    print!("{md}");
    Ok(())
}

fn ablate_run<T: Scalar>(
    cli: &Cli,
    cfg: &RunConfig,
    variants: &[Preset],
    seeds: &[u64],
    mode: EvalMode,
) -> anyhow::Result<()> {
    let rows = ablate::<T>(cfg, variants, seeds, mode, Some(&cli.out))?;
    let md = to_markdown(&rows);
    fs::write(cli.out.join("ablation.md"), &md)?;
    fs::write(cli.out.join("ablation.csv"), to_csv(&rows))?;
    print!("{md}");
    Ok(())
}

fn export_run<T: Scalar>(cli: &Cli, dir: &Path, sample: u64, word: usize, layer: usize) -> anyhow::Result<()> {
    let state = checkpoint::load::<T>(dir)?;
    let corpus = corpus_for(&state.config)?;
    let s = [Split::Train, Split::Val, Split::Test]
        .iter()
        .flat_map(|&sp| corpus.split(sp))
        .find(|s| s.id == sample)
        .with_context(|| format!("no sample with id {sample}"))?;
    let e = export_attention(&state.model, s, word, layer)?;
    for p in e.write(&cli.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn gen_corpus(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.run_config()?;
    let corpus = generate_corpus(&cfg.corpus_config())?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let path = cli.out.join(format!("{}.jsonl", split.name()));
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        write_jsonl(&corpus, split, &mut w)?;
        std::io::Write::flush(&mut w)?;
        println!("{}: {} samples", path.display(), corpus.split(split).len());
    }
    fs::write(cli.out.join("vocab.txt"), corpus.vocab.to_file_string())?;
    Ok(())
}

fn grad_check_run(cli: &Cli, step: f64, tol: f64) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut csv = String::from("loss,parameter,entries,max_rel_error,passed\n");
    let mut all = true;
    for (term, report) in grad_check_suite(seed, step, tol)? {
        println!("{term}: {report}");
        all &= report.passed();
        for p in &report.params {
            csv.push_str(&format!(
                "{term},{},{},{},{}\n",
                p.name,
                p.entries,
                p.max_rel_error,
                p.max_rel_error <= tol
            ));
        }
    }
    fs::write(cli.out.join("gradcheck.csv"), csv)?;
    if !all {
        bail!("gradient check failed");
    }
    Ok(())
}
