//! Training loop, batch order and loss log.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use twbert_core::alignment::{LossBreakdown, MomentumState};
use twbert_core::data::{generate_corpus, Corpus, Split};
use twbert_core::model::{is_single_modal, Model, TrainItem};
use twbert_core::objectives::training_step;
use twbert_core::optim::AdamW;
use twbert_core::{Rng, Scalar};

use crate::checkpoint;
use crate::config::RunConfig;

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub momentum: MomentumState<T>,
    /// Completed optimization steps.
    pub step: usize,
    pub log: LossLog,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state initialized from `config.seed`.
    pub fn new(config: RunConfig) -> anyhow::Result<Self> {
        config.validate()?;
        if config.precision != T::BITS {
            bail!(
                "config asks for {}-bit precision but the run uses {} bits",
                config.precision,
                T::BITS
            );
        }
        let model = Model::new(config.model_config(), config.seed)?;
        let opt = AdamW::new(config.adam_config(), &model.store);
        let momentum = MomentumState::new(
            &model.store,
            config.momentum,
            config.queue_capacity,
            config.queue_tokens,
            is_single_modal,
        )?;
        Ok(TrainState {
            config,
            model,
            opt,
            momentum,
            step: 0,
            log: LossLog::default(),
        })
    }
}

/// One row per completed step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(usize, LossBreakdown)>,
}

impl LossLog {
    pub const HEADER: &'static str = "step,l_c,l_f,l_mlm,l_vtm,total";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for (step, l) in &self.rows {
            writeln!(s, "{step},{},{},{},{},{}", l.l_c, l.l_f, l.l_mlm, l.l_vtm, l.total)
                .expect("writing to a string");
        }
        s
    }

    pub fn from_csv(text: &str) -> anyhow::Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            bail!("loss log header must be `{}`", Self::HEADER);
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                bail!("loss log line {} has {} fields", i + 2, f.len());
            }
            let num = |k: usize| -> anyhow::Result<f64> {
                f[k].parse().with_context(|| format!("loss log line {}", i + 2))
            };
            let step = f[0].parse().with_context(|| format!("loss log line {}", i + 2))?;
            rows.push((step, LossBreakdown::new(num(1)?, num(2)?, num(3)?, num(4)?)));
        }
        Ok(LossLog { rows })
    }
}

/// Sample indices of the batch used at zero-based `step`: each epoch is a
/// fresh permutation cut into full batches (a remainder is skipped).
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let per_epoch = (n / batch).max(1);
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed)
        .derive_named("order")
        .derive(epoch as u64)
        .shuffle(&mut order);
    order[k * batch..(k + 1) * batch].to_vec()
}

pub fn corpus_for(config: &RunConfig) -> anyhow::Result<Corpus> {
    Ok(generate_corpus(&config.corpus_config())?)
}

/// Runs steps until `state.step == until`, writing a checkpoint every
/// `checkpoint_every` steps and at the end when `out` is given. A failing
/// step leaves the last written checkpoint in place.
pub fn train_until<T: Scalar>(
    state: &mut TrainState<T>,
    items: &[TrainItem<T>],
    until: usize,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = state.config.clone();
    let step_cfg = cfg.step_config();
    if items.len() < cfg.batch_size {
        bail!("{} training items for batch size {}", items.len(), cfg.batch_size);
    }
    while state.step < until {
        let idx = batch_indices(cfg.seed, state.step, items.len(), cfg.batch_size);
        let batch: Vec<TrainItem<T>> = idx.iter().map(|&i| items[i].clone()).collect();
        let mut rng = Rng::new(cfg.seed).derive_named("step").derive(state.step as u64);
        let l = training_step(
            &mut state.model,
            &mut state.momentum,
            &mut state.opt,
            &batch,
            &mut rng,
            &step_cfg,
        )
        .with_context(|| format!("training step {}", state.step + 1))?;
        state.step += 1;
        state.log.rows.push((state.step, l));
        if state.step % 100 == 0 {
            log::info!("step {} total {:.4}", state.step, l.total);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                checkpoint::save(state, &dir.join("checkpoint"))?;
            }
        }
    }
    if let Some(dir) = out {
        checkpoint::save(state, &dir.join("checkpoint"))?;
        std::fs::write(dir.join("loss.csv"), state.log.to_csv())?;
    }
    Ok(())
}

pub fn train_items<T: Scalar>(corpus: &Corpus) -> Vec<TrainItem<T>> {
    split_items(corpus, Split::Train)
}

pub fn split_items<T: Scalar>(corpus: &Corpus, split: Split) -> Vec<TrainItem<T>> {
    corpus.split(split).iter().map(TrainItem::from_sample).collect()
}

/// Fresh run over the configured corpus for the configured step budget.
pub fn pretrain<T: Scalar>(config: RunConfig, out: Option<&Path>) -> anyhow::Result<TrainState<T>> {
    let corpus = corpus_for(&config)?;
    let items = train_items(&corpus);
    let steps = config.steps;
    let mut state = TrainState::new(config)?;
    train_until(&mut state, &items, steps, out)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_without_repeats() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(3, s, 16, 4)).collect();
        seen.sort();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn loss_log_round_trips() {
        let log = LossLog {
            rows: vec![(1, LossBreakdown::new(0.1, 0.2, 0.30000000000000004, 1e-17))],
        };
        assert_eq!(LossLog::from_csv(&log.to_csv()).unwrap(), log);
    }
}
