//! Finite-difference check of a full small model, one loss term at a time.

use twbert_core::alignment::MomentumState;
use twbert_core::encoders::{VideoInput, PAD};
use twbert_core::gradcheck::GradCheckReport;
use twbert_core::model::{is_single_modal, Model, ModelConfig, TrainItem};
use twbert_core::objectives::{check_gradients, momentum_step, plan_step, LossWeights, StepConfig, TrainMode};
use twbert_core::{Rng, Tensor};

/// d=8, two heads, one layer per encoder, 2×2 grid, 3 frames, 12 tokens.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        video_layers: 1,
        text_layers: 1,
        cross_layers: 1,
        d_c: 8,
        grid: 2,
        frames: 3,
        vocab_size: 12,
        max_text_len: 5,
        ..ModelConfig::default()
    }
}

fn random_items(cfg: &ModelConfig, rng: &mut Rng, first_id: u64, lens: &[usize]) -> Vec<TrainItem<f64>> {
    let p = cfg.grid * cfg.grid;
    lens.iter()
        .enumerate()
        .map(|(i, &len)| {
            let features = Tensor::from_fn(&[cfg.frames, p, cfg.feature_width], |_| rng.normal());
            let mut ids: Vec<usize> = (0..len).map(|_| 3 + rng.below(cfg.vocab_size - 3)).collect();
            if i == 0 {
                ids.push(PAD);
            }
            TrainItem {
                id: first_id + i as u64,
                video: VideoInput::new(features, cfg.grid).expect("valid video shape"),
                ids,
            }
        })
        .collect()
}

pub const TERMS: [&str; 5] = ["l_c", "l_f", "l_mlm", "l_vtm", "total"];

fn weights_for(term: &str) -> LossWeights {
    let one = |t: &str| if term == t || term == "total" { 1.0 } else { 0.0 };
    LossWeights {
        c: one("l_c"),
        f: one("l_f"),
        mlm: one("l_mlm"),
        vtm: one("l_vtm"),
    }
}

/// One report per entry of [`TERMS`]. The momentum queue holds two earlier
/// samples so that queued negatives take part.
pub fn grad_check_suite(seed: u64, step: f64, tol: f64) -> anyhow::Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = small_config();
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = Rng::new(seed).derive_named("gradcheck");
    let items = random_items(&cfg, &mut rng, 0, &[3, 2, 4]);
    let earlier = random_items(&cfg, &mut rng, 100, &[2, 3]);
    let mut momentum = MomentumState::new(&model.store, 0.5, 4, 4, is_single_modal)?;
    momentum_step(&model, &mut momentum, &earlier)?;
    let mut out = Vec::new();
    for term in TERMS {
        let step_cfg = StepConfig {
            weights: weights_for(term),
            mode: TrainMode::Pretrain,
            ..StepConfig::default()
        };
        let plan = plan_step(&items, &mut rng.derive_named(term), &step_cfg)?;
        let report = check_gradients(&mut model, Some(&momentum), &items, &plan, &step_cfg, step, tol)?;
        out.push((term, report));
    }
    Ok(out)
}
