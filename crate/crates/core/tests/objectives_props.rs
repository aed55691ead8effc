use proptest::prelude::*;
use twbert_core::alignment::MomentumState;
use twbert_core::data::{generate_corpus, CorpusConfig};
use twbert_core::encoders::{CLS, MASK, PAD};
use twbert_core::model::{is_single_modal, Model, ModelConfig, TrainItem};
use twbert_core::objectives::{
    mlm_loss, mlm_mask, training_step, vtm_loss, vtm_pair, LossWeights, MlmHead, StepConfig,
    TrainMode, VtmHead,
};
use twbert_core::optim::{AdamW, AdamWConfig};
use twbert_core::{ParamStore, Rng, Tensor};

#[test]
fn mask_rate_over_1e5_tokens_is_fifteen_percent() {
    let mut rng = Rng::new(2024);
    // one long sequence so the at-least-one rule cannot bias the rate
    let ids: Vec<usize> = (0..100_000).map(|i| 3 + i % 21).collect();
    let m = mlm_mask(&ids, 0.15, &mut rng).unwrap();
    let rate = m.count() as f64 / ids.len() as f64;
    assert!((rate - 0.15).abs() <= 0.01, "mask rate {rate}");
}

#[test]
fn same_seed_gives_same_mask() {
    let ids: Vec<usize> = (0..500).map(|i| 3 + i % 21).collect();
    let a = mlm_mask(&ids, 0.15, &mut Rng::new(5)).unwrap();
    let b = mlm_mask(&ids, 0.15, &mut Rng::new(5)).unwrap();
    assert_eq!(a.positions, b.positions);
}

#[test]
fn all_special_text_cannot_be_masked() {
    assert!(mlm_mask(&[CLS, PAD, MASK], 0.15, &mut Rng::new(0)).is_err());
}

proptest! {
    #[test]
    fn specials_are_never_masked(seed in any::<u64>(), ids in prop::collection::vec(0usize..24, 1..40), p in 0.01f64..0.99) {
        prop_assume!(ids.iter().any(|&i| i > MASK));
        let m = mlm_mask(&ids, p, &mut Rng::new(seed)).unwrap();
        prop_assert!(m.count() >= 1);
        for (i, &id) in ids.iter().enumerate() {
            if id <= MASK {
                prop_assert!(!m.positions[i]);
                prop_assert_eq!(m.masked[i], id);
            } else if m.positions[i] {
                prop_assert_eq!(m.masked[i], MASK);
            } else {
                prop_assert_eq!(m.masked[i], id);
            }
        }
    }

    #[test]
    fn vtm_pairs_mix_positives_and_foreign_negatives(seed in any::<u64>(), b in 2usize..20, neg in 0.0f64..=1.0) {
        let p = vtm_pair(b, &mut Rng::new(seed), neg).unwrap();
        prop_assert!(p.labels.contains(&1));
        prop_assert_eq!(p.video, (0..b).collect::<Vec<_>>());
        for i in 0..b {
            prop_assert_eq!(p.labels[i] == 1, p.text[i] == i);
            prop_assert!(p.text[i] < b);
        }
    }
}

#[test]
fn uniform_mlm_head_costs_ln_vocab() {
    let mut store = ParamStore::<f64>::new();
    let head = MlmHead::new(&mut store, &mut Rng::new(0), 8, 40).unwrap();
    for p in store.iter_mut() {
        p.value = p.value.map(|_| 0.0);
    }
    let ids = vec![5, 9, 12, 30];
    let batch = mlm_mask(&ids, 0.5, &mut Rng::new(1)).unwrap();
    let fused = Tensor::from_fn(&[5, 8], |i| (i as f64).sin());
    let l = mlm_loss(&store, &head, &fused, &batch).unwrap();
    assert!((l - 40f64.ln()).abs() <= 1e-12, "{l}");
}

#[test]
fn mlm_loss_matches_log_softmax_at_masked_rows() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::<f64>::new();
    let head = MlmHead::new(&mut store, &mut rng, 6, 24).unwrap();
    let ids = vec![4, 7, 19, 11, 3];
    let batch = mlm_mask(&ids, 0.5, &mut rng).unwrap();
    let fused = Tensor::from_fn(&[6, 6], |_| rng.normal());
    let w = store.value(head.w).clone();
    let b = store.value(head.b).clone();
    let mut total = 0.0;
    let mut n = 0.0;
    for (i, &m) in batch.positions.iter().enumerate() {
        if !m {
            continue;
        }
        let x = fused.row(i + 1);
        let logits: Vec<f64> = (0..24)
            .map(|v| b.data()[v] + (0..6).map(|k| x[k] * w.row(k)[v]).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[ids[i]];
        n += 1.0;
    }
    let l = mlm_loss(&store, &head, &fused, &batch).unwrap();
    assert!((l - total / n).abs() <= 1e-10, "{l} vs {}", total / n);
}

#[test]
fn uniform_vtm_head_costs_ln_two() {
    let mut store = ParamStore::<f64>::new();
    let head = VtmHead::new(&mut store, &mut Rng::new(0), 4, true).unwrap();
    for p in store.iter_mut() {
        p.value = p.value.map(|_| 0.0);
    }
    let v = Tensor::from_fn(&[3, 4], |i| i as f64);
    let t = Tensor::from_fn(&[3, 4], |i| -(i as f64));
    let l = vtm_loss(&store, &head, &v, &t, &[1, 0, 1]).unwrap();
    assert!((l - 2f64.ln()).abs() <= 1e-12);
}

fn small_model() -> (Model<f32>, Vec<TrainItem<f32>>) {
    let corpus = generate_corpus(&CorpusConfig {
        train: 8,
        test: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        d: 16,
        heads: 2,
        video_layers: 1,
        text_layers: 1,
        cross_layers: 1,
        d_c: 16,
        ..ModelConfig::default()
    };
    let items = corpus.train.iter().map(TrainItem::from_sample).collect();
    (Model::new(cfg, 0).unwrap(), items)
}

#[test]
fn fifty_steps_lower_the_loss() {
    let (mut model, items) = small_model();
    let mut state = MomentumState::new(&model.store, 0.995, 16, 16, is_single_modal).unwrap();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 2e-3,
            total_steps: 50,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let cfg = StepConfig::default();
    let mut totals = Vec::new();
    for s in 0..50 {
        let mut rng = Rng::new(1).derive(s);
        totals.push(training_step(&mut model, &mut state, &mut opt, &items, &mut rng, &cfg).unwrap().total);
    }
    let head: f64 = totals[..5].iter().sum();
    let tail: f64 = totals[45..].iter().sum();
    assert!(tail < head, "first five {head}, last five {tail}");
}

#[test]
fn finetune_mode_reports_no_mlm() {
    let (mut model, items) = small_model();
    let mut state = MomentumState::new(&model.store, 0.995, 16, 16, is_single_modal).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.store);
    let cfg = StepConfig {
        mode: TrainMode::Finetune,
        ..StepConfig::default()
    };
    let l = training_step(&mut model, &mut state, &mut opt, &items, &mut Rng::new(0), &cfg).unwrap();
    assert_eq!(l.l_mlm, 0.0);
    assert!(l.l_c > 0.0 && l.l_f > 0.0 && l.l_vtm > 0.0);
    assert_eq!(l.l_vtc, l.l_c + l.l_f);
}

#[test]
fn zero_weights_leave_parameters_alone() {
    let (mut model, items) = small_model();
    let before = model.store.clone();
    let mut state = MomentumState::new(&model.store, 0.995, 16, 16, is_single_modal).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.store);
    let cfg = StepConfig {
        weights: LossWeights {
            c: 0.0,
            f: 0.0,
            mlm: 0.0,
            vtm: 0.0,
        },
        ..StepConfig::default()
    };
    let l = training_step(&mut model, &mut state, &mut opt, &items, &mut Rng::new(0), &cfg).unwrap();
    assert_eq!(l.total, 0.0);
    for (a, b) in model.store.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}
