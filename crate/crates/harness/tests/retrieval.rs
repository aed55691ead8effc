use twbert_core::data::Split;
use twbert_core::model::Model;
use twbert_harness::retrieval::{evaluate, median_rank, ranks_from_scores, EvalMode};
use twbert_harness::train::{corpus_for, split_items};
use twbert_harness::RunConfig;

fn untrained(cfg: &RunConfig) -> Model<f32> {
    Model::new(cfg.model_config(), cfg.seed).unwrap()
}

#[test]
fn single_pair_is_always_found_first() {
    let cfg = RunConfig::default();
    let model = untrained(&cfg);
    let items = split_items::<f32>(&corpus_for(&cfg).unwrap(), Split::Test);
    for mode in [EvalMode::VtcZeroShot, EvalMode::VtmReranked] {
        for r in evaluate(&model, &items[..1], mode, 16).unwrap() {
            assert_eq!(r.r1, 100.0);
            assert_eq!(r.medr, 1.0);
        }
    }
}

#[test]
fn reversed_scores_push_every_truth_to_the_bottom() {
    let n = 7;
    let s: Vec<Vec<f64>> = (0..n)
        .map(|q| (0..n).map(|c| if c == q { 1.0 } else { 0.1 * c as f64 - 0.5 }).collect())
        .collect();
    let neg: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    assert_eq!(median_rank(&ranks_from_scores(&s)), 1.0);
    assert_eq!(median_rank(&ranks_from_scores(&neg)), n as f64);
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = RunConfig::default();
    let model = untrained(&cfg);
    let items = split_items::<f32>(&corpus_for(&cfg).unwrap(), Split::Test);
    let [t2v, v2t] = evaluate(&model, &items, EvalMode::VtcZeroShot, 16).unwrap();
    assert_eq!(t2v.ranks.len(), 64);
    assert!(t2v.r1 < 20.0 && v2t.r1 < 20.0, "{} {}", t2v.r1, v2t.r1);
    assert!(t2v.r1 <= t2v.r5 && t2v.r5 <= t2v.r10);
}
