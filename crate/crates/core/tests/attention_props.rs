use proptest::prelude::*;
use twbert_core::attention::{cross_modal_layer, t2w, AttentionKind, MhaParams, Variant};
use twbert_core::data::{generate_corpus, CorpusConfig};
use twbert_core::model::{cross_attention_records, Model, ModelConfig, TrainItem};
use twbert_core::sequence::{TokenKind, TokenSequence};
use twbert_core::{ParamStore, Rng, Tensor};

fn random(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.normal() * scale)
}

fn scramble(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.normal() * 0.7;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identical_frames_give_uniform_step_two(seed in any::<u64>(), hi in 0usize..3, frames in 1usize..7, patches in 1usize..10) {
        let mut rng = Rng::new(seed);
        let heads = [1, 2, 4][hi];
        let d = 4 * heads;
        let mut store = ParamStore::new();
        let s1 = MhaParams::new(&mut store, &mut rng, "s1", d, heads).unwrap();
        let s2 = MhaParams::new(&mut store, &mut rng, "s2", d, heads).unwrap();
        scramble(&mut store, &mut rng);
        let frame = random(&mut rng, patches, d, 1.0);
        let x = random(&mut rng, 1, d, 1.0);
        let (_, recs) = t2w(&store, &s1, &s2, &x, &vec![frame; frames]).unwrap();
        prop_assert_eq!(recs.len(), frames + 1);
        let step2 = recs.last().unwrap();
        prop_assert_eq!(step2.kind, AttentionKind::T2wStep2);
        prop_assert_eq!(step2.n_keys(), frames);
        for h in 0..heads {
            for &w in step2.row(h, 0) {
                prop_assert!((w - 1.0 / frames as f64).abs() <= 1e-9, "{w}");
            }
        }
    }

    #[test]
    fn step_one_rows_cover_one_frame(seed in any::<u64>(), frames in 1usize..5, patches in 1usize..10) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let s1 = MhaParams::new(&mut store, &mut rng, "s1", 8, 2).unwrap();
        let s2 = MhaParams::new(&mut store, &mut rng, "s2", 8, 2).unwrap();
        scramble(&mut store, &mut rng);
        let fs: Vec<_> = (0..frames).map(|_| random(&mut rng, patches, 8, 1.0)).collect();
        let x = random(&mut rng, 1, 8, 1.0);
        let (_, recs) = t2w(&store, &s1, &s2, &x, &fs).unwrap();
        for (t, r) in recs[..frames].iter().enumerate() {
            prop_assert_eq!(r.kind, AttentionKind::T2wStep1 { frame: t });
            prop_assert_eq!(r.n_keys(), patches);
            prop_assert!(r.max_row_sum_error() <= 1e-9);
        }
    }

    #[test]
    fn cross_layer_rows_are_distributions(seed in any::<u64>(), frames in 1usize..4, patches in 1usize..6, words in 1usize..5, pads in 0usize..3, t2w_side in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let variant = if t2w_side { Variant::T2w } else { Variant::Base };
        let p = twbert_core::attention::CrossModalLayerParams::new(&mut store, &mut rng, "x", 8, 2, variant).unwrap();
        scramble(&mut store, &mut rng);
        let video = TokenSequence::video(random(&mut rng, 1 + frames * patches, 8, 1.0), frames, patches);
        let mut kinds = vec![TokenKind::Cls];
        kinds.extend(std::iter::repeat(TokenKind::Word).take(words));
        kinds.extend(std::iter::repeat(TokenKind::Pad).take(pads));
        let text = TokenSequence::text(random(&mut rng, kinds.len(), 8, 1.0), kinds);
        let (_, _, recs) = cross_modal_layer(&store, &p, &video, &text).unwrap();
        prop_assert_eq!(recs[0].kind, AttentionKind::W2p);
        prop_assert_eq!(recs[0].n_keys(), 1 + words);
        for r in &recs {
            prop_assert!(r.max_row_sum_error() <= 1e-9, "{}", r.kind.label());
        }
        if t2w_side {
            prop_assert_eq!(recs.len(), 2 + frames);
            prop_assert_eq!(recs.last().unwrap().n_keys(), frames);
        } else {
            prop_assert_eq!(recs.len(), 2);
            prop_assert_eq!(recs[1].kind, AttentionKind::P2w);
            prop_assert_eq!(recs[1].n_keys(), frames * patches);
        }
    }
}

#[test]
fn full_model_step_two_has_one_key_per_frame() {
    let corpus = generate_corpus(&CorpusConfig {
        train: 6,
        test: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        d: 16,
        heads: 4,
        video_layers: 1,
        text_layers: 1,
        ..ModelConfig::default()
    };
    let frames = cfg.layout().frames;
    let model = Model::<f64>::new(cfg, 3).unwrap();
    for s in &corpus.train {
        let item = TrainItem::<f64>::from_sample(s);
        let recs = cross_attention_records(&model, &item.video, &item.ids).unwrap();
        let step2: Vec<_> = recs.iter().filter(|r| r.kind == AttentionKind::T2wStep2).collect();
        assert_eq!(step2.len(), model.params.cross.len());
        for r in step2 {
            assert_eq!(r.n_keys(), frames);
            assert_eq!(r.n_queries(), item.ids.len() + 1);
            assert!(r.max_row_sum_error() <= 1e-9);
        }
    }
}
