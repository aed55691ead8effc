use proptest::prelude::*;
use twbert_core::data::{
    attention_trajectory_score, caption_vocab, generate_corpus, object_trajectory_score, parse_caption,
    trajectory_mask, write_jsonl, CorpusConfig, Sample, Split,
};
use twbert_core::{Rng, Tensor};

fn all(c: &twbert_core::data::Corpus) -> Vec<&Sample> {
    [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| c.split(s)).collect()
}

fn jsonl(c: &twbert_core::data::Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        write_jsonl(c, s, &mut out).unwrap();
    }
    out
}

#[test]
fn same_config_gives_identical_corpus() {
    let cfg = CorpusConfig {
        seed: 17,
        val: 8,
        ..CorpusConfig::default()
    };
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    assert_eq!(jsonl(&a), jsonl(&b));
    let c = generate_corpus(&CorpusConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(jsonl(&a), jsonl(&c));
}

#[test]
fn captions_describe_their_scenes() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let vocab = caption_vocab();
    let mut seen = std::collections::HashSet::new();
    for s in all(&corpus) {
        assert!(seen.insert(s.caption.text.clone()), "duplicate caption {}", s.caption.text);
        let desc = parse_caption(&s.caption.text).unwrap();
        assert_eq!(desc.len(), s.scene.objects.len());
        for (d, o) in desc.iter().zip(&s.scene.objects) {
            assert_eq!((d.color, d.shape, d.velocity), (o.color, o.shape, o.velocity));
        }
        assert_eq!(vocab.encode(&s.caption.text).unwrap(), s.caption.ids);
        assert_eq!(vocab.decode(&s.caption.ids), s.caption.text);
    }
}

#[test]
fn noiseless_single_object_traces_its_path() {
    let corpus = generate_corpus(&CorpusConfig {
        noise: 0.0,
        two_object_prob: 0.0,
        ..CorpusConfig::default()
    })
    .unwrap();
    for s in all(&corpus) {
        let shape = s.video.features.shape().to_vec();
        let o = s.scene.objects[0];
        for t in 0..shape[0] {
            let lit: Vec<usize> = (0..shape[1])
                .filter(|&c| (0..shape[2]).any(|f| s.video.features.data()[(t * shape[1] + c) * shape[2] + f] != 0.0))
                .collect();
            let (x, y) = o.cell_at(t);
            assert_eq!(lit, vec![y as usize * s.video.grid + x as usize]);
            assert_eq!(trajectory_mask(&s.video, t).unwrap().into_iter().collect::<Vec<_>>(), lit);
        }
        if o.velocity == (0, 0) {
            assert!(s.video.truth[0].iter().all(|&c| c == s.video.truth[0][0]));
        }
    }
}

#[test]
fn contrast_twins_are_time_reversals() {
    let corpus = generate_corpus(&CorpusConfig {
        contrast: true,
        ..CorpusConfig::default()
    })
    .unwrap();
    let samples = all(&corpus);
    let by_id = |id: u64| samples.iter().find(|s| s.id == id).unwrap();
    for s in &samples {
        let twin = by_id(s.twin.expect("contrast samples have twins"));
        assert_eq!(twin.twin, Some(s.id));
        assert_ne!(twin.caption.text, s.caption.text);
        let words: Vec<_> = s.caption.text.split(' ').collect();
        let twin_words: Vec<_> = twin.caption.text.split(' ').collect();
        for (i, (a, b)) in words.iter().zip(&twin_words).enumerate() {
            if i % 3 != 2 {
                assert_eq!(a, b);
            }
        }
        let frames = s.video.frames();
        let block = s.video.features.numel() / frames;
        for t in 0..frames {
            let a = &s.video.features.data()[t * block..(t + 1) * block];
            let b = &twin.video.features.data()[(frames - 1 - t) * block..(frames - t) * block];
            assert_eq!(a, b);
        }
    }
}

#[test]
fn uniform_attention_scores_one_cell_per_grid() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let s = &corpus.train[0];
    let p = s.video.grid * s.video.grid;
    let uniform = vec![Tensor::<f64>::full(&[3, p], 1.0 / p as f64); s.video.frames()];
    let score = object_trajectory_score(&uniform, &s.video, 0).unwrap();
    assert!((score - 1.0 / 16.0).abs() <= 1e-15);
    let peaked: Vec<Tensor<f64>> = (0..s.video.frames())
        .map(|t| Tensor::from_fn(&[2, p], |i| if i % p == s.video.truth[0][t] { 1.0 } else { 0.0 }))
        .collect();
    assert_eq!(object_trajectory_score(&peaked, &s.video, 0).unwrap(), 1.0);
    assert!(attention_trajectory_score(&uniform[1..], &s.video).is_err());
    assert!(object_trajectory_score(&uniform, &s.video, 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_scores_stay_in_unit_interval(seed in any::<u64>(), heads in 1usize..5, sharp in 0.1f64..20.0) {
        let corpus = generate_corpus(&CorpusConfig { train: 4, test: 0, seed: seed % 8, ..CorpusConfig::default() }).unwrap();
        let mut rng = Rng::new(seed);
        for s in &corpus.train {
            let p = s.video.grid * s.video.grid;
            let weights: Vec<Tensor<f64>> = (0..s.video.frames())
                .map(|_| {
                    let mut w = Tensor::from_fn(&[heads, p], |_| (rng.normal() * sharp).exp());
                    for h in 0..heads {
                        let z: f64 = w.row(h).iter().sum();
                        w.row_mut(h).iter_mut().for_each(|v| *v /= z);
                    }
                    w
                })
                .collect();
            let all = attention_trajectory_score(&weights, &s.video).unwrap();
            let one = object_trajectory_score(&weights, &s.video, 0).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&all));
            prop_assert!(one <= all + 1e-12);
        }
    }
}
