//! Nested-loop reference implementations of the attention blocks.

use twbert_core::attention::{
    cross_modal_layer, mha, p2w, t2w, w2p, AttentionKind, CrossModalLayerParams, FfnParams,
    MhaParams, TextSideParams, Variant,
};
use twbert_core::sequence::{TokenKind, TokenSequence};
use twbert_core::{ParamId, ParamStore, Rng, Tensor};

type M = Vec<Vec<f64>>;

const EPS: f64 = 1e-6;

fn mat(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecp(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mean) / (var + EPS).sqrt() + b)
        .collect()
}

/// Output rows and weights `[head][query][key]` of
/// `LN(concat_i(softmax(Q W_i^Q (K W_i^K)^T / √d_h) V W_i^V) W^H + Q)`.
fn mha_oracle(store: &ParamStore<f64>, p: &MhaParams, q: &M, k: &M, v: &M) -> (M, Vec<M>) {
    let w = |id| mat(store.value(id));
    let (qp, kp, vp) = (matmul(q, &w(p.wq)), matmul(k, &w(p.wk)), matmul(v, &w(p.wv)));
    let dh = p.d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![vec![0.0; p.d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut wh = Vec::new();
        for (i, qrow) in qp.iter().enumerate() {
            let logits: Vec<f64> = kp
                .iter()
                .map(|krow| cols.clone().map(|c| qrow[c] * krow[c]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in cols.clone() {
                concat[i][c] = a.iter().zip(&vp).map(|(w, vrow)| w * vrow[c]).sum();
            }
            wh.push(a);
        }
        weights.push(wh);
    }
    let proj = matmul(&concat, &w(p.wh));
    let (g, b) = (vecp(store, p.ln_gain), vecp(store, p.ln_bias));
    let out = proj
        .iter()
        .zip(q)
        .map(|(o, x)| {
            let r: Vec<f64> = o.iter().zip(x).map(|(a, b)| a + b).collect();
            layer_norm(&r, &g, &b)
        })
        .collect();
    (out, weights)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ffn_oracle(store: &ParamStore<f64>, p: &FfnParams, x: &M) -> M {
    let (w1, w2) = (mat(store.value(p.w1)), mat(store.value(p.w2)));
    let (b1, b2) = (vecp(store, p.b1), vecp(store, p.b2));
    let (g, b) = (vecp(store, p.ln_gain), vecp(store, p.ln_bias));
    x.iter()
        .map(|row| {
            let h: Vec<f64> = (0..b1.len())
                .map(|j| gelu(b1[j] + (0..row.len()).map(|i| row[i] * w1[i][j]).sum::<f64>()))
                .collect();
            let y: Vec<f64> = (0..b2.len())
                .map(|j| row[j] + b2[j] + (0..h.len()).map(|i| h[i] * w2[i][j]).sum::<f64>())
                .collect();
            layer_norm(&y, &g, &b)
        })
        .collect()
}

fn max_diff(a: &M, b: &M) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn weights_diff(rec: &Tensor<f64>, oracle: &[M]) -> f64 {
    let s = rec.shape();
    assert_eq!(s[0], oracle.len());
    let mut m: f64 = 0.0;
    for (h, w) in oracle.iter().enumerate() {
        assert_eq!(s[1], w.len());
        for (q, row) in w.iter().enumerate() {
            assert_eq!(s[2], row.len());
            for (k, v) in row.iter().enumerate() {
                m = m.max((rec.data()[(h * s[1] + q) * s[2] + k] - v).abs());
            }
        }
    }
    m
}

/// Overwrites every parameter with O(1) draws so that LN gains, biases
/// and projections all matter.
fn scramble(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.normal() * 0.7;
        }
    }
}

struct Case {
    d: usize,
    heads: usize,
    frames: usize,
    patches: usize,
    text_len: usize,
    pads: usize,
    rng: Rng,
}

fn cases() -> impl Iterator<Item = Case> {
    (0..100u64).map(|i| {
        let mut rng = Rng::new(1000 + i);
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * (1 + rng.below(16 / heads));
        let text_len = 1 + rng.below(5);
        Case {
            d,
            heads,
            frames: 1 + rng.below(4),
            patches: 1 + rng.below(9),
            text_len,
            pads: rng.below(text_len),
            rng,
        }
    })
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.normal())
}

fn text_seq(c: &mut Case) -> TokenSequence<f64> {
    let n = c.text_len + 1;
    let mut kinds = vec![TokenKind::Cls];
    kinds.extend((1..n).map(|i| if i > n - 1 - c.pads { TokenKind::Pad } else { TokenKind::Word }));
    TokenSequence::text(random(&mut c.rng, n, c.d), kinds)
}

fn video_seq(c: &mut Case) -> TokenSequence<f64> {
    let n = 1 + c.frames * c.patches;
    TokenSequence::video(random(&mut c.rng, n, c.d), c.frames, c.patches)
}

fn non_pad_rows(text: &TokenSequence<f64>) -> M {
    text.kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k != TokenKind::Pad)
        .map(|(i, _)| text.tokens.row(i).to_vec())
        .collect()
}

/// Largest absolute deviation from the oracle over every case.
pub fn mha_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    for mut c in cases() {
        let mut store = ParamStore::new();
        let p = MhaParams::new(&mut store, &mut c.rng, "m", c.d, c.heads).unwrap();
        scramble(&mut store, &mut c.rng);
        let nq = 1 + c.rng.below(6);
        let nk = 1 + c.rng.below(6);
        let q = random(&mut c.rng, nq, c.d);
        let k = random(&mut c.rng, nk, c.d);
        let v = random(&mut c.rng, nk, c.d);
        let (out, rec) = mha(&store, &p, &q, &k, &v).unwrap();
        let (o, w) = mha_oracle(&store, &p, &mat(&q), &mat(&k), &mat(&v));
        assert_eq!(rec.kind, AttentionKind::Mha);
        worst = worst.max(max_diff(&mat(&out), &o)).max(weights_diff(&rec.weights, &w));
    }
    worst
}

/// Largest absolute deviation from the oracle over every case.
pub fn w2p_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    for mut c in cases() {
        let mut store = ParamStore::new();
        let attn = MhaParams::new(&mut store, &mut c.rng, "a", c.d, c.heads).unwrap();
        let ffn = FfnParams::new(&mut store, &mut c.rng, "f", c.d, 4 * c.d).unwrap();
        scramble(&mut store, &mut c.rng);
        let video = video_seq(&mut c);
        let text = text_seq(&mut c);
        let (out, rec) = w2p(&store, &attn, &ffn, &video, &text).unwrap();
        let keys = non_pad_rows(&text);
        let (mid, w) = mha_oracle(&store, &attn, &mat(&video.tokens), &keys, &keys);
        let o = ffn_oracle(&store, &ffn, &mid);
        assert_eq!(out.tokens.rows(), video.tokens.rows());
        worst = worst.max(max_diff(&mat(&out.tokens), &o)).max(weights_diff(&rec.weights, &w));
    }
    worst
}

/// Largest absolute deviation from the oracle over every case.
pub fn p2w_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    for mut c in cases() {
        let mut store = ParamStore::new();
        let attn = MhaParams::new(&mut store, &mut c.rng, "a", c.d, c.heads).unwrap();
        let ffn = FfnParams::new(&mut store, &mut c.rng, "f", c.d, 4 * c.d).unwrap();
        scramble(&mut store, &mut c.rng);
        let video = video_seq(&mut c);
        let text = text_seq(&mut c);
        let (out, rec) = p2w(&store, &attn, &ffn, &text, &video).unwrap();
        let patches: M = mat(&video.tokens)[1..].to_vec();
        let (mid, w) = mha_oracle(&store, &attn, &mat(&text.tokens), &patches, &patches);
        let o = ffn_oracle(&store, &ffn, &mid);
        worst = worst.max(max_diff(&mat(&out.tokens), &o)).max(weights_diff(&rec.weights, &w));
    }
    worst
}

/// `z` and the per-frame step-1 weights and step-2 weights for one word.
fn t2w_oracle(
    store: &ParamStore<f64>,
    s1: &MhaParams,
    s2: &MhaParams,
    x: &[f64],
    frames: &[M],
) -> (Vec<f64>, Vec<Vec<M>>, Vec<M>) {
    let q = vec![x.to_vec()];
    let mut traj = Vec::new();
    let mut step1 = Vec::new();
    for f in frames {
        let (y, w) = mha_oracle(store, s1, &q, f, f);
        traj.push(y[0].clone());
        step1.push(w);
    }
    let (z, w2) = mha_oracle(store, s2, &q, &traj, &traj);
    (z[0].clone(), step1, w2)
}

fn frames_of(video: &TokenSequence<f64>, frames: usize, patches: usize) -> Vec<M> {
    (0..frames).map(|t| mat(&video.frame(t, patches))).collect()
}

/// Largest absolute deviation from the oracle over every case.
pub fn t2w_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    for mut c in cases() {
        let mut store = ParamStore::new();
        let s1 = MhaParams::new(&mut store, &mut c.rng, "s1", c.d, c.heads).unwrap();
        let s2 = MhaParams::new(&mut store, &mut c.rng, "s2", c.d, c.heads).unwrap();
        scramble(&mut store, &mut c.rng);
        let frames: Vec<Tensor<f64>> = (0..c.frames).map(|_| random(&mut c.rng, c.patches, c.d)).collect();
        let x = random(&mut c.rng, 1, c.d);
        let (z, recs) = t2w(&store, &s1, &s2, &x, &frames).unwrap();
        let fm: Vec<M> = frames.iter().map(mat).collect();
        let (zo, w1, w2) = t2w_oracle(&store, &s1, &s2, x.row(0), &fm);
        assert_eq!(recs.len(), c.frames + 1);
        worst = worst.max(max_diff(&mat(&z), &vec![zo]));
        for (t, w) in w1.iter().enumerate() {
            assert_eq!(recs[t].kind, AttentionKind::T2wStep1 { frame: t });
            worst = worst.max(weights_diff(&recs[t].weights, w));
        }
        assert_eq!(recs[c.frames].kind, AttentionKind::T2wStep2);
        worst = worst.max(weights_diff(&recs[c.frames].weights, &w2));
    }
    worst
}

/// Largest absolute deviation from the oracle over every case.
pub fn cross_layer_max_diff() -> f64 {
    let mut worst: f64 = 0.0;
    for (i, mut c) in cases().enumerate() {
        let variant = if i % 2 == 0 { Variant::T2w } else { Variant::Base };
        let mut store = ParamStore::new();
        let p = CrossModalLayerParams::new(&mut store, &mut c.rng, "x", c.d, c.heads, variant).unwrap();
        scramble(&mut store, &mut c.rng);
        let video = video_seq(&mut c);
        let text = text_seq(&mut c);
        let (v_out, t_out, _) = cross_modal_layer(&store, &p, &video, &text).unwrap();
        let keys = non_pad_rows(&text);
        let (vm, _) = mha_oracle(&store, &p.w2p, &mat(&video.tokens), &keys, &keys);
        let vo = ffn_oracle(&store, &p.video_ffn, &vm);
        let tm: M = match &p.text_attn {
            TextSideParams::P2w(a) => {
                let patches: M = mat(&video.tokens)[1..].to_vec();
                mha_oracle(&store, a, &mat(&text.tokens), &patches, &patches).0
            }
            TextSideParams::T2w { step1, step2 } => {
                let fr = frames_of(&video, c.frames, c.patches);
                (0..text.tokens.rows())
                    .map(|r| t2w_oracle(&store, step1, step2, text.tokens.row(r), &fr).0)
                    .collect()
            }
        };
        let to = ffn_oracle(&store, &p.text_ffn, &tm);
        worst = worst.max(max_diff(&mat(&v_out.tokens), &vo)).max(max_diff(&mat(&t_out.tokens), &to));
    }
    worst
}
