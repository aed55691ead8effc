//! Multi-head attention and the cross-modal attention forms.
//!
//! * `mha`: `A_i = softmax(Q W_i^Q (K W_i^K)ᵀ / √d_h)`, `H_i = A_i V W_i^V`,
//!   `H = [H_1 … H_h] W^H`, `z = LN(H + Q)`.
//! * word-to-patch (W2P): video tokens query the text.
//! * patch-to-word (P2W): text tokens query every patch of every frame.
//!   Only used by the symmetric `Base` variant.
//! * trajectory-to-word (T2W): each word first queries every frame
//!   separately, producing one salient-part embedding per frame (its
//!   trajectory), then queries that trajectory.
//!
//! A cross-modal layer updates both streams in parallel from the same
//! inputs: the video side through W2P, the text side through P2W or T2W,
//! each followed by a feed-forward block with residual and norm.
//!
//! Everything is batched: a [`VideoBatch`] and [`TextBatch`] of equal count
//! are treated as aligned pairs, and attention never crosses pairs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim, Result};
use crate::graph::{Graph, KeySets, Var};
use crate::param::{init_xavier, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequence::{Coord, TextBatch, TokenKind, TokenSequence, VideoBatch, VideoLayout};
use crate::tensor::{Tensor, LN_EPS};

/// Projections and output norm of one multi-head attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub d: usize,
    /// `[d, d]`; head `i` owns columns `i·d_h .. (i+1)·d_h`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wh: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl MhaParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(dim("mha", format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(MhaParams {
            heads,
            d,
            wq: store.add(format!("{prefix}.wq"), init_xavier(rng, d, d))?,
            wk: store.add(format!("{prefix}.wk"), init_xavier(rng, d, d))?,
            wv: store.add(format!("{prefix}.wv"), init_xavier(rng, d, d))?,
            wh: store.add(format!("{prefix}.wh"), init_xavier(rng, d, d))?,
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::full(&[d], T::one()))?,
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }
}

/// Two-layer perceptron with residual and norm: `LN(x + W2 gelu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl FfnParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FfnParams {
            w1: store.add(format!("{prefix}.w1"), init_xavier(rng, d, hidden))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(format!("{prefix}.w2"), init_xavier(rng, hidden, d))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::full(&[d], T::one()))?,
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(&[d]))?,
        })
    }
}

/// Which attention of the text side a cross-modal layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Symmetric encoder: P2W on the text side.
    Base,
    /// Asymmetric encoder: T2W on the text side.
    #[default]
    T2w,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextSideParams {
    P2w(MhaParams),
    T2w { step1: MhaParams, step2: MhaParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalLayerParams {
    pub w2p: MhaParams,
    pub video_ffn: FfnParams,
    pub text_attn: TextSideParams,
    pub text_ffn: FfnParams,
}

impl CrossModalLayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        variant: Variant,
    ) -> Result<Self> {
        let w2p = MhaParams::new(store, rng, &format!("{prefix}.w2p"), d, heads)?;
        let video_ffn = FfnParams::new(store, rng, &format!("{prefix}.video_ffn"), d, 4 * d)?;
        let text_attn = match variant {
            Variant::Base => TextSideParams::P2w(MhaParams::new(
                store,
                rng,
                &format!("{prefix}.p2w"),
                d,
                heads,
            )?),
            Variant::T2w => TextSideParams::T2w {
                step1: MhaParams::new(store, rng, &format!("{prefix}.t2w.step1"), d, heads)?,
                step2: MhaParams::new(store, rng, &format!("{prefix}.t2w.step2"), d, heads)?,
            },
        };
        let text_ffn = FfnParams::new(store, rng, &format!("{prefix}.text_ffn"), d, 4 * d)?;
        Ok(CrossModalLayerParams {
            w2p,
            video_ffn,
            text_attn,
            text_ffn,
        })
    }

    pub fn variant(&self) -> Variant {
        match self.text_attn {
            TextSideParams::P2w(_) => Variant::Base,
            TextSideParams::T2w { .. } => Variant::T2w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Mha,
    W2p,
    P2w,
    T2wStep1 { frame: usize },
    T2wStep2,
    VideoTemporal,
    VideoSpatial,
    TextSelf,
}

impl AttentionKind {
    pub fn label(&self) -> String {
        match self {
            AttentionKind::Mha => "mha".into(),
            AttentionKind::W2p => "w2p".into(),
            AttentionKind::P2w => "p2w".into(),
            AttentionKind::T2wStep1 { frame } => format!("t2w_step1 frame {frame}"),
            AttentionKind::T2wStep2 => "t2w_step2".into(),
            AttentionKind::VideoTemporal => "video_temporal".into(),
            AttentionKind::VideoSpatial => "video_spatial".into(),
            AttentionKind::TextSelf => "text_self".into(),
        }
    }
}

/// Per-head attention matrices of one attention call for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    /// `[h, n_q, n_k]`.
    pub weights: Tensor<T>,
    pub kind: AttentionKind,
    pub query_index: Vec<Coord>,
    pub key_index: Vec<Coord>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn n_keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Attention row of query `q` under head `h`.
    pub fn row(&self, h: usize, q: usize) -> &[T] {
        self.weights.row(h * self.n_queries() + q)
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.weights.rows())
            .map(|r| (self.weights.row(r).iter().copied().sum::<T>() - T::one()).abs().as_f64())
            .fold(0.0, f64::max)
    }
}

/// Output of one attention call inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct MhaOut {
    pub out: Var,
    /// The attention node, for weight extraction.
    pub attn: Var,
}

/// Multi-head attention on graph values: `LN([A_i V W_i^V] W^H + Q)`.
#[allow(clippy::too_many_arguments)]
pub fn mha_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &MhaParams,
    q: Var,
    k: Var,
    v: Var,
    keys: Arc<KeySets>,
) -> Result<MhaOut> {
    for (name, x) in [("query", q), ("key", k), ("value", v)] {
        if g.value(x).cols() != p.d {
            return Err(dim(
                "mha",
                format!("{name} width {} against model width {}", g.value(x).cols(), p.d),
            ));
        }
    }
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let wh = g.param(store, p.wh);
    let qp = g.matmul(q, wq)?;
    let kp = g.matmul(k, wk)?;
    let vp = g.matmul(v, wv)?;
    let attn = g.attend(qp, kp, vp, p.heads, keys)?;
    let h = g.matmul(attn, wh)?;
    let res = g.add(h, q)?;
    let gain = g.param(store, p.ln_gain);
    let bias = g.param(store, p.ln_bias);
    let out = g.layer_norm(res, gain, bias, T::of(LN_EPS))?;
    Ok(MhaOut { out, attn })
}

pub fn ffn_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &FfnParams,
    x: Var,
) -> Result<Var> {
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    let y = g.linear(h, w2, Some(b2))?;
    let res = g.add(x, y)?;
    let gain = g.param(store, p.ln_gain);
    let bias = g.param(store, p.ln_bias);
    g.layer_norm(res, gain, bias, T::of(LN_EPS))
}

fn check_pairs(video: &VideoBatch, text: &TextBatch) -> Result<()> {
    if video.count != text.count() {
        return Err(contract(
            "cross_modal",
            format!("{} videos paired with {} texts", video.count, text.count()),
        ));
    }
    if video.layout.frames == 0 || video.layout.patches == 0 {
        return Err(contract("cross_modal", "videos need at least one frame and one patch"));
    }
    Ok(())
}

/// W2P attention (no feed-forward): each video token of pair `b` attends
/// to the non-padding text tokens of pair `b`.
pub fn w2p_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &MhaParams,
    video: &VideoBatch,
    text: &TextBatch,
) -> Result<MhaOut> {
    check_pairs(video, text)?;
    let mut keys = KeySets::new();
    for b in 0..video.count {
        let ks: Vec<usize> = text.key_rows(b).collect();
        for _ in 0..video.layout.len() {
            keys.push(ks.iter().copied());
        }
    }
    mha_node(g, store, p, video.var, text.var, text.var, Arc::new(keys))
}

/// P2W attention (no feed-forward): each text token of pair `b` attends to
/// every patch of every frame of video `b` ([CLS] excluded).
pub fn p2w_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &MhaParams,
    video: &VideoBatch,
    text: &TextBatch,
) -> Result<MhaOut> {
    check_pairs(video, text)?;
    let lay = video.layout;
    let mut keys = KeySets::new();
    for b in 0..text.count() {
        let ks: Vec<usize> = (0..lay.frames)
            .flat_map(|t| (0..lay.patches).map(move |pp| (t, pp)))
            .map(|(t, pp)| video.patch_row(b, t, pp))
            .collect();
        for _ in 0..text.len_of(b) {
            keys.push(ks.iter().copied());
        }
    }
    mha_node(g, store, p, text.var, video.var, video.var, Arc::new(keys))
}

/// Graph values produced by T2W attention.
#[derive(Debug, Clone, Copy)]
pub struct T2wOut {
    /// `z` for every text row.
    pub out: Var,
    /// Trajectories: row `text_row · T + t` is the salient part of frame `t`.
    pub trajectory: Var,
    pub step1: Var,
    pub step2: Var,
}

/// T2W attention (no feed-forward).
///
/// Step 1: for every text token and frame `t`, `y_t = mha(x, V_t, V_t)`
/// with parameters shared across frames and words. Step 2:
/// `z = mha(x, Y, Y)` over that token's own `T` trajectory entries.
pub fn t2w_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    step1: &MhaParams,
    step2: &MhaParams,
    video: &VideoBatch,
    text: &TextBatch,
) -> Result<T2wOut> {
    check_pairs(video, text)?;
    let lay = video.layout;
    let frames = lay.frames;
    let rows = text.total_rows();
    // query rows ordered (text row, frame)
    let idx: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, frames)).collect();
    let mut keys1 = KeySets::new();
    for b in 0..text.count() {
        for _ in 0..text.len_of(b) {
            for t in 0..frames {
                keys1.push((0..lay.patches).map(|pp| video.patch_row(b, t, pp)));
            }
        }
    }
    let queries = g.gather(text.var, idx)?;
    let s1 = mha_node(g, store, step1, queries, video.var, video.var, Arc::new(keys1))?;
    let mut keys2 = KeySets::new();
    for r in 0..rows {
        keys2.push(r * frames..(r + 1) * frames);
    }
    let s2 = mha_node(g, store, step2, text.var, s1.out, s1.out, Arc::new(keys2))?;
    Ok(T2wOut {
        out: s2.out,
        trajectory: s1.out,
        step1: s1.attn,
        step2: s2.attn,
    })
}

/// Attention nodes of one cross-modal layer.
#[derive(Debug, Clone, Copy)]
pub enum TextAttnNodes {
    P2w(Var),
    T2w { step1: Var, step2: Var },
}

#[derive(Debug, Clone, Copy)]
pub struct LayerAttn {
    pub w2p: Var,
    pub text: TextAttnNodes,
}

/// One cross-modal layer over aligned pairs; both streams read the layer
/// inputs.
pub fn cross_modal_layer_batch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &CrossModalLayerParams,
    video: &VideoBatch,
    text: &TextBatch,
) -> Result<(VideoBatch, TextBatch, LayerAttn)> {
    let w2p = w2p_attention(g, store, &p.w2p, video, text)?;
    let v_out = ffn_node(g, store, &p.video_ffn, w2p.out)?;
    let (t_mid, text_nodes) = match &p.text_attn {
        TextSideParams::P2w(mp) => {
            let o = p2w_attention(g, store, mp, video, text)?;
            (o.out, TextAttnNodes::P2w(o.attn))
        }
        TextSideParams::T2w { step1, step2 } => {
            let o = t2w_attention(g, store, step1, step2, video, text)?;
            (
                o.out,
                TextAttnNodes::T2w {
                    step1: o.step1,
                    step2: o.step2,
                },
            )
        }
    };
    let t_out = ffn_node(g, store, &p.text_ffn, t_mid)?;
    Ok((
        VideoBatch {
            var: v_out,
            ..*video
        },
        TextBatch {
            var: t_out,
            ..text.clone()
        },
        LayerAttn {
            w2p: w2p.attn,
            text: text_nodes,
        },
    ))
}

pub fn cross_modal_encoder_batch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layers: &[CrossModalLayerParams],
    video: &VideoBatch,
    text: &TextBatch,
) -> Result<(VideoBatch, TextBatch, Vec<LayerAttn>)> {
    if layers.is_empty() {
        return Err(contract("cross_modal_encoder", "at least one layer is required"));
    }
    let (mut v, mut t) = (*video, text.clone());
    let mut attn = Vec::with_capacity(layers.len());
    for p in layers {
        let (nv, nt, a) = cross_modal_layer_batch(g, store, p, &v, &t)?;
        v = nv;
        t = nt;
        attn.push(a);
    }
    Ok((v, t, attn))
}

// ---------------------------------------------------------------------------
// Record extraction

fn record_from<T: Scalar>(
    g: &Graph<T>,
    node: Var,
    kind: AttentionKind,
    query_rows: &[usize],
    query_index: Vec<Coord>,
    key_rows: &[usize],
    key_index: Vec<Coord>,
) -> AttentionRecord<T> {
    let aw = g
        .attention_weights(node)
        .expect("record_from needs an attention node");
    let (h, nq, nk) = (aw.heads, query_rows.len(), key_rows.len());
    let mut w = vec![T::zero(); h * nq * nk];
    for (qi, &r) in query_rows.iter().enumerate() {
        let ks = aw.keys.row(r);
        for head in 0..h {
            let row = aw.row(r, head);
            for (&k, &wk) in ks.iter().zip(row) {
                let ki = key_rows
                    .iter()
                    .position(|&kr| kr == k)
                    .expect("attended key belongs to the record's key set");
                w[(head * nq + qi) * nk + ki] = wk;
            }
        }
    }
    AttentionRecord {
        weights: Tensor::raw(vec![h, nq, nk], w),
        kind,
        query_index,
        key_index,
    }
}

/// Records of one cross-modal layer for pair `b`: the W2P record, then
/// either one P2W record or `T` step-1 records (one per frame) followed by
/// the step-2 record.
pub fn layer_records<T: Scalar>(
    g: &Graph<T>,
    attn: &LayerAttn,
    video: &VideoBatch,
    text: &TextBatch,
    b: usize,
) -> Vec<AttentionRecord<T>> {
    let lay = video.layout;
    let video_rows: Vec<usize> = (0..lay.len()).map(|i| video.row(b, i)).collect();
    let text_rows: Vec<usize> = (0..text.len_of(b)).map(|i| text.row(b, i)).collect();
    let text_coords = crate::sequence::text_coords(text.len_of(b));
    let text_keys: Vec<usize> = text.key_rows(b).collect();
    let text_key_coords: Vec<Coord> = text_keys
        .iter()
        .map(|&r| text_coords[r - text.starts[b]])
        .collect();
    let mut out = vec![record_from(
        g,
        attn.w2p,
        AttentionKind::W2p,
        &video_rows,
        lay.coords(),
        &text_keys,
        text_key_coords,
    )];
    match attn.text {
        TextAttnNodes::P2w(node) => {
            let patch_rows: Vec<usize> = video_rows[1..].to_vec();
            out.push(record_from(
                g,
                node,
                AttentionKind::P2w,
                &text_rows,
                text_coords,
                &patch_rows,
                lay.coords()[1..].to_vec(),
            ));
        }
        TextAttnNodes::T2w { step1, step2 } => {
            out.extend(t2w_records(g, step1, step2, video, text, b));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Single-sample entry points

fn video_from_seq<T: Scalar>(
    g: &mut Graph<T>,
    seq: &TokenSequence<T>,
    layout: VideoLayout,
) -> Result<VideoBatch> {
    if seq.len() != layout.len() {
        return Err(dim(
            "cross_modal",
            format!("video sequence of {} tokens for layout {layout:?}", seq.len()),
        ));
    }
    Ok(VideoBatch {
        var: g.constant(seq.tokens.clone()),
        count: 1,
        layout,
    })
}

fn text_from_seq<T: Scalar>(g: &mut Graph<T>, seq: &TokenSequence<T>) -> TextBatch {
    TextBatch {
        var: g.constant(seq.tokens.clone()),
        starts: vec![0],
        kinds: vec![seq.kinds.clone()],
    }
}

/// Frames × patches of a video sequence, inferred from its coordinates.
pub fn video_layout_of<T: Scalar>(seq: &TokenSequence<T>) -> Result<VideoLayout> {
    let mut frames = 0;
    let mut patches = 0;
    for c in &seq.coords {
        if let Coord::Patch { frame, cell } = c {
            frames = frames.max(frame + 1);
            patches = patches.max(cell + 1);
        }
    }
    let layout = VideoLayout { frames, patches };
    if frames == 0 || patches == 0 || layout.len() != seq.len() {
        return Err(contract("video_layout", "sequence is not a complete video"));
    }
    Ok(layout)
}

/// Plain multi-head attention with every query attending every key.
pub fn mha<T: Scalar>(
    store: &ParamStore<T>,
    p: &MhaParams,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionRecord<T>)> {
    if k.rows() == 0 || k.rows() != v.rows() {
        return Err(contract("mha", "keys and values need equal, nonzero row counts"));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let keys = Arc::new(KeySets::dense(q.rows(), k.rows()));
    let o = mha_node(&mut g, store, p, qv, kv, vv, keys)?;
    let rows_q: Vec<usize> = (0..q.rows()).collect();
    let rows_k: Vec<usize> = (0..k.rows()).collect();
    let rec = record_from(
        &g,
        o.attn,
        AttentionKind::Mha,
        &rows_q,
        (0..q.rows()).map(Coord::Word).collect(),
        &rows_k,
        (0..k.rows()).map(Coord::Word).collect(),
    );
    Ok((g.value(o.out).clone(), rec))
}

/// W2P block (attention then feed-forward) for one video/text pair.
pub fn w2p<T: Scalar>(
    store: &ParamStore<T>,
    attn: &MhaParams,
    ffn: &FfnParams,
    video: &TokenSequence<T>,
    text: &TokenSequence<T>,
) -> Result<(TokenSequence<T>, AttentionRecord<T>)> {
    let layout = video_layout_of(video)?;
    let mut g = Graph::new();
    let vb = video_from_seq(&mut g, video, layout)?;
    let tb = text_from_seq(&mut g, text);
    let o = w2p_attention(&mut g, store, attn, &vb, &tb)?;
    let out = ffn_node(&mut g, store, ffn, o.out)?;
    let keys: Vec<usize> = tb.key_rows(0).collect();
    let key_index = keys.iter().map(|&r| text.coords[r]).collect();
    let rows: Vec<usize> = (0..video.len()).collect();
    let rec = record_from(&g, o.attn, AttentionKind::W2p, &rows, video.coords.clone(), &keys, key_index);
    Ok((
        TokenSequence {
            tokens: g.value(out).clone(),
            ..video.clone()
        },
        rec,
    ))
}

/// P2W block (attention then feed-forward) for one pair.
pub fn p2w<T: Scalar>(
    store: &ParamStore<T>,
    attn: &MhaParams,
    ffn: &FfnParams,
    text: &TokenSequence<T>,
    video: &TokenSequence<T>,
) -> Result<(TokenSequence<T>, AttentionRecord<T>)> {
    let layout = video_layout_of(video)?;
    let mut g = Graph::new();
    let vb = video_from_seq(&mut g, video, layout)?;
    let tb = text_from_seq(&mut g, text);
    let o = p2w_attention(&mut g, store, attn, &vb, &tb)?;
    let out = ffn_node(&mut g, store, ffn, o.out)?;
    let rows: Vec<usize> = (0..text.len()).collect();
    let keys: Vec<usize> = (1..video.len()).collect();
    let rec = record_from(
        &g,
        o.attn,
        AttentionKind::P2w,
        &rows,
        text.coords.clone(),
        &keys,
        video.coords[1..].to_vec(),
    );
    Ok((
        TokenSequence {
            tokens: g.value(out).clone(),
            ..text.clone()
        },
        rec,
    ))
}

/// A word's salient part per frame, `[T, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub steps: Tensor<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.steps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.numel() == 0
    }
}

fn t2w_single<T: Scalar>(
    store: &ParamStore<T>,
    step1: &MhaParams,
    step2: &MhaParams,
    x: &Tensor<T>,
    frames: &[Tensor<T>],
) -> Result<(Tensor<T>, Trajectory<T>, Vec<AttentionRecord<T>>)> {
    if frames.is_empty() {
        return Err(contract("t2w", "at least one frame is required"));
    }
    let patches = frames[0].rows();
    if frames.iter().any(|f| f.rows() != patches || f.cols() != x.cols()) {
        return Err(dim("t2w", "frames must share patch count and width"));
    }
    if x.rows() != 1 {
        return Err(dim("t2w", format!("query must be one token, got {:?}", x.shape())));
    }
    let layout = VideoLayout {
        frames: frames.len(),
        patches,
    };
    let mut rows = vec![vec![T::zero(); x.cols()]];
    for f in frames {
        for r in 0..f.rows() {
            rows.push(f.row(r).to_vec());
        }
    }
    let video = TokenSequence::video(Tensor::from_rows(&rows)?, layout.frames, patches);
    let text = TokenSequence::text(x.clone(), vec![TokenKind::Word]);
    let mut g = Graph::new();
    let vb = video_from_seq(&mut g, &video, layout)?;
    let tb = text_from_seq(&mut g, &text);
    let o = t2w_attention(&mut g, store, step1, step2, &vb, &tb)?;
    let mut recs = t2w_records(&g, o.step1, o.step2, &vb, &tb, 0);
    for r in &mut recs {
        r.query_index = vec![Coord::Word(0)];
    }
    Ok((
        g.value(o.out).clone(),
        Trajectory {
            steps: g.value(o.trajectory).clone(),
        },
        recs,
    ))
}

/// `T` step-1 records (one per frame) then the step-2 record of pair `b`.
fn t2w_records<T: Scalar>(
    g: &Graph<T>,
    step1: Var,
    step2: Var,
    video: &VideoBatch,
    text: &TextBatch,
    b: usize,
) -> Vec<AttentionRecord<T>> {
    let lay = video.layout;
    let text_rows: Vec<usize> = (0..text.len_of(b)).map(|i| text.row(b, i)).collect();
    let text_coords = crate::sequence::text_coords(text.len_of(b));
    let mut out = Vec::new();
    for t in 0..lay.frames {
        let q: Vec<usize> = text_rows.iter().map(|&r| r * lay.frames + t).collect();
        let keys: Vec<usize> = (0..lay.patches).map(|pp| video.patch_row(b, t, pp)).collect();
        out.push(record_from(
            g,
            step1,
            AttentionKind::T2wStep1 { frame: t },
            &q,
            text_coords.clone(),
            &keys,
            (0..lay.patches).map(|cell| Coord::Patch { frame: t, cell }).collect(),
        ));
    }
    let aw = g.attention_weights(step2).expect("step-2 attention node");
    let (h, nq, nk) = (aw.heads, text_rows.len(), lay.frames);
    let mut w = vec![T::zero(); h * nq * nk];
    for (qi, &r) in text_rows.iter().enumerate() {
        for head in 0..h {
            w[(head * nq + qi) * nk..(head * nq + qi + 1) * nk].copy_from_slice(aw.row(r, head));
        }
    }
    out.push(AttentionRecord {
        weights: Tensor::raw(vec![h, nq, nk], w),
        kind: AttentionKind::T2wStep2,
        query_index: text_coords,
        key_index: (0..lay.frames).map(Coord::Frame).collect(),
    });
    out
}

/// Step 1 of T2W for a single word `x` (`[1, d]`) over `frames`
/// (each `[P, d]`): one salient-part embedding per frame.
pub fn t2w_trajectory<T: Scalar>(
    store: &ParamStore<T>,
    step1: &MhaParams,
    step2: &MhaParams,
    x: &Tensor<T>,
    frames: &[Tensor<T>],
) -> Result<(Trajectory<T>, Vec<AttentionRecord<T>>)> {
    let (_, traj, mut recs) = t2w_single(store, step1, step2, x, frames)?;
    recs.pop();
    Ok((traj, recs))
}

/// Both T2W steps for a single word; returns `z` (`[1, d]`) and the `T`
/// step-1 records followed by the step-2 record.
pub fn t2w<T: Scalar>(
    store: &ParamStore<T>,
    step1: &MhaParams,
    step2: &MhaParams,
    x: &Tensor<T>,
    frames: &[Tensor<T>],
) -> Result<(Tensor<T>, Vec<AttentionRecord<T>>)> {
    let (z, _, recs) = t2w_single(store, step1, step2, x, frames)?;
    Ok((z, recs))
}

/// One cross-modal layer for a single pair.
pub fn cross_modal_layer<T: Scalar>(
    store: &ParamStore<T>,
    p: &CrossModalLayerParams,
    video: &TokenSequence<T>,
    text: &TokenSequence<T>,
) -> Result<(TokenSequence<T>, TokenSequence<T>, Vec<AttentionRecord<T>>)> {
    cross_modal_encoder(store, std::slice::from_ref(p), video, text)
}

/// Stacked cross-modal layers for a single pair, with every record.
pub fn cross_modal_encoder<T: Scalar>(
    store: &ParamStore<T>,
    layers: &[CrossModalLayerParams],
    video: &TokenSequence<T>,
    text: &TokenSequence<T>,
) -> Result<(TokenSequence<T>, TokenSequence<T>, Vec<AttentionRecord<T>>)> {
    let layout = video_layout_of(video)?;
    let mut g = Graph::new();
    let vb = video_from_seq(&mut g, video, layout)?;
    let tb = text_from_seq(&mut g, text);
    let (v, t, attn) = cross_modal_encoder_batch(&mut g, store, layers, &vb, &tb)?;
    // records refer to the inputs of each layer; layouts are unchanged
    let recs = attn
        .iter()
        .flat_map(|a| layer_records(&g, a, &vb, &tb, 0))
        .collect();
    Ok((
        TokenSequence {
            tokens: g.value(v.var).clone(),
            ..video.clone()
        },
        TokenSequence {
            tokens: g.value(t.var).clone(),
            ..text.clone()
        },
        recs,
    ))
}
