//! The full model: video and text encoders, contrastive projections,
//! cross-modal encoder and the MLM / VTM heads, all in one parameter store.

use serde::{Deserialize, Serialize};

use crate::alignment::{strided_rows, QueueEntry};
use crate::attention::{
    cross_modal_encoder_batch, layer_records, AttentionRecord, CrossModalLayerParams, Variant,
};
use crate::encoders::{
    embed_text_batch, embed_video_batch, project_node, ContrastiveProjection, TextEncoderParams,
    VideoEncoderParams, VideoInput,
};
use crate::error::{contract, Result};
use crate::graph::Graph;
use crate::objectives::{vtm_logits_node, MlmHead, VtmHead};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequence::{TextBatch, TokenKind, VideoBatch, VideoLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub cross_layers: usize,
    /// Width of the contrastive space.
    pub d_c: usize,
    pub grid: usize,
    pub frames: usize,
    pub feature_width: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub variant: Variant,
    /// VTM head reads both fused [CLS] tokens instead of the text one only.
    pub concat_vtm: bool,
    /// Adds the token-wise contrastive loss and score.
    pub fine_grained: bool,
    /// Divides fine scores by the number of summed tokens.
    pub fine_normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            video_layers: 2,
            text_layers: 2,
            cross_layers: 2,
            d_c: 32,
            grid: 4,
            frames: 4,
            feature_width: crate::data::feature_width(),
            vocab_size: crate::data::caption_vocab().len(),
            max_text_len: 6,
            variant: Variant::T2w,
            concat_vtm: true,
            fine_grained: true,
            fine_normalize: true,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            out.push(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        for (name, v) in [
            ("cross_layers", self.cross_layers),
            ("d_c", self.d_c),
            ("grid", self.grid),
            ("frames", self.frames),
            ("feature_width", self.feature_width),
            ("max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.vocab_size <= crate::encoders::MASK {
            out.push(format!("vocab_size = {} leaves no room for words", self.vocab_size));
        }
        out
    }

    pub fn layout(&self) -> VideoLayout {
        VideoLayout {
            frames: self.frames,
            patches: self.grid * self.grid,
        }
    }
}

/// Parameter handles of every component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub video: VideoEncoderParams,
    pub text: TextEncoderParams,
    pub proj: ContrastiveProjection,
    pub cross: Vec<CrossModalLayerParams>,
    pub mlm: MlmHead,
    pub vtm: VtmHead,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore<T>,
}

/// Whether a parameter belongs to the single-modal encoders or the
/// contrastive projections (the part mirrored by the momentum encoder).
pub fn is_single_modal(name: &str) -> bool {
    name.starts_with("video.") || name.starts_with("text.") || name.starts_with("proj.")
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(contract("model_config", problems.join("; ")));
        }
        let mut rng = Rng::new(seed).derive_named("init");
        let mut store = ParamStore::new();
        let c = &config;
        let video = VideoEncoderParams::new(
            &mut store,
            &mut rng,
            c.layout(),
            c.feature_width,
            c.d,
            c.heads,
            c.video_layers,
        )?;
        let text = TextEncoderParams::new(
            &mut store,
            &mut rng,
            c.vocab_size,
            c.max_text_len,
            c.d,
            c.heads,
            c.text_layers,
        )?;
        let proj = ContrastiveProjection::new(&mut store, &mut rng, c.d, c.d_c)?;
        let cross = (0..c.cross_layers)
            .map(|l| {
                CrossModalLayerParams::new(
                    &mut store,
                    &mut rng,
                    &format!("cross.layer{l}"),
                    c.d,
                    c.heads,
                    c.variant,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mlm = MlmHead::new(&mut store, &mut rng, c.d, c.vocab_size)?;
        let vtm = VtmHead::new(&mut store, &mut rng, c.d, c.concat_vtm)?;
        Ok(Model {
            config,
            params: ModelParams {
                video,
                text,
                proj,
                cross,
                mlm,
                vtm,
            },
            store,
        })
    }
}

/// One video/caption pair ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem<T> {
    pub id: u64,
    pub video: VideoInput<T>,
    pub ids: Vec<usize>,
}

impl<T: Scalar> TrainItem<T> {
    pub fn from_sample(s: &crate::data::Sample) -> Self {
        TrainItem {
            id: s.id,
            video: s.video.input(),
            ids: s.caption.ids.clone(),
        }
    }
}

/// Rows of `text` that are real words (no [CLS], [PAD] or [MASK]).
pub fn word_rows(text: &TextBatch, b: usize) -> Vec<usize> {
    text.kinds[b]
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == TokenKind::Word)
        .map(|(i, _)| text.starts[b] + i)
        .collect()
}

/// Patch rows of video `b`.
pub fn patch_rows(video: &VideoBatch, b: usize) -> Vec<usize> {
    (1..video.layout.len()).map(|i| video.row(b, i)).collect()
}

/// Single-modal embeddings in the contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    pub ids: Vec<u64>,
    /// `[N, d_c]`.
    pub video_cls: Tensor<T>,
    pub text_cls: Tensor<T>,
    /// Per sample `[P·T, d_c]` patch tokens.
    pub video_tokens: Vec<Tensor<T>>,
    /// Per sample word tokens.
    pub text_tokens: Vec<Tensor<T>>,
}

/// Encodes and projects `items` in chunks of `chunk` using the given
/// parameter store (the model's own or a momentum copy).
pub fn embed_items<T: Scalar>(
    store: &ParamStore<T>,
    params: &ModelParams,
    items: &[TrainItem<T>],
    chunk: usize,
) -> Result<Embeddings<T>> {
    let mut vc = Vec::new();
    let mut tc = Vec::new();
    let mut out = Embeddings {
        ids: items.iter().map(|i| i.id).collect(),
        video_cls: Tensor::zeros(&[1]),
        text_cls: Tensor::zeros(&[1]),
        video_tokens: Vec::with_capacity(items.len()),
        text_tokens: Vec::with_capacity(items.len()),
    };
    for part in items.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let videos: Vec<&VideoInput<T>> = part.iter().map(|i| &i.video).collect();
        let texts: Vec<&[usize]> = part.iter().map(|i| i.ids.as_slice()).collect();
        let vb = embed_video_batch(&mut g, store, &params.video, &videos)?;
        let tb = embed_text_batch(&mut g, store, &params.text, &texts)?;
        let vp = project_node(&mut g, store, params.proj.video_w, params.proj.video_b, vb.var)?;
        let tp = project_node(&mut g, store, params.proj.text_w, params.proj.text_b, tb.var)?;
        let (vp, tp) = (g.value(vp), g.value(tp));
        for b in 0..part.len() {
            vc.push(vp.row(vb.row(b, 0)).to_vec());
            tc.push(tp.row(tb.starts[b]).to_vec());
            out.video_tokens.push(vp.gather_rows(&patch_rows(&vb, b)));
            let words = word_rows(&tb, b);
            let words = if words.is_empty() { vec![tb.starts[b]] } else { words };
            out.text_tokens.push(tp.gather_rows(&words));
        }
    }
    out.video_cls = Tensor::from_rows(&vc)?;
    out.text_cls = Tensor::from_rows(&tc)?;
    Ok(out)
}

impl<T: Scalar> Embeddings<T> {
    /// Queue entries with token sets truncated to `cap` rows (evenly
    /// strided for videos).
    pub fn queue_entries(&self, cap: usize) -> (Vec<QueueEntry<T>>, Vec<QueueEntry<T>>) {
        let mut videos = Vec::with_capacity(self.ids.len());
        let mut texts = Vec::with_capacity(self.ids.len());
        for (i, &id) in self.ids.iter().enumerate() {
            let vt = &self.video_tokens[i];
            videos.push(QueueEntry {
                sample: id,
                cls: self.video_cls.row(i).to_vec(),
                tokens: vt.gather_rows(&strided_rows(vt.rows(), cap)),
            });
            let tt = &self.text_tokens[i];
            texts.push(QueueEntry {
                sample: id,
                cls: self.text_cls.row(i).to_vec(),
                tokens: tt.gather_rows(&(0..tt.rows().min(cap)).collect::<Vec<_>>()),
            });
        }
        (videos, texts)
    }
}

/// VTM positive-class margin (`logit_match - logit_mismatch`) for each
/// (video, text) pair, evaluated in chunks.
pub fn vtm_scores<T: Scalar>(
    model: &Model<T>,
    pairs: &[(&VideoInput<T>, &[usize])],
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for part in pairs.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let videos: Vec<&VideoInput<T>> = part.iter().map(|p| p.0).collect();
        let texts: Vec<&[usize]> = part.iter().map(|p| p.1).collect();
        let s = &model.store;
        let vb = embed_video_batch(&mut g, s, &model.params.video, &videos)?;
        let tb = embed_text_batch(&mut g, s, &model.params.text, &texts)?;
        let (fv, ft, _) = cross_modal_encoder_batch(&mut g, s, &model.params.cross, &vb, &tb)?;
        let logits = vtm_logits_node(&mut g, s, &model.params.vtm, &fv, &ft)?;
        let l = g.value(logits);
        for r in 0..l.rows() {
            out.push((l.row(r)[1] - l.row(r)[0]).as_f64());
        }
    }
    Ok(out)
}

/// Every cross-modal attention record for one pair, layer by layer.
pub fn cross_attention_records<T: Scalar>(
    model: &Model<T>,
    video: &VideoInput<T>,
    ids: &[usize],
) -> Result<Vec<AttentionRecord<T>>> {
    let mut g = Graph::new();
    let s = &model.store;
    let vb = embed_video_batch(&mut g, s, &model.params.video, &[video])?;
    let tb = embed_text_batch(&mut g, s, &model.params.text, &[ids])?;
    let (mut v, mut t) = (vb, tb);
    let mut recs = Vec::new();
    for layer in &model.params.cross {
        let (nv, nt, attn) = crate::attention::cross_modal_layer_batch(&mut g, s, layer, &v, &t)?;
        recs.extend(layer_records(&g, &attn, &v, &t, 0));
        v = nv;
        t = nt;
    }
    Ok(recs)
}

/// Which variant a configuration uses for the text side of the cross
/// encoder, for labels.
pub fn variant_label(c: &ModelConfig) -> &'static str {
    match (c.variant, c.concat_vtm, c.fine_grained) {
        (Variant::Base, false, false) => "Base",
        (Variant::T2w, false, false) => "T2W",
        (Variant::T2w, true, false) => "ConCat",
        (Variant::T2w, true, true) => "TW-BERT",
        _ => "custom",
    }
}
