//! Single-modal encoders.
//!
//! The video encoder projects raw per-patch features, adds a spatial
//! embedding indexed by grid cell only (shared by every frame) and a
//! temporal embedding indexed by frame, prepends a learnable [CLS] token and
//! runs blocks of divided space-time attention:
//!
//! * temporal: patch `(t, p)` attends to `(t', p)` for every frame `t'`;
//!   [CLS] attends only to itself.
//! * spatial: patch `(t, p)` attends to [CLS] and the patches of frame `t`;
//!   [CLS] attends to every token.
//!
//! followed by a feed-forward block. The text encoder is a plain
//! transformer over `[CLS] ids…` with [PAD] positions removed from the key
//! sets.

use std::collections::HashMap;
use std::sync::Arc;

use crate::attention::{ffn_node, mha_node, FfnParams, MhaParams};
use crate::error::{contract, dim, Error, Result};
use crate::graph::{Graph, KeySets, Var};
use crate::param::{init_normal, init_xavier, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequence::{TextBatch, TokenKind, TokenSequence, VideoBatch, VideoLayout};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;

const EMBED_STD: f64 = 0.1;

/// Raw features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInput<T> {
    /// `[T, P, f]`.
    pub features: Tensor<T>,
    pub grid: usize,
}

impl<T: Scalar> VideoInput<T> {
    pub fn new(features: Tensor<T>, grid: usize) -> Result<Self> {
        let s = features.shape();
        if s.len() != 3 || s[0] == 0 || s[1] != grid * grid || grid == 0 {
            return Err(dim(
                "video_input",
                format!("features {s:?} for a {grid}x{grid} grid"),
            ));
        }
        Ok(VideoInput { features, grid })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_width(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn layout(&self) -> VideoLayout {
        VideoLayout {
            frames: self.frames(),
            patches: self.patches(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoBlock {
    pub temporal: MhaParams,
    pub spatial: MhaParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoderParams {
    pub layout: VideoLayout,
    pub feature_width: usize,
    pub d: usize,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    /// `[P, d]`, one row per grid cell.
    pub spatial_pos: ParamId,
    /// `[T, d]`, one row per frame index.
    pub temporal_pos: ParamId,
    /// `[1, d]`.
    pub cls: ParamId,
    pub blocks: Vec<VideoBlock>,
}

impl VideoEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        layout: VideoLayout,
        feature_width: usize,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        if layout.frames == 0 || layout.patches == 0 {
            return Err(contract("video_encoder", "need at least one frame and one patch"));
        }
        let patch_w = store.add("video.patch_proj.w", init_xavier(rng, feature_width, d))?;
        let patch_b = store.add("video.patch_proj.b", Tensor::zeros(&[d]))?;
        let spatial_pos = store.add(
            "video.spatial_pos",
            init_normal(rng, &[layout.patches, d], EMBED_STD),
        )?;
        let temporal_pos = store.add(
            "video.temporal_pos",
            init_normal(rng, &[layout.frames, d], EMBED_STD),
        )?;
        let cls = store.add("video.cls", init_normal(rng, &[1, d], EMBED_STD))?;
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let prefix = format!("video.block{l}");
            blocks.push(VideoBlock {
                temporal: MhaParams::new(store, rng, &format!("{prefix}.temporal"), d, heads)?,
                spatial: MhaParams::new(store, rng, &format!("{prefix}.spatial"), d, heads)?,
                ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), d, 4 * d)?,
            });
        }
        Ok(VideoEncoderParams {
            layout,
            feature_width,
            d,
            patch_w,
            patch_b,
            spatial_pos,
            temporal_pos,
            cls,
            blocks,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBlock {
    pub attn: MhaParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub vocab_size: usize,
    /// Longest id sequence accepted, excluding [CLS].
    pub max_len: usize,
    pub d: usize,
    /// `[vocab, d]`.
    pub embed: ParamId,
    /// `[max_len + 1, d]`.
    pub pos: ParamId,
    pub blocks: Vec<TextBlock>,
}

impl TextEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        vocab_size: usize,
        max_len: usize,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        if vocab_size <= MASK {
            return Err(contract("text_encoder", "vocabulary must hold the reserved ids"));
        }
        let embed = store.add("text.embed", init_normal(rng, &[vocab_size, d], EMBED_STD * 10.0))?;
        let pos = store.add("text.pos", init_normal(rng, &[max_len + 1, d], EMBED_STD))?;
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let prefix = format!("text.block{l}");
            blocks.push(TextBlock {
                attn: MhaParams::new(store, rng, &format!("{prefix}.attn"), d, heads)?,
                ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), d, 4 * d)?,
            });
        }
        Ok(TextEncoderParams {
            vocab_size,
            max_len,
            d,
            embed,
            pos,
            blocks,
        })
    }
}

/// Linear maps into the shared contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveProjection {
    pub d_c: usize,
    pub video_w: ParamId,
    pub video_b: ParamId,
    pub text_w: ParamId,
    pub text_b: ParamId,
}

impl ContrastiveProjection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        d: usize,
        d_c: usize,
    ) -> Result<Self> {
        Ok(ContrastiveProjection {
            d_c,
            video_w: store.add("proj.video.w", init_xavier(rng, d, d_c))?,
            video_b: store.add("proj.video.b", Tensor::zeros(&[d_c]))?,
            text_w: store.add("proj.text.w", init_xavier(rng, d, d_c))?,
            text_b: store.add("proj.text.b", Tensor::zeros(&[d_c]))?,
        })
    }
}

fn video_key_sets(layout: VideoLayout, count: usize) -> (KeySets, KeySets) {
    let n = layout.len();
    let mut temporal = KeySets::new();
    let mut spatial = KeySets::new();
    for b in 0..count {
        let base = b * n;
        temporal.push([base]);
        spatial.push(base..base + n);
        for t in 0..layout.frames {
            for p in 0..layout.patches {
                temporal.push((0..layout.frames).map(|s| base + layout.patch(s, p)));
                spatial.push(
                    std::iter::once(base)
                        .chain((0..layout.patches).map(|q| base + layout.patch(t, q))),
                );
            }
        }
    }
    (temporal, spatial)
}

/// Encodes a batch of videos into stacked token sequences.
pub fn embed_video_batch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &VideoEncoderParams,
    videos: &[&VideoInput<T>],
) -> Result<VideoBatch> {
    if videos.is_empty() {
        return Err(contract("embed_video", "empty batch"));
    }
    let layout = p.layout;
    let tp = layout.frames * layout.patches;
    let mut feats = Vec::with_capacity(videos.len() * tp * p.feature_width);
    for v in videos {
        if v.layout() != layout || v.feature_width() != p.feature_width {
            return Err(dim(
                "embed_video",
                format!(
                    "video {:?} against encoder geometry {layout:?} with {} features",
                    v.features.shape(),
                    p.feature_width
                ),
            ));
        }
        feats.extend_from_slice(v.features.data());
    }
    let x = g.constant(Tensor::raw(vec![videos.len() * tp, p.feature_width], feats));
    let w = g.param(store, p.patch_w);
    let bias = g.param(store, p.patch_b);
    let proj = g.linear(x, w, Some(bias))?;
    let cls = g.param(store, p.cls);
    let all = g.concat(vec![cls, proj])?;
    // reorder into [cls, patches…] per video
    let mut order = Vec::with_capacity(videos.len() * layout.len());
    let mut spatial_idx = Vec::with_capacity(order.capacity());
    let mut temporal_idx = Vec::with_capacity(order.capacity());
    for b in 0..videos.len() {
        order.push(0);
        spatial_idx.push(0);
        temporal_idx.push(0);
        for t in 0..layout.frames {
            for cell in 0..layout.patches {
                order.push(1 + b * tp + t * layout.patches + cell);
                spatial_idx.push(cell + 1);
                temporal_idx.push(t + 1);
            }
        }
    }
    let tokens = g.gather(all, order)?;
    let zero = g.constant(Tensor::zeros(&[1, p.d]));
    let sp = g.param(store, p.spatial_pos);
    let tm = g.param(store, p.temporal_pos);
    let sp_ext = g.concat(vec![zero, sp])?;
    let tm_ext = g.concat(vec![zero, tm])?;
    let sp_rows = g.gather(sp_ext, spatial_idx)?;
    let tm_rows = g.gather(tm_ext, temporal_idx)?;
    let h = g.add(tokens, sp_rows)?;
    let mut h = g.add(h, tm_rows)?;
    let (temporal, spatial) = video_key_sets(layout, videos.len());
    let (temporal, spatial) = (Arc::new(temporal), Arc::new(spatial));
    for blk in &p.blocks {
        h = mha_node(g, store, &blk.temporal, h, h, h, temporal.clone())?.out;
        h = mha_node(g, store, &blk.spatial, h, h, h, spatial.clone())?.out;
        h = ffn_node(g, store, &blk.ffn, h)?;
    }
    Ok(VideoBatch {
        var: h,
        count: videos.len(),
        layout,
    })
}

/// Token kind of an id in a text sequence (position 0 is always [CLS]).
pub fn kind_of_id(id: usize) -> TokenKind {
    match id {
        PAD => TokenKind::Pad,
        CLS => TokenKind::Cls,
        MASK => TokenKind::Mask,
        _ => TokenKind::Word,
    }
}

/// Encodes a batch of id sequences (without [CLS]) into stacked sequences
/// of length `ids.len() + 1`.
pub fn embed_text_batch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &TextEncoderParams,
    texts: &[&[usize]],
) -> Result<TextBatch> {
    if texts.is_empty() {
        return Err(contract("embed_text", "empty batch"));
    }
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut kinds = Vec::with_capacity(texts.len());
    for t in texts {
        if t.is_empty() {
            return Err(contract("embed_text", "text needs at least one token"));
        }
        if t.len() > p.max_len {
            return Err(dim(
                "embed_text",
                format!("{} tokens exceed the maximum of {}", t.len(), p.max_len),
            ));
        }
        if let Some(&bad) = t.iter().find(|&&i| i >= p.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        ids.push(CLS);
        ids.extend_from_slice(t);
        pos.extend(0..=t.len());
        let mut k = vec![TokenKind::Cls];
        k.extend(t.iter().map(|&i| kind_of_id(i)));
        kinds.push(k);
    }
    let starts = TextBatch::starts_for(&kinds);
    let embed = g.param(store, p.embed);
    let pos_table = g.param(store, p.pos);
    let e = g.gather(embed, ids)?;
    let pe = g.gather(pos_table, pos)?;
    let mut h = g.add(e, pe)?;
    let mut batch = TextBatch {
        var: h,
        starts,
        kinds,
    };
    let mut keys = KeySets::new();
    for b in 0..batch.count() {
        let ks: Vec<usize> = batch.key_rows(b).collect();
        for _ in 0..batch.len_of(b) {
            keys.push(ks.iter().copied());
        }
    }
    let keys = Arc::new(keys);
    for blk in &p.blocks {
        h = mha_node(g, store, &blk.attn, h, h, h, keys.clone())?.out;
        h = ffn_node(g, store, &blk.ffn, h)?;
    }
    batch.var = h;
    Ok(batch)
}

/// Linear projection then per-row L2 normalization.
pub fn project_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: ParamId,
    b: ParamId,
    x: Var,
) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.linear(x, wv, Some(bv))?;
    Ok(g.l2_normalize(y))
}

/// Single-video form of [`embed_video_batch`].
pub fn embed_video<T: Scalar>(
    store: &ParamStore<T>,
    p: &VideoEncoderParams,
    v: &VideoInput<T>,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let b = embed_video_batch(&mut g, store, p, &[v])?;
    Ok(TokenSequence::video(
        g.value(b.var).clone(),
        b.layout.frames,
        b.layout.patches,
    ))
}

/// Single-text form of [`embed_text_batch`].
pub fn embed_text<T: Scalar>(
    store: &ParamStore<T>,
    p: &TextEncoderParams,
    ids: &[usize],
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let b = embed_text_batch(&mut g, store, p, &[ids])?;
    Ok(TokenSequence::text(g.value(b.var).clone(), b.kinds[0].clone()))
}

/// Projects every token of `seq` into the contrastive space, unit norm per
/// row. Rows whose projection is (near) zero are divided by 1e-12 instead.
pub fn project_contrastive<T: Scalar>(
    store: &ParamStore<T>,
    p: &ContrastiveProjection,
    seq: &TokenSequence<T>,
) -> Result<Tensor<T>> {
    let (w, b) = match seq.modality {
        crate::sequence::Modality::Video => (p.video_w, p.video_b),
        crate::sequence::Modality::Text => (p.text_w, p.text_b),
    };
    let mut g = Graph::new();
    let x = g.constant(seq.tokens.clone());
    let y = project_node(&mut g, store, w, b, x)?;
    Ok(g.value(y).clone())
}

/// Closed vocabulary with the reserved ids 0 = [PAD], 1 = [CLS], 2 = [MASK].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const SPECIALS: [&'static str; 3] = ["[PAD]", "[CLS]", "[MASK]"];

    /// Reserved tokens followed by `words` in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse(format!("line {}: invalid token `{t}`", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate token `{t}`", i + 1)));
            }
        }
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse(format!("line {}: expected {s}", i + 1)));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Parses the one-token-per-line file format.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::new(&["red", "square"]).unwrap();
        assert_eq!(v.id("[MASK]").unwrap(), MASK);
        let back = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert!(matches!(v.id("blue"), Err(Error::UnknownToken(_))));
        assert!(Vocab::parse("[CLS]\n[PAD]\n[MASK]\n").is_err());
    }

    #[test]
    fn key_sets_follow_divided_attention() {
        let layout = VideoLayout { frames: 2, patches: 3 };
        let (temporal, spatial) = video_key_sets(layout, 1);
        assert_eq!(temporal.row(0), &[0]);
        // patch (1, 2) is row 6
        assert_eq!(temporal.row(6), &[3, 6]);
        assert_eq!(spatial.row(6), &[0, 4, 5, 6]);
        assert_eq!(spatial.row(0).len(), 7);
    }
}
