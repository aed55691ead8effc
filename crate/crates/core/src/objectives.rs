//! MLM and VTM heads, batch assembly and the training step.
//!
//! One step encodes both modalities, computes the contrastive losses
//! against the in-batch candidates plus the momentum queue, runs the
//! cross-modal encoder on masked matched pairs (MLM) and on VTM pairs,
//! sums the weighted losses, applies AdamW and finally advances the
//! momentum encoder and its queues.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::alignment::{contrastive_loss_node, LossBreakdown, MomentumState};
use crate::attention::cross_modal_encoder_batch;
use crate::encoders::{embed_text_batch, embed_video_batch, project_node, CLS, MASK, PAD};
use crate::error::{contract, dim, Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::{embed_items, patch_rows, word_rows, Model, ModelParams, TrainItem};
use crate::optim::AdamW;
use crate::param::{init_xavier, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequence::{TextBatch, VideoBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl MlmHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        d: usize,
        vocab: usize,
    ) -> Result<Self> {
        Ok(MlmHead {
            w: store.add("mlm_head.w", init_xavier(rng, d, vocab))?,
            b: store.add("mlm_head.b", Tensor::zeros(&[vocab]))?,
        })
    }
}

/// Two-way matched / mismatched classifier over the fused [CLS] tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VtmHead {
    /// Reads `[v_cls, x_cls]` (`2d → 2`) when set, else `x_cls` (`d → 2`).
    pub concat: bool,
    pub w: ParamId,
    pub b: ParamId,
}

impl VtmHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        d: usize,
        concat: bool,
    ) -> Result<Self> {
        let input = if concat { 2 * d } else { d };
        Ok(VtmHead {
            concat,
            w: store.add("vtm_head.w", init_xavier(rng, input, 2))?,
            b: store.add("vtm_head.b", Tensor::zeros(&[2]))?,
        })
    }
}

/// Answer classifier `2d → hidden → answers` over the concatenated fused
/// [CLS] pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QaHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl QaHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        d: usize,
        hidden: usize,
        answers: usize,
    ) -> Result<Self> {
        Ok(QaHead {
            w1: store.add("qa_head.w1", init_xavier(rng, 2 * d, hidden))?,
            b1: store.add("qa_head.b1", Tensor::zeros(&[hidden]))?,
            w2: store.add("qa_head.w2", init_xavier(rng, hidden, answers))?,
            b2: store.add("qa_head.b2", Tensor::zeros(&[answers]))?,
        })
    }

    /// Answer logits `[B, answers]` from `[B, 2d]` inputs.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }
}

/// One caption with some words replaced by [MASK].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub original: Vec<usize>,
    pub masked: Vec<usize>,
    pub positions: Vec<bool>,
    pub p_mask: f64,
}

impl MaskedBatch {
    pub fn count(&self) -> usize {
        self.positions.iter().filter(|&&m| m).count()
    }
}

fn is_special(id: usize) -> bool {
    id == PAD || id == CLS || id == MASK
}

/// Replaces every non-special token by [MASK] with probability `p_mask`;
/// when nothing was drawn one eligible position is forced.
pub fn mlm_mask(ids: &[usize], p_mask: f64, rng: &mut Rng) -> Result<MaskedBatch> {
    if !(p_mask > 0.0 && p_mask < 1.0) {
        return Err(contract("mlm_mask", format!("p_mask = {p_mask} outside (0, 1)")));
    }
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    if eligible.is_empty() {
        return Err(contract("mlm_mask", "no maskable token"));
    }
    let mut positions = vec![false; ids.len()];
    for &i in &eligible {
        positions[i] = rng.bernoulli(p_mask);
    }
    if !positions.iter().any(|&m| m) {
        positions[eligible[rng.below(eligible.len())]] = true;
    }
    let masked = ids
        .iter()
        .zip(&positions)
        .map(|(&id, &m)| if m { MASK } else { id })
        .collect();
    Ok(MaskedBatch {
        original: ids.to_vec(),
        masked,
        positions,
        p_mask,
    })
}

/// MLM cross-entropy averaged over every masked position of the batch.
/// `fused` must hold the texts of `masks` in order.
pub fn mlm_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &MlmHead,
    fused: &TextBatch,
    masks: &[MaskedBatch],
) -> Result<Var> {
    if masks.len() != fused.count() {
        return Err(dim("mlm_loss", format!("{} masks for {} texts", masks.len(), fused.count())));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        if m.positions.len() + 1 != fused.len_of(b) {
            return Err(dim("mlm_loss", format!("mask of text {b} does not match its length")));
        }
        for (i, _) in m.positions.iter().enumerate().filter(|(_, &p)| p) {
            rows.push(fused.row(b, i + 1));
            targets.push(m.original[i]);
        }
    }
    if rows.is_empty() {
        return Err(contract("mlm_loss", "no masked positions"));
    }
    let h = g.gather(fused.var, rows)?;
    let (w, bias) = (g.param(store, head.w), g.param(store, head.b));
    let logits = g.linear(h, w, Some(bias))?;
    g.cross_entropy(logits, targets, None)
}

/// MLM loss for one fused text sequence (row 0 = [CLS]).
pub fn mlm_loss<T: Scalar>(
    store: &ParamStore<T>,
    head: &MlmHead,
    fused_text: &Tensor<T>,
    batch: &MaskedBatch,
) -> Result<T> {
    let mut g = Graph::new();
    let v = g.constant(fused_text.clone());
    let kinds = std::iter::once(crate::sequence::TokenKind::Cls)
        .chain(batch.masked.iter().map(|&i| crate::encoders::kind_of_id(i)))
        .collect();
    let tb = TextBatch {
        var: v,
        starts: vec![0],
        kinds: vec![kinds],
    };
    let l = mlm_loss_node(&mut g, store, head, &tb, std::slice::from_ref(batch))?;
    Ok(g.value(l).item())
}

/// Video-text pairs for matching: pair `i` is video `video[i]` with text
/// `text[i]`; `labels[i]` is 1 when they belong together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VtmBatch {
    pub video: Vec<usize>,
    pub text: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Keeps each sample's own text with probability `1 - neg_fraction`, else
/// pairs it with a uniformly drawn different text of the batch. Sample 0
/// is kept positive if the draw produced no positive.
pub fn vtm_pair(batch: usize, rng: &mut Rng, neg_fraction: f64) -> Result<VtmBatch> {
    if !(0.0..=1.0).contains(&neg_fraction) {
        return Err(contract("vtm_pair", format!("neg_fraction = {neg_fraction} outside [0, 1]")));
    }
    if batch == 0 {
        return Err(contract("vtm_pair", "empty batch"));
    }
    if batch == 1 && neg_fraction > 0.0 {
        return Err(contract("vtm_pair", "a batch of one has no negatives"));
    }
    let mut text = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for i in 0..batch {
        if rng.bernoulli(neg_fraction) {
            let mut j = rng.below(batch - 1);
            if j >= i {
                j += 1;
            }
            text.push(j);
            labels.push(0);
        } else {
            text.push(i);
            labels.push(1);
        }
    }
    if !labels.contains(&1) {
        text[0] = 0;
        labels[0] = 1;
    }
    Ok(VtmBatch {
        video: (0..batch).collect(),
        text,
        labels,
    })
}

/// VTM logits `[B, 2]` from fused batches.
pub fn vtm_logits_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &VtmHead,
    video: &VideoBatch,
    text: &TextBatch,
) -> Result<Var> {
    let t_cls = g.gather(text.var, text.cls_rows())?;
    let x = if head.concat {
        let v_cls = g.gather(video.var, video.cls_rows())?;
        g.concat_cols(vec![v_cls, t_cls])?
    } else {
        t_cls
    };
    let (w, b) = (g.param(store, head.w), g.param(store, head.b));
    g.linear(x, w, Some(b))
}

/// Binary cross-entropy of the VTM head over fused [CLS] pairs
/// (`[B, d]` each).
pub fn vtm_loss<T: Scalar>(
    store: &ParamStore<T>,
    head: &VtmHead,
    video_fused_cls: &Tensor<T>,
    text_fused_cls: &Tensor<T>,
    labels: &[usize],
) -> Result<T> {
    if video_fused_cls.rows() != text_fused_cls.rows() || labels.len() != text_fused_cls.rows() {
        return Err(dim("vtm_loss", "batch sizes differ"));
    }
    let mut g = Graph::new();
    let v = g.constant(video_fused_cls.clone());
    let t = g.constant(text_fused_cls.clone());
    let n = labels.len();
    let vb = VideoBatch {
        var: v,
        count: n,
        layout: crate::sequence::VideoLayout { frames: 0, patches: 0 },
    };
    let tb = TextBatch {
        var: t,
        starts: (0..n).collect(),
        kinds: vec![vec![crate::sequence::TokenKind::Cls]; n],
    };
    let logits = vtm_logits_node(&mut g, store, head, &vb, &tb)?;
    let l = g.cross_entropy(logits, labels.to_vec(), None)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub c: f64,
    pub f: f64,
    pub mlm: f64,
    pub vtm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            c: 1.0,
            f: 1.0,
            mlm: 1.0,
            vtm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn all_zero(&self) -> bool {
        self.c == 0.0 && self.f == 0.0 && self.mlm == 0.0 && self.vtm == 0.0
    }
}

/// `pretrain` trains all four losses; `finetune` drops MLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub mode: TrainMode,
    pub tau: f64,
    pub p_mask: f64,
    pub neg_fraction: f64,
    /// Whether the fine-grained loss also scores queued token sets.
    pub fine_queue: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            weights: LossWeights::default(),
            mode: TrainMode::Pretrain,
            tau: 0.05,
            p_mask: 0.15,
            neg_fraction: 0.5,
            fine_queue: true,
        }
    }
}

/// Random choices of one step, drawn before the forward pass so the same
/// loss can be evaluated repeatedly.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub masks: Vec<MaskedBatch>,
    pub vtm: VtmBatch,
}

pub fn plan_step<T: Scalar>(
    items: &[TrainItem<T>],
    rng: &mut Rng,
    cfg: &StepConfig,
) -> Result<StepPlan> {
    let masks = items
        .iter()
        .map(|i| mlm_mask(&i.ids, cfg.p_mask, rng))
        .collect::<Result<_>>()?;
    let vtm = vtm_pair(items.len(), rng, cfg.neg_fraction)?;
    Ok(StepPlan { masks, vtm })
}

/// Loss nodes of one forward pass; absent terms are disabled.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_c: Option<Var>,
    pub l_f: Option<Var>,
    pub l_mlm: Option<Var>,
    pub l_vtm: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        let val = |v: Option<Var>, k: f64| v.map_or(0.0, |v| k * g.value(v).item().as_f64());
        LossBreakdown::new(
            val(self.l_c, w.c),
            val(self.l_f, w.f),
            val(self.l_mlm, w.mlm),
            val(self.l_vtm, w.vtm),
        )
    }
}

/// Rows of `text` for the samples in `order`, as a new batch.
fn select_text<T: Scalar>(g: &mut Graph<T>, text: &TextBatch, order: &[usize]) -> Result<TextBatch> {
    let mut idx = Vec::new();
    let mut kinds = Vec::with_capacity(order.len());
    for &b in order {
        idx.extend((0..text.len_of(b)).map(|i| text.row(b, i)));
        kinds.push(text.kinds[b].clone());
    }
    Ok(TextBatch {
        var: g.gather(text.var, idx)?,
        starts: TextBatch::starts_for(&kinds),
        kinds,
    })
}

/// Builds every enabled loss of one step on `g`.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ModelParams,
    model_cfg: &crate::model::ModelConfig,
    momentum: Option<&MomentumState<T>>,
    items: &[TrainItem<T>],
    plan: &StepPlan,
    cfg: &StepConfig,
) -> Result<LossVars> {
    let n = items.len();
    if n == 0 {
        return Err(contract("training_step", "empty batch"));
    }
    let w = cfg.weights;
    let videos: Vec<_> = items.iter().map(|i| &i.video).collect();
    let texts: Vec<&[usize]> = items.iter().map(|i| i.ids.as_slice()).collect();
    let vb = embed_video_batch(g, store, &params.video, &videos)?;
    let tb = embed_text_batch(g, store, &params.text, &texts)?;
    let use_c = w.c != 0.0;
    let use_f = w.f != 0.0 && model_cfg.fine_grained;
    let (mut l_c, mut l_f) = (None, None);
    if use_c || use_f {
        let (vq, tq) = match momentum {
            Some(m) => (m.video_queue.iter().collect(), m.text_queue.iter().collect()),
            None => (Vec::new(), Vec::new()),
        };
        // candidate j ≥ n is queue entry j − n; drop entries of the query's own sample
        let exclusion = |queue: &[&crate::alignment::QueueEntry<T>]| -> Option<Vec<bool>> {
            if queue.is_empty() {
                return None;
            }
            let m = n + queue.len();
            let mut ex = vec![false; n * m];
            for (i, item) in items.iter().enumerate() {
                for (k, e) in queue.iter().enumerate() {
                    ex[i * m + n + k] = e.sample == item.id;
                }
            }
            Some(ex)
        };
        let ex_v2t = exclusion(&tq);
        let ex_t2v = exclusion(&vq);
        let vp = project_node(g, store, params.proj.video_w, params.proj.video_b, vb.var)?;
        let tp = project_node(g, store, params.proj.text_w, params.proj.text_b, tb.var)?;
        if use_c {
            let v_cls = g.gather(vp, vb.cls_rows())?;
            let t_cls = g.gather(tp, tb.cls_rows())?;
            let cls_of = |q: &[&crate::alignment::QueueEntry<T>]| -> Result<Option<Tensor<T>>> {
                if q.is_empty() {
                    return Ok(None);
                }
                let rows: Vec<Vec<T>> = q.iter().map(|e| e.cls.clone()).collect();
                Ok(Some(Tensor::from_rows(&rows)?))
            };
            let t_cand = match cls_of(&tq)? {
                Some(t) => {
                    let c = g.constant(t);
                    g.concat(vec![t_cls, c])?
                }
                None => t_cls,
            };
            let v_cand = match cls_of(&vq)? {
                Some(t) => {
                    let c = g.constant(t);
                    g.concat(vec![v_cls, c])?
                }
                None => v_cls,
            };
            let s_v2t = g.matmul_t(v_cls, t_cand, false, true)?;
            let s_t2v = g.matmul_t(t_cls, v_cand, false, true)?;
            l_c = Some(contrastive_loss_node(
                g,
                s_v2t,
                s_t2v,
                cfg.tau,
                ex_v2t.as_deref(),
                ex_t2v.as_deref(),
            )?);
        }
        if use_f {
            let v_sets: Vec<Vec<usize>> = (0..n).map(|b| patch_rows(&vb, b)).collect();
            let t_sets: Vec<Vec<usize>> = (0..n)
                .map(|b| {
                    let r = word_rows(&tb, b);
                    if r.is_empty() { vec![tb.starts[b]] } else { r }
                })
                .collect();
            // batch token rows followed by queued token rows
            let with_queue = |g: &mut Graph<T>,
                              base: Var,
                              sets: &[Vec<usize>],
                              q: &[&crate::alignment::QueueEntry<T>]|
             -> Result<(Var, Vec<Vec<usize>>)> {
                let mut sets = sets.to_vec();
                if q.is_empty() {
                    return Ok((base, sets));
                }
                let mut offset = g.value(base).rows();
                let mut data = Vec::new();
                for e in q {
                    sets.push((offset..offset + e.tokens.rows()).collect());
                    offset += e.tokens.rows();
                    data.extend_from_slice(e.tokens.data());
                }
                let cols = g.value(base).cols();
                let c = g.constant(Tensor::new(vec![data.len() / cols, cols], data)?);
                Ok((g.concat(vec![base, c])?, sets))
            };
            let (ftq, fvq, fex_v2t, fex_t2v) = if cfg.fine_queue {
                (&tq[..], &vq[..], ex_v2t.as_deref(), ex_t2v.as_deref())
            } else {
                (&[][..], &[][..], None, None)
            };
            let (t_all, t_all_sets) = with_queue(g, tp, &t_sets, ftq)?;
            let (v_all, v_all_sets) = with_queue(g, vp, &v_sets, fvq)?;
            let norm = model_cfg.fine_normalize;
            let s_v2t = g.max_sim(vp, t_all, Arc::new(v_sets.clone()), Arc::new(t_all_sets), norm)?;
            let s_t2v = g.max_sim(tp, v_all, Arc::new(t_sets.clone()), Arc::new(v_all_sets), norm)?;
            l_f = Some(contrastive_loss_node(g, s_v2t, s_t2v, cfg.tau, fex_v2t, fex_t2v)?);
        }
    }
    let mut l_mlm = None;
    if w.mlm != 0.0 && cfg.mode == TrainMode::Pretrain {
        let masked: Vec<&[usize]> = plan.masks.iter().map(|m| m.masked.as_slice()).collect();
        let mb = embed_text_batch(g, store, &params.text, &masked)?;
        let (_, ft, _) = cross_modal_encoder_batch(g, store, &params.cross, &vb, &mb)?;
        l_mlm = Some(mlm_loss_node(g, store, &params.mlm, &ft, &plan.masks)?);
    }
    let mut l_vtm = None;
    if w.vtm != 0.0 {
        if plan.vtm.video.iter().enumerate().any(|(i, &v)| v != i) || plan.vtm.text.len() != n {
            return Err(contract("training_step", "VTM plan must keep videos in batch order"));
        }
        let pairs = select_text(g, &tb, &plan.vtm.text)?;
        let (fv, ft, _) = cross_modal_encoder_batch(g, store, &params.cross, &vb, &pairs)?;
        let logits = vtm_logits_node(g, store, &params.vtm, &fv, &ft)?;
        l_vtm = Some(g.cross_entropy(logits, plan.vtm.labels.clone(), None)?);
    }
    let mut total: Option<Var> = None;
    for (v, k) in [(l_c, w.c), (l_f, w.f), (l_mlm, w.mlm), (l_vtm, w.vtm)] {
        if let Some(v) = v {
            let term = g.scale(v, T::of(k));
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossVars {
        l_c,
        l_f,
        l_mlm,
        l_vtm,
        total,
    })
}

/// Advances the momentum encoder towards `model` and enqueues the
/// momentum-encoded embeddings of `items`.
pub fn momentum_step<T: Scalar>(
    model: &Model<T>,
    state: &mut MomentumState<T>,
    items: &[TrainItem<T>],
) -> Result<()> {
    state.update(&model.store)?;
    if state.video_queue.capacity() == 0 {
        return Ok(());
    }
    let emb = embed_items(&state.store, &model.params, items, items.len())?;
    let (v, t) = emb.queue_entries(state.token_cap);
    state.enqueue(v, t);
    Ok(())
}

/// One optimization step over `items`.
pub fn training_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut MomentumState<T>,
    opt: &mut AdamW<T>,
    items: &[TrainItem<T>],
    rng: &mut Rng,
    cfg: &StepConfig,
) -> Result<LossBreakdown> {
    if items.len() < 2 {
        return Err(contract("training_step", "batches need at least two samples"));
    }
    let plan = plan_step(items, rng, cfg)?;
    let mut g = Graph::new();
    let lv = loss_graph(
        &mut g,
        &model.store,
        &model.params,
        &model.config,
        Some(state),
        items,
        &plan,
        cfg,
    )?;
    let breakdown = lv.breakdown(&g, &cfg.weights);
    if !breakdown.total.is_finite() {
        return Err(non_finite(&model.store, "loss", &breakdown));
    }
    if !cfg.weights.all_zero() {
        model.store.zero_grads();
        g.backward(lv.total, &mut model.store)?;
        let bad = model.store.non_finite();
        if !bad.is_empty() {
            return Err(Error::Numeric {
                location: bad.join(", "),
                detail: format!("gradient not finite at losses {breakdown:?}"),
            });
        }
        opt.update(&mut model.store);
        model.store.zero_grads();
    }
    momentum_step(model, state, items)?;
    Ok(breakdown)
}

/// Central-difference check of every parameter of `model` against the
/// weighted total of `plan`'s losses.
pub fn check_gradients(
    model: &mut Model<f64>,
    momentum: Option<&MomentumState<f64>>,
    items: &[TrainItem<f64>],
    plan: &StepPlan,
    cfg: &StepConfig,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let params = model.params.clone();
    let model_cfg = model.config.clone();
    let ids: Vec<ParamId> = model.store.ids().collect();
    grad_check(&mut model.store, &ids, step, tol, |s, g| {
        Ok(loss_graph(g, s, &params, &model_cfg, momentum, items, plan, cfg)?.total)
    })
}

fn non_finite<T: Scalar>(store: &ParamStore<T>, what: &str, b: &LossBreakdown) -> Error {
    let bad = store.non_finite();
    Error::Numeric {
        location: if bad.is_empty() { what.to_string() } else { bad.join(", ") },
        detail: format!("non-finite {what}: {b:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vtm_pair_without_negatives_is_identity() {
        let mut rng = Rng::new(1);
        let b = vtm_pair(5, &mut rng, 0.0).unwrap();
        assert_eq!(b.labels, vec![1; 5]);
        assert_eq!(b.text, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn mask_rejects_all_special() {
        let mut rng = Rng::new(1);
        assert!(mlm_mask(&[PAD, CLS], 0.15, &mut rng).is_err());
    }
}
