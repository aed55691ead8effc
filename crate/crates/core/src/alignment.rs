//! Align-before-fuse: coarse [CLS] similarity, token-wise maximum
//! similarity, the contrastive losses and the momentum encoder queue.
//!
//! Coarse score: `s_ij = ⟨v_i, x_j⟩` of projected, unit-norm [CLS] tokens.
//! Fine scores (content tokens only, no [CLS]/[PAD]/[MASK]):
//!
//! ```text
//! s^v(V, X) = 1/|V| Σ_n max_m ⟨v_n, x_m⟩
//! s^t(X, V) = 1/|X| Σ_m max_n ⟨x_m, v_n⟩
//! ```
//!
//! The `1/|·|` factor is optional. A contrastive loss takes two score
//! matrices, video queries over text candidates and text queries over video
//! candidates, each `[B, B + Q]` with the positive of row `i` in column
//! `i`, and returns the batch mean of `-log softmax(s_i / τ)[i]` summed over
//! the two directions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_t, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimKind {
    Coarse,
    FineV2t,
    FineT2v,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    /// `[B, M]`.
    pub scores: Tensor<T>,
    pub kind: SimKind,
    pub tau: f64,
}

/// `s_ij = ⟨video_i, text_j⟩` for unit-norm rows.
pub fn coarse_sim<T: Scalar>(
    video_cls: &Tensor<T>,
    text_cls: &Tensor<T>,
    tau: f64,
) -> Result<SimilarityMatrix<T>> {
    check_tau(tau)?;
    if video_cls.cols() != text_cls.cols() {
        return Err(dim(
            "coarse_sim",
            format!("{:?} vs {:?}", video_cls.shape(), text_cls.shape()),
        ));
    }
    Ok(SimilarityMatrix {
        scores: matmul_t(video_cls, text_cls, false, true)?,
        kind: SimKind::Coarse,
        tau,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(contract("similarity", format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn token_max_sim<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    normalize: bool,
) -> Result<T> {
    if a.numel() == 0 || b.numel() == 0 {
        return Err(contract(op, "token sets must be nonempty"));
    }
    if a.cols() != b.cols() {
        return Err(dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dots = matmul_t(a, b, false, true)?;
    let mut best: Vec<T> = (0..a.rows())
        .map(|n| dots.row(n).iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    // a fixed summation order makes the score independent of token order
    best.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    let mut total = T::zero();
    for v in best {
        total += v;
    }
    if normalize {
        total /= T::of(a.rows() as f64);
    }
    Ok(total)
}

/// `s^v`: for every video token, its best-matching word.
pub fn fine_sim_v2t<T: Scalar>(v: &Tensor<T>, x: &Tensor<T>, normalize: bool) -> Result<T> {
    token_max_sim("fine_sim_v2t", v, x, normalize)
}

/// `s^t`: for every word, its best-matching video token.
pub fn fine_sim_t2v<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>, normalize: bool) -> Result<T> {
    token_max_sim("fine_sim_t2v", x, v, normalize)
}

/// Fine score matrix between query token sets and candidate token sets.
pub fn fine_sim_matrix<T: Scalar>(
    queries: &[Tensor<T>],
    candidates: &[Tensor<T>],
    kind: SimKind,
    tau: f64,
    normalize: bool,
) -> Result<SimilarityMatrix<T>> {
    check_tau(tau)?;
    let mut scores = Vec::with_capacity(queries.len() * candidates.len());
    for q in queries {
        for c in candidates {
            scores.push(token_max_sim("fine_sim_matrix", q, c, normalize)?);
        }
    }
    Ok(SimilarityMatrix {
        scores: Tensor::new(vec![queries.len(), candidates.len()], scores)?,
        kind,
        tau,
    })
}

/// Loss on graph values: `CE(v2t / τ) + CE(t2v / τ)`, positives on the
/// diagonal, each direction averaged over its rows. Flagged entries of the
/// exclusion masks drop out of the softmax.
pub fn contrastive_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    v2t: Var,
    t2v: Var,
    tau: f64,
    exclude_v2t: Option<&[bool]>,
    exclude_t2v: Option<&[bool]>,
) -> Result<Var> {
    check_tau(tau)?;
    let mut terms = Vec::with_capacity(2);
    for (s, ex) in [(v2t, exclude_v2t), (t2v, exclude_t2v)] {
        let (b, m) = (g.value(s).rows(), g.value(s).cols());
        if b == 0 || m < b {
            return Err(contract(
                "contrastive_loss",
                format!("score matrix {b}x{m} lacks a positive column per row"),
            ));
        }
        let scaled = g.scale(s, T::of(1.0 / tau));
        terms.push(g.cross_entropy(scaled, (0..b).collect(), ex)?);
    }
    g.add(terms[0], terms[1])
}

/// Value form of [`contrastive_loss_node`] for precomputed matrices.
pub fn contrastive_loss<T: Scalar>(
    v2t: &SimilarityMatrix<T>,
    t2v: &SimilarityMatrix<T>,
) -> Result<T> {
    if v2t.tau != t2v.tau {
        return Err(contract("contrastive_loss", "both directions must share τ"));
    }
    if v2t.scores.rows() != t2v.scores.rows() {
        return Err(dim("contrastive_loss", "directions disagree on batch size"));
    }
    let mut g = Graph::new();
    let a = g.constant(v2t.scores.clone());
    let b = g.constant(t2v.scores.clone());
    let l = contrastive_loss_node(&mut g, a, b, v2t.tau, None, None)?;
    Ok(g.value(l).item())
}

/// Scalar losses of one training step. Each entry is the weighted
/// contribution to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_f: f64,
    pub l_vtc: f64,
    pub l_mlm: f64,
    pub l_vtm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_c: f64, l_f: f64, l_mlm: f64, l_vtm: f64) -> Self {
        let l_vtc = l_c + l_f;
        LossBreakdown {
            l_c,
            l_f,
            l_vtc,
            l_mlm,
            l_vtm,
            total: l_vtc + l_mlm + l_vtm,
        }
    }
}

/// One queued sample in the contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry<T> {
    /// Corpus id of the sample the entry came from.
    pub sample: u64,
    /// Unit-norm projected [CLS], `[d_c]`.
    pub cls: Vec<T>,
    /// Unit-norm projected content tokens, `[n, d_c]` with `n ≤` the token cap.
    pub tokens: Tensor<T>,
}

/// Bounded FIFO of queued embeddings; pushing beyond capacity evicts the
/// oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Queue<T> {
    capacity: usize,
    entries: VecDeque<QueueEntry<T>>,
}

impl<T: Scalar> Queue<T> {
    pub fn new(capacity: usize) -> Self {
        Queue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, e: QueueEntry<T>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry<T>> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Exponential-moving-average copy of a parameter store plus the two
/// embedding queues it feeds.
#[derive(Debug, Clone)]
pub struct MomentumState<T> {
    pub store: ParamStore<T>,
    pub m: f64,
    /// Parameters that are averaged; the rest of `store` is never read.
    pub tracked: Vec<ParamId>,
    pub video_queue: Queue<T>,
    pub text_queue: Queue<T>,
    /// Longest token set kept per queued sample.
    pub token_cap: usize,
}

impl<T: Scalar> MomentumState<T> {
    /// Starts as an exact copy of the tracked parameters of `model`.
    pub fn new(
        model: &ParamStore<T>,
        m: f64,
        capacity: usize,
        token_cap: usize,
        track: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&m) && m != 1.0 {
            return Err(contract("momentum", format!("coefficient {m} outside [0, 1]")));
        }
        let mut store = model.clone();
        store.zero_grads();
        let tracked = model.ids().filter(|&id| track(&model.get(id).name)).collect();
        Ok(MomentumState {
            store,
            m,
            tracked,
            video_queue: Queue::new(capacity),
            text_queue: Queue::new(capacity),
            token_cap,
        })
    }

    /// `θ_m ← m·θ_m + (1 − m)·θ` for every tracked parameter.
    pub fn update(&mut self, model: &ParamStore<T>) -> Result<()> {
        if model.len() != self.store.len()
            || model
                .iter()
                .zip(self.store.iter())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(contract("momentum_step", "model and momentum parameter sets differ"));
        }
        let m = T::of(self.m);
        let one_m = T::of(1.0 - self.m);
        for &id in &self.tracked {
            let src = model.value(id).data();
            let dst = self.store.get_mut(id).value.data_mut();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = m * *d + one_m * *s;
            }
        }
        Ok(())
    }

    pub fn enqueue(&mut self, videos: Vec<QueueEntry<T>>, texts: Vec<QueueEntry<T>>) {
        for v in videos {
            self.video_queue.push(v);
        }
        for t in texts {
            self.text_queue.push(t);
        }
    }
}

/// Indices of at most `cap` rows spread evenly over `n` rows.
pub fn strided_rows(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}
