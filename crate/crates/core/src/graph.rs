//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. Nodes are appended in evaluation order, so walking them
//! backwards is a valid reverse topological order. Parameters enter as leaf
//! nodes bound to a [`ParamStore`]; [`Graph::backward`] adds d(loss)/d(value)
//! into each reachable parameter's gradient buffer (accumulating across
//! calls until [`ParamStore::zero_grads`]).
//!
//! Most values are matrices `[rows, cols]`; bias and norm parameters are
//! vectors broadcast over rows; losses are one-element tensors.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract, dim, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{self, normalize_row, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// For each query row, the key rows it may attend to (CSR layout).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeySets {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl KeySets {
    pub fn new() -> Self {
        KeySets {
            offsets: vec![0],
            keys: Vec::new(),
        }
    }

    /// Every one of `n_q` rows attends to all `n_k` keys.
    pub fn dense(n_q: usize, n_k: usize) -> Self {
        let mut ks = KeySets::new();
        for _ in 0..n_q {
            ks.push(0..n_k);
        }
        ks
    }

    pub fn push(&mut self, keys: impl IntoIterator<Item = usize>) {
        self.keys.extend(keys);
        self.offsets.push(self.keys.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.keys[self.offsets[r]..self.offsets[r + 1]]
    }

    fn offset(&self, r: usize) -> usize {
        self.offsets[r]
    }

    fn total(&self) -> usize {
        self.keys.len()
    }
}

/// Row-major attention weights captured by an attention node.
#[derive(Debug, Clone)]
pub struct AttentionWeights<'g, T> {
    pub heads: usize,
    pub keys: &'g KeySets,
    weights: &'g [T],
}

impl<T: Scalar> AttentionWeights<'_, T> {
    /// Weights of query row `r` under head `h`, aligned with `keys.row(r)`.
    pub fn row(&self, r: usize, h: usize) -> &[T] {
        let len = self.keys.row(r).len();
        let base = self.keys.offset(r) * self.heads + h * len;
        &self.weights[base..base + len]
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(Var),
    Gather { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2Normalize { x: Var, norms: Vec<T> },
    Attend { q: Var, k: Var, v: Var, heads: usize, scale: T, keys: Arc<KeySets>, weights: Vec<T> },
    MaxSim { a: Var, b: Var, a_sets: Arc<Vec<Vec<usize>>>, b_sets: Arc<Vec<Vec<usize>>>, norm: Vec<T>, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = tensor::matmul_t(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::raw(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector of width `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.numel() != tx.cols() {
            return Err(dim(
                "add_row",
                format!("row {:?} against {:?}", tr.shape(), tx.shape()),
            ));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += *b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let (tg, tb) = (self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(dim(
                "layer_norm",
                format!("width {d}, gain {:?}, bias {:?}", tg.shape(), tb.shape()),
            ));
        }
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..tx.rows() {
            let (h, inv) = normalize_row(tx.row(r), eps);
            for (j, hv) in h.iter().enumerate() {
                out.push(tg.data()[j] * *hv + tb.data()[j]);
            }
            xhat.extend(h);
            inv_std.push(inv);
        }
        let out = Tensor::raw(tx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Rows `idx` of `x`, in order; rows may repeat.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(crate::error::index(
                "gather",
                format!("row {bad} of {}", tx.rows()),
            ));
        }
        if idx.is_empty() {
            return Err(dim("gather", "empty index list"));
        }
        let out = tx.gather_rows(&idx);
        Ok(self.push(out, Op::Gather { x, idx }, &[x]))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat(&mut self, parts: Vec<Var>) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(dim("concat", "no inputs")),
        };
        let mut data = Vec::new();
        for &p in &parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim("concat", format!("column widths {cols} and {}", t.cols())));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::raw(vec![rows, cols], data);
        let inputs = parts.clone();
        Ok(self.push(out, Op::Concat(parts), &inputs))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(dim("concat_cols", "no inputs")),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in &parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::raw(vec![rows, cols], data);
        let inputs = parts.clone();
        Ok(self.push(out, Op::ConcatCols(parts), &inputs))
    }

    /// Scales each row to unit L2 norm; rows with norm below 1e-12 are
    /// divided by 1e-12 instead (a zero row stays zero).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let floor = T::of(1e-12);
        let mut out = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let n = tx.row(r).iter().map(|v| *v * *v).sum::<T>().sqrt().max(floor);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values. Head `i` uses columns
    /// `[i*d/heads, (i+1)*d/heads)`; query row `r` attends only to
    /// `keys.row(r)`.
    pub fn attend(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: Arc<KeySets>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 || tk.cols() != d || tv.cols() % heads != 0 {
            return Err(dim(
                "attend",
                format!(
                    "q {:?}, k {:?}, v {:?} with {heads} heads",
                    tq.shape(),
                    tk.shape(),
                    tv.shape()
                ),
            ));
        }
        if tk.rows() != tv.rows() {
            return Err(dim("attend", "key and value row counts differ"));
        }
        if keys.rows() != tq.rows() {
            return Err(dim(
                "attend",
                format!("{} key sets for {} query rows", keys.rows(), tq.rows()),
            ));
        }
        let dh = d / heads;
        let dv = tv.cols() / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut weights = vec![T::zero(); keys.total() * heads];
        let mut out = vec![T::zero(); tq.rows() * tv.cols()];
        for r in 0..tq.rows() {
            let ks = keys.row(r);
            if ks.is_empty() {
                return Err(contract("attend", format!("query row {r} has no keys")));
            }
            if let Some(&bad) = ks.iter().find(|&&j| j >= tk.rows()) {
                return Err(crate::error::index("attend", format!("key {bad} of {}", tk.rows())));
            }
            let qrow = tq.row(r);
            let base = keys.offset(r) * heads;
            for h in 0..heads {
                let w = &mut weights[base + h * ks.len()..base + (h + 1) * ks.len()];
                let qh = &qrow[h * dh..(h + 1) * dh];
                for (wj, &j) in w.iter_mut().zip(ks) {
                    let kh = &tk.row(j)[h * dh..(h + 1) * dh];
                    *wj = qh.iter().zip(kh).map(|(a, b)| *a * *b).sum::<T>() * scale;
                }
                softmax_in_place(w);
                let o = &mut out[r * tv.cols() + h * dv..r * tv.cols() + (h + 1) * dv];
                for (wj, &j) in w.iter().zip(ks) {
                    let vh = &tv.row(j)[h * dv..(h + 1) * dv];
                    for (oc, vc) in o.iter_mut().zip(vh) {
                        *oc += *wj * *vc;
                    }
                }
            }
        }
        let out = Tensor::raw(vec![tq.rows(), tv.cols()], out);
        Ok(self.push(
            out,
            Op::Attend {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Weights recorded by an [`Graph::attend`] node.
    pub fn attention_weights(&self, node: Var) -> Option<AttentionWeights<'_, T>> {
        match &self.nodes[node.0].op {
            Op::Attend {
                heads,
                keys,
                weights,
                ..
            } => Some(AttentionWeights {
                heads: *heads,
                keys,
                weights,
            }),
            _ => None,
        }
    }

    /// Token-wise maximum similarity between token sets.
    ///
    /// `out[i][j] = w_i · Σ_{n ∈ a_sets[i]} max_{m ∈ b_sets[j]} ⟨a_n, b_m⟩`
    /// with `w_i = 1/|a_sets[i]|` when `normalize`, else 1.
    pub fn max_sim(
        &mut self,
        a: Var,
        b: Var,
        a_sets: Arc<Vec<Vec<usize>>>,
        b_sets: Arc<Vec<Vec<usize>>>,
        normalize: bool,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim(
                "max_sim",
                format!("widths {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let sets_ok = |sets: &Vec<Vec<usize>>, rows: usize| {
            !sets.is_empty() && sets.iter().all(|s| !s.is_empty() && s.iter().all(|&i| i < rows))
        };
        if !sets_ok(&a_sets, ta.rows()) || !sets_ok(&b_sets, tb.rows()) {
            return Err(contract("max_sim", "token sets must be nonempty and in range"));
        }
        let d = ta.cols();
        let (ni, nj) = (a_sets.len(), b_sets.len());
        let mut out = vec![T::zero(); ni * nj];
        let mut argmax = Vec::new();
        let mut norm = Vec::with_capacity(ni);
        // dots between the rows of one a-set and every b row
        let mut buf: Vec<T> = Vec::new();
        for (i, aset) in a_sets.iter().enumerate() {
            let arows = ta.gather_rows(aset);
            buf.clear();
            buf.resize(aset.len() * tb.rows(), T::zero());
            T::gemm(
                aset.len(),
                d,
                tb.rows(),
                T::one(),
                arows.data(),
                d as isize,
                1,
                tb.data(),
                1,
                d as isize,
                T::zero(),
                &mut buf,
                tb.rows() as isize,
                1,
            );
            let w = if normalize {
                T::one() / T::of(aset.len() as f64)
            } else {
                T::one()
            };
            norm.push(w);
            for (j, bset) in b_sets.iter().enumerate() {
                let mut total = T::zero();
                for n in 0..aset.len() {
                    let dots = &buf[n * tb.rows()..(n + 1) * tb.rows()];
                    let mut best = bset[0];
                    for &m in &bset[1..] {
                        if dots[m] > dots[best] {
                            best = m;
                        }
                    }
                    total += dots[best];
                    argmax.push(best);
                }
                out[i * nj + j] = total * w;
            }
        }
        let out = Tensor::raw(vec![ni, nj], out);
        Ok(self.push(
            out,
            Op::MaxSim {
                a,
                b,
                a_sets,
                b_sets,
                norm,
                argmax,
            },
            &[a, b],
        ))
    }

    /// Mean over rows of `-log softmax(logits_r)[target_r]`. Entries flagged
    /// in `exclude` (row-major, same shape as `logits`) are left out of the
    /// normalizer and receive no gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        exclude: Option<&[bool]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || targets.len() != tl.rows() {
            return Err(dim(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), tl.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= tl.cols()) {
            return Err(crate::error::index("cross_entropy", format!("target {bad}")));
        }
        let mut probs = tl.data().to_vec();
        if let Some(ex) = exclude {
            if ex.len() != probs.len() {
                return Err(dim("cross_entropy", "exclusion mask shape differs from logits"));
            }
            for (p, &e) in probs.iter_mut().zip(ex) {
                if e {
                    *p = T::neg_infinity();
                }
            }
        }
        let c = tl.cols();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            if !row[t].is_finite() {
                return Err(contract("cross_entropy", format!("target logit of row {r} is excluded")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let n = T::of(targets.len() as f64);
        let out = Tensor::scalar(loss / n);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// `x · w + b` with parameter-bound weights.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a one-element `loss`, accumulating into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Param(pid) = node.op {
                let pg = store.get_mut(pid).grad.data_mut();
                for (a, b) in pg.iter_mut().zip(&g) {
                    *a += *b;
                }
                continue;
            }
            self.backprop(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        // Lazily zero-initialized gradient buffer of an input, or None if
        // the input does not need a gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let dc = Tensor::raw(out.shape().to_vec(), g.to_vec());
                if let Some(da) = buf!(*a) {
                    if *ta {
                        gemm_acc(da, vb, &dc, *tb, true);
                    } else {
                        gemm_acc(da, &dc, vb, false, !*tb);
                    }
                }
                if let Some(db) = buf!(*b) {
                    if *tb {
                        gemm_acc(db, &dc, va, true, *ta);
                    } else {
                        gemm_acc(db, va, &dc, !*ta, false);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = buf!(*a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = buf!(*b) {
                    axpy(db, g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = buf!(*a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = buf!(*b) {
                    axpy(db, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = buf!(*a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += *gi * *y;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(va) {
                        *d += *gi * *x;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(dx) = buf!(*x) {
                    axpy(dx, g, T::one());
                }
                let c = out.cols();
                if let Some(dr) = buf!(*row) {
                    for grow in g.chunks(c) {
                        axpy(dr, grow, T::one());
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = buf!(*x) {
                    axpy(dx, g, *s);
                }
            }
            Op::Gelu(x) => {
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let vx = self.value(*x).data();
                if let Some(dx) = buf!(*x) {
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(vx) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dy = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        *d += *gi * dy;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = self.value(*gain).data();
                if let Some(dg) = buf!(*gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, gi), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *acc += *gi * *h;
                        }
                    }
                }
                if let Some(db) = buf!(*bias) {
                    for grow in g.chunks(d) {
                        axpy(db, grow, T::one());
                    }
                }
                if let Some(dx) = buf!(*x) {
                    let n = T::of(d as f64);
                    let mut dh = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((o, gi), gw) in dh.iter_mut().zip(grow).zip(gv) {
                            *o = *gi * *gw;
                        }
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hrow).map(|(a, b)| *a * *b).sum();
                        let k = inv_std[r] / n;
                        for ((o, dhj), hj) in dx[r * d..(r + 1) * d].iter_mut().zip(&dh).zip(hrow) {
                            *o += k * (n * *dhj - s1 - *hj * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = buf!(*x) {
                    let c = out.cols();
                    for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for ((o, gi), y) in dx[r * c..(r + 1) * c].iter_mut().zip(grow).zip(yrow) {
                            *o += *y * (*gi - dot);
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(dx) = buf!(*x) {
                    let c = out.cols();
                    for (grow, &i) in g.chunks(c).zip(idx) {
                        axpy(&mut dx[i * c..(i + 1) * c], grow, T::one());
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = buf!(p) {
                        axpy(dp, &g[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(dp) = buf!(p) {
                        for (r, drow) in dp.chunks_mut(c).enumerate() {
                            axpy(drow, &g[r * total + col..r * total + col + c], T::one());
                        }
                    }
                    col += c;
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(dx) = buf!(*x) {
                    let c = out.cols();
                    let floor = T::of(1e-12);
                    for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                        let n = norms[r];
                        let d = &mut dx[r * c..(r + 1) * c];
                        if n > floor {
                            let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                            for ((o, gi), y) in d.iter_mut().zip(grow).zip(yrow) {
                                *o += (*gi - *y * dot) / n;
                            }
                        } else {
                            axpy(d, grow, T::one() / n);
                        }
                    }
                }
            }
            Op::Attend {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                weights,
            } => self.attend_backward(*q, *k, *v, *heads, *scale, keys, weights, g, grads),
            Op::MaxSim {
                a,
                b,
                a_sets,
                b_sets,
                norm,
                argmax,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                let nj = b_sets.len();
                let need_a = self.nodes[a.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut da = need_a.then(|| vec![T::zero(); va.numel()]);
                let mut db = need_b.then(|| vec![T::zero(); vb.numel()]);
                let mut pos = 0;
                for (i, aset) in a_sets.iter().enumerate() {
                    for j in 0..nj {
                        let coef = g[i * nj + j] * norm[i];
                        for &n in aset {
                            let m = argmax[pos];
                            pos += 1;
                            if let Some(da) = da.as_mut() {
                                axpy(&mut da[n * d..(n + 1) * d], vb.row(m), coef);
                            }
                            if let Some(db) = db.as_mut() {
                                axpy(&mut db[m * d..(m + 1) * d], va.row(n), coef);
                            }
                        }
                    }
                }
                if let Some(src) = da {
                    axpy(buf!(*a).unwrap(), &src, T::one());
                }
                if let Some(src) = db {
                    axpy(buf!(*b).unwrap(), &src, T::one());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(dl) = buf!(*logits) {
                    let c = self.value(*logits).cols();
                    let k = g[0] / T::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] += k * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = buf!(*x) {
                    let k = g[0] / T::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += k);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        keys: &KeySets,
        weights: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let vc = tv.cols();
        let dvh = vc / heads;
        let mut dq = self.nodes[q.0].needs_grad.then(|| vec![T::zero(); tq.numel()]);
        let mut dk = self.nodes[k.0].needs_grad.then(|| vec![T::zero(); tk.numel()]);
        let mut dv = self.nodes[v.0].needs_grad.then(|| vec![T::zero(); tv.numel()]);
        let mut da: Vec<T> = Vec::new();
        for r in 0..tq.rows() {
            let ks = keys.row(r);
            let base = keys.offset(r) * heads;
            for h in 0..heads {
                let w = &weights[base + h * ks.len()..base + (h + 1) * ks.len()];
                let go = &g[r * vc + h * dvh..r * vc + (h + 1) * dvh];
                da.clear();
                for (&j, &wj) in ks.iter().zip(w) {
                    let vh = &tv.row(j)[h * dvh..(h + 1) * dvh];
                    da.push(go.iter().zip(vh).map(|(a, b)| *a * *b).sum());
                    if let Some(dv) = dv.as_mut() {
                        axpy(&mut dv[j * vc + h * dvh..j * vc + (h + 1) * dvh], go, wj);
                    }
                }
                let dot: T = da.iter().zip(w).map(|(a, b)| *a * *b).sum();
                let qh = &tq.row(r)[h * dh..(h + 1) * dh];
                for ((&j, &wj), &daj) in ks.iter().zip(w).zip(da.iter()) {
                    let ds = wj * (daj - dot) * scale;
                    let kh = &tk.row(j)[h * dh..(h + 1) * dh];
                    if let Some(dq) = dq.as_mut() {
                        axpy(&mut dq[r * d + h * dh..r * d + (h + 1) * dh], kh, ds);
                    }
                    if let Some(dk) = dk.as_mut() {
                        axpy(&mut dk[j * d + h * dh..j * d + (h + 1) * dh], qh, ds);
                    }
                }
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(src) = src {
                let n = self.nodes[var.0].value.numel();
                let dst = grads[var.0].get_or_insert_with(|| vec![T::zero(); n]);
                axpy(dst, &src, T::one());
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * *s;
    }
}

/// `out += op(a) · op(b)` into a row-major buffer.
fn gemm_acc<T: Scalar>(out: &mut [T], a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    debug_assert_eq!(out.len(), m * n);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::one(),
        out,
        n as isize,
        1,
    );
}
