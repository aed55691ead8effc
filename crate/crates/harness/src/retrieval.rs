//! Text-video retrieval metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use twbert_core::alignment::{coarse_sim, fine_sim_matrix, SimKind};
use twbert_core::model::{embed_items, vtm_scores, Model, TrainItem};
use twbert_core::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    VtcZeroShot,
    VtmReranked,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::VtcZeroShot => "vtc_zero_shot",
            EvalMode::VtmReranked => "vtm_reranked",
        }
    }

    pub fn parse(s: &str) -> Option<EvalMode> {
        match s {
            "vtc_zero_shot" | "vtc" => Some(EvalMode::VtcZeroShot),
            "vtm_reranked" | "vtm" => Some(EvalMode::VtmReranked),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::TextToVideo => "text_to_video",
            Direction::VideoToText => "video_to_text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: EvalMode,
    pub direction: Direction,
    /// Percentages.
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    /// One-based rank of the true match, per query.
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_ranks(ranks: Vec<usize>, mode: EvalMode, direction: Direction) -> Self {
        let n = ranks.len().max(1) as f64;
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        RetrievalReport {
            mode,
            direction,
            r1: recall(1),
            r5: recall(5),
            r10: recall(10),
            medr: median_rank(&ranks),
            ranks,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "| mode | direction | R@1 | R@5 | R@10 | MedR |").unwrap();
        writeln!(s, "|---|---|---|---|---|---|").unwrap();
        writeln!(
            s,
            "| {} | {} | {:.1} | {:.1} | {:.1} | {} |",
            self.mode.name(),
            self.direction.name(),
            self.r1,
            self.r5,
            self.r10,
            self.medr
        )
        .unwrap();
        s
    }

    /// Summary row followed by `query,rank` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,direction,r1,r5,r10,medr\n");
        writeln!(
            s,
            "{},{},{},{},{},{}",
            self.mode.name(),
            self.direction.name(),
            self.r1,
            self.r5,
            self.r10,
            self.medr
        )
        .unwrap();
        s.push_str("query,rank\n");
        for (q, r) in self.ranks.iter().enumerate() {
            writeln!(s, "{q},{r}").unwrap();
        }
        s
    }
}

/// Median of the ranks; an even count averages the two middle values.
pub fn median_rank(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return f64::NAN;
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    }
}

/// Rank of the true match for each query row. `scores[q][c]`, truth at
/// `c == q`. Ties count against the query.
pub fn ranks_from_scores(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .map(|(q, row)| {
            let truth = row[q];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(c, &s)| c != q && !(s < truth))
                .count()
        })
        .collect()
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.first().map_or(0, Vec::len);
    (0..n).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// VTC score `[video][text]`: coarse similarity, plus the mean of the two
/// fine-grained scores when the model uses fine-grained alignment.
pub fn vtc_scores<T: Scalar>(model: &Model<T>, items: &[TrainItem<T>]) -> anyhow::Result<Vec<Vec<f64>>> {
    let e = embed_items(&model.store, &model.params, items, 32)?;
    let coarse = coarse_sim(&e.video_cls, &e.text_cls, 1.0)?;
    let n = items.len();
    let mut out: Vec<Vec<f64>> = (0..n)
        .map(|i| coarse.scores.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    if model.config.fine_grained {
        let norm = model.config.fine_normalize;
        let sv = fine_sim_matrix(&e.video_tokens, &e.text_tokens, SimKind::FineV2t, 1.0, norm)?;
        let st = fine_sim_matrix(&e.text_tokens, &e.video_tokens, SimKind::FineT2v, 1.0, norm)?;
        for (i, row) in out.iter_mut().enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s += 0.5 * (sv.scores.row(i)[j].as_f64() + st.scores.row(j)[i].as_f64());
            }
        }
    }
    Ok(out)
}

/// Candidates of each query ordered by score, best first; ties keep index
/// order.
fn order_by_score(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

/// Reranks the top `k` VTC candidates of every query by VTM margin.
/// `pair_score(query, candidate)` batches are requested once for all queries.
fn rerank(
    vtc: &[Vec<f64>],
    k: usize,
    pair_scores: impl FnOnce(&[(usize, usize)]) -> anyhow::Result<Vec<f64>>,
) -> anyhow::Result<Vec<usize>> {
    let n = vtc.len();
    let k = k.min(n).max(1);
    let tops: Vec<Vec<usize>> = vtc.iter().map(|r| order_by_score(r)[..k].to_vec()).collect();
    let pairs: Vec<(usize, usize)> = tops
        .iter()
        .enumerate()
        .flat_map(|(q, t)| t.iter().map(move |&c| (q, c)))
        .collect();
    let vtm = pair_scores(&pairs)?;
    let base = ranks_from_scores(vtc);
    Ok((0..n)
        .map(|q| {
            let s = &vtm[q * k..(q + 1) * k];
            match tops[q].iter().position(|&c| c == q) {
                Some(p) => 1 + (0..k).filter(|&i| i != p && !(s[i] < s[p])).count(),
                None => base[q],
            }
        })
        .collect())
}

fn vtm_pairs<T: Scalar>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    pairs: &[(usize, usize)],
) -> anyhow::Result<Vec<f64>> {
    const CHUNK: usize = 32;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunks: Vec<&[(usize, usize)]> = pairs.chunks(CHUNK).collect();
    let per = chunks.len().div_ceil(threads).max(1);
    let results: Vec<anyhow::Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                s.spawn(move || -> anyhow::Result<Vec<f64>> {
                    let mut out = Vec::new();
                    for c in group {
                        let refs: Vec<_> = c
                            .iter()
                            .map(|&(v, t)| (&items[v].video, items[t].ids.as_slice()))
                            .collect();
                        out.extend(vtm_scores(model, &refs, CHUNK)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread")).collect()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Text-to-video and video-to-text reports for `items`, the i-th caption
/// matching the i-th video.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    items: &[TrainItem<T>],
    mode: EvalMode,
    rerank_k: usize,
) -> anyhow::Result<[RetrievalReport; 2]> {
    if items.is_empty() {
        anyhow::bail!("retrieval needs at least one pair");
    }
    let v2t = vtc_scores(model, items)?;
    let t2v = transpose(&v2t);
    let (rt, rv) = match mode {
        EvalMode::VtcZeroShot => (ranks_from_scores(&t2v), ranks_from_scores(&v2t)),
        EvalMode::VtmReranked => {
            // queries are texts: pair (text q, video c)
            let rt = rerank(&t2v, rerank_k, |p| {
                let swapped: Vec<_> = p.iter().map(|&(q, c)| (c, q)).collect();
                vtm_pairs(model, items, &swapped)
            })?;
            let rv = rerank(&v2t, rerank_k, |p| vtm_pairs(model, items, p))?;
            (rt, rv)
        }
    };
    Ok([
        RetrievalReport::from_ranks(rt, mode, Direction::TextToVideo),
        RetrievalReport::from_ranks(rv, mode, Direction::VideoToText),
    ])
}
