//! Attention heatmap export for one caption word.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use twbert_core::attention::{AttentionKind, Variant};
use twbert_core::data::{object_trajectory_score, Sample};
use twbert_core::model::{cross_attention_records, Model};
use twbert_core::{Scalar, Tensor};

pub const EXPORT_FILE: &str = "attention.json";

/// Step-1 weights keep the head axis and lay the patches out as the grid,
/// row-major: `step1[t]` has shape `[heads, grid, grid]`. `step2` has shape
/// `[heads, frames]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub sample: u64,
    pub caption: String,
    pub word: usize,
    pub token: String,
    pub layer: usize,
    pub heads: usize,
    pub grid: usize,
    pub frames: usize,
    pub step1_shape: [usize; 3],
    pub step1: Vec<Vec<f64>>,
    pub step2_shape: [usize; 2],
    pub step2: Vec<f64>,
}

impl AttentionExport {
    /// `[heads, P]` weights of frame `t`.
    pub fn frame(&self, t: usize) -> Tensor<f64> {
        Tensor::new(vec![self.heads, self.grid * self.grid], self.step1[t].clone())
            .expect("export shapes are consistent")
    }

    /// Head-averaged frame grid as an ASCII graymap, brightest cell at 255.
    pub fn pgm(&self, t: usize) -> String {
        let p = self.grid * self.grid;
        let mean: Vec<f64> = (0..p)
            .map(|c| (0..self.heads).map(|h| self.step1[t][h * p + c]).sum::<f64>() / self.heads as f64)
            .collect();
        let max = mean.iter().copied().fold(0.0, f64::max);
        let mut s = format!("P2\n# frame {t}\n{} {}\n255\n", self.grid, self.grid);
        for y in 0..self.grid {
            let row: Vec<String> = (0..self.grid)
                .map(|x| {
                    let v = if max > 0.0 { mean[y * self.grid + x] / max } else { 0.0 };
                    ((v * 255.0).round() as u8).to_string()
                })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = vec![dir.join(EXPORT_FILE)];
        std::fs::write(&paths[0], serde_json::to_string_pretty(self)?)?;
        for t in 0..self.frames {
            let p = dir.join(format!("frame_{t}.pgm"));
            std::fs::write(&p, self.pgm(t))?;
            paths.push(p);
        }
        Ok(paths)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let e: AttentionExport = serde_json::from_str(&text)?;
        let p = e.grid * e.grid;
        if e.step1.len() != e.frames
            || e.step1.iter().any(|f| f.len() != e.heads * p)
            || e.step2.len() != e.heads * e.frames
        {
            bail!("attention export values do not match the declared shapes");
        }
        Ok(e)
    }
}

/// Step-1 weights of caption word `word` (zero-based, `[CLS]` excluded) in
/// cross layer `layer`, one `[h, P]` tensor per frame, and the `[h, T]`
/// step-2 weights.
pub fn word_attention<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    word: usize,
    layer: usize,
) -> anyhow::Result<(Vec<Tensor<T>>, Tensor<T>)> {
    if model.config.variant != Variant::T2w {
        bail!("the base variant has no trajectory attention to export");
    }
    let words = sample.caption.ids.len();
    if word >= words {
        bail!("word index {word} out of range for a {words}-word caption");
    }
    if layer >= model.config.cross_layers {
        bail!("layer {layer} out of range for {} cross layers", model.config.cross_layers);
    }
    let video = sample.video.input::<T>();
    let recs = cross_attention_records(model, &video, &sample.caption.ids)?;
    let per_layer = recs.len() / model.config.cross_layers;
    let recs = &recs[layer * per_layer..(layer + 1) * per_layer];
    let q = word + 1;
    let mut frames = Vec::new();
    let mut step2 = None;
    for r in recs {
        match r.kind {
            AttentionKind::T2wStep1 { .. } => {
                let h = r.heads();
                let data = (0..h).flat_map(|head| r.row(head, q).to_vec()).collect();
                frames.push(Tensor::new(vec![h, r.n_keys()], data)?);
            }
            AttentionKind::T2wStep2 => {
                let h = r.heads();
                let data = (0..h).flat_map(|head| r.row(head, q).to_vec()).collect();
                step2 = Some(Tensor::new(vec![h, r.n_keys()], data)?);
            }
            _ => {}
        }
    }
    let step2 = step2.context("no step-2 record")?;
    Ok((frames, step2))
}

pub fn export_attention<T: Scalar>(
    model: &Model<T>,
    sample: &Sample,
    word: usize,
    layer: usize,
) -> anyhow::Result<AttentionExport> {
    let (frames, step2) = word_attention(model, sample, word, layer)?;
    let heads = step2.rows();
    let grid = sample.video.grid;
    let tokens: Vec<&str> = sample.caption.text.split(' ').collect();
    Ok(AttentionExport {
        sample: sample.id,
        caption: sample.caption.text.clone(),
        word,
        token: tokens[word].to_string(),
        layer,
        heads,
        grid,
        frames: frames.len(),
        step1_shape: [heads, grid, grid],
        step1: frames.iter().map(|f| f.data().iter().map(|v| v.as_f64()).collect()).collect(),
        step2_shape: [heads, frames.len()],
        step2: step2.data().iter().map(|v| v.as_f64()).collect(),
    })
}

/// Attention mass the shape word of the first object puts on that object's
/// cells, first cross layer.
pub fn shape_word_score<T: Scalar>(model: &Model<T>, sample: &Sample) -> anyhow::Result<f64> {
    let (frames, _) = word_attention(model, sample, 1, 0)?;
    Ok(object_trajectory_score(&frames, &sample.video, 0)?)
}

/// Mean of [`shape_word_score`] over `samples`.
pub fn mean_shape_word_score<T: Scalar>(model: &Model<T>, samples: &[Sample]) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += shape_word_score(model, s)?;
    }
    Ok(total / samples.len().max(1) as f64)
}
