//! Procedural grid videos with captions and ground-truth trajectories.
//!
//! A scene holds one or two objects on a `G×G` grid, each with a shape, a
//! color, a start cell and a velocity in `{-1, 0, 1}²` cells per frame.
//! Every cell of every frame gets a raw feature vector
//! `one-hot(shape) ⊕ one-hot(color)` (zeros for empty cells) plus
//! Gaussian noise. Cells are indexed `y·G + x` with `y = 0` the top row.
//!
//! Captions read `{color} {shape} {verb}` per object, objects ordered by
//! (color, shape). In contrast mode every scene is generated together with
//! its time-reversed twin: the same frames in reverse order, so the two
//! videos contain exactly the same frames and their captions differ only in
//! the motion verbs.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoders::{VideoInput, Vocab};
use crate::error::{contract, index, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 6] = ["square", "circle", "triangle", "cross", "diamond", "star"];
/// Motion verbs with their velocity `(dx, dy)`.
pub const VERBS: [(&str, (i32, i32)); 9] = [
    ("moves-left", (-1, 0)),
    ("moves-right", (1, 0)),
    ("moves-up", (0, -1)),
    ("moves-down", (0, 1)),
    ("moves-up-left", (-1, -1)),
    ("moves-up-right", (1, -1)),
    ("moves-down-left", (-1, 1)),
    ("moves-down-right", (1, 1)),
    ("stays", (0, 0)),
];

pub fn verb_for(velocity: (i32, i32)) -> Result<&'static str> {
    VERBS
        .iter()
        .find(|(_, v)| *v == velocity)
        .map(|(w, _)| *w)
        .ok_or_else(|| contract("verb_for", format!("no verb for velocity {velocity:?}")))
}

/// Vocabulary of every caption word, after the reserved tokens.
pub fn caption_vocab() -> Vocab {
    let words: Vec<&str> = COLORS
        .iter()
        .chain(SHAPES.iter())
        .copied()
        .chain(VERBS.iter().map(|(w, _)| *w))
        .collect();
    Vocab::new(&words).expect("caption words are distinct")
}

pub fn feature_width() -> usize {
    SHAPES.len() + COLORS.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: usize,
    pub shape: usize,
    /// `(x, y)`.
    pub start: (i32, i32),
    pub velocity: (i32, i32),
}

impl ObjectSpec {
    pub fn cell_at(&self, t: usize) -> (i32, i32) {
        (
            self.start.0 + self.velocity.0 * t as i32,
            self.start.1 + self.velocity.1 * t as i32,
        )
    }

    fn reversed(&self, frames: usize) -> Self {
        ObjectSpec {
            start: self.cell_at(frames - 1),
            velocity: (-self.velocity.0, -self.velocity.1),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub grid: usize,
    pub frames: usize,
    pub noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 2 {
            return Err(contract("scene", "scenes hold one or two objects"));
        }
        let g = self.grid as i32;
        let mut seen = HashSet::new();
        for t in 0..self.frames {
            let mut occupied = HashSet::new();
            for o in &self.objects {
                let (x, y) = o.cell_at(t);
                if x < 0 || y < 0 || x >= g || y >= g {
                    return Err(contract("scene", format!("object leaves the grid at frame {t}")));
                }
                if !occupied.insert((x, y)) {
                    return Err(contract("scene", format!("objects collide at frame {t}")));
                }
            }
        }
        for o in &self.objects {
            if !seen.insert((o.color, o.shape)) {
                return Err(contract("scene", "repeated color and shape"));
            }
        }
        Ok(())
    }

    pub fn caption(&self) -> String {
        self.objects
            .iter()
            .map(|o| {
                format!(
                    "{} {} {}",
                    COLORS[o.color],
                    SHAPES[o.shape],
                    verb_for(o.velocity).expect("velocities stay in the verb table")
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Cell index of every object at every frame, `[object][frame]`.
    pub fn trajectories(&self) -> Vec<Vec<usize>> {
        self.objects
            .iter()
            .map(|o| {
                (0..self.frames)
                    .map(|t| {
                        let (x, y) = o.cell_at(t);
                        y as usize * self.grid + x as usize
                    })
                    .collect()
            })
            .collect()
    }
}

/// What a caption says about one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObjectDesc {
    pub color: usize,
    pub shape: usize,
    pub velocity: (i32, i32),
}

/// Inverse of [`SceneSpec::caption`] up to start cells.
pub fn parse_caption(caption: &str) -> Result<Vec<ObjectDesc>> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.is_empty() || words.len() % 3 != 0 {
        return Err(Error::Parse(format!("caption `{caption}` is not color-shape-verb triples")));
    }
    let find = |list: &[&str], w: &str| {
        list.iter()
            .position(|x| *x == w)
            .ok_or_else(|| Error::UnknownToken(w.to_string()))
    };
    words
        .chunks(3)
        .map(|c| {
            let velocity = VERBS
                .iter()
                .find(|(v, _)| *v == c[2])
                .map(|(_, vel)| *vel)
                .ok_or_else(|| Error::UnknownToken(c[2].to_string()))?;
            Ok(ObjectDesc {
                color: find(&COLORS, c[0])?,
                shape: find(&SHAPES, c[1])?,
                velocity,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// `[T, G², f]`.
    pub features: Tensor<f64>,
    /// `[object][frame]` cell indices.
    pub truth: Vec<Vec<usize>>,
    pub grid: usize,
}

impl VideoSample {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn input<T: Scalar>(&self) -> VideoInput<T> {
        VideoInput {
            features: self.features.cast(),
            grid: self.grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSample {
    pub text: String,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scene: SceneSpec,
    pub video: VideoSample,
    pub caption: CaptionSample,
    /// Id of the time-reversed twin in contrast mode.
    pub twin: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub grid: usize,
    pub frames: usize,
    pub noise: f64,
    pub contrast: bool,
    /// Probability that a scene holds a second object.
    pub two_object_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train: 64,
            val: 0,
            test: 64,
            seed: 0,
            grid: 4,
            frames: 4,
            noise: 0.1,
            contrast: false,
            two_object_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Longest caption in tokens.
    pub fn max_caption_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|s| s.caption.ids.len())
            .max()
            .unwrap_or(0)
    }
}

fn valid_starts(grid: usize, frames: usize, v: (i32, i32)) -> Vec<(i32, i32)> {
    let g = grid as i32;
    let span = (frames as i32 - 1).max(0);
    let mut out = Vec::new();
    for y in 0..g {
        for x in 0..g {
            let (ex, ey) = (x + v.0 * span, y + v.1 * span);
            if ex >= 0 && ey >= 0 && ex < g && ey < g {
                out.push((x, y));
            }
        }
    }
    out
}

fn render(scene: &SceneSpec, noise_rng: &mut Rng) -> VideoSample {
    let p = scene.grid * scene.grid;
    let f = feature_width();
    let mut data = vec![0.0; scene.frames * p * f];
    let truth = scene.trajectories();
    for (o, path) in scene.objects.iter().zip(&truth) {
        for (t, &cell) in path.iter().enumerate() {
            let base = (t * p + cell) * f;
            data[base + o.shape] = 1.0;
            data[base + SHAPES.len() + o.color] = 1.0;
        }
    }
    if scene.noise > 0.0 {
        for v in &mut data {
            *v += scene.noise * noise_rng.normal();
        }
    }
    VideoSample {
        features: Tensor::raw(vec![scene.frames, p, f], data),
        truth,
        grid: scene.grid,
    }
}

fn reverse_frames(v: &VideoSample) -> VideoSample {
    let s = v.features.shape();
    let block = s[1] * s[2];
    let mut data = Vec::with_capacity(v.features.numel());
    for t in (0..s[0]).rev() {
        data.extend_from_slice(&v.features.data()[t * block..(t + 1) * block]);
    }
    VideoSample {
        features: Tensor::raw(s.to_vec(), data),
        truth: v
            .truth
            .iter()
            .map(|path| path.iter().rev().copied().collect())
            .collect(),
        grid: v.grid,
    }
}

fn draw_scene(cfg: &CorpusConfig, rng: &mut Rng) -> Option<SceneSpec> {
    let n = if rng.bernoulli(cfg.two_object_prob) { 2 } else { 1 };
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let velocity = VERBS[rng.below(VERBS.len())].1;
        let starts = valid_starts(cfg.grid, cfg.frames, velocity);
        if starts.is_empty() {
            return None;
        }
        objects.push(ObjectSpec {
            color: rng.below(COLORS.len()),
            shape: rng.below(SHAPES.len()),
            start: starts[rng.below(starts.len())],
            velocity,
        });
    }
    objects.sort_by_key(|o| (o.color, o.shape));
    let scene = SceneSpec {
        objects,
        grid: cfg.grid,
        frames: cfg.frames,
        noise: cfg.noise,
    };
    if scene.validate().is_err() {
        return None;
    }
    if cfg.contrast && scene.objects.iter().all(|o| o.velocity == (0, 0)) {
        return None;
    }
    Some(scene)
}

/// Deterministic corpus for `cfg`. Captions are unique across the whole
/// corpus, so the splits never share a scene description.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.grid == 0 || cfg.frames == 0 {
        return Err(contract("generate_corpus", "grid and frame count must be positive"));
    }
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(contract("generate_corpus", "noise level must be finite and nonnegative"));
    }
    if !(0.0..=1.0).contains(&cfg.two_object_prob) {
        return Err(contract("generate_corpus", "two_object_prob must lie in [0, 1]"));
    }
    let moving_possible = cfg.grid >= cfg.frames;
    if cfg.contrast && !moving_possible {
        return Err(contract(
            "generate_corpus",
            format!(
                "contrast mode needs moving objects, impossible on a {}x{} grid over {} frames",
                cfg.grid, cfg.grid, cfg.frames
            ),
        ));
    }
    let sizes = [cfg.train, cfg.val, cfg.test];
    if cfg.contrast && sizes.iter().any(|n| n % 2 != 0) {
        return Err(contract("generate_corpus", "contrast mode needs even split sizes"));
    }
    let total: usize = sizes.iter().sum();
    let vocab = caption_vocab();
    let mut rng = Rng::new(cfg.seed).derive_named("scenes");
    let noise_root = Rng::new(cfg.seed).derive_named("noise");
    let mut captions = HashSet::new();
    let mut samples: Vec<Sample> = Vec::with_capacity(total);
    let budget = 1000 * total.max(1);
    let mut attempts = 0;
    while samples.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(contract(
                "generate_corpus",
                format!("could only place {} of {total} distinct scenes", samples.len()),
            ));
        }
        let Some(scene) = draw_scene(cfg, &mut rng) else { continue };
        let caption = scene.caption();
        if captions.contains(&caption) {
            continue;
        }
        let id = samples.len() as u64;
        let video = render(&scene, &mut noise_root.derive(id));
        if cfg.contrast {
            let twin_scene = SceneSpec {
                objects: scene.objects.iter().map(|o| o.reversed(cfg.frames)).collect(),
                ..scene.clone()
            };
            let twin_caption = twin_scene.caption();
            if captions.contains(&twin_caption) || twin_caption == caption {
                continue;
            }
            let twin_video = reverse_frames(&video);
            captions.insert(caption.clone());
            captions.insert(twin_caption.clone());
            samples.push(make_sample(&vocab, id, scene, video, caption, Some(id + 1))?);
            samples.push(make_sample(
                &vocab,
                id + 1,
                twin_scene,
                twin_video,
                twin_caption,
                Some(id),
            )?);
        } else {
            captions.insert(caption.clone());
            samples.push(make_sample(&vocab, id, scene, video, caption, None)?);
        }
    }
    let test = samples.split_off(cfg.train + cfg.val);
    let val = samples.split_off(cfg.train);
    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        train: samples,
        val,
        test,
    })
}

fn make_sample(
    vocab: &Vocab,
    id: u64,
    scene: SceneSpec,
    video: VideoSample,
    text: String,
    twin: Option<u64>,
) -> Result<Sample> {
    let ids = vocab.encode(&text)?;
    Ok(Sample {
        id,
        scene,
        video,
        caption: CaptionSample { text, ids },
        twin,
    })
}

/// Ground-truth cells of every object at frame `t`.
pub fn trajectory_mask(sample: &VideoSample, t: usize) -> Result<BTreeSet<usize>> {
    if t >= sample.frames() {
        return Err(index(
            "trajectory_mask",
            format!("frame {t} of {}", sample.frames()),
        ));
    }
    Ok(sample.truth.iter().map(|path| path[t]).collect())
}

/// Mean over frames and heads of the attention mass a word places on the
/// ground-truth cells. `frame_weights[t]` is `[h, P]`: the step-1 weights
/// of the word over the patches of frame `t`.
pub fn attention_trajectory_score<T: Scalar>(
    frame_weights: &[Tensor<T>],
    sample: &VideoSample,
) -> Result<f64> {
    mass_on(frame_weights, sample, |t| trajectory_mask(sample, t))
}

/// Like [`attention_trajectory_score`] but only the cells of one object
/// count.
pub fn object_trajectory_score<T: Scalar>(
    frame_weights: &[Tensor<T>],
    sample: &VideoSample,
    object: usize,
) -> Result<f64> {
    let path = sample.truth.get(object).ok_or_else(|| {
        index(
            "object_trajectory_score",
            format!("object {object} of {}", sample.truth.len()),
        )
    })?;
    mass_on(frame_weights, sample, |t| {
        trajectory_mask(sample, t)?;
        Ok(BTreeSet::from([path[t]]))
    })
}

fn mass_on<T: Scalar>(
    frame_weights: &[Tensor<T>],
    sample: &VideoSample,
    mask_at: impl Fn(usize) -> Result<BTreeSet<usize>>,
) -> Result<f64> {
    if frame_weights.len() != sample.frames() {
        return Err(contract(
            "attention_trajectory_score",
            format!("{} frame records for {} frames", frame_weights.len(), sample.frames()),
        ));
    }
    let mut total = 0.0;
    for (t, w) in frame_weights.iter().enumerate() {
        let mask = mask_at(t)?;
        if w.cols() != sample.grid * sample.grid {
            return Err(contract(
                "attention_trajectory_score",
                format!("frame {t} weights over {} cells", w.cols()),
            ));
        }
        let heads = w.rows();
        let mut mass = 0.0;
        for h in 0..heads {
            mass += mask.iter().map(|&c| w.row(h)[c].as_f64()).sum::<f64>();
        }
        total += mass / heads as f64;
    }
    Ok(total / frame_weights.len() as f64)
}

#[derive(Serialize)]
struct JsonObject<'a> {
    color: &'a str,
    shape: &'a str,
    start: [i32; 2],
    velocity: [i32; 2],
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    id: u64,
    split: &'a str,
    caption: &'a str,
    caption_ids: &'a [usize],
    twin: Option<u64>,
    grid: usize,
    frames: usize,
    objects: Vec<JsonObject<'a>>,
    /// `[object][frame]` cell indices.
    truth: &'a [Vec<usize>],
    /// `[frame][cell][feature]`.
    features: Vec<Vec<&'a [f64]>>,
}

/// Writes one JSON record per line for every sample of `split`.
pub fn write_jsonl<W: Write>(corpus: &Corpus, split: Split, out: &mut W) -> std::io::Result<()> {
    for s in corpus.split(split) {
        let shape = s.video.features.shape();
        let (p, f) = (shape[1], shape[2]);
        let data = s.video.features.data();
        let features = (0..shape[0])
            .map(|t| (0..p).map(|c| &data[(t * p + c) * f..(t * p + c + 1) * f]).collect())
            .collect();
        let rec = JsonRecord {
            id: s.id,
            split: split.name(),
            caption: &s.caption.text,
            caption_ids: &s.caption.ids,
            twin: s.twin,
            grid: s.scene.grid,
            frames: s.scene.frames,
            objects: s
                .scene
                .objects
                .iter()
                .map(|o| JsonObject {
                    color: COLORS[o.color],
                    shape: SHAPES[o.shape],
                    start: [o.start.0, o.start.1],
                    velocity: [o.velocity.0, o.velocity.1],
                })
                .collect(),
            truth: &s.video.truth,
            features,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
