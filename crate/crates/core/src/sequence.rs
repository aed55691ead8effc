//! Token sequences and their batched layouts.
//!
//! A video sequence is `[v_cls, patches of frame 0, patches of frame 1, …]`
//! with `N_V = T·P + 1`; a text sequence is `[x_cls, w_1, …]` with
//! `N_X = words + 1`. Batches stack sequences row-wise inside one graph
//! value; the layout types here map sample-local positions to those rows.

use serde::{Deserialize, Serialize};

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Video,
    Text,
}

/// Axis coordinate of a token, used to map attention matrices back to the
/// inputs they came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coord {
    VideoCls,
    Patch { frame: usize, cell: usize },
    TextCls,
    Word(usize),
    /// Trajectory token of one frame (keys of the second T2W step).
    Frame(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Cls,
    Patch,
    Word,
    Mask,
    Pad,
}

impl TokenKind {
    /// Tokens that carry local content (patches and real words).
    pub fn is_content(self) -> bool {
        matches!(self, TokenKind::Patch | TokenKind::Word)
    }

    /// Tokens that may serve as attention keys.
    pub fn is_attendable(self) -> bool {
        self != TokenKind::Pad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `[N, d]`, row 0 is [CLS].
    pub tokens: Tensor<T>,
    pub modality: Modality,
    pub kinds: Vec<TokenKind>,
    pub coords: Vec<Coord>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// A video sequence over `frames × patches` patch tokens.
    pub fn video(tokens: Tensor<T>, frames: usize, patches: usize) -> Self {
        let layout = VideoLayout { frames, patches };
        debug_assert_eq!(tokens.rows(), layout.len());
        TokenSequence {
            tokens,
            modality: Modality::Video,
            kinds: layout.kinds(),
            coords: layout.coords(),
        }
    }

    /// A text sequence with the given token kinds (index 0 must be Cls).
    pub fn text(tokens: Tensor<T>, kinds: Vec<TokenKind>) -> Self {
        debug_assert_eq!(tokens.rows(), kinds.len());
        let coords = text_coords(kinds.len());
        TokenSequence {
            tokens,
            modality: Modality::Text,
            kinds,
            coords,
        }
    }

    /// Patch rows of frame `t` (video only).
    pub fn frame(&self, t: usize, patches: usize) -> Tensor<T> {
        let idx: Vec<usize> = (0..patches).map(|p| 1 + t * patches + p).collect();
        self.tokens.gather_rows(&idx)
    }
}

pub(crate) fn text_coords(n: usize) -> Vec<Coord> {
    (0..n)
        .map(|i| if i == 0 { Coord::TextCls } else { Coord::Word(i - 1) })
        .collect()
}

/// Geometry shared by every video of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLayout {
    pub frames: usize,
    pub patches: usize,
}

impl VideoLayout {
    /// `N_V = T·P + 1`.
    pub fn len(&self) -> usize {
        self.frames * self.patches + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn patch(&self, t: usize, p: usize) -> usize {
        1 + t * self.patches + p
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        let mut k = vec![TokenKind::Cls];
        k.extend(std::iter::repeat_n(TokenKind::Patch, self.frames * self.patches));
        k
    }

    pub fn coords(&self) -> Vec<Coord> {
        let mut c = vec![Coord::VideoCls];
        for frame in 0..self.frames {
            for cell in 0..self.patches {
                c.push(Coord::Patch { frame, cell });
            }
        }
        c
    }
}

/// A batch of videos stacked row-wise: sample `b` occupies rows
/// `b·N_V .. (b+1)·N_V`.
#[derive(Debug, Clone, Copy)]
pub struct VideoBatch {
    pub var: Var,
    pub count: usize,
    pub layout: VideoLayout,
}

impl VideoBatch {
    pub fn row(&self, b: usize, local: usize) -> usize {
        b * self.layout.len() + local
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.count).map(|b| self.row(b, 0)).collect()
    }

    pub fn patch_row(&self, b: usize, t: usize, p: usize) -> usize {
        self.row(b, self.layout.patch(t, p))
    }
}

/// A batch of variable-length texts stacked row-wise.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub var: Var,
    pub starts: Vec<usize>,
    pub kinds: Vec<Vec<TokenKind>>,
}

impl TextBatch {
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    pub fn row(&self, b: usize, local: usize) -> usize {
        self.starts[b] + local
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.kinds[b].len()
    }

    pub fn total_rows(&self) -> usize {
        self.kinds.iter().map(Vec::len).sum()
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        self.starts.clone()
    }

    /// Rows of sample `b` usable as attention keys (everything but padding).
    pub fn key_rows(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        let s = self.starts[b];
        self.kinds[b]
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_attendable())
            .map(move |(i, _)| s + i)
    }

    /// Starts for consecutive sequences of the given lengths.
    pub fn starts_for(kinds: &[Vec<TokenKind>]) -> Vec<usize> {
        let mut starts = Vec::with_capacity(kinds.len());
        let mut acc = 0;
        for k in kinds {
            starts.push(acc);
            acc += k.len();
        }
        starts
    }
}
