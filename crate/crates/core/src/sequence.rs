//! Frame-level ground truth and the structures derived from it: segments,
//! boundary targets, boundary/non-boundary region partitions and the
//! probability map a segmentation model emits.
//!
//! Segments are half-open `[start, end)`. A transition is marked on the first
//! frame of the new segment; frame 0 is never a transition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("label sequence is empty")]
    Empty,
    #[error("num_classes must be at least 1")]
    NoClasses,
    #[error("label {label} at frame {frame} is outside [0, {num_classes})")]
    LabelOutOfRange {
        frame: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("segments do not tile [0, T): {0}")]
    BadSegments(String),
    #[error("probability map shape mismatch: class rows cover {class_frames} frames, boundary row {boundary_frames}")]
    ShapeMismatch {
        class_frames: usize,
        boundary_frames: usize,
    },
}

/// Per-frame ground-truth class indices for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self, SequenceError> {
        if num_classes == 0 {
            return Err(SequenceError::NoClasses);
        }
        if labels.is_empty() {
            return Err(SequenceError::Empty);
        }
        if let Some((frame, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(SequenceError::LabelOutOfRange {
                frame,
                label,
                num_classes,
            });
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    /// Renders segments back to per-frame labels. The segments must tile
    /// `[0, T)` in order.
    pub fn from_segments(segments: &[Segment], num_classes: usize) -> Result<Self, SequenceError> {
        let mut labels = Vec::new();
        for seg in segments {
            if seg.start != labels.len() || seg.end <= seg.start {
                return Err(SequenceError::BadSegments(format!(
                    "segment {seg:?} does not continue at frame {}",
                    labels.len()
                )));
            }
            labels.extend(std::iter::repeat_n(seg.class_id, seg.len()));
        }
        Self::new(labels, num_classes)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false: a valid sequence has at least one frame.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn segments(&self) -> Vec<Segment> {
        extract_segments(self)
    }
}

/// A maximal run of frames sharing one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(class_id: usize, start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self {
            class_id,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Splits a sequence into maximal constant-label runs, in temporal order.
pub fn extract_segments(seq: &LabelSequence) -> Vec<Segment> {
    let labels = seq.labels();
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            out.push(Segment::new(labels[start], start, t));
            start = t;
        }
    }
    out
}

/// Binary mask with a one at every frame whose label differs from the
/// previous frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryTarget {
    mask: Vec<u8>,
}

impl BoundaryTarget {
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(t, _)| t)
    }

    pub fn num_transitions(&self) -> usize {
        self.mask.iter().filter(|&&b| b == 1).count()
    }
}

pub fn boundary_targets(seq: &LabelSequence) -> BoundaryTarget {
    let labels = seq.labels();
    let mask = (0..labels.len())
        .map(|t| u8::from(t > 0 && labels[t] != labels[t - 1]))
        .collect();
    BoundaryTarget { mask }
}

/// Partition of the frames into a boundary region (within `window` frames of
/// a transition) and its complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    is_boundary_region: Vec<bool>,
    window: usize,
}

impl RegionMask {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn boundary(&self) -> &[bool] {
        &self.is_boundary_region
    }

    pub fn non_boundary(&self) -> Vec<bool> {
        self.is_boundary_region.iter().map(|b| !b).collect()
    }

    pub fn boundary_count(&self) -> usize {
        self.is_boundary_region.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.is_boundary_region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_boundary_region.is_empty()
    }

    pub fn boundary_frames(&self) -> Vec<usize> {
        self.is_boundary_region
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(t, _)| t)
            .collect()
    }
}

pub fn region_partition(seq: &LabelSequence, window: usize) -> RegionMask {
    let n = seq.len();
    let mut is_boundary_region = vec![false; n];
    for tau in boundary_targets(seq).transitions() {
        let lo = tau.saturating_sub(window);
        let hi = (tau + window).min(n - 1);
        is_boundary_region[lo..=hi]
            .iter_mut()
            .for_each(|b| *b = true);
    }
    RegionMask {
        is_boundary_region,
        window,
    }
}

/// Intersection-over-union of two half-open frame intervals.
pub fn segment_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-frame class probabilities (C × T, columns sum to one) plus the
/// class-agnostic boundary probability of each frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub class_probs: Matrix,
    pub boundary_probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(class_probs: Matrix, boundary_probs: Vec<f64>) -> Result<Self, SequenceError> {
        if class_probs.cols() != boundary_probs.len() {
            return Err(SequenceError::ShapeMismatch {
                class_frames: class_probs.cols(),
                boundary_frames: boundary_probs.len(),
            });
        }
        Ok(Self {
            class_probs,
            boundary_probs,
        })
    }

    /// Builds the map from raw (C+1) × T logits: column softmax over the
    /// first C rows, sigmoid on the last row.
    pub fn from_logits(logits: &Matrix) -> Self {
        let c = logits.rows() - 1;
        let t_len = logits.cols();
        let mut class_probs = Matrix::zeros(c, t_len);
        for t in 0..t_len {
            let max = (0..c)
                .map(|k| logits.get(k, t))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits.get(k, t) - max).exp();
                class_probs.set(k, t, e);
                z += e;
            }
            for k in 0..c {
                class_probs.set(k, t, class_probs.get(k, t) / z);
            }
        }
        let boundary_probs = logits.row(c).iter().map(|&x| sigmoid(x)).collect();
        Self {
            class_probs,
            boundary_probs,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.class_probs.cols()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
