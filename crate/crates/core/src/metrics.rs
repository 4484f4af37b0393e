//! Segmentation metrics: frame-wise accuracy, segmental edit score and
//! segmental F1 at IoU thresholds 0.10 / 0.25 / 0.50.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequence::{extract_segments, segment_iou, LabelSequence};

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} frames, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("IoU threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("video `{id}`: {source}")]
    Video {
        id: String,
        #[source]
        source: Box<MetricsError>,
    },
}

fn check_lengths(pred: &LabelSequence, gt: &LabelSequence) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Fraction of frames labelled correctly, in percent.
pub fn frame_accuracy(pred: &LabelSequence, gt: &LabelSequence) -> Result<f64, MetricsError> {
    check_lengths(pred, gt)?;
    let hits = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Unit-cost Levenshtein distance, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn segment_classes(seq: &LabelSequence) -> Vec<usize> {
    extract_segments(seq).iter().map(|s| s.class_id).collect()
}

/// Levenshtein distance between segment-class strings and the normalizer
/// `max(|pred|, |gt|)`.
pub fn edit_distance_parts(pred: &LabelSequence, gt: &LabelSequence) -> (usize, usize) {
    let (p, g) = (segment_classes(pred), segment_classes(gt));
    (levenshtein(&p, &g), p.len().max(g.len()))
}

/// `100 · (1 − D / max(|pred segments|, |gt segments|))`. Sequences are
/// non-empty by construction, so the normalizer is at least 1.
pub fn edit_score(pred: &LabelSequence, gt: &LabelSequence) -> f64 {
    let (d, n) = edit_distance_parts(pred, gt);
    100.0 * (1.0 - d as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// F1 in percent; 0 when precision + recall is 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            200.0 * p * r / (p + r)
        }
    }
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
}

/// Segment matching at IoU threshold `tau`: predicted segments are visited
/// in temporal order; each takes the still-unmatched ground-truth segment of
/// its class with the highest IoU (earliest on ties) and counts as a true
/// positive if that IoU reaches `tau`, otherwise as a false positive.
pub fn match_segments(
    pred: &LabelSequence,
    gt: &LabelSequence,
    tau: f64,
) -> Result<MatchCounts, MetricsError> {
    check_lengths(pred, gt)?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(MetricsError::BadThreshold(tau));
    }
    let p_segs = extract_segments(pred);
    let g_segs = extract_segments(gt);
    let mut used = vec![false; g_segs.len()];
    let mut counts = MatchCounts::default();
    for p in &p_segs {
        let best = g_segs
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && g.class_id == p.class_id)
            .map(|(j, g)| (j, segment_iou((p.start, p.end), (g.start, g.end))))
            .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((j, iou)),
            });
        match best {
            Some((j, iou)) if iou >= tau => {
                used[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|u| !**u).count();
    Ok(counts)
}

pub fn f1_at(pred: &LabelSequence, gt: &LabelSequence, tau: f64) -> Result<F1Result, MetricsError> {
    let counts = match_segments(pred, gt, tau)?;
    Ok(F1Result {
        precision: 100.0 * counts.precision(),
        recall: 100.0 * counts.recall(),
        f1: counts.f1(),
        counts,
    })
}

/// How the corpus-level edit score is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAggregation {
    /// Mean of per-video edit scores.
    #[default]
    PerVideo,
    /// `100 · (1 − ΣD / Σ max(|pred|, |gt|))` over all videos.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub id: String,
    pub frames: usize,
    pub acc: f64,
    pub edit: f64,
    /// F1 at 10/25/50 % IoU.
    pub f1: [f64; 3],
    pub counts: [MatchCounts; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "F1@10")]
    pub f1_10: f64,
    #[serde(rename = "F1@25")]
    pub f1_25: f64,
    #[serde(rename = "F1@50")]
    pub f1_50: f64,
    #[serde(rename = "Edit")]
    pub edit: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    pub per_video: Vec<VideoScore>,
}

impl EvalReport {
    pub fn f1(&self, tau: f64) -> Option<f64> {
        F1_THRESHOLDS
            .iter()
            .position(|&t| t == tau)
            .map(|i| [self.f1_10, self.f1_25, self.f1_50][i])
    }

    /// F1@10, F1@25, F1@50, Edit, Acc.
    pub fn summary(&self) -> [f64; 5] {
        [self.f1_10, self.f1_25, self.f1_50, self.edit, self.acc]
    }

    pub fn table(&self) -> String {
        format!("{self}")
    }
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["F1@10", "F1@25", "F1@50", "Edit", "Acc"];

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in SUMMARY_COLUMNS {
            write!(f, "{c:>8}")?;
        }
        writeln!(f)?;
        for v in self.summary() {
            write!(f, "{v:>8.2}")?;
        }
        writeln!(f)
    }
}

/// Corpus report: frame-weighted accuracy, edit per `edit_mode`, F1 from
/// match counts pooled over all videos.
pub fn evaluate_corpus<'a, I>(
    videos: I,
    edit_mode: EditAggregation,
) -> Result<EvalReport, MetricsError>
where
    I: IntoIterator<Item = (&'a str, &'a LabelSequence, &'a LabelSequence)>,
{
    let mut per_video = Vec::new();
    let mut hits = 0.0;
    let mut frames = 0usize;
    let mut pooled = [MatchCounts::default(); 3];
    let (mut edit_sum, mut dist_sum, mut norm_sum) = (0.0, 0usize, 0usize);
    for (id, pred, gt) in videos {
        let wrap = |e: MetricsError| MetricsError::Video {
            id: id.to_owned(),
            source: Box::new(e),
        };
        let acc = frame_accuracy(pred, gt).map_err(wrap)?;
        let (d, n) = edit_distance_parts(pred, gt);
        let edit = edit_score(pred, gt);
        let mut counts = [MatchCounts::default(); 3];
        for (i, &tau) in F1_THRESHOLDS.iter().enumerate() {
            counts[i] = match_segments(pred, gt, tau).map_err(wrap)?;
            pooled[i] += counts[i];
        }
        hits += pred
            .labels()
            .iter()
            .zip(gt.labels())
            .filter(|(a, b)| a == b)
            .count() as f64;
        frames += gt.len();
        edit_sum += edit;
        dist_sum += d;
        norm_sum += n;
        per_video.push(VideoScore {
            id: id.to_owned(),
            frames: gt.len(),
            acc,
            edit,
            f1: counts.map(|c| c.f1()),
            counts,
        });
    }
    if per_video.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let edit = match edit_mode {
        EditAggregation::PerVideo => edit_sum / per_video.len() as f64,
        EditAggregation::Pooled => 100.0 * (1.0 - dist_sum as f64 / norm_sum as f64),
    };
    Ok(EvalReport {
        f1_10: pooled[0].f1(),
        f1_25: pooled[1].f1(),
        f1_50: pooled[2].f1(),
        edit,
        acc: 100.0 * hits / frames as f64,
        per_video,
    })
}
