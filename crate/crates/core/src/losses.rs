//! Training objectives on a (C+1)-channel segmentation output.
//!
//! * [`boundary_bce`]: binary cross-entropy on the class-agnostic boundary
//!   channel against the transition mask.
//! * [`segment_shape_loss`]: for every ground-truth segment, the class
//!   probability row inside the segment (minus a `delta`-frame margin at both
//!   ends) is ℓ1-normalized and its CDF compared with the CDF of the uniform
//!   distribution by mean squared difference.
//! * [`proposed_loss`]: the weighted sum of both, with the boundary term
//!   restricted to the ±w boundary region and the shape term to the rest of
//!   the sequence, and the shape term switched on from epoch `e_start`.
//! * [`model_loss`]: frame-wise cross-entropy plus truncated-MSE smoothing.
//!
//! Every loss returns its gradient with respect to the pre-activation logits
//! (softmax for class rows, sigmoid for the boundary row), derived by hand.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::sequence::{
    boundary_targets, extract_segments, region_partition, BoundaryTarget, LabelSequence,
    ProbabilityMap, Segment,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("active frame set is empty")]
    ActiveSetEmpty,
    #[error("all {skipped} segments are shorter than the margin and were skipped")]
    AllSegmentsSkipped { skipped: usize },
    #[error("length mismatch: expected {expected} frames, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid loss config `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
}

/// How the two auxiliary losses are assigned to frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Boundary loss inside the boundary region, shape loss outside it.
    #[default]
    Decoupled,
    /// Both losses over every frame.
    AllFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    #[serde(rename = "lambda_B")]
    pub lambda_b: f64,
    #[serde(rename = "lambda_S")]
    pub lambda_s: f64,
    pub window_w: usize,
    pub margin_delta: usize,
    pub e_start: usize,
    pub eps: f64,
    pub assignment: Assignment,
    pub tmse_weight: f64,
    pub tmse_clip: f64,
}

impl Default for LossConfig {
    /// MS-TCN / GTEA weights.
    fn default() -> Self {
        Self {
            lambda_b: 1e-4,
            lambda_s: 1e-3,
            window_w: 5,
            margin_delta: 5,
            e_start: 20,
            eps: 1e-8,
            assignment: Assignment::Decoupled,
            tmse_weight: 0.15,
            tmse_clip: 16.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |key, reason: &str| {
            Err(LossError::InvalidConfig {
                key,
                reason: reason.to_owned(),
            })
        };
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return bad("lambda_B", "must be finite and >= 0");
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s.is_finite()) {
            return bad("lambda_S", "must be finite and >= 0");
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return bad("eps", "must lie in (0, 1e-3)");
        }
        if !(self.tmse_weight >= 0.0 && self.tmse_weight.is_finite()) {
            return bad("tmse_weight", "must be finite and >= 0");
        }
        if self.tmse_clip.is_nan() || self.tmse_clip <= 0.0 {
            return bad("tmse_clip", "must be > 0");
        }
        Ok(())
    }
}

/// Frames a loss term is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum Frames<'a> {
    All,
    Only(&'a [bool]),
}

impl Frames<'_> {
    #[inline]
    fn contains(&self, t: usize) -> bool {
        match self {
            Frames::All => true,
            Frames::Only(m) => m[t],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceLoss {
    pub value: f64,
    /// d loss / d boundary logit, per frame.
    pub grad: Vec<f64>,
    pub active_frames: usize,
}

/// Mean binary cross-entropy over the active frames. Probabilities are
/// clamped to `[eps, 1 - eps]` before the logs.
pub fn boundary_bce(
    boundary_probs: &[f64],
    target: &BoundaryTarget,
    active: Frames<'_>,
    eps: f64,
) -> Result<BceLoss, LossError> {
    let n = boundary_probs.len();
    if target.len() != n {
        return Err(LossError::LengthMismatch {
            expected: n,
            got: target.len(),
        });
    }
    if let Frames::Only(m) = active {
        if m.len() != n {
            return Err(LossError::LengthMismatch {
                expected: n,
                got: m.len(),
            });
        }
    }
    let active_frames = (0..n).filter(|&t| active.contains(t)).count();
    if active_frames == 0 {
        return Err(LossError::ActiveSetEmpty);
    }
    let norm = 1.0 / active_frames as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; n];
    for (t, (&p, &b)) in boundary_probs.iter().zip(target.mask()).enumerate() {
        if !active.contains(t) {
            continue;
        }
        let p_c = p.clamp(eps, 1.0 - eps);
        let b = f64::from(b);
        sum -= b * p_c.ln() + (1.0 - b) * (1.0 - p_c).ln();
        grad[t] = (p - b) * norm;
    }
    Ok(BceLoss {
        value: sum * norm,
        grad,
        active_frames,
    })
}

/// `(v + eps) / Σ (v + eps)`.
pub fn l1_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = v.iter().map(|x| x + eps).sum();
    v.iter().map(|x| (x + eps) / total).collect()
}

/// Running sum.
pub fn cdf(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Squared CDF distance of one distribution to the uniform one, divided by
/// its length, together with its gradient with respect to the unnormalized
/// input `v`.
fn shape_term(v: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let len = v.len();
    let inv_len = 1.0 / len as f64;
    let total: f64 = v.iter().map(|x| x + eps).sum();
    let u: Vec<f64> = v.iter().map(|x| (x + eps) / total).collect();
    let f = cdf(&u);
    let mut value = 0.0;
    // a[j] = d value / d F[j]
    let mut a = vec![0.0; len];
    for j in 0..len {
        let d = f[j] - (j + 1) as f64 * inv_len;
        value += d * d;
        a[j] = 2.0 * d * inv_len;
    }
    value *= inv_len;
    // r[k] = d value / d u[k] = Σ_{j ≥ k} a[j]
    let mut r = a;
    for k in (0..len.saturating_sub(1)).rev() {
        r[k] += r[k + 1];
    }
    let mean_r: f64 = r.iter().zip(&u).map(|(ri, ui)| ri * ui).sum();
    let grad = r.iter().map(|ri| (ri - mean_r) / total).collect();
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeLoss {
    pub value: f64,
    /// d loss / d class logits (C × T).
    pub grad: Matrix,
    pub segments_used: usize,
    pub segments_skipped: usize,
}

/// Frames of `seg` that enter the shape loss: the interior after removing
/// `delta` frames at each end, restricted to `active`.
pub fn segment_interior(seg: &Segment, delta: usize, active: Frames<'_>) -> Vec<usize> {
    let lo = seg.start + delta;
    let hi = seg.end.saturating_sub(delta);
    (lo..hi.max(lo)).filter(|&t| active.contains(t)).collect()
}

pub fn segment_shape_loss(
    class_probs: &Matrix,
    segments: &[Segment],
    delta: usize,
    active: Frames<'_>,
    eps: f64,
) -> Result<ShapeLoss, LossError> {
    let (c, t_len) = (class_probs.rows(), class_probs.cols());
    if let Frames::Only(m) = active {
        if m.len() != t_len {
            return Err(LossError::LengthMismatch {
                expected: t_len,
                got: m.len(),
            });
        }
    }
    // d loss / d p for the segment's own class row, frame-indexed.
    let mut prob_grad: Vec<Option<(usize, f64)>> = vec![None; t_len];
    let mut used = 0;
    let mut skipped = 0;
    let mut total = 0.0;
    for seg in segments {
        let frames = segment_interior(seg, delta, active);
        if frames.is_empty() {
            skipped += 1;
            continue;
        }
        let row = class_probs.row(seg.class_id);
        let v: Vec<f64> = frames.iter().map(|&t| row[t]).collect();
        let (value, g) = shape_term(&v, eps);
        total += value;
        used += 1;
        for (&t, gv) in frames.iter().zip(g) {
            prob_grad[t] = Some((seg.class_id, gv));
        }
    }
    if used == 0 {
        return Err(LossError::AllSegmentsSkipped { skipped });
    }
    let norm = 1.0 / used as f64;
    let mut grad = Matrix::zeros(c, t_len);
    for (t, entry) in prob_grad.iter().enumerate() {
        let Some((row, g)) = *entry else { continue };
        // softmax Jacobian: dz_k = p_k (δ_{k,row} − p_row) g
        let g = g * norm;
        let p_row = class_probs.get(row, t);
        for k in 0..c {
            let indicator = if k == row { 1.0 } else { 0.0 };
            grad.set(k, t, class_probs.get(k, t) * (indicator - p_row) * g);
        }
    }
    Ok(ShapeLoss {
        value: total * norm,
        grad,
        segments_used: used,
        segments_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLoss {
    pub value: f64,
    pub cross_entropy: f64,
    pub tmse: f64,
    /// d loss / d class logits (C × T).
    pub grad: Matrix,
}

/// `max(p, eps)` that lets NaN through, so bad inputs surface as a
/// non-finite loss.
fn floor(p: f64, eps: f64) -> f64 {
    if p < eps {
        eps
    } else {
        p
    }
}

/// Frame-wise cross-entropy averaged over T, plus `tmse_weight` times the
/// mean over classes and consecutive frame pairs of the squared change in
/// log-probability, clipped at `tmse_clip`.
pub fn model_loss(
    class_probs: &Matrix,
    seq: &LabelSequence,
    tmse_weight: f64,
    tmse_clip: f64,
    eps: f64,
) -> Result<ModelLoss, LossError> {
    let (c, t_len) = (class_probs.rows(), class_probs.cols());
    if seq.len() != t_len {
        return Err(LossError::LengthMismatch {
            expected: t_len,
            got: seq.len(),
        });
    }
    let inv_t = 1.0 / t_len as f64;
    let mut grad = Matrix::zeros(c, t_len);
    let mut ce = 0.0;
    for (t, &y) in seq.labels().iter().enumerate() {
        ce -= floor(class_probs.get(y, t), eps).ln();
        for k in 0..c {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad.set(k, t, (class_probs.get(k, t) - onehot) * inv_t);
        }
    }
    ce *= inv_t;

    let mut tmse = 0.0;
    if tmse_weight > 0.0 && t_len > 1 {
        let scale = 1.0 / (c * (t_len - 1)) as f64;
        let logp = |k: usize, t: usize| floor(class_probs.get(k, t), eps).ln();
        // d tmse / d log p
        let mut glog = Matrix::zeros(c, t_len);
        for k in 0..c {
            for t in 0..t_len - 1 {
                let d = logp(k, t + 1) - logp(k, t);
                let sq = d * d;
                if sq < tmse_clip {
                    tmse += sq;
                    glog.add_at(k, t + 1, 2.0 * d * scale);
                    glog.add_at(k, t, -2.0 * d * scale);
                } else {
                    tmse += tmse_clip;
                }
            }
        }
        tmse *= scale;
        // log-softmax Jacobian: dz_m = g_m − p_m Σ_k g_k
        for t in 0..t_len {
            let gsum: f64 = glog.column(t).sum();
            for m in 0..c {
                let dz = glog.get(m, t) - class_probs.get(m, t) * gsum;
                grad.add_at(m, t, tmse_weight * dz);
            }
        }
    }
    Ok(ModelLoss {
        value: ce + tmse_weight * tmse,
        cross_entropy: ce,
        tmse,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposedLoss {
    pub l_b: f64,
    pub l_s: f64,
    /// λ_B·l_b + λ_S·l_s
    pub value: f64,
    /// d value / d logits ((C+1) × T; last row is the boundary logit).
    pub grad: Matrix,
    pub n_boundary_frames: usize,
    pub n_segments_used: usize,
    pub n_segments_skipped: usize,
    pub shape_active: bool,
}

/// Weighted boundary and shape losses under `cfg.assignment`. A term whose
/// weight is zero is not evaluated and reports 0; so does the shape term
/// before `cfg.e_start`. An empty boundary region (no transitions) or a
/// sequence whose segments are all skipped contributes 0 with zero gradient.
pub fn proposed_loss(
    prob_map: &ProbabilityMap,
    seq: &LabelSequence,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<ProposedLoss, LossError> {
    let c = prob_map.num_classes();
    let t_len = prob_map.num_frames();
    if seq.len() != t_len {
        return Err(LossError::LengthMismatch {
            expected: t_len,
            got: seq.len(),
        });
    }
    let mut out = ProposedLoss {
        l_b: 0.0,
        l_s: 0.0,
        value: 0.0,
        grad: Matrix::zeros(c + 1, t_len),
        n_boundary_frames: 0,
        n_segments_used: 0,
        n_segments_skipped: 0,
        shape_active: false,
    };
    let region = region_partition(seq, cfg.window_w);
    let non_boundary = region.non_boundary();

    if cfg.lambda_b > 0.0 {
        let target = boundary_targets(seq);
        let active = match cfg.assignment {
            Assignment::Decoupled => Frames::Only(region.boundary()),
            Assignment::AllFrames => Frames::All,
        };
        match boundary_bce(&prob_map.boundary_probs, &target, active, cfg.eps) {
            Ok(bce) => {
                out.l_b = bce.value;
                out.n_boundary_frames = bce.active_frames;
                for (dst, g) in out.grad.row_mut(c).iter_mut().zip(&bce.grad) {
                    *dst = cfg.lambda_b * g;
                }
            }
            Err(LossError::ActiveSetEmpty) => {}
            Err(e) => return Err(e),
        }
    }

    if cfg.lambda_s > 0.0 && epoch >= cfg.e_start {
        out.shape_active = true;
        let segments = extract_segments(seq);
        let active = match cfg.assignment {
            Assignment::Decoupled => Frames::Only(&non_boundary),
            Assignment::AllFrames => Frames::All,
        };
        match segment_shape_loss(
            &prob_map.class_probs,
            &segments,
            cfg.margin_delta,
            active,
            cfg.eps,
        ) {
            Ok(shape) => {
                out.l_s = shape.value;
                out.n_segments_used = shape.segments_used;
                out.n_segments_skipped = shape.segments_skipped;
                for k in 0..c {
                    for (dst, g) in out.grad.row_mut(k).iter_mut().zip(shape.grad.row(k)) {
                        *dst = cfg.lambda_s * g;
                    }
                }
            }
            Err(LossError::AllSegmentsSkipped { skipped }) => out.n_segments_skipped = skipped,
            Err(e) => return Err(e),
        }
    }
    out.value = cfg.lambda_b * out.l_b + cfg.lambda_s * out.l_s;
    Ok(out)
}

/// Scalar loss values for one sequence (summed over stages when produced by
/// the trainer).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_model: f64,
    #[serde(rename = "l_B")]
    pub l_b: f64,
    #[serde(rename = "l_S")]
    pub l_s: f64,
    pub l_total: f64,
    pub n_boundary_frames: usize,
    pub n_segments_used: usize,
    pub n_segments_skipped: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_model.is_finite()
            && self.l_b.is_finite()
            && self.l_s.is_finite()
            && self.l_total.is_finite()
    }
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.l_model += o.l_model;
        self.l_b += o.l_b;
        self.l_s += o.l_s;
        self.l_total += o.l_total;
        self.n_boundary_frames += o.n_boundary_frames;
        self.n_segments_used += o.n_segments_used;
        self.n_segments_skipped += o.n_segments_skipped;
    }
}

/// `l_model + λ_B·l_B + λ_S·l_S` for one stage output, with the gradient on
/// the (C+1) × T logits.
pub fn total_loss(
    prob_map: &ProbabilityMap,
    seq: &LabelSequence,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<(LossBreakdown, Matrix), LossError> {
    let model = model_loss(
        &prob_map.class_probs,
        seq,
        cfg.tmse_weight,
        cfg.tmse_clip,
        cfg.eps,
    )?;
    let proposed = proposed_loss(prob_map, seq, cfg, epoch)?;
    let mut grad = proposed.grad;
    let c = prob_map.num_classes();
    for k in 0..c {
        for (dst, g) in grad.row_mut(k).iter_mut().zip(model.grad.row(k)) {
            *dst += g;
        }
    }
    let breakdown = LossBreakdown {
        l_model: model.value,
        l_b: proposed.l_b,
        l_s: proposed.l_s,
        l_total: model.value + proposed.value,
        n_boundary_frames: proposed.n_boundary_frames,
        n_segments_used: proposed.n_segments_used,
        n_segments_skipped: proposed.n_segments_skipped,
    };
    Ok((breakdown, grad))
}
