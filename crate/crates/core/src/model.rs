//! Toy multi-stage dilated temporal convolution network.
//!
//! Each stage projects its input to `hidden_width` channels, applies
//! `layers_per_stage` residual blocks (`h + W₁·relu(conv_dilated(h))` with
//! dilation 2^ℓ), and emits C class logits plus one boundary logit per frame.
//! Stages after the first consume the previous stage's class probabilities.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, AutodiffError, Tape, Tensor, Var};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossError};
use crate::matrix::Matrix;
use crate::sequence::{LabelSequence, ProbabilityMap};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("features have {got} channels, backbone expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid backbone config `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub kernel_size: usize,
    /// Adds the class-agnostic boundary logit to every stage head.
    pub boundary_channel: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_stages: 2,
            layers_per_stage: 6,
            hidden_width: 32,
            num_classes: 6,
            input_dim: 16,
            kernel_size: 3,
            boundary_channel: true,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |key, reason: &str| {
            Err(ModelError::InvalidConfig {
                key,
                reason: reason.to_owned(),
            })
        };
        for (key, v) in [
            ("num_stages", self.num_stages),
            ("layers_per_stage", self.layers_per_stage),
            ("hidden_width", self.hidden_width),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size", "must be odd");
        }
        if self.layers_per_stage > 30 {
            return bad("layers_per_stage", "dilation 2^l would overflow");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.num_classes + usize::from(self.boundary_channel)
    }

    pub fn dilation(layer: usize) -> usize {
        1 << layer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// All learnable tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub blocks: Vec<ParamBlock>,
}

impl Parameters {
    /// Uniform(±1/√fan_in) initialization from `cfg.seed`.
    pub fn init(cfg: &BackboneConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden_width;
        let mut blocks = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            blocks.push(ParamBlock {
                name,
                shape,
                values,
            });
        };
        for s in 0..cfg.num_stages {
            let din = if s == 0 {
                cfg.input_dim
            } else {
                cfg.num_classes
            };
            add(
                format!("stage{s}.input.weight"),
                vec![h, din],
                din,
                &mut rng,
            );
            add(format!("stage{s}.input.bias"), vec![h], din, &mut rng);
            for l in 0..cfg.layers_per_stage {
                let k = cfg.kernel_size;
                add(
                    format!("stage{s}.layer{l}.dilated.weight"),
                    vec![h, h, k],
                    h * k,
                    &mut rng,
                );
                add(
                    format!("stage{s}.layer{l}.dilated.bias"),
                    vec![h],
                    h * k,
                    &mut rng,
                );
                add(
                    format!("stage{s}.layer{l}.pointwise.weight"),
                    vec![h, h],
                    h,
                    &mut rng,
                );
                add(
                    format!("stage{s}.layer{l}.pointwise.bias"),
                    vec![h],
                    h,
                    &mut rng,
                );
            }
            add(
                format!("stage{s}.head.weight"),
                vec![cfg.head_width(), h],
                h,
                &mut rng,
            );
            add(
                format!("stage{s}.head.bias"),
                vec![cfg.head_width()],
                h,
                &mut rng,
            );
        }
        Ok(Self { blocks })
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.values.iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector in block order.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in &mut self.blocks {
            let n = b.values.len();
            b.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// Checkpoint: one JSON header line naming every block and its shape,
    /// then all values as little-endian `f64` in block order.
    pub fn write_checkpoint<W: Write>(
        &self,
        mut w: W,
        config: &serde_json::Value,
    ) -> Result<(), ModelError> {
        let header = serde_json::json!({
            "format": "dualseg-checkpoint",
            "version": 1,
            "blocks": self.blocks,
            "config": config,
        });
        let line =
            serde_json::to_string(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for b in &self.blocks {
            for v in &b.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, serde_json::Value), ModelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut blocks: Vec<ParamBlock> = serde_json::from_value(header["blocks"].clone())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut data = bytes[nl + 1..].chunks_exact(8);
        for b in &mut blocks {
            let n: usize = b.shape.iter().product();
            b.values = (&mut data)
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if b.values.len() != n {
                return Err(ModelError::Checkpoint(format!(
                    "truncated data in block {}",
                    b.name
                )));
            }
        }
        if data.next().is_some() || !data.remainder().is_empty() {
            return Err(ModelError::Checkpoint(
                "trailing bytes after last block".into(),
            ));
        }
        Ok((Self { blocks }, header["config"].clone()))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// (C+1) × T raw logits per stage (C × T without a boundary channel).
    pub stage_logits: Vec<Matrix>,
    /// Probabilities of the final stage.
    pub probs: ProbabilityMap,
}

struct Graph {
    params: Vec<Var>,
    stage_logits: Vec<Var>,
}

fn matrix_of(tape: &Tape, v: Var) -> Matrix {
    let t = tape.value(v);
    Matrix::from_vec(t.shape()[0], t.shape()[1], t.values().to_vec()).expect("matrix-shaped node")
}

fn build_graph(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &Parameters,
    features: &Matrix,
) -> Result<Graph, ModelError> {
    if features.rows() != cfg.input_dim {
        return Err(ModelError::ShapeMismatch {
            expected: cfg.input_dim,
            got: features.rows(),
        });
    }
    let param_vars: Vec<Var> = params
        .blocks
        .iter()
        .map(|b| tape.leaf(Tensor::new(b.shape.clone(), b.values.clone()).expect("block shape")))
        .collect();
    let mut next = param_vars.iter().copied();
    let mut take = || next.next().expect("parameter layout matches config");
    let class_rows: Vec<usize> = (0..cfg.num_classes).collect();
    let mut input = tape.leaf(Tensor::new(
        vec![features.rows(), features.cols()],
        features.as_slice().to_vec(),
    )?);
    let mut stage_logits = Vec::with_capacity(cfg.num_stages);
    for s in 0..cfg.num_stages {
        if s > 0 {
            let prev = *stage_logits.last().expect("previous stage");
            let class_logits = tape.gather_rows(prev, &class_rows)?;
            input = tape.softmax_columns(class_logits)?;
        }
        let (w, b) = (take(), take());
        let mut h = tape.pointwise_conv(input, w, Some(b))?;
        for l in 0..cfg.layers_per_stage {
            let (kw, kb, pw, pb) = (take(), take(), take(), take());
            let conv = tape.conv1d_dilated(h, kw, Some(kb), BackboneConfig::dilation(l))?;
            let act = tape.relu(conv);
            let mixed = tape.pointwise_conv(act, pw, Some(pb))?;
            h = tape.add(h, mixed)?;
        }
        let (hw, hb) = (take(), take());
        stage_logits.push(tape.pointwise_conv(h, hw, Some(hb))?);
    }
    Ok(Graph {
        params: param_vars,
        stage_logits,
    })
}

fn probs_from_logits(cfg: &BackboneConfig, logits: &Matrix) -> ProbabilityMap {
    if cfg.boundary_channel {
        ProbabilityMap::from_logits(logits)
    } else {
        let mut padded = Matrix::zeros(logits.rows() + 1, logits.cols());
        for k in 0..logits.rows() {
            padded.row_mut(k).copy_from_slice(logits.row(k));
        }
        ProbabilityMap::from_logits(&padded)
    }
}

pub fn forward(
    cfg: &BackboneConfig,
    params: &Parameters,
    features: &Matrix,
) -> Result<ForwardOutput, ModelError> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, cfg, params, features)?;
    let stage_logits: Vec<Matrix> = graph
        .stage_logits
        .iter()
        .map(|&v| matrix_of(&tape, v))
        .collect();
    let probs = probs_from_logits(cfg, stage_logits.last().expect("at least one stage"));
    Ok(ForwardOutput {
        stage_logits,
        probs,
    })
}

/// ReLU activation pattern of the forward pass, for telling smooth
/// perturbations from ones that cross a kink.
pub fn relu_pattern(
    cfg: &BackboneConfig,
    params: &Parameters,
    features: &Matrix,
) -> Result<Vec<bool>, ModelError> {
    let mut tape = Tape::new();
    build_graph(&mut tape, cfg, params, features)?;
    Ok(tape.relu_pattern())
}

/// Per-frame argmax over class rows (lowest index wins ties), plus the
/// boundary probabilities.
pub fn predict(prob_map: &ProbabilityMap) -> (LabelSequence, Vec<f64>) {
    let c = prob_map.num_classes();
    let labels = (0..prob_map.num_frames())
        .map(|t| {
            let mut best = 0;
            for k in 1..c {
                if prob_map.class_probs.get(k, t) > prob_map.class_probs.get(best, t) {
                    best = k;
                }
            }
            best
        })
        .collect();
    let seq = LabelSequence::new(labels, c).expect("argmax is within class range");
    (seq, prob_map.boundary_probs.clone())
}

/// Loss summed over stages and its gradient with respect to every parameter
/// block (same order as `params.blocks`).
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

pub fn loss_and_gradient(
    cfg: &BackboneConfig,
    params: &Parameters,
    features: &Matrix,
    labels: &LabelSequence,
    loss_cfg: &LossConfig,
    epoch: usize,
) -> Result<LossGradient, ModelError> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, cfg, params, features)?;
    let mut breakdown = LossBreakdown::default();
    let mut loss: Option<Var> = None;
    for &stage in &graph.stage_logits {
        let logits = matrix_of(&tape, stage);
        let probs = probs_from_logits(cfg, &logits);
        let (b, grad) = total_loss(&probs, labels, loss_cfg, epoch)?;
        breakdown += b;
        let grad = if cfg.boundary_channel {
            grad.into_vec()
        } else {
            grad.row_range(0, cfg.num_classes).into_vec()
        };
        let node = tape.external_loss(stage, b.l_total, grad)?;
        loss = Some(match loss {
            None => node,
            Some(acc) => tape.add(acc, node)?,
        });
    }
    let grads = backward(&tape, loss.expect("at least one stage"))?;
    Ok(LossGradient {
        breakdown,
        grads: graph.params.iter().map(|&v| grads.wrt(v)).collect(),
    })
}
