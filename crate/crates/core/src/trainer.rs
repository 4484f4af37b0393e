//! Seeded training loop and ablation runner.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Video};
use crate::losses::{Assignment, LossBreakdown, LossConfig, LossError};
use crate::metrics::{evaluate_corpus, EditAggregation, EvalReport, MetricsError};
use crate::model::{
    forward, loss_and_gradient, predict, BackboneConfig, LossGradient, ModelError, Parameters,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, video `{video}`: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        video: String,
        breakdown: LossBreakdown,
    },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training config `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0: final only).
    pub eval_every: usize,
    pub edit_aggregation: EditAggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            backbone: BackboneConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            batch: 1,
            seed: 0,
            eval_every: 10,
            edit_aggregation: EditAggregation::PerVideo,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        self.backbone.validate()?;
        let bad = |key, reason: &str| {
            Err(TrainError::InvalidConfig {
                key,
                reason: reason.to_owned(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be >= 1");
        }
        let lr = match self.optimizer {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return bad("optimizer.lr", "must be > 0");
        }
        Ok(())
    }

    /// `e_start` beyond the last epoch means the shape loss never runs.
    pub fn shape_loss_never_active(&self) -> bool {
        self.loss.lambda_s > 0.0 && self.loss.e_start >= self.epochs
    }

    /// Copies the corpus' class count and feature width into the backbone.
    pub fn resolved_for(&self, corpus: &Corpus) -> Self {
        let mut cfg = self.clone();
        cfg.backbone.num_classes = corpus.num_classes();
        cfg.backbone.input_dim = corpus.feature_dim;
        cfg
    }

    /// Uses `seed` for both initialization and shuffling.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.backbone.seed = seed;
        cfg
    }
}

/// Optimizer state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &Parameters) -> Self {
        match cfg {
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let zeros: Vec<Vec<f64>> = params
                    .blocks
                    .iter()
                    .map(|b| vec![0.0; b.values.len()])
                    .collect();
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &[Vec<f64>]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (block, g) in params.blocks.iter_mut().zip(grads) {
                    for (p, gi) in block.values.iter_mut().zip(g) {
                        *p -= *lr * gi;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step);
                let bc2 = 1.0 - beta2.powi(*step);
                for (((block, g), mb), vb) in params
                    .blocks
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    for (((p, &gi), mi), vi) in block
                        .values
                        .iter_mut()
                        .zip(g)
                        .zip(mb.iter_mut())
                        .zip(vb.iter_mut())
                    {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * gi;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= *lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Mean loss values over the training videos of one epoch; frame and
/// segment counts are totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub evals: Vec<EvalEntry>,
    pub final_report: EvalReport,
    /// Not serialized with the log so that logs of identical runs are
    /// byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Runs the final-stage prediction on every video and scores it.
pub fn evaluate(
    cfg: &TrainConfig,
    params: &Parameters,
    videos: &[Video],
) -> Result<EvalReport, TrainError> {
    let preds = predict_videos(&cfg.backbone, params, videos)?;
    let report = evaluate_corpus(
        videos
            .iter()
            .zip(&preds)
            .map(|(v, p)| (v.id.as_str(), p, &v.labels)),
        cfg.edit_aggregation,
    )?;
    Ok(report)
}

pub fn predict_videos(
    cfg: &BackboneConfig,
    params: &Parameters,
    videos: &[Video],
) -> Result<Vec<crate::sequence::LabelSequence>, TrainError> {
    videos
        .par_iter()
        .map(|v| Ok(predict(&forward(cfg, params, &v.features)?.probs).0))
        .collect()
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Parameters, RunLog), TrainError> {
    train_with_observer(corpus, cfg, |_, _| {})
}

/// As [`train`], calling `observer(epoch, params)` after every epoch.
pub fn train_with_observer<F>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(Parameters, RunLog), TrainError>
where
    F: FnMut(usize, &Parameters),
{
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if cfg.backbone.num_classes != corpus.num_classes() {
        return Err(TrainError::InvalidConfig {
            key: "backbone.num_classes",
            reason: format!("corpus has {} classes", corpus.num_classes()),
        });
    }
    if cfg.backbone.input_dim != corpus.feature_dim {
        return Err(TrainError::InvalidConfig {
            key: "backbone.input_dim",
            reason: format!("corpus features have {} channels", corpus.feature_dim),
        });
    }
    let started = Instant::now();
    let mut params = Parameters::init(&cfg.backbone)?;
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch) {
            let results: Vec<Result<LossGradient, ModelError>> = batch
                .par_iter()
                .map(|&i| {
                    let v = &corpus.train[i];
                    loss_and_gradient(
                        &cfg.backbone,
                        &params,
                        &v.features,
                        &v.labels,
                        &cfg.loss,
                        epoch,
                    )
                })
                .collect();
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let lg = r?;
                if !lg.breakdown.is_finite() || !lg.grads.iter().flatten().all(|g| g.is_finite()) {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        video: corpus.train[i].id.clone(),
                        breakdown: lg.breakdown,
                    });
                }
                sum += lg.breakdown;
                match grads.as_mut() {
                    None => grads = Some(lg.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&lg.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                grads.iter_mut().flatten().for_each(|g| *g *= k);
            }
            opt.step(&mut params, &grads);
        }
        let n = corpus.train.len() as f64;
        epochs.push(EpochLog {
            epoch,
            l_model: sum.l_model / n,
            l_b: sum.l_b / n,
            l_s: sum.l_s / n,
            l_total: sum.l_total / n,
            n_boundary_frames: sum.n_boundary_frames,
            n_segments_used: sum.n_segments_used,
            n_segments_skipped: sum.n_segments_skipped,
        });
        observer(epoch, &params);
        let last = epoch + 1 == cfg.epochs;
        if !corpus.test.is_empty()
            && cfg.eval_every > 0
            && ((epoch + 1) % cfg.eval_every == 0 || last)
        {
            evals.push(EvalEntry {
                epoch,
                report: evaluate(cfg, &params, &corpus.test)?,
            });
        }
    }

    let eval_set = if corpus.test.is_empty() {
        &corpus.train
    } else {
        &corpus.test
    };
    let final_report = match evals.last() {
        Some(e) if e.epoch + 1 == cfg.epochs => e.report.clone(),
        _ => evaluate(cfg, &params, eval_set)?,
    };
    let log = RunLog {
        config: cfg.clone(),
        epochs,
        evals,
        final_report,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((params, log))
}

/// One arm of an ablation study: a transformation of the base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    PlusBoundary,
    PlusShape,
    PlusBoth,
    EStart(usize),
    AllFrames,
    Decoupled,
}

impl Arm {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match *self {
            Arm::Baseline => {
                cfg.loss.lambda_b = 0.0;
                cfg.loss.lambda_s = 0.0;
            }
            Arm::PlusBoundary => cfg.loss.lambda_s = 0.0,
            Arm::PlusShape => cfg.loss.lambda_b = 0.0,
            Arm::PlusBoth => {}
            Arm::EStart(e) => cfg.loss.e_start = e,
            Arm::AllFrames => cfg.loss.assignment = Assignment::AllFrames,
            Arm::Decoupled => cfg.loss.assignment = Assignment::Decoupled,
        }
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Baseline => write!(f, "baseline"),
            Arm::PlusBoundary => write!(f, "+LB"),
            Arm::PlusShape => write!(f, "+LS"),
            Arm::PlusBoth => write!(f, "+both"),
            Arm::EStart(e) => write!(f, "estart:{e}"),
            Arm::AllFrames => write!(f, "allframes"),
            Arm::Decoupled => write!(f, "decoupled"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown arm `{0}` (expected baseline, +LB, +LS, +both, estart:<n>[,<n>...], allframes, decoupled)")]
pub struct UnknownArm(pub String);

impl FromStr for Arm {
    type Err = UnknownArm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let arm = match s.to_ascii_lowercase().as_str() {
            "baseline" => Arm::Baseline,
            "+lb" | "lb" => Arm::PlusBoundary,
            "+ls" | "ls" => Arm::PlusShape,
            "+both" | "both" => Arm::PlusBoth,
            "allframes" | "all_frames" => Arm::AllFrames,
            "decoupled" => Arm::Decoupled,
            other => match other.strip_prefix("estart:") {
                Some(n) => Arm::EStart(n.parse().map_err(|_| UnknownArm(s.to_owned()))?),
                None => return Err(UnknownArm(s.to_owned())),
            },
        };
        Ok(arm)
    }
}

/// Parses a comma-separated arm list. `estart:` applies to every number that
/// follows it, so `estart:0,10,20` yields three arms.
pub fn parse_arms(list: &str) -> Result<Vec<Arm>, UnknownArm> {
    let mut arms = Vec::new();
    let mut in_estart = false;
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if in_estart {
            if let Ok(n) = item.parse::<usize>() {
                arms.push(Arm::EStart(n));
                continue;
            }
        }
        let arm: Arm = item.parse()?;
        in_estart = matches!(arm, Arm::EStart(_));
        arms.push(arm);
    }
    if arms.is_empty() {
        return Err(UnknownArm(list.to_owned()));
    }
    Ok(arms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// F1@10, F1@25, F1@50, Edit, Acc on the test split.
    pub summary: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    /// Config of this arm; run `i` used `config.with_seed(seeds[i])`.
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub mean: [f64; 5],
    pub sd: [f64; 5],
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation per column.
pub fn mean_sd(runs: &[[f64; 5]]) -> ([f64; 5], [f64; 5]) {
    let n = runs.len();
    let mut mean = [f64::NAN; 5];
    let mut sd = [f64::NAN; 5];
    if n == 0 {
        return (mean, sd);
    }
    for j in 0..5 {
        let m = runs.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        mean[j] = m;
        sd[j] = if n > 1 {
            (runs.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
    }
    (mean, sd)
}

/// Trains every arm × seed and reports mean ± sd of the test metrics. A
/// failed run is recorded in its row without stopping the others.
pub fn ablate(corpus: &Corpus, base: &TrainConfig, arms: &[Arm], seeds: &[u64]) -> AblationTable {
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<Result<[f64; 5], String>> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let cfg = arms[a].apply(base).with_seed(seed);
            train(corpus, &cfg)
                .map(|(_, log)| log.final_report.summary())
                .map_err(|e| format!("seed {seed}: {e}"))
        })
        .collect();
    let mut rows: Vec<AblationRow> = arms
        .iter()
        .map(|arm| AblationRow {
            arm: arm.to_string(),
            config: arm.apply(base),
            seeds: seeds.to_vec(),
            runs: Vec::new(),
            mean: [f64::NAN; 5],
            sd: [f64::NAN; 5],
            errors: Vec::new(),
        })
        .collect();
    for (&(a, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(summary) => rows[a].runs.push(SeedRun { seed, summary }),
            Err(e) => rows[a].errors.push(e),
        }
    }
    for row in &mut rows {
        let summaries: Vec<[f64; 5]> = row.runs.iter().map(|r| r.summary).collect();
        (row.mean, row.sd) = mean_sd(&summaries);
    }
    AblationTable { rows }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arm,F1@10,F1@10_sd,F1@25,F1@25_sd,F1@50,F1@50_sd,Edit,Edit_sd,Acc,Acc_sd,runs\n",
        );
        for row in &self.rows {
            out.push_str(&row.arm);
            for j in 0..5 {
                out.push_str(&format!(",{:.4},{:.4}", row.mean[j], row.sd[j]));
            }
            out.push_str(&format!(",{}\n", row.runs.len()));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "arm")?;
        for c in crate::metrics::SUMMARY_COLUMNS {
            write!(f, "{c:>16}")?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<12}", row.arm)?;
            for j in 0..5 {
                write!(
                    f,
                    "{:>16}",
                    format!("{:.2} ± {:.2}", row.mean[j], row.sd[j])
                )?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn tiny_corpus() -> Corpus {
        generate(&SynthConfig {
            num_classes: 3,
            num_videos: 6,
            frames: [40, 60],
            segments: [2, 3],
            feature_dim: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(corpus: &Corpus) -> TrainConfig {
        TrainConfig {
            backbone: BackboneConfig {
                num_stages: 2,
                layers_per_stage: 3,
                hidden_width: 6,
                ..BackboneConfig::default()
            },
            loss: LossConfig {
                lambda_b: 0.1,
                lambda_s: 1.0,
                e_start: 3,
                ..LossConfig::default()
            },
            epochs: 6,
            eval_every: 2,
            ..TrainConfig::default()
        }
        .resolved_for(corpus)
    }

    #[test]
    fn sgd_step_is_exact() {
        // f(θ) = (θ − 3)², θ₀ = 1, g = −4
        let mut p = Parameters {
            blocks: vec![crate::model::ParamBlock {
                name: "theta".into(),
                shape: vec![1],
                values: vec![1.0],
            }],
        };
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.25 }, &p);
        opt.step(&mut p, &[vec![-4.0]]);
        assert_eq!(p.blocks[0].values[0], 2.0);
    }

    #[test]
    fn adam_steps_follow_update_rule() {
        let mut p = Parameters {
            blocks: vec![crate::model::ParamBlock {
                name: "theta".into(),
                shape: vec![1],
                values: vec![1.0],
            }],
        };
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut opt = Optimizer::new(
            OptimizerConfig::Adam {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &p,
        );
        let (mut theta, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=5 {
            let g = 2.0 * (theta - 3.0);
            opt.step(&mut p, &[vec![g]]);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            assert!((p.blocks[0].values[0] - theta).abs() < 1e-12);
        }
        // first Adam step moves by exactly lr (up to eps)
        let mut q = Parameters {
            blocks: vec![crate::model::ParamBlock {
                name: "theta".into(),
                shape: vec![1],
                values: vec![1.0],
            }],
        };
        let mut opt = Optimizer::new(
            OptimizerConfig::Adam {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &q,
        );
        opt.step(&mut q, &[vec![-4.0]]);
        assert!((q.blocks[0].values[0] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let corpus = tiny_corpus();
        let cfg = tiny_cfg(&corpus);
        let (p1, l1) = train(&corpus, &cfg).unwrap();
        let (p2, l2) = train(&corpus, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            serde_json::to_string(&l1).unwrap(),
            serde_json::to_string(&l2).unwrap()
        );
        assert_eq!(l1.epochs.len(), 6);
        assert_eq!(
            l1.evals.iter().map(|e| e.epoch).collect::<Vec<_>>(),
            vec![1, 3, 5]
        );
        for e in &l1.epochs {
            assert_eq!(e.l_s == 0.0, e.epoch < 3, "epoch {}", e.epoch);
        }
        let (p3, _) = train(&corpus, &cfg.with_seed(1)).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn zero_weights_log_zero_auxiliary_losses() {
        let corpus = tiny_corpus();
        let cfg = Arm::Baseline.apply(&tiny_cfg(&corpus));
        let (_, log) = train(&corpus, &cfg).unwrap();
        assert!(log.epochs.iter().all(|e| e.l_b == 0.0 && e.l_s == 0.0));
        assert!(log.epochs.iter().all(|e| e.l_total == e.l_model));
    }

    #[test]
    fn batched_training_is_deterministic() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            batch: 3,
            ..tiny_cfg(&corpus)
        };
        assert_eq!(
            train(&corpus, &cfg).unwrap().0,
            train(&corpus, &cfg).unwrap().0
        );
    }

    #[test]
    fn rejects_mismatched_corpus() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_cfg(&corpus);
        cfg.backbone.input_dim += 1;
        assert!(matches!(
            train(&corpus, &cfg),
            Err(TrainError::InvalidConfig {
                key: "backbone.input_dim",
                ..
            })
        ));
    }

    #[test]
    fn arms_parse_and_apply() {
        assert_eq!(
            parse_arms("baseline,+LB,+LS,+both").unwrap(),
            vec![
                Arm::Baseline,
                Arm::PlusBoundary,
                Arm::PlusShape,
                Arm::PlusBoth
            ]
        );
        assert_eq!(
            parse_arms("estart:0,10,20,30").unwrap(),
            vec![
                Arm::EStart(0),
                Arm::EStart(10),
                Arm::EStart(20),
                Arm::EStart(30)
            ]
        );
        assert_eq!(
            parse_arms("allframes,decoupled").unwrap(),
            vec![Arm::AllFrames, Arm::Decoupled]
        );
        assert_eq!(
            parse_arms("baseline,bogus"),
            Err(UnknownArm("bogus".into()))
        );
        for arm in [Arm::PlusBoth, Arm::EStart(7), Arm::AllFrames] {
            assert_eq!(arm.to_string().parse::<Arm>().unwrap(), arm);
        }
        let base = TrainConfig::default();
        assert_eq!(Arm::Baseline.apply(&base).loss.lambda_b, 0.0);
        assert_eq!(Arm::PlusBoundary.apply(&base).loss.lambda_s, 0.0);
        assert_eq!(Arm::EStart(0).apply(&base).loss.e_start, 0);
        assert_eq!(
            Arm::AllFrames.apply(&base).loss.assignment,
            Assignment::AllFrames
        );
    }

    #[test]
    fn ablation_aggregates_over_seeds() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg(&corpus)
        };
        let table = ablate(&corpus, &cfg, &[Arm::Baseline, Arm::PlusBoth], &[0, 1, 2]);
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert_eq!(row.runs.len(), 3);
            let (m, s) = mean_sd(&row.runs.iter().map(|r| r.summary).collect::<Vec<_>>());
            assert_eq!((m, s), (row.mean, row.sd));
        }
        assert_eq!(table.to_csv().lines().count(), 3);
    }

    #[test]
    fn ablation_keeps_going_after_a_failed_arm() {
        let corpus = tiny_corpus();
        let mut cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg(&corpus)
        };
        cfg.loss.eps = 1.0; // invalid
        let table = ablate(&corpus, &cfg, &[Arm::Baseline], &[0]);
        assert_eq!(table.rows[0].errors.len(), 1);
        assert!(table.rows[0].runs.is_empty());
    }

    #[test]
    fn mean_sd_of_known_values() {
        let (m, s) = mean_sd(&[[1.0; 5], [3.0; 5]]);
        assert_eq!(m, [2.0; 5]);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
    }
}
