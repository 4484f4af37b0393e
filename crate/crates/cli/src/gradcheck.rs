//! Finite-difference audit of every loss and of each backbone parameter block.

use std::fmt;

use dualseg_core::gradcheck::{FdReport, GradCheck, GradCheckError};
use dualseg_core::losses::{boundary_bce, model_loss, proposed_loss, segment_shape_loss, Frames};
use dualseg_core::model::{loss_and_gradient, relu_pattern};
use dualseg_core::{
    boundary_targets, extract_segments, region_partition, total_loss, BackboneConfig,
    LabelSequence, LossConfig, Matrix, Parameters, ProbabilityMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::GradcheckSettings;

// Small enough that segments of a 24-frame sequence keep an interior.
const WINDOW: usize = 2;
const MARGIN: usize = 1;

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub max_rel_error: f64,
    /// Where the worst error occurred.
    pub location: String,
    pub coordinates_checked: usize,
    pub coordinates_skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub lines: Vec<CheckLine>,
    pub warmup_shape_gradient_zero: bool,
    pub warmup_epoch: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.warmup_shape_gradient_zero && self.lines.iter().all(|l| l.passed)
    }

    pub fn worst(&self) -> Option<&CheckLine> {
        self.lines
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "{:<44} {}  max rel err {:.3e}  ({} coords, {} skipped at kinks)",
                l.name,
                if l.passed { "pass" } else { "FAIL" },
                l.max_rel_error,
                l.coordinates_checked,
                l.coordinates_skipped
            )?;
        }
        writeln!(
            f,
            "{:<44} {}  shape-loss gradient at epoch {} is exactly zero",
            "warm-up",
            if self.warmup_shape_gradient_zero {
                "pass"
            } else {
                "FAIL"
            },
            self.warmup_epoch
        )?;
        if let Some(w) = self.worst() {
            writeln!(
                f,
                "overall: {}  worst rel err {:.3e} in {} at {}",
                if self.passed() { "pass" } else { "FAIL" },
                w.max_rel_error,
                w.name,
                w.location
            )?;
        }
        Ok(())
    }
}

/// Accumulates the reports of several checks into one line.
struct Tally {
    name: String,
    tolerance: f64,
    worst: f64,
    location: String,
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            worst: 0.0,
            location: "-".into(),
            checked: 0,
            skipped: 0,
        }
    }

    fn add(
        &mut self,
        trial: usize,
        r: Result<FdReport, GradCheckError>,
        describe: impl Fn(usize) -> String,
    ) {
        let rep = match r {
            Ok(rep) | Err(GradCheckError::CheckFailed(rep)) => rep,
            Err(e) => {
                self.worst = f64::INFINITY;
                self.location = format!("input {trial}: {e}");
                return;
            }
        };
        self.checked += rep.coordinates_checked;
        self.skipped += rep.coordinates_skipped;
        if rep.max_rel_error > self.worst || !rep.max_rel_error.is_finite() {
            self.worst = rep.max_rel_error;
            self.location = format!(
                "input {trial}, {} (analytic {:.6e}, numeric {:.6e})",
                describe(rep.worst_coordinate),
                rep.analytic,
                rep.numeric
            );
        }
    }

    fn finish(self) -> CheckLine {
        CheckLine {
            passed: self.worst <= self.tolerance,
            name: self.name,
            max_rel_error: self.worst,
            location: self.location,
            coordinates_checked: self.checked,
            coordinates_skipped: self.skipped,
        }
    }
}

fn random_labels(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> LabelSequence {
    let k = rng.random_range(2..=3usize).min(frames / 6).max(1);
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() + 1 < k {
        let c = rng.random_range(6..=frames - 6);
        if cuts.iter().all(|&x| x.abs_diff(c) >= 6) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.push(frames);
    let mut labels = Vec::with_capacity(frames);
    let mut class = rng.random_range(0..classes);
    let mut start = 0;
    for &end in &cuts {
        labels.extend(std::iter::repeat_n(class, end - start));
        start = end;
        class = (class + rng.random_range(1..classes.max(2))) % classes;
    }
    LabelSequence::new(labels, classes).expect("labels in range")
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .expect("shape")
}

fn logit_location(cols: usize) -> impl Fn(usize) -> String {
    move |i| format!("logit row {} frame {}", i / cols, i % cols)
}

/// Runs every check. `fault` shifts all analytic gradients, which the suite
/// must then report as failures.
pub fn run(settings: &GradcheckSettings, base: &LossConfig, fault: bool) -> SuiteReport {
    let c = settings.num_classes.max(2);
    let t = settings.frames.max(18);
    let corrupt = |g: &mut [f64]| {
        if fault {
            g.iter_mut().for_each(|x| *x += 1e-2);
        }
    };
    let checker = |trial: usize| GradCheck {
        h: settings.h,
        tolerance: settings.tolerance,
        coordinates: settings.coordinates,
        seed: settings.seed.wrapping_add(trial as u64),
    };
    let loss_cfg = LossConfig {
        lambda_b: 1.0,
        lambda_s: 1.0,
        window_w: WINDOW,
        margin_delta: MARGIN,
        e_start: 0,
        ..*base
    };
    let eps = loss_cfg.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

    let mut bce = Tally::new("boundary_bce", settings.tolerance);
    let mut shape = Tally::new("segment_shape_loss", settings.tolerance);
    let mut model = Tally::new("model_loss", settings.tolerance);
    let mut total = Tally::new("total_loss", settings.tolerance);
    for trial in 0..settings.trials {
        let seq = random_labels(&mut rng, t, c);
        let logits = random_matrix(&mut rng, c + 1, t, 3.0);
        let region = region_partition(&seq, WINDOW);
        let non_boundary = region.non_boundary();
        let targets = boundary_targets(&seq);
        let segments = extract_segments(&seq);
        let x = logits.as_slice();
        let as_map = |v: &[f64]| {
            ProbabilityMap::from_logits(&Matrix::from_vec(c + 1, t, v.to_vec()).expect("shape"))
        };

        let bce_at = |v: &[f64]| {
            boundary_bce(
                &as_map(v).boundary_probs,
                &targets,
                Frames::Only(region.boundary()),
                eps,
            )
        };
        if let Ok(r) = bce_at(x) {
            let mut g = vec![0.0; x.len()];
            g[c * t..].copy_from_slice(&r.grad);
            corrupt(&mut g);
            let res = checker(trial).check(x, &g, |v| bce_at(v).map_or(f64::NAN, |r| r.value));
            bce.add(trial, res, logit_location(t));
        }

        let shape_at = |v: &[f64]| {
            segment_shape_loss(
                &as_map(v).class_probs,
                &segments,
                MARGIN,
                Frames::Only(&non_boundary),
                eps,
            )
        };
        if let Ok(r) = shape_at(x) {
            let mut g = vec![0.0; x.len()];
            g[..c * t].copy_from_slice(r.grad.as_slice());
            corrupt(&mut g);
            let res = checker(trial).check(x, &g, |v| shape_at(v).map_or(f64::NAN, |r| r.value));
            shape.add(trial, res, logit_location(t));
        }

        let model_at = |v: &[f64]| {
            model_loss(
                &as_map(v).class_probs,
                &seq,
                base.tmse_weight,
                base.tmse_clip,
                eps,
            )
        };
        if let Ok(r) = model_at(x) {
            let mut g = vec![0.0; x.len()];
            g[..c * t].copy_from_slice(r.grad.as_slice());
            corrupt(&mut g);
            let res = checker(trial).check(x, &g, |v| model_at(v).map_or(f64::NAN, |r| r.value));
            model.add(trial, res, logit_location(t));
        }

        let total_at = |v: &[f64]| total_loss(&as_map(v), &seq, &loss_cfg, 0);
        if let Ok((_, g)) = total_at(x) {
            let mut g = g.into_vec();
            corrupt(&mut g);
            let res =
                checker(trial).check(x, &g, |v| total_at(v).map_or(f64::NAN, |r| r.0.l_total));
            total.add(trial, res, logit_location(t));
        }
    }
    let mut lines = vec![bce.finish(), shape.finish(), model.finish(), total.finish()];

    // network L_total, block by block
    let backbone = BackboneConfig {
        num_stages: 1,
        layers_per_stage: 3,
        hidden_width: 5,
        num_classes: c,
        input_dim: 4,
        kernel_size: 3,
        boundary_channel: true,
        seed: settings.seed,
    };
    let block_names: Vec<String> = Parameters::init(&backbone)
        .expect("valid tiny backbone")
        .blocks
        .into_iter()
        .map(|b| b.name)
        .collect();
    let mut blocks: Vec<Tally> = block_names
        .iter()
        .map(|n| Tally::new(format!("network L_total: {n}"), settings.tolerance))
        .collect();
    for trial in 0..settings.trials {
        let cfg = BackboneConfig {
            seed: settings.seed.wrapping_add(1000 + trial as u64),
            ..backbone.clone()
        };
        let params = Parameters::init(&cfg).expect("valid tiny backbone");
        let features = random_matrix(&mut rng, cfg.input_dim, t, 1.0);
        let seq = random_labels(&mut rng, t, c);
        let Ok(lg) = loss_and_gradient(&cfg, &params, &features, &seq, &loss_cfg, 0) else {
            continue;
        };
        for (b, tally) in blocks.iter_mut().enumerate() {
            let mut g = lg.grads[b].clone();
            corrupt(&mut g);
            let with_block = |v: &[f64]| {
                let mut p = params.clone();
                p.blocks[b].values.copy_from_slice(v);
                p
            };
            let res = checker(trial).check_piecewise(
                &params.blocks[b].values,
                &g,
                |v| {
                    loss_and_gradient(&cfg, &with_block(v), &features, &seq, &loss_cfg, 0)
                        .map_or(f64::NAN, |r| r.breakdown.l_total)
                },
                |v| relu_pattern(&cfg, &with_block(v), &features).ok(),
            );
            tally.add(trial, res, |i| format!("index {i}"));
        }
    }
    lines.extend(blocks.into_iter().map(Tally::finish));

    // before the warm-up ends the shape term contributes nothing
    let warm = LossConfig {
        lambda_b: 0.0,
        lambda_s: 1.0,
        e_start: base.e_start.max(1),
        ..loss_cfg
    };
    let warmup_epoch = warm.e_start - 1;
    let seq = random_labels(&mut rng, t, c);
    let pm = ProbabilityMap::from_logits(&random_matrix(&mut rng, c + 1, t, 3.0));
    let warmup_shape_gradient_zero = proposed_loss(&pm, &seq, &warm, warmup_epoch)
        .map(|r| r.l_s == 0.0 && r.grad.as_slice().iter().all(|&g| g == 0.0))
        .unwrap_or(false);

    SuiteReport {
        lines,
        warmup_shape_gradient_zero,
        warmup_epoch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckSettings {
        GradcheckSettings {
            trials: 2,
            coordinates: 40,
            ..GradcheckSettings::default()
        }
    }

    #[test]
    fn suite_passes_on_correct_gradients() {
        let r = run(&quick(), &LossConfig::default(), false);
        assert!(r.passed(), "{r}");
        assert!(r.lines.len() > 4);
    }

    #[test]
    fn injected_fault_is_caught_everywhere() {
        let r = run(&quick(), &LossConfig::default(), true);
        assert!(!r.passed());
        assert!(r.lines.iter().all(|l| !l.passed), "{r}");
    }
}
