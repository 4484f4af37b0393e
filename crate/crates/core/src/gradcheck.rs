//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
    /// Coordinates passed over because the probe crossed a kink.
    pub coordinates_skipped: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("gradient check failed: rel. error {:.3e} at coordinate {} (analytic {:.9e}, numeric {:.9e})",
        .0.max_rel_error, .0.worst_coordinate, .0.analytic, .0.numeric)]
    CheckFailed(FdReport),
    #[error("step h = {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
    #[error("gradient has {got} entries, point has {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates sampled per check; every coordinate is checked when the
    /// point has fewer.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            coordinates: 200,
            seed: 0,
        }
    }
}

impl GradCheck {
    /// Compares `analytic` (the gradient of `value_fn` at `x`) against
    /// central differences on a seeded random subset of coordinates.
    pub fn check<F>(
        &self,
        x: &[f64],
        analytic: &[f64],
        value_fn: F,
    ) -> Result<FdReport, GradCheckError>
    where
        F: FnMut(&[f64]) -> f64,
    {
        self.check_piecewise(x, analytic, value_fn, |_| ())
    }

    /// As [`GradCheck::check`] for piecewise-smooth functions: `piece(x)`
    /// identifies the smooth piece containing `x`, and a coordinate whose
    /// ±h probes land on different pieces is replaced by another one.
    pub fn check_piecewise<F, P, K>(
        &self,
        x: &[f64],
        analytic: &[f64],
        mut value_fn: F,
        mut piece: P,
    ) -> Result<FdReport, GradCheckError>
    where
        F: FnMut(&[f64]) -> f64,
        P: FnMut(&[f64]) -> K,
        K: PartialEq,
    {
        if !(1e-6..=1e-3).contains(&self.h) {
            return Err(GradCheckError::InvalidStep(self.h));
        }
        if analytic.len() != x.len() {
            return Err(GradCheckError::LengthMismatch {
                expected: x.len(),
                got: analytic.len(),
            });
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        if x.len() > self.coordinates {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        }
        let mut probe = x.to_vec();
        let mut report = FdReport {
            max_rel_error: 0.0,
            worst_coordinate: order.first().copied().unwrap_or(0),
            analytic: 0.0,
            numeric: 0.0,
            coordinates_checked: 0,
            coordinates_skipped: 0,
        };
        for &i in &order {
            if report.coordinates_checked == self.coordinates {
                break;
            }
            let orig = probe[i];
            probe[i] = orig + self.h;
            let plus = value_fn(&probe);
            let plus_piece = piece(&probe);
            probe[i] = orig - self.h;
            let minus = value_fn(&probe);
            let minus_piece = piece(&probe);
            probe[i] = orig;
            if plus_piece != minus_piece {
                report.coordinates_skipped += 1;
                continue;
            }
            report.coordinates_checked += 1;
            let numeric = (plus - minus) / (2.0 * self.h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_coordinate = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
        if report.max_rel_error > self.tolerance {
            Err(GradCheckError::CheckFailed(report))
        } else {
            Ok(report)
        }
    }
}

/// Shorthand for [`GradCheck::check`] with 200 sampled coordinates.
pub fn finite_difference_check<F>(
    value_fn: F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
) -> Result<FdReport, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    GradCheck {
        h,
        tolerance,
        ..GradCheck::default()
    }
    .check(x, analytic, value_fn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient() {
        let x = vec![0.3, -1.2, 2.0];
        let f = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let g: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        let rep = finite_difference_check(f, &x, &g, 1e-5, 1e-6).unwrap();
        assert_eq!(rep.coordinates_checked, 3);
    }

    #[test]
    fn rejects_wrong_gradient() {
        let x = vec![1.0, 2.0];
        let f = |v: &[f64]| v[0] * v[1];
        let err = finite_difference_check(f, &x, &[2.0, 2.0], 1e-5, 1e-4).unwrap_err();
        match err {
            GradCheckError::CheckFailed(r) => assert_eq!(r.worst_coordinate, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn samples_subset_of_large_inputs() {
        let x = vec![0.5; 1000];
        let g = vec![1.0; 1000];
        let rep =
            finite_difference_check(|v: &[f64]| v.iter().sum::<f64>(), &x, &g, 1e-5, 1e-8).unwrap();
        assert_eq!(rep.coordinates_checked, 200);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let r = finite_difference_check(|_: &[f64]| 0.0, &[0.0], &[0.0], 0.1, 1e-4);
        assert_eq!(r, Err(GradCheckError::InvalidStep(0.1)));
    }

    #[test]
    fn piecewise_check_skips_probes_across_a_kink() {
        // |x| at x = 2e-6: the ±1e-5 probe straddles 0
        let x = vec![2e-6, 1.0];
        let f = |v: &[f64]| v[0].abs() * 1e3 + v[1];
        let g = vec![1e3, 1.0];
        assert!(GradCheck::default().check(&x, &g, f).is_err());
        let rep = GradCheck::default()
            .check_piecewise(&x, &g, f, |v| v[0] > 0.0)
            .unwrap();
        assert_eq!((rep.coordinates_checked, rep.coordinates_skipped), (1, 1));
    }
}
