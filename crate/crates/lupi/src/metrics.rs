//! Performance metrics: accuracy for classification, Pearson and concordance
//! correlation for regression.
//!
//! PCC and CCC use population moments (divide by `n`). Lin's concordance
//! coefficient scales the covariance by variance *and* mean disagreement, so
//! `|CCC| <= |PCC|` always holds and a constant offset between two perfectly
//! correlated series costs concordance but not correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {min} observations, got {got}")]
    TooFewObservations { min: usize, got: usize },
    #[error("correlation undefined: {0} series is constant")]
    ConstantSeries(&'static str),
    #[error("empty input")]
    Empty,
}

/// Binary affect class after thresholding a continuous label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Low,
    High,
}

/// Fraction of exact prediction/label matches.
pub fn accuracy(predictions: &[Class], labels: &[Class]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Constant classifier that always answers the modal training class.
///
/// Ties break toward [`Class::Low`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MajorityBaseline {
    pub class: Class,
}

impl MajorityBaseline {
    pub fn fit(train_labels: &[Class]) -> Result<Self, MetricsError> {
        if train_labels.is_empty() {
            return Err(MetricsError::Empty);
        }
        let high = train_labels.iter().filter(|c| **c == Class::High).count();
        let low = train_labels.len() - high;
        let class = if high > low { Class::High } else { Class::Low };
        Ok(Self { class })
    }

    pub fn predict(&self, n: usize) -> Vec<Class> {
        vec![self.class; n]
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn covariance(xs: &[f64], ys: &[f64], mx: f64, my: f64) -> f64 {
    let n = xs.len() as f64;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / n
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFewObservations { min: 2, got: xs.len() });
    }
    Ok(())
}

/// Pearson correlation with population moments.
///
/// A constant series has no defined correlation; the error is surfaced rather
/// than coerced to zero so degenerate constant predictors stay visible.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check_pair(xs, ys)?;
    let (mx, vx) = moments(xs);
    let (my, vy) = moments(ys);
    if vx == 0.0 {
        return Err(MetricsError::ConstantSeries("first"));
    }
    if vy == 0.0 {
        return Err(MetricsError::ConstantSeries("second"));
    }
    let r = covariance(xs, ys, mx, my) / (vx.sqrt() * vy.sqrt());
    Ok(r.clamp(-1.0, 1.0))
}

/// Lin's concordance correlation: `2*cov / (var_x + var_y + (mean_x - mean_y)^2)`.
///
/// Two identical constant series agree perfectly (CCC 1). A single constant
/// series otherwise leaves the coefficient undefined, same as [`pcc`].
pub fn ccc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check_pair(xs, ys)?;
    let (mx, vx) = moments(xs);
    let (my, vy) = moments(ys);
    if vx == 0.0 && vy == 0.0 && mx == my {
        return Ok(1.0);
    }
    if vx == 0.0 {
        return Err(MetricsError::ConstantSeries("first"));
    }
    if vy == 0.0 {
        return Err(MetricsError::ConstantSeries("second"));
    }
    let c = 2.0 * covariance(xs, ys, mx, my) / (vx + vy + (mx - my) * (mx - my));
    Ok(c.clamp(-1.0, 1.0))
}

/// Metric values for one evaluated (repeat, fold) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    pub repeat: usize,
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: Option<f64>,
    /// `None` when the correlation was undefined, never coerced to 0.
    pub pcc: Option<f64>,
    pub ccc: Option<f64>,
    /// Diagnostic for undefined correlations.
    pub note: Option<String>,
}

/// Per-cell metrics plus aggregates across the repeated cross-validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub cells: Vec<CellMetrics>,
}

/// Mean and normal-approximation 95% confidence half-width of a sample.
pub fn mean_ci95(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    // z for a two-sided 95% interval
    const Z95: f64 = 1.959_963_984_540_054;
    Some((mean, Z95 * (var / n).sqrt()))
}

impl MetricsReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.accuracy).collect()
    }

    pub fn pccs(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.pcc).collect()
    }

    pub fn cccs(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.ccc).collect()
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        mean_ci95(&self.accuracies()).map(|(m, _)| m)
    }

    pub fn mean_ccc(&self) -> Option<f64> {
        mean_ci95(&self.cccs()).map(|(m, _)| m)
    }

    pub fn mean_pcc(&self) -> Option<f64> {
        mean_ci95(&self.pccs()).map(|(m, _)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn accuracy_basics() {
        use Class::*;
        let l = [High, Low, High, Low];
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        let flipped = [Low, High, Low, High];
        assert_eq!(accuracy(&flipped, &l).unwrap(), 0.0);
        let three = [High, Low, High, High];
        assert_eq!(accuracy(&three, &l).unwrap(), 0.75);
    }

    #[test]
    fn majority_baseline_modal_class_and_tie() {
        use Class::*;
        let train = [High, High, High, Low, Low];
        let mb = MajorityBaseline::fit(&train).unwrap();
        assert_eq!(mb.class, High);
        assert_eq!(mb.predict(3), vec![High, High, High]);
        // 50/50 tie goes to Low
        let tie = [High, Low];
        assert_eq!(MajorityBaseline::fit(&tie).unwrap().class, Low);
    }

    #[test]
    fn pcc_exact_cases() {
        let x = [1.0, 2.0, 3.0];
        assert_relative_eq!(pcc(&x, &x).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pcc(&x, &neg).unwrap(), -1.0);
        let y = [2.0, 4.0, 6.0];
        assert_relative_eq!(pcc(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn ccc_exact_cases() {
        let x = [1.0, 2.0, 3.0];
        assert_relative_eq!(ccc(&x, &x).unwrap(), 1.0);
        // Frozen: 2*cov/(vx+vy+(mx-my)^2) with population moments is 4/11.
        let y = [2.0, 4.0, 6.0];
        assert_relative_eq!(ccc(&x, &y).unwrap(), 4.0 / 11.0, epsilon = 1e-12);
        // A mean shift costs concordance but not correlation.
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.7).collect();
        assert_relative_eq!(pcc(&x, &shifted).unwrap(), 1.0);
        assert!(ccc(&x, &shifted).unwrap() < 1.0);
    }

    #[test]
    fn constant_series_is_undefined_not_zero() {
        let c = [0.5, 0.5, 0.5];
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(pcc(&c, &x), Err(MetricsError::ConstantSeries(_))));
        assert!(matches!(ccc(&x, &c), Err(MetricsError::ConstantSeries(_))));
        // equal constants agree perfectly
        assert_eq!(ccc(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ccc_magnitude_never_exceeds_pcc() {
        // scale/mean disagreement only shrinks the coefficient
        let x = [0.1, 0.9, 0.4, 0.7, 0.2];
        let y = [0.3, 1.5, 0.9, 1.1, 0.2];
        let p = pcc(&x, &y).unwrap();
        let c = ccc(&x, &y).unwrap();
        assert!(c.abs() <= p.abs() + 1e-12);
    }

    #[test]
    fn ci95_halfwidth_matches_hand_computation() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        let (mean, hw) = mean_ci95(&vals).unwrap();
        assert_relative_eq!(mean, 2.5);
        // sample sd = sqrt(5/3), se = sd/2
        let se = (5.0f64 / 3.0).sqrt() / 2.0;
        assert_relative_eq!(hw, 1.959963984540054 * se, epsilon = 1e-12);
    }
}
