//! Blended task/distillation losses.
//!
//! The student minimizes `(1 - alpha) * task + alpha * distance`, where the
//! task term is cross-entropy (classification) or squared error (regression)
//! against ground truth, and the distance term pulls the student toward the
//! frozen teacher: KL divergence between class distributions at the output
//! layer, or cosine distance between penultimate representations. `alpha = 0`
//! ignores the teacher entirely; `alpha = 1` ignores the labels entirely.
//!
//! Every loss here returns its analytic gradient alongside the value; the
//! teacher inputs are constants, so no gradient ever reaches teacher
//! parameters.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Class;
use crate::nn::softmax_rows;
use crate::windowing::Task;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Norms below this make the cosine distance degenerate (defined as 1).
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("representation dimensions differ: student {student}, teacher {teacher}")]
    DimensionMismatch { student: usize, teacher: usize },
    #[error("unsupported loss configuration: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Kl,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    Output,
    Penultimate,
}

/// How the student loss is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LupiLossConfig {
    pub task: Task,
    pub alpha: f64,
    pub distance: DistanceKind,
    pub student_layer: LayerId,
    pub teacher_layer: LayerId,
    /// Softmax temperature for the KL term; 1 reproduces the plain setting.
    pub temperature: f64,
}

impl LupiLossConfig {
    /// The canonical configuration per task: KL over output distributions
    /// for classification, cosine over penultimate activations for
    /// regression.
    pub fn default_for(task: Task, alpha: f64) -> Self {
        match task {
            Task::Classification => Self {
                task,
                alpha,
                distance: DistanceKind::Kl,
                student_layer: LayerId::Output,
                teacher_layer: LayerId::Output,
                temperature: 1.0,
            },
            Task::Regression => Self {
                task,
                alpha,
                distance: DistanceKind::Cosine,
                student_layer: LayerId::Penultimate,
                teacher_layer: LayerId::Penultimate,
                temperature: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::BadAlpha(self.alpha));
        }
        if self.temperature <= 0.0 {
            return Err(LossError::Unsupported("temperature must be positive".into()));
        }
        let canonical = *self == Self::default_for(self.task, self.alpha)
            || Self { temperature: 1.0, ..*self } == Self::default_for(self.task, self.alpha);
        if !canonical {
            return Err(LossError::Unsupported(
                "only the canonical layer/distance pairings are trainable \
                 (output/output KL for classification, penultimate/penultimate \
                 cosine for regression); representation adapters are out of scope"
                    .into(),
            ));
        }
        Ok(())
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `-ln p[label]`, with the probability floored at `1e-12`.
pub fn cross_entropy(probabilities: &[f64], label: Class) -> f64 {
    let idx = match label {
        Class::Low => 0,
        Class::High => 1,
    };
    -floored_ln(probabilities[idx])
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)`, both distributions floored.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (floored_ln(pi) - floored_ln(qi))
            }
        })
        .sum()
}

/// `1 - cos(u, v)`, in `[0, 2]`; degenerate norms give distance 1.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= NORM_FLOOR || nv <= NORM_FLOOR {
        return 1.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    1.0 - dot / (nu * nv)
}

/// Eq-style blend of two already-evaluated terms.
pub fn blend(task_term: f64, distance_term: f64, alpha: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::BadAlpha(alpha));
    }
    Ok((1.0 - alpha) * task_term + alpha * distance_term)
}

/// Loss components for logging: the task term and the distance term,
/// averaged over the batch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub task: f64,
    pub distance: f64,
}

/// Classification student loss over a batch.
///
/// `loss_i = (1 - alpha) * CE(softmax(z_i), y_i) + alpha * KL(t_i || softmax(z_i))`
///
/// Returns the mean loss, its components, and `d loss / d logits`.
pub fn student_loss_classification(
    student_logits: &Array2<f64>,
    teacher_probs: Option<&Array2<f64>>,
    labels: &[Class],
    alpha: f64,
    temperature: f64,
) -> Result<(LossComponents, Array2<f64>), LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::BadAlpha(alpha));
    }
    let b = student_logits.nrows();
    debug_assert_eq!(labels.len(), b);
    if alpha > 0.0 && teacher_probs.is_none() {
        return Err(LossError::Unsupported(
            "alpha > 0 requires teacher probabilities".into(),
        ));
    }
    let probs = softmax_rows(student_logits);
    let inv_b = 1.0 / b as f64;
    let mut d_logits = Array2::<f64>::zeros(student_logits.dim());
    let mut task_sum = 0.0;
    let mut dist_sum = 0.0;
    let (probs_t, d_temp_scale) = if temperature != 1.0 {
        let scaled = student_logits.mapv(|z| z / temperature);
        (Some(softmax_rows(&scaled)), 1.0 / temperature)
    } else {
        (None, 1.0)
    };
    for i in 0..b {
        let y = match labels[i] {
            Class::Low => 0,
            Class::High => 1,
        };
        let s = probs.row(i);
        let ce = -floored_ln(s[y]);
        task_sum += ce;
        if alpha > 0.0 {
            let t = teacher_probs.expect("checked above").row(i);
            let s_for_kl = probs_t.as_ref().map(|p| p.row(i)).unwrap_or(s);
            let kl = kl_divergence(t.as_slice().unwrap(), s_for_kl.as_slice().unwrap());
            dist_sum += kl;
            for j in 0..s.len() {
                let task_grad = (1.0 - alpha) * (s[j] - if j == y { 1.0 } else { 0.0 });
                let dist_grad = alpha * (s_for_kl[j] - t[j]) * d_temp_scale;
                d_logits[[i, j]] = (task_grad + dist_grad) * inv_b;
            }
        } else {
            for j in 0..s.len() {
                d_logits[[i, j]] =
                    (s[j] - if j == y { 1.0 } else { 0.0 }) * inv_b;
            }
        }
    }
    let task = task_sum * inv_b;
    let distance = dist_sum * inv_b;
    Ok((
        LossComponents { total: (1.0 - alpha) * task + alpha * distance, task, distance },
        d_logits,
    ))
}

/// Regression student loss over a batch.
///
/// `loss_i = (1 - alpha) * (o_i - y_i)^2 + alpha * (1 - cos(p_i, t_i))`
///
/// Returns the mean loss, components, `d loss / d output` and
/// `d loss / d penultimate`.
#[allow(clippy::type_complexity)]
pub fn student_loss_regression(
    student_output: &Array2<f64>,
    student_penult: &Array2<f64>,
    teacher_penult: Option<&Array2<f64>>,
    targets: &[f64],
    alpha: f64,
) -> Result<(LossComponents, Array2<f64>, Option<Array2<f64>>), LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::BadAlpha(alpha));
    }
    let b = student_output.nrows();
    debug_assert_eq!(targets.len(), b);
    if alpha > 0.0 {
        let t = teacher_penult.ok_or_else(|| {
            LossError::Unsupported("alpha > 0 requires teacher penultimate activations".into())
        })?;
        if t.ncols() != student_penult.ncols() {
            return Err(LossError::DimensionMismatch {
                student: student_penult.ncols(),
                teacher: t.ncols(),
            });
        }
    }
    let inv_b = 1.0 / b as f64;
    let mut d_output = Array2::<f64>::zeros(student_output.dim());
    let mut task_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut d_penult = if alpha > 0.0 {
        Some(Array2::<f64>::zeros(student_penult.dim()))
    } else {
        None
    };
    for i in 0..b {
        let o = student_output[[i, 0]];
        let err = o - targets[i];
        task_sum += err * err;
        d_output[[i, 0]] = 2.0 * (1.0 - alpha) * err * inv_b;
        if alpha > 0.0 {
            let u = student_penult.row(i);
            let v = teacher_penult.expect("checked above").row(i);
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu <= NORM_FLOOR || nv <= NORM_FLOOR {
                dist_sum += 1.0;
                // degenerate direction: no useful gradient
            } else {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                let cos = dot / (nu * nv);
                dist_sum += 1.0 - cos;
                let dp = d_penult.as_mut().expect("allocated for alpha > 0");
                let scale = alpha * inv_b;
                for j in 0..u.len() {
                    // d(1 - cos)/du_j = (cos * u_j / |u|^2 - v_j / (|u||v|))
                    let g = cos * u[j] / (nu * nu) - v[j] / (nu * nv);
                    dp[[i, j]] = scale * g;
                }
            }
        }
    }
    let task = task_sum * inv_b;
    let distance = dist_sum * inv_b;
    Ok((
        LossComponents { total: (1.0 - alpha) * task + alpha * distance, task, distance },
        d_output,
        d_penult,
    ))
}

/// Plain supervised losses for teachers and baselines: classification.
pub fn supervised_classification(
    logits: &Array2<f64>,
    labels: &[Class],
) -> (f64, Array2<f64>) {
    let (components, d) =
        student_loss_classification(logits, None, labels, 0.0, 1.0).expect("alpha 0 is valid");
    (components.total, d)
}

/// Plain supervised losses for teachers and baselines: regression.
pub fn supervised_regression(output: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let penult = Array2::zeros((output.nrows(), 1));
    let (components, d, _) = student_loss_regression(output, &penult, None, targets, 0.0)
        .expect("alpha 0 is valid");
    (components.total, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn cross_entropy_frozen_values() {
        assert_relative_eq!(
            cross_entropy(&[0.5, 0.5], Class::Low),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_relative_eq!(cross_entropy(&[1.0, 0.0], Class::Low), 0.0);
        // -ln 0.1 computed with arbitrary precision: 2.302585092994046
        assert_relative_eq!(
            cross_entropy(&[0.9, 0.1], Class::High),
            2.302585092994046,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_frozen_values_and_asymmetry() {
        let p = [0.3, 0.7];
        assert_relative_eq!(kl_divergence(&p, &p), 0.0, epsilon = 1e-12);
        // 0.5 ln(5/9) + 0.5 ln 5 = ln(5/3) = 0.5108256237659907
        let a = [0.5, 0.5];
        let b = [0.9, 0.1];
        assert_relative_eq!(kl_divergence(&a, &b), 0.5108256237659907, epsilon = 1e-12);
        assert!((kl_divergence(&a, &b) - kl_divergence(&b, &a)).abs() > 1e-3);
        assert!(kl_divergence(&b, &a) >= 0.0);
    }

    #[test]
    fn cosine_distance_reference_points() {
        assert_relative_eq!(cosine_distance(&[1.0, 1.0], &[1.0, 1.0]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_relative_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        // positive rescaling invariance
        assert_relative_eq!(
            cosine_distance(&[0.2, 0.4, -0.1], &[3.0, 1.0, 0.5]),
            cosine_distance(&[2.0, 4.0, -1.0], &[0.3, 0.1, 0.05]),
            epsilon = 1e-12
        );
        // degenerate norm rule
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let task = 0.6;
        let dist = 0.2;
        assert_eq!(blend(task, dist, 0.0).unwrap(), task);
        assert_eq!(blend(task, dist, 1.0).unwrap(), dist);
        assert_relative_eq!(blend(task, dist, 0.5).unwrap(), 0.4);
        assert_relative_eq!(blend(0.04, 0.3, 0.5).unwrap(), 0.17);
        assert!(blend(task, dist, 1.5).is_err());
    }

    #[test]
    fn classification_loss_alpha_zero_is_pure_ce() {
        let logits = array![[0.3, -0.2], [1.5, 0.1]];
        let labels = [Class::Low, Class::High];
        let (with_teacher, _) = student_loss_classification(
            &logits,
            Some(&array![[0.9, 0.1], [0.2, 0.8]]),
            &labels,
            0.0,
            1.0,
        )
        .unwrap();
        let (ce_only, _) = student_loss_classification(&logits, None, &labels, 0.0, 1.0).unwrap();
        assert_eq!(with_teacher.total, ce_only.total);
        assert_eq!(with_teacher.total, with_teacher.task);
        assert_eq!(with_teacher.distance, 0.0);
    }

    #[test]
    fn classification_loss_alpha_one_is_pure_kl() {
        let logits = array![[0.3, -0.2], [1.5, 0.1]];
        let teacher = array![[0.9, 0.1], [0.2, 0.8]];
        let labels = [Class::Low, Class::High];
        let (c, _) =
            student_loss_classification(&logits, Some(&teacher), &labels, 1.0, 1.0).unwrap();
        assert_eq!(c.total, c.distance);
        let probs = softmax_rows(&logits);
        let expect = 0.5
            * (kl_divergence(&[0.9, 0.1], probs.row(0).as_slice().unwrap())
                + kl_divergence(&[0.2, 0.8], probs.row(1).as_slice().unwrap()));
        assert_relative_eq!(c.total, expect, epsilon = 1e-12);
    }

    #[test]
    fn classification_blend_is_affine() {
        let logits = array![[0.4, -0.6]];
        let teacher = array![[0.25, 0.75]];
        let labels = [Class::High];
        let (c0, _) =
            student_loss_classification(&logits, Some(&teacher), &labels, 0.0, 1.0).unwrap();
        let (c1, _) =
            student_loss_classification(&logits, Some(&teacher), &labels, 1.0, 1.0).unwrap();
        let (ch, _) =
            student_loss_classification(&logits, Some(&teacher), &labels, 0.5, 1.0).unwrap();
        assert_relative_eq!(ch.total, 0.5 * c0.total + 0.5 * c1.total, epsilon = 1e-12);
    }

    #[test]
    fn regression_loss_endpoints() {
        let out = array![[0.4], [0.1]];
        let penult = array![[1.0, 0.0], [0.0, 1.0]];
        let teacher = array![[2.0, 0.0], [0.0, 3.0]];
        let targets = [0.2, 0.3];
        let (c0, _, dp0) =
            student_loss_regression(&out, &penult, Some(&teacher), &targets, 0.0).unwrap();
        assert_eq!(c0.total, c0.task);
        assert!(dp0.is_none());
        // alpha = 1 with parallel representations: zero loss
        let (c1, d_out, _) =
            student_loss_regression(&out, &penult, Some(&teacher), &targets, 1.0).unwrap();
        assert_relative_eq!(c1.total, 0.0, epsilon = 1e-12);
        assert_eq!(d_out[[0, 0]], 0.0);
    }

    #[test]
    fn regression_dimension_mismatch_is_config_error() {
        let out = array![[0.4]];
        let penult = array![[1.0, 0.0]];
        let teacher = array![[1.0, 0.0, 0.0]];
        assert!(matches!(
            student_loss_regression(&out, &penult, Some(&teacher), &[0.0], 0.5),
            Err(LossError::DimensionMismatch { student: 2, teacher: 3 })
        ));
    }

    #[test]
    fn classification_gradients_match_finite_differences() {
        let mut logits = array![[0.3, -0.2], [1.5, 0.1], [-0.7, 0.4]];
        let teacher = array![[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]];
        let labels = [Class::Low, Class::High, Class::Low];
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let (_, grad) =
                student_loss_classification(&logits, Some(&teacher), &labels, alpha, 1.0).unwrap();
            let eps = 1e-6;
            for i in 0..3 {
                for j in 0..2 {
                    logits[[i, j]] += eps;
                    let (cp, _) = student_loss_classification(
                        &logits, Some(&teacher), &labels, alpha, 1.0,
                    )
                    .unwrap();
                    logits[[i, j]] -= 2.0 * eps;
                    let (cm, _) = student_loss_classification(
                        &logits, Some(&teacher), &labels, alpha, 1.0,
                    )
                    .unwrap();
                    logits[[i, j]] += eps;
                    let fd = (cp.total - cm.total) / (2.0 * eps);
                    assert_relative_eq!(grad[[i, j]], fd, max_relative = 1e-6, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn regression_gradients_match_finite_differences() {
        let mut out = array![[0.4], [0.1]];
        let mut penult = array![[1.0, 0.3, -0.2], [0.4, 1.0, 0.6]];
        let teacher = array![[2.0, 0.1, 0.0], [0.0, 3.0, 1.0]];
        let targets = [0.2, 0.3];
        for alpha in [0.0, 0.5, 1.0] {
            let (_, d_out, d_pen) =
                student_loss_regression(&out, &penult, Some(&teacher), &targets, alpha).unwrap();
            let eps = 1e-6;
            for i in 0..2 {
                out[[i, 0]] += eps;
                let (cp, _, _) =
                    student_loss_regression(&out, &penult, Some(&teacher), &targets, alpha)
                        .unwrap();
                out[[i, 0]] -= 2.0 * eps;
                let (cm, _, _) =
                    student_loss_regression(&out, &penult, Some(&teacher), &targets, alpha)
                        .unwrap();
                out[[i, 0]] += eps;
                let fd = (cp.total - cm.total) / (2.0 * eps);
                assert_relative_eq!(d_out[[i, 0]], fd, max_relative = 1e-6, epsilon = 1e-10);
            }
            if let Some(dp) = d_pen {
                for i in 0..2 {
                    for j in 0..3 {
                        penult[[i, j]] += eps;
                        let (cp, _, _) = student_loss_regression(
                            &out, &penult, Some(&teacher), &targets, alpha,
                        )
                        .unwrap();
                        penult[[i, j]] -= 2.0 * eps;
                        let (cm, _, _) = student_loss_regression(
                            &out, &penult, Some(&teacher), &targets, alpha,
                        )
                        .unwrap();
                        penult[[i, j]] += eps;
                        let fd = (cp.total - cm.total) / (2.0 * eps);
                        assert_relative_eq!(dp[[i, j]], fd, max_relative = 1e-6, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn canonical_configs_validate_and_exotic_ones_do_not() {
        assert!(LupiLossConfig::default_for(Task::Classification, 0.5).validate().is_ok());
        assert!(LupiLossConfig::default_for(Task::Regression, 1.0).validate().is_ok());
        let bad = LupiLossConfig {
            distance: DistanceKind::Cosine,
            ..LupiLossConfig::default_for(Task::Classification, 0.5)
        };
        assert!(bad.validate().is_err());
        let bad_alpha = LupiLossConfig { alpha: 1.2, ..LupiLossConfig::default_for(Task::Regression, 0.0) };
        assert!(matches!(bad_alpha.validate(), Err(LossError::BadAlpha(_))));
    }
}
