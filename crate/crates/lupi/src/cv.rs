//! Participant-grouped, repeated k-fold cross-validation.
//!
//! Fold assignment happens at the participant level: nobody's windows appear
//! on both sides of a split. One [`FoldPlan`] is fixed up front and every
//! compared model consumes the identical cells, which the plan's hash makes
//! checkable after the fact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{accuracy, ccc, pcc, CellMetrics, MetricsError};
use crate::train::Predictions;
use crate::windowing::{Task, WindowedDataset};

#[derive(Debug, Error)]
pub enum CvError {
    #[error("{participants} participants cannot fill {k} folds")]
    TooFewParticipants { participants: usize, k: usize },
    #[error("fold plan must have k >= 2 and repeats >= 1")]
    BadPlanShape,
}

/// Repeated grouped k-fold assignments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    /// `[repeat][fold]` -> participant ids, each participant in exactly one
    /// fold per repeat.
    pub assignments: Vec<Vec<Vec<String>>>,
}

/// Balanced partition: a seeded shuffle per repeat, dealt into `k` folds
/// whose sizes differ by at most one participant.
pub fn make_folds(
    participants: &[String],
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<FoldPlan, CvError> {
    if k < 2 || repeats < 1 {
        return Err(CvError::BadPlanShape);
    }
    if participants.len() < k {
        return Err(CvError::TooFewParticipants { participants: participants.len(), k });
    }
    let mut assignments = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut order = participants.to_vec();
        order.sort();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            crate::synth::derive_seed(seed, r as u64, "fold-shuffle"),
        );
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        order.shuffle(&mut rng);
        let n = order.len();
        let base = n / k;
        let extra = n % k;
        let mut folds = Vec::with_capacity(k);
        let mut cursor = 0;
        for f in 0..k {
            let size = base + usize::from(f < extra);
            folds.push(order[cursor..cursor + size].to_vec());
            cursor += size;
        }
        assignments.push(folds);
    }
    Ok(FoldPlan { k, repeats, seed, assignments })
}

/// One train/test cell of the plan.
#[derive(Debug, Clone)]
pub struct FoldCell {
    pub repeat: usize,
    pub fold: usize,
    pub train_participants: Vec<String>,
    pub test_participants: Vec<String>,
}

impl FoldPlan {
    /// All `repeats * k` cells in deterministic order.
    pub fn cells(&self) -> Vec<FoldCell> {
        let mut out = Vec::with_capacity(self.repeats * self.k);
        for (r, folds) in self.assignments.iter().enumerate() {
            for (f, test) in folds.iter().enumerate() {
                let train: Vec<String> = folds
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| *g != f)
                    .flat_map(|(_, ps)| ps.iter().cloned())
                    .collect();
                out.push(FoldCell {
                    repeat: r,
                    fold: f,
                    train_participants: train,
                    test_participants: test.clone(),
                });
            }
        }
        out
    }

    /// Hash of the exact assignments; identical for every model compared
    /// within one experiment.
    pub fn split_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.assignments).expect("serializable"));
        crate::corpus::hex_digest(hasher)
    }

    /// Partition sanity: every participant in exactly one fold per repeat.
    pub fn is_valid_partition(&self, participants: &[String]) -> bool {
        let universe: std::collections::BTreeSet<_> = participants.iter().collect();
        self.assignments.iter().all(|folds| {
            let mut seen = std::collections::BTreeSet::new();
            for p in folds.iter().flatten() {
                if !seen.insert(p) {
                    return false;
                }
            }
            seen == universe
        })
    }
}

/// Metrics of one evaluated cell. Undefined correlations surface as `None`
/// with a note, never as zeros.
pub fn cell_metrics(
    repeat: usize,
    fold: usize,
    task: Task,
    preds: &Predictions,
    ds: &WindowedDataset,
    test_idx: &[usize],
) -> CellMetrics {
    let mut cell = CellMetrics {
        repeat,
        fold,
        n_test: test_idx.len(),
        accuracy: None,
        pcc: None,
        ccc: None,
        note: None,
    };
    match task {
        Task::Classification => {
            let labels: Vec<_> = test_idx
                .iter()
                .map(|&i| ds.windows[i].class.expect("classification dataset"))
                .collect();
            cell.accuracy = accuracy(&preds.classes, &labels).ok();
        }
        Task::Regression => {
            let truth: Vec<f64> = test_idx.iter().map(|&i| ds.windows[i].label).collect();
            // report-time clipping into the declared label range
            let clipped: Vec<f64> =
                preds.scalars.iter().map(|v| ds.label_range.clip(*v)).collect();
            match pcc(&clipped, &truth) {
                Ok(v) => cell.pcc = Some(v),
                Err(MetricsError::ConstantSeries(which)) => {
                    cell.note = Some(format!("pcc undefined: {which} series constant"));
                }
                Err(e) => cell.note = Some(format!("pcc error: {e}")),
            }
            match ccc(&clipped, &truth) {
                Ok(v) => cell.ccc = Some(v),
                Err(MetricsError::ConstantSeries(which)) => {
                    let msg = format!("ccc undefined: {which} series constant");
                    cell.note = Some(match cell.note.take() {
                        Some(prev) => format!("{prev}; {msg}"),
                        None => msg,
                    });
                }
                Err(e) => cell.note = Some(format!("ccc error: {e}")),
            }
        }
    }
    cell
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    #[test]
    fn balanced_fold_sizes_for_23_participants() {
        let plan = make_folds(&names(23), 5, 1, 0).unwrap();
        let mut sizes: Vec<usize> = plan.assignments[0].iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![4, 4, 5, 5, 5]);
    }

    #[test]
    fn partitions_are_valid_across_seeds() {
        let ps = names(12);
        for seed in 0..200 {
            let plan = make_folds(&ps, 5, 3, seed).unwrap();
            assert!(plan.is_valid_partition(&ps), "seed {seed}");
        }
    }

    #[test]
    fn repeats_reshuffle() {
        let plan = make_folds(&names(20), 5, 2, 7).unwrap();
        assert_ne!(plan.assignments[0], plan.assignments[1]);
    }

    #[test]
    fn determinism_and_hash() {
        let a = make_folds(&names(10), 5, 5, 3).unwrap();
        let b = make_folds(&names(10), 5, 5, 3).unwrap();
        assert_eq!(a.split_hash(), b.split_hash());
        let c = make_folds(&names(10), 5, 5, 4).unwrap();
        assert_ne!(a.split_hash(), c.split_hash());
    }

    #[test]
    fn too_few_participants_is_an_error() {
        assert!(matches!(
            make_folds(&names(4), 5, 1, 0),
            Err(CvError::TooFewParticipants { participants: 4, k: 5 })
        ));
    }

    #[test]
    fn cells_cover_each_fold_once() {
        let plan = make_folds(&names(10), 5, 2, 1).unwrap();
        let cells = plan.cells();
        assert_eq!(cells.len(), 10);
        for cell in &cells {
            assert_eq!(cell.train_participants.len() + cell.test_participants.len(), 10);
            for t in &cell.test_participants {
                assert!(!cell.train_participants.contains(t));
            }
        }
    }
}
