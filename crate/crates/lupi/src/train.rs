//! Model optimization: Adam with validation-based early stopping, plus the
//! two-phase teacher-then-student procedure.
//!
//! Training is deterministic given the config seed: batch shuffles and
//! dropout masks come from one seeded generator, runs are single-threaded,
//! and the returned parameters are the snapshot from the best-validation
//! epoch. Teachers are trained like any supervised model; students train
//! against a frozen teacher whose per-window outputs are computed once in
//! eval mode (the teacher never moves, so per-batch re-evaluation would
//! produce the same numbers).
//!
//! Every data access goes through a [`ModalityGuard`]. The student's
//! inference path holds a guard with privileged access disabled, so a run
//! that tries to read features where only pixels are allowed fails loudly
//! instead of silently leaking lab-only information.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    student_loss_classification, student_loss_regression, LossComponents, LossError,
    LupiLossConfig,
};
use crate::metrics::Class;
use crate::nn::{BatchInput, Gradients, Model, ModelError, ModelKind, Task};
use crate::windowing::WindowedDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("grouped split impossible: dataset has {0} participant(s), need at least 2")]
    SingleParticipant(usize),
    #[error("dataset slice is empty")]
    EmptyData,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: task {task}, distance {distance}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        task: f64,
        distance: f64,
    },
    #[error("modality guard violation: {0} access is not allowed on this path")]
    ModalityViolation(&'static str),
    #[error("teacher must be privnet or fusionnet, got {0:?}")]
    NotATeacher(ModelKind),
    #[error("teacher parameters changed during student training (hash {before} -> {after})")]
    TeacherMoved { before: String, after: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Monitor only the task term of the blended student loss.
    pub monitor_task_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.10,
            seed: 0,
            monitor_task_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        assert!(self.patience >= 1, "patience must be >= 1");
        assert!(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "val_fraction must lie in (0, 1)"
        );
        assert!(self.batch_size >= 1 && self.max_epochs >= 1);
        Ok(())
    }
}

/// Loss trace of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train: Vec<LossComponents>,
    pub val: Vec<LossComponents>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val[self.best_epoch].total
    }
}

/// Early-stopping bookkeeping: track the best validation loss and stop once
/// `patience` epochs pass without improvement.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    /// Observe this epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = epoch;
        }
        let stop = epoch >= self.best_epoch + self.patience;
        (improved, stop)
    }
}

/// Which modalities a consumer may touch, with access counters so tests can
/// prove a path never read privileged data.
#[derive(Debug)]
pub struct ModalityGuard {
    allow_pixels: bool,
    allow_privileged: bool,
    pixel_reads: AtomicUsize,
    privileged_reads: AtomicUsize,
}

impl ModalityGuard {
    pub fn new(allow_pixels: bool, allow_privileged: bool) -> Self {
        Self {
            allow_pixels,
            allow_privileged,
            pixel_reads: AtomicUsize::new(0),
            privileged_reads: AtomicUsize::new(0),
        }
    }

    /// Guard for a model's *training* view (Table-style train columns).
    pub fn for_training(kind: ModelKind) -> Self {
        Self::new(kind.uses_pixels(), kind.uses_privileged())
    }

    /// Guard for a model's *inference* view: students predict from pixels
    /// alone no matter what they saw in training.
    pub fn for_inference(kind: ModelKind) -> Self {
        match kind {
            ModelKind::StudentNet | ModelKind::PixelNet => Self::new(true, false),
            ModelKind::PrivNet => Self::new(false, true),
            ModelKind::FusionNet => Self::new(true, true),
        }
    }

    pub fn pixel_reads(&self) -> usize {
        self.pixel_reads.load(Ordering::Relaxed)
    }

    pub fn privileged_reads(&self) -> usize {
        self.privileged_reads.load(Ordering::Relaxed)
    }

    fn check_pixels(&self) -> Result<(), TrainError> {
        if !self.allow_pixels {
            return Err(TrainError::ModalityViolation("pixel"));
        }
        self.pixel_reads.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn check_privileged(&self) -> Result<(), TrainError> {
        if !self.allow_privileged {
            return Err(TrainError::ModalityViolation("privileged-feature"));
        }
        self.privileged_reads.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

/// Owned per-batch tensors, assembled under a guard.
#[derive(Debug)]
pub struct Batch {
    pub pixels: Option<Array4<f64>>,
    pub features: Option<Array2<f64>>,
    pub classes: Vec<Class>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn input(&self) -> BatchInput<'_> {
        match (&self.pixels, &self.features) {
            (Some(p), Some(f)) => BatchInput::Both { pixels: p, features: f },
            (Some(p), None) => BatchInput::Pixels(p),
            (None, Some(f)) => BatchInput::Features(f),
            (None, None) => unreachable!("batch must carry at least one modality"),
        }
    }
}

/// Assemble a batch for `kind` from dataset rows, honoring the guard.
pub fn assemble_batch(
    ds: &WindowedDataset,
    indices: &[usize],
    kind: ModelKind,
    guard: &ModalityGuard,
) -> Result<Batch, TrainError> {
    let pixels = if kind.uses_pixels() {
        guard.check_pixels()?;
        let (c, h, w) = (ds.channels, ds.height, ds.width);
        let mut arr = Array4::<f64>::zeros((indices.len(), c, h, w));
        {
            let slice = arr.as_slice_mut().expect("standard layout");
            let sz = c * h * w;
            for (row, &i) in indices.iter().enumerate() {
                ds.windows[i].write_pixels(&mut slice[row * sz..(row + 1) * sz]);
            }
        }
        Some(arr)
    } else {
        None
    };
    let features = if kind.uses_privileged() {
        guard.check_privileged()?;
        let dim = ds.feature_dim();
        let mut arr = Array2::<f64>::zeros((indices.len(), dim));
        for (row, &i) in indices.iter().enumerate() {
            arr.row_mut(row)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&ds.windows[i].features);
        }
        Some(arr)
    } else {
        None
    };
    let classes = indices
        .iter()
        .map(|&i| ds.windows[i].class.unwrap_or(Class::Low))
        .collect();
    let targets = indices.iter().map(|&i| ds.windows[i].label).collect();
    Ok(Batch { pixels, features, classes, targets })
}

/// Adam with bias correction; state is kept per parameter slot.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        let mut slices = model.param_slices_mut();
        if self.m.is_empty() {
            self.m = slices.iter().map(|s| vec![0.0; s.len()]).collect();
            self.v = slices.iter().map(|s| vec![0.0; s.len()]).collect();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, grad) in grads.slots.iter().enumerate() {
            let params = &mut slices[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Participant-grouped train/validation split: a seeded shuffle of
/// participants, then the prefix whose window count lands closest to
/// `val_fraction` becomes validation. No participant straddles the split.
pub fn split_train_val(
    ds: &WindowedDataset,
    indices: &[usize],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut participants: Vec<String> = indices
        .iter()
        .map(|&i| ds.windows[i].participant_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if participants.len() < 2 {
        return Err(TrainError::SingleParticipant(participants.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    participants.shuffle(&mut rng);

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &i in indices {
        *counts.entry(ds.windows[i].participant_id.as_str()).or_insert(0) += 1;
    }
    let target = val_fraction * indices.len() as f64;
    let mut best_k = 1;
    let mut best_err = f64::INFINITY;
    let mut acc = 0usize;
    for (k, p) in participants.iter().enumerate() {
        acc += counts[p.as_str()];
        let err = (acc as f64 - target).abs();
        if k + 1 <= participants.len() - 1 && err < best_err {
            best_err = err;
            best_k = k + 1;
        }
    }
    let val_set: std::collections::BTreeSet<&str> =
        participants[..best_k].iter().map(|s| s.as_str()).collect();
    let (val, train): (Vec<usize>, Vec<usize>) = indices
        .iter()
        .partition(|&&i| val_set.contains(ds.windows[i].participant_id.as_str()));
    Ok((train, val))
}

/// Per-window teacher outputs, computed once from the frozen teacher.
pub struct TeacherTargets {
    row_of: HashMap<usize, usize>,
    probs: Option<Array2<f64>>,
    penult: Option<Array2<f64>>,
}

impl TeacherTargets {
    /// Evaluate the teacher over `indices` in eval mode, under the teacher's
    /// own training-view guard.
    pub fn compute(
        teacher: &Model,
        ds: &WindowedDataset,
        indices: &[usize],
        batch_size: usize,
    ) -> Result<Self, TrainError> {
        let guard = ModalityGuard::for_training(teacher.spec.kind);
        let mut row_of = HashMap::with_capacity(indices.len());
        let mut probs_rows: Vec<Array2<f64>> = Vec::new();
        let mut penult_rows: Vec<Array2<f64>> = Vec::new();
        for chunk in indices.chunks(batch_size.max(1)) {
            let batch = assemble_batch(ds, chunk, teacher.spec.kind, &guard)?;
            let out = teacher.eval_forward(&batch.input())?;
            match teacher.spec.task {
                Task::Classification => {
                    probs_rows.push(out.probabilities.expect("classification has probabilities"));
                }
                Task::Regression => penult_rows.push(out.penultimate),
            }
            for &i in chunk {
                let next = row_of.len();
                row_of.insert(i, next);
            }
        }
        let stack = |rows: Vec<Array2<f64>>| -> Option<Array2<f64>> {
            if rows.is_empty() {
                None
            } else {
                let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                Some(ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths"))
            }
        };
        Ok(Self { row_of, probs: stack(probs_rows), penult: stack(penult_rows) })
    }

    fn gather(&self, source: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), source.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&source.row(self.row_of[&i]));
        }
        out
    }

    pub fn probs_for(&self, indices: &[usize]) -> Option<Array2<f64>> {
        self.probs.as_ref().map(|p| self.gather(p, indices))
    }

    pub fn penult_for(&self, indices: &[usize]) -> Option<Array2<f64>> {
        self.penult.as_ref().map(|p| self.gather(p, indices))
    }
}

/// A finished run: the best-epoch model plus its loss trace.
pub struct TrainedModel {
    pub model: Model,
    pub history: TrainHistory,
}

struct LossEval {
    components: LossComponents,
    d_output: Array2<f64>,
    d_penult: Option<Array2<f64>>,
}

fn batch_loss(
    model: &Model,
    out: &crate::nn::ForwardOutput,
    batch: &Batch,
    teacher: Option<(&TeacherTargets, &[usize])>,
    loss_cfg: Option<&LupiLossConfig>,
) -> Result<LossEval, TrainError> {
    match model.spec.task {
        Task::Classification => {
            let alpha = loss_cfg.map(|c| c.alpha).unwrap_or(0.0);
            let temperature = loss_cfg.map(|c| c.temperature).unwrap_or(1.0);
            let teacher_probs = match teacher {
                Some((targets, idxs)) if alpha > 0.0 => targets.probs_for(idxs),
                _ => None,
            };
            let (components, d_logits) = student_loss_classification(
                &out.output,
                teacher_probs.as_ref(),
                &batch.classes,
                alpha,
                temperature,
            )?;
            Ok(LossEval { components, d_output: d_logits, d_penult: None })
        }
        Task::Regression => {
            let alpha = loss_cfg.map(|c| c.alpha).unwrap_or(0.0);
            let teacher_penult = match teacher {
                Some((targets, idxs)) if alpha > 0.0 => targets.penult_for(idxs),
                _ => None,
            };
            let (components, d_output, d_penult) = student_loss_regression(
                &out.output,
                &out.penultimate,
                teacher_penult.as_ref(),
                &batch.targets,
                alpha,
            )?;
            Ok(LossEval { components, d_output, d_penult })
        }
    }
}

fn run_training(
    mut model: Model,
    ds: &WindowedDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    teacher: Option<(&Model, &LupiLossConfig)>,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if let Some((_, loss_cfg)) = teacher {
        loss_cfg.validate()?;
    }
    let (train_idx, val_idx) = split_train_val(ds, indices, cfg.val_fraction, cfg.seed)?;
    let guard = ModalityGuard::for_training(model.spec.kind);

    let targets = match teacher {
        Some((t, loss_cfg)) if loss_cfg.alpha > 0.0 => {
            let mut all = train_idx.clone();
            all.extend_from_slice(&val_idx);
            Some(TeacherTargets::compute(t, ds, &all, cfg.batch_size)?)
        }
        _ => None,
    };
    let loss_cfg = teacher.map(|(_, c)| c);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = TrainHistory { train: Vec::new(), val: Vec::new(), best_epoch: 0, stopped_epoch: 0 };
    let mut best_snapshot = model.snapshot();
    let mut order = train_idx.clone();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_acc = LossComponents::default();
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_batch(ds, chunk, model.spec.kind, &guard)?;
            let (out, cache) = model.train_forward(&batch.input(), &mut rng)?;
            let eval = batch_loss(&model, &out, &batch, targets.as_ref().map(|t| (t, chunk)), loss_cfg)?;
            if !eval.components.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    task: eval.components.task,
                    distance: eval.components.distance,
                });
            }
            let grads = model.backward(&cache, &eval.d_output, eval.d_penult.as_ref());
            adam.step(&mut model, &grads);
            let w = chunk.len() as f64;
            train_acc.total += eval.components.total * w;
            train_acc.task += eval.components.task * w;
            train_acc.distance += eval.components.distance * w;
            seen += chunk.len();
        }
        let n = seen as f64;
        train_acc.total /= n;
        train_acc.task /= n;
        train_acc.distance /= n;

        let val_components = evaluate_loss(
            &model,
            ds,
            &val_idx,
            cfg.batch_size,
            &guard,
            targets.as_ref(),
            loss_cfg,
        )?;
        history.train.push(train_acc);
        history.val.push(val_components);

        let monitored = if cfg.monitor_task_only { val_components.task } else { val_components.total };
        let (improved, stop) = stopper.observe(epoch, monitored);
        if improved {
            best_snapshot = model.snapshot();
        }
        history.best_epoch = stopper.best_epoch;
        history.stopped_epoch = epoch;
        if stop {
            break;
        }
    }
    model.restore(&best_snapshot);
    Ok(TrainedModel { model, history })
}

/// Mean loss over a slice in eval mode.
fn evaluate_loss(
    model: &Model,
    ds: &WindowedDataset,
    indices: &[usize],
    batch_size: usize,
    guard: &ModalityGuard,
    targets: Option<&TeacherTargets>,
    loss_cfg: Option<&LupiLossConfig>,
) -> Result<LossComponents, TrainError> {
    let mut acc = LossComponents::default();
    let mut seen = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = assemble_batch(ds, chunk, model.spec.kind, guard)?;
        let out = model.eval_forward(&batch.input())?;
        let eval = batch_loss(model, &out, &batch, targets.map(|t| (t, chunk)), loss_cfg)?;
        let w = chunk.len() as f64;
        acc.total += eval.components.total * w;
        acc.task += eval.components.task * w;
        acc.distance += eval.components.distance * w;
        seen += chunk.len();
    }
    let n = seen as f64;
    acc.total /= n;
    acc.task /= n;
    acc.distance /= n;
    Ok(acc)
}

/// Supervised training for baselines and teachers.
pub fn train_model(
    model: Model,
    ds: &WindowedDataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    run_training(model, ds, indices, cfg, None)
}

/// Teacher training: PrivNet sees privileged features only, FusionNet sees
/// everything. Any other kind is rejected.
pub fn train_teacher(
    kind: ModelKind,
    ds: &WindowedDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    build_seed: u64,
) -> Result<TrainedModel, TrainError> {
    if !matches!(kind, ModelKind::PrivNet | ModelKind::FusionNet) {
        return Err(TrainError::NotATeacher(kind));
    }
    let spec = crate::nn::ModelSpec::for_kind(
        kind,
        ds.task,
        (ds.channels, ds.height, ds.width),
        ds.feature_dim(),
    );
    let model = spec.build(build_seed)?;
    run_training(model, ds, indices, cfg, None)
}

/// Student training against a frozen teacher. The teacher's parameter hash
/// is asserted unchanged across the run.
pub fn train_student(
    student: Model,
    teacher: &Model,
    ds: &WindowedDataset,
    indices: &[usize],
    loss_cfg: &LupiLossConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    let hash_before = teacher.param_hash();
    let trained = run_training(student, ds, indices, cfg, Some((teacher, loss_cfg)))?;
    let hash_after = teacher.param_hash();
    if hash_before != hash_after {
        return Err(TrainError::TeacherMoved { before: hash_before, after: hash_after });
    }
    Ok(trained)
}

/// Predictions for a slice, under the model's inference guard. Students and
/// PixelNet read pixels only; a privileged access here fails the run.
pub fn predict(
    model: &Model,
    ds: &WindowedDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Predictions, TrainError> {
    let guard = ModalityGuard::for_inference(model.spec.kind);
    predict_guarded(model, ds, indices, batch_size, &guard)
}

/// Predictions under a caller-supplied guard (for tests that count reads).
pub fn predict_guarded(
    model: &Model,
    ds: &WindowedDataset,
    indices: &[usize],
    batch_size: usize,
    guard: &ModalityGuard,
) -> Result<Predictions, TrainError> {
    // inference for pixel-only kinds assembles pixel tensors only
    let kind = match model.spec.kind {
        ModelKind::StudentNet => ModelKind::PixelNet,
        k => k,
    };
    let mut classes = Vec::with_capacity(indices.len());
    let mut scalars = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = assemble_batch(ds, chunk, kind, guard)?;
        let out = model.eval_forward(&batch.input())?;
        match model.spec.task {
            Task::Classification => classes.extend(out.classes()),
            Task::Regression => scalars.extend(out.scalars()),
        }
    }
    Ok(Predictions { classes, scalars })
}

/// Model outputs over a dataset slice.
pub struct Predictions {
    pub classes: Vec<Class>,
    pub scalars: Vec<f64>,
}
