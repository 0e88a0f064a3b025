//! Sliding-window dataset construction.
//!
//! Sessions are cut into fixed-length windows on a sliding step. Each window
//! carries the frames that fall inside it (concatenated along the channel
//! axis at the effective 5 fps), the per-window mean of every feature
//! modality, and one continuous label: the per-timestamp median across
//! annotators averaged over the window.
//!
//! All window arithmetic runs on integer milliseconds. Corpus timestamps have
//! 3-decimal precision, so the conversion is exact and the emitted window
//! count always equals `floor((duration - length) / step) + 1`.

use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationTrace, FeatureStream, FrameBlock, FrameStream, LabelRange, Session};
use crate::metrics::Class;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("session {session}: duration {duration}s is shorter than one {length}s window")]
    SessionTooShort {
        session: String,
        duration: f64,
        length: f64,
    },
    #[error("invalid window geometry: need 0 < step <= length, got step {step}s length {length}s")]
    BadGeometry { step: f64, length: f64 },
    #[error("window at {start}s in session {session}: {reason}")]
    WindowRejected {
        session: String,
        start: f64,
        reason: String,
    },
    #[error("classification discarded every window (t = {t}, epsilon = {epsilon})")]
    AllDiscarded { t: f64, epsilon: f64 },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("labeling config invalid: {0}")]
    BadLabelingConfig(String),
    #[error("need at least 2 training windows to fit a normalizer, got {0}")]
    TooFewForNormalizer(usize),
}

/// Milliseconds per effective frame (5 fps).
const FRAME_MS: i64 = 200;

pub(crate) fn to_ms(seconds: f64) -> i64 {
    (seconds * 1000.0).round() as i64
}

/// Window start offsets in milliseconds: `0, step, 2*step, ...` while the
/// window still fits.
pub fn window_starts_ms(duration_ms: i64, length_ms: i64, step_ms: i64) -> Vec<i64> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + length_ms <= duration_ms {
        starts.push(s);
        s += step_ms;
    }
    starts
}

/// Closed-form window count for a full-coverage session.
pub fn window_count(duration_ms: i64, length_ms: i64, step_ms: i64) -> usize {
    if length_ms > duration_ms {
        0
    } else {
        ((duration_ms - length_ms) / step_ms + 1) as usize
    }
}

/// Task flavor a dataset is labeled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Classification threshold `t` with its uncertainty band `epsilon`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub task: Task,
    pub split_t: f64,
    pub epsilon: f64,
}

impl LabelingConfig {
    pub fn validate(&self, range: LabelRange) -> Result<(), WindowError> {
        if self.epsilon < 0.0 {
            return Err(WindowError::BadLabelingConfig("epsilon must be >= 0".into()));
        }
        if self.task == Task::Classification {
            let (lo, hi) = (self.split_t - self.epsilon, self.split_t + self.epsilon);
            if lo < range.lo || hi > range.hi {
                return Err(WindowError::BadLabelingConfig(format!(
                    "band [{lo}, {hi}] leaves the label range [{}, {}]",
                    range.lo, range.hi
                )));
            }
        }
        Ok(())
    }
}

/// One labeled window. Pixel data stays shared with the session's frame
/// block and is materialized on demand.
#[derive(Debug, Clone)]
pub struct Window {
    pub participant_id: String,
    pub start: f64,
    pub length: f64,
    /// Native frame indices, one per channel, in time order.
    pub frame_ids: Vec<usize>,
    frames: Arc<FrameBlock>,
    /// Per-window feature means, all modalities concatenated in the
    /// dataset's modality order.
    pub features: Vec<f64>,
    pub label: f64,
    pub class: Option<Class>,
}

impl Window {
    /// Assemble a window from already-aggregated parts. Dataset builders and
    /// test fixtures use this; normal construction goes through
    /// [`slice_windows`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        participant_id: String,
        start: f64,
        length: f64,
        frame_ids: Vec<usize>,
        frames: Arc<FrameBlock>,
        features: Vec<f64>,
        label: f64,
        class: Option<Class>,
    ) -> Self {
        Window { participant_id, start, length, frame_ids, frames, features, label, class }
    }

    pub fn channels(&self) -> usize {
        self.frame_ids.len()
    }

    /// Stacked frames as a `(channels, height, width)` tensor in `[0, 1]`.
    pub fn pixel_tensor(&self) -> Array3<f64> {
        let h = self.frames.height;
        let w = self.frames.width;
        let mut out = Array3::zeros((self.frame_ids.len(), h, w));
        for (c, &fid) in self.frame_ids.iter().enumerate() {
            let frame = self.frames.frame(fid);
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] = frame[y * w + x] as f64 / 255.0;
                }
            }
        }
        out
    }

    /// Copy normalized pixels into a caller slice (channel-major).
    pub(crate) fn write_pixels(&self, dst: &mut [f64]) {
        let sz = self.frames.height * self.frames.width;
        for (c, &fid) in self.frame_ids.iter().enumerate() {
            let frame = self.frames.frame(fid);
            for (d, &p) in dst[c * sz..(c + 1) * sz].iter_mut().zip(frame) {
                *d = p as f64 / 255.0;
            }
        }
    }
}

fn median_inplace(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite annotation values"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Median across annotators at each timestamp, averaged over the window's
/// half-open span `[start, start + length)`.
pub fn aggregate_label(
    traces: &[AnnotationTrace],
    start_ms: i64,
    length_ms: i64,
) -> Result<f64, String> {
    let grid = &traces[0].timestamps;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut buf = vec![0.0; traces.len()];
    for (i, &t) in grid.iter().enumerate() {
        let t_ms = to_ms(t);
        if t_ms >= start_ms && t_ms < start_ms + length_ms {
            for (b, trace) in buf.iter_mut().zip(traces) {
                *b = trace.values[i];
            }
            sum += median_inplace(&mut buf);
            count += 1;
        }
    }
    if count == 0 {
        Err("no annotation timestamps inside window".into())
    } else {
        Ok(sum / count as f64)
    }
}

/// Elementwise mean of the feature vectors whose timestamps fall in the
/// window's half-open span.
pub fn aggregate_features(
    stream: &FeatureStream,
    start_ms: i64,
    length_ms: i64,
) -> Result<Vec<f64>, String> {
    let mut acc = vec![0.0; stream.dim];
    let mut count = 0usize;
    for (i, &t) in stream.timestamps.iter().enumerate() {
        let t_ms = to_ms(t);
        if t_ms >= start_ms && t_ms < start_ms + length_ms {
            for (a, v) in acc.iter_mut().zip(stream.vector(i)) {
                *a += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(format!("no {} feature rows inside window", stream.modality));
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Ok(acc)
}

/// Native frame indices covering the window at the effective 5 fps.
pub fn frames_in_window(
    stream: &FrameStream,
    start_ms: i64,
    length_ms: i64,
) -> Result<Vec<usize>, String> {
    let expected = (length_ms / FRAME_MS) as usize;
    // effective frame j sits at j * FRAME_MS; the native index is j * skip
    let first = start_ms.div_euclid(FRAME_MS)
        + if start_ms.rem_euclid(FRAME_MS) == 0 { 0 } else { 1 };
    let n_native = stream.frames.n_frames() as i64;
    let mut ids = Vec::with_capacity(expected);
    let mut j = first;
    while j * FRAME_MS < start_ms + length_ms {
        let native = j * stream.skip as i64;
        if native >= n_native {
            return Err(format!(
                "insufficient frames: needed {expected}, stream ends at native frame {n_native}"
            ));
        }
        ids.push(native as usize);
        j += 1;
    }
    if ids.len() != expected {
        return Err(format!("expected {expected} frames, found {}", ids.len()));
    }
    Ok(ids)
}

/// Stack the window's frames along the channel axis, normalized to `[0, 1]`.
pub fn stack_frames(
    stream: &FrameStream,
    start_ms: i64,
    length_ms: i64,
) -> Result<Array3<f64>, String> {
    let ids = frames_in_window(stream, start_ms, length_ms)?;
    let h = stream.frames.height;
    let w = stream.frames.width;
    let mut out = Array3::zeros((ids.len(), h, w));
    for (c, &fid) in ids.iter().enumerate() {
        let frame = stream.frames.frame(fid);
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = frame[y * w + x] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Windows rejected while slicing, with the reason.
#[derive(Debug, Clone)]
pub struct RejectedWindow {
    pub participant_id: String,
    pub start: f64,
    pub reason: String,
}

/// Cut one session into fully populated windows.
///
/// A session shorter than one window is an error; individual windows that
/// cannot be populated (missing frames or empty stream intersections) are
/// dropped and reported.
pub fn slice_windows(
    session: &Session,
    length_s: f64,
    step_s: f64,
) -> Result<(Vec<Window>, Vec<RejectedWindow>), WindowError> {
    if !(step_s > 0.0 && step_s <= length_s) {
        return Err(WindowError::BadGeometry { step: step_s, length: length_s });
    }
    let duration_ms = to_ms(session.duration);
    let length_ms = to_ms(length_s);
    let step_ms = to_ms(step_s);
    if length_ms > duration_ms {
        return Err(WindowError::SessionTooShort {
            session: session.participant_id.clone(),
            duration: session.duration,
            length: length_s,
        });
    }

    let mut windows = Vec::new();
    let mut rejected = Vec::new();
    for start_ms in window_starts_ms(duration_ms, length_ms, step_ms) {
        let start = start_ms as f64 / 1000.0;
        let build = || -> Result<Window, String> {
            let frame_ids = frames_in_window(&session.frame_stream, start_ms, length_ms)?;
            let mut features = Vec::new();
            for stream in &session.feature_streams {
                features.extend(aggregate_features(stream, start_ms, length_ms)?);
            }
            let label = aggregate_label(&session.annotation_traces, start_ms, length_ms)?;
            Ok(Window {
                participant_id: session.participant_id.clone(),
                start,
                length: length_s,
                frame_ids,
                frames: Arc::clone(&session.frame_stream.frames),
                features,
                label,
                class: None,
            })
        };
        match build() {
            Ok(w) => windows.push(w),
            Err(reason) => rejected.push(RejectedWindow {
                participant_id: session.participant_id.clone(),
                start,
                reason,
            }),
        }
    }
    Ok((windows, rejected))
}

/// Split continuous labels into classes around `t` with the uncertainty band
/// `[t - epsilon, t + epsilon]` discarded.
pub fn binarize(labels: &[f64], cfg: &LabelingConfig) -> Result<Vec<Option<Class>>, WindowError> {
    let classes: Vec<Option<Class>> = labels
        .iter()
        .map(|&v| {
            if v > cfg.split_t + cfg.epsilon {
                Some(Class::High)
            } else if v < cfg.split_t - cfg.epsilon {
                Some(Class::Low)
            } else {
                None
            }
        })
        .collect();
    if !labels.is_empty() && classes.iter().all(|c| c.is_none()) {
        return Err(WindowError::AllDiscarded { t: cfg.split_t, epsilon: cfg.epsilon });
    }
    Ok(classes)
}

/// A windowed, labeled dataset ready for model training.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
    /// Fused feature layout: modality name and dimension, in order.
    pub modalities: Vec<(String, usize)>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label_range: LabelRange,
    pub task: Task,
}

impl WindowedDataset {
    pub fn feature_dim(&self) -> usize {
        self.modalities.iter().map(|(_, d)| d).sum()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn participants(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.windows.iter().map(|w| w.participant_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Median of all window labels; the default classification threshold.
    pub fn median_label(&self) -> f64 {
        let mut labels: Vec<f64> = self.windows.iter().map(|w| w.label).collect();
        median_inplace(&mut labels)
    }

    /// Window indices belonging to the given participants.
    pub fn indices_of(&self, participants: &[String]) -> Vec<usize> {
        self.windows
            .iter()
            .enumerate()
            .filter(|(_, w)| participants.contains(&w.participant_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Slice every session and assemble the regression-labeled dataset.
pub fn build_dataset(
    sessions: &[Session],
    length_s: f64,
    step_s: f64,
) -> Result<(WindowedDataset, Vec<RejectedWindow>), WindowError> {
    if sessions.is_empty() {
        return Err(WindowError::EmptyDataset("no sessions".into()));
    }
    let mut modalities: Vec<(String, usize)> = sessions[0]
        .feature_streams
        .iter()
        .map(|s| (s.modality.clone(), s.dim))
        .collect();
    modalities.sort();
    let mut windows = Vec::new();
    let mut rejected = Vec::new();
    for session in sessions {
        let (mut w, mut r) = slice_windows(session, length_s, step_s)?;
        windows.append(&mut w);
        rejected.append(&mut r);
    }
    if windows.is_empty() {
        return Err(WindowError::EmptyDataset(
            "every window was rejected during slicing".into(),
        ));
    }
    let channels = windows[0].channels();
    let (height, width) =
        (sessions[0].frame_stream.frames.height, sessions[0].frame_stream.frames.width);
    Ok((
        WindowedDataset {
            windows,
            modalities,
            channels,
            height,
            width,
            label_range: sessions[0].label_range,
            task: Task::Regression,
        },
        rejected,
    ))
}

/// Apply a labeling config: classification keeps only windows outside the
/// uncertainty band; regression keeps everything.
pub fn apply_labeling(
    mut ds: WindowedDataset,
    cfg: &LabelingConfig,
) -> Result<(WindowedDataset, usize), WindowError> {
    cfg.validate(ds.label_range)?;
    match cfg.task {
        Task::Regression => {
            ds.task = Task::Regression;
            Ok((ds, 0))
        }
        Task::Classification => {
            let labels: Vec<f64> = ds.windows.iter().map(|w| w.label).collect();
            let classes = binarize(&labels, cfg)?;
            let before = ds.windows.len();
            let mut kept = Vec::with_capacity(before);
            for (mut w, c) in ds.windows.into_iter().zip(classes) {
                if let Some(class) = c {
                    w.class = Some(class);
                    kept.push(w);
                }
            }
            let discarded = before - kept.len();
            ds.windows = kept;
            ds.task = Task::Classification;
            Ok((ds, discarded))
        }
    }
}

/// Per-feature z-score parameters fitted on a training fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit mean/std (population moments) over the fused feature vectors of the
/// given training windows.
pub fn fit_feature_normalizer(
    ds: &WindowedDataset,
    train_indices: &[usize],
) -> Result<Normalizer, WindowError> {
    if train_indices.len() < 2 {
        return Err(WindowError::TooFewForNormalizer(train_indices.len()));
    }
    let dim = ds.feature_dim();
    let n = train_indices.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in train_indices {
        for (m, v) in mean.iter_mut().zip(&ds.windows[i].features) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for &i in train_indices {
        for ((s, v), m) in var.iter_mut().zip(&ds.windows[i].features).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    /// Transform a fused feature vector in place. Zero-variance features map
    /// to 0.
    pub fn apply_vec(&self, features: &mut [f64]) {
        for ((f, m), s) in features.iter_mut().zip(&self.mean).zip(&self.std) {
            *f = if *s > 0.0 { (*f - *m) / *s } else { 0.0 };
        }
    }

    /// Normalize every window of a dataset, returning the transformed copy.
    pub fn apply(&self, mut ds: WindowedDataset) -> WindowedDataset {
        for w in &mut ds.windows {
            self.apply_vec(&mut w.features);
        }
        ds
    }
}
