//! Seeded synthetic multimodal corpora.
//!
//! Each session simulates one participant: a smooth latent affect trace
//! drives every modality. Privileged features read the latent state through
//! a fixed nonlinear readout with low noise; frames render a Gaussian blob
//! whose vertical position and brightness follow the latent state, corrupted
//! by per-pixel noise; annotators report the latent state with individual
//! bias and per-tick jitter. The noise levels are the experiment's control
//! surface: privileged streams are more informative than pixels by default,
//! which is exactly the regime where a teacher has something to transfer.
//!
//! Determinism: every stream of every session draws from its own RNG, seeded
//! by `SHA-256(master seed, session index, stream tag)`. Sessions can be
//! generated in any order or in parallel and the corpus bytes never change.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    self, AnnotationTrace, CorpusError, FeatureStream, FrameBlock, FrameStream, LabelRange, Session,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Annotation ticks per second (25 Hz grid).
pub const ANNOTATION_HZ: i64 = 25;
const TICK_MS: i64 = 1000 / ANNOTATION_HZ;
/// Effective frame period in milliseconds (5 fps).
const FRAME_MS: i64 = 200;

/// Everything needed to synthesize one corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_participants: usize,
    /// Seconds per session.
    pub session_duration: f64,
    /// Low-pass strength of the latent walk, in (0, 1].
    pub latent_smoothness: f64,
    /// Per-tick noise on privileged feature values.
    pub privileged_noise_std: f64,
    /// Per-pixel intensity noise on frames (intensity units in [0, 1]).
    pub pixel_noise_std: f64,
    pub privileged_dim: usize,
    /// (height, width) of emitted frames.
    pub frame_resolution: (usize, usize),
    pub n_annotators: usize,
    /// Per-tick annotator jitter.
    pub annotator_noise_std: f64,
    /// Per-annotator constant bias spread.
    pub annotator_bias_std: f64,
    pub label_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_participants: 20,
            session_duration: 60.0,
            latent_smoothness: 0.95,
            privileged_noise_std: 0.25,
            pixel_noise_std: 0.35,
            privileged_dim: 16,
            frame_resolution: (32, 18),
            n_annotators: 6,
            annotator_noise_std: 0.2,
            annotator_bias_std: 0.1,
            label_range: (-1.0, 1.0),
        }
    }
}

impl GeneratorConfig {
    pub fn range(&self) -> LabelRange {
        LabelRange { lo: self.label_range.0, hi: self.label_range.1 }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::BadConfig(m.to_string()));
        if self.n_participants == 0 {
            return fail("n_participants must be >= 1");
        }
        if !(self.session_duration > 0.0) {
            return fail("session_duration must be positive");
        }
        if !(self.latent_smoothness > 0.0 && self.latent_smoothness <= 1.0) {
            return fail("latent_smoothness must be in (0, 1]");
        }
        if self.privileged_noise_std < 0.0 || self.pixel_noise_std < 0.0 {
            return fail("noise stds must be >= 0");
        }
        if self.privileged_noise_std >= self.pixel_noise_std {
            return fail("privileged_noise_std must stay below pixel_noise_std (privileged streams must be the more informative ones)");
        }
        if self.privileged_dim == 0 {
            return fail("privileged_dim must be >= 1");
        }
        if self.frame_resolution.0 < 8 || self.frame_resolution.1 < 8 {
            return fail("frame_resolution must be at least 8x8");
        }
        if self.n_annotators == 0 {
            return fail("n_annotators must be >= 1");
        }
        if self.annotator_noise_std < 0.0 || self.annotator_bias_std < 0.0 {
            return fail("annotator stds must be >= 0");
        }
        if !(self.label_range.0 < self.label_range.1) {
            return fail("label_range must satisfy lo < hi");
        }
        Ok(())
    }
}

/// Deterministic per-(session, stream) seed from the master seed.
pub fn derive_seed(master: u64, session: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(session.to_le_bytes());
    hasher.update(tag.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is wide enough"))
}

/// The hidden affect trace a session's streams are derived from.
#[derive(Debug, Clone)]
pub struct LatentTrace {
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

impl LatentTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Latent value at the tick covering millisecond `ms`.
    pub fn value_at_ms(&self, ms: i64) -> f64 {
        let idx = (ms / TICK_MS) as usize;
        self.values[idx.min(self.values.len() - 1)]
    }
}

fn reflect_into(mut v: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    loop {
        if v < lo {
            v = lo + (lo - v);
        } else if v > hi {
            v = hi - (v - hi);
        } else {
            return v;
        }
        // pathological overshoot collapses to clamping
        if (v - lo).abs() > 2.0 * width {
            return v.clamp(lo, hi);
        }
    }
}

/// Bounded smoothed random walk on the 25 Hz grid.
///
/// Gaussian increments pass through a one-pole low-pass with coefficient
/// `smoothness` before integration; the running value reflects off the label
/// bounds. `smoothness = 1` freezes the trace at its initial value.
pub fn generate_latent(seed: u64, duration_s: f64, smoothness: f64, range: LabelRange) -> LatentTrace {
    let n_ticks = ((duration_s * 1000.0).round() as i64) / TICK_MS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = range.width();
    let step_std = 0.05 * width / 2.0;
    let mut x = range.lo + rng.random::<f64>() * width;
    let mut e = 0.0;
    let mut timestamps = Vec::with_capacity(n_ticks as usize);
    let mut values = Vec::with_capacity(n_ticks as usize);
    for i in 0..n_ticks {
        timestamps.push((i * TICK_MS) as f64 / 1000.0);
        values.push(x);
        let g: f64 = rng.sample(StandardNormal);
        e = smoothness * e + (1.0 - smoothness) * g * step_std;
        x = reflect_into(x + e, range.lo, range.hi);
    }
    LatentTrace { timestamps, values }
}

/// Lag-1 autocorrelation of a series; `None` if degenerate.
pub fn lag1_autocorr(values: &[f64]) -> Option<f64> {
    if values.len() < 3 {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return None;
    }
    let cov = values
        .windows(2)
        .map(|w| (w[0] - mean) * (w[1] - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    Some(cov / var)
}

/// Fixed corpus-wide linear readout over the nonlinear basis
/// `phi(x) = [x, x^2, sin(pi x)]`.
#[derive(Debug, Clone)]
pub struct PrivilegedReadout {
    /// `(dim, 3)` mixing matrix.
    pub weights: Array2<f64>,
}

impl PrivilegedReadout {
    /// Seeded dense Gaussian mixing; every session of a corpus shares it so
    /// the feature-to-affect mapping is stable across participants.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights =
            Array2::from_shape_fn((dim, 3), |_| rng.sample::<f64, _>(StandardNormal));
        Self { weights }
    }

    pub fn from_weights(weights: Array2<f64>) -> Self {
        assert_eq!(weights.ncols(), 3, "readout basis is [x, x^2, sin(pi x)]");
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }
}

fn phi(x: f64) -> [f64; 3] {
    [x, x * x, (std::f64::consts::PI * x).sin()]
}

/// Privileged feature stream: `v(t) = W phi(x(t)) + noise`.
pub fn emit_privileged(
    latent: &LatentTrace,
    readout: &PrivilegedReadout,
    noise_std: f64,
    seed: u64,
) -> FeatureStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = readout.dim();
    let mut values = Vec::with_capacity(latent.len() * dim);
    for &x in &latent.values {
        let basis = phi(x);
        for r in 0..dim {
            let clean: f64 = (0..3).map(|c| readout.weights[[r, c]] * basis[c]).sum();
            let eta: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
            values.push(clean + eta);
        }
    }
    FeatureStream {
        modality: "priv".into(),
        dim,
        timestamps: latent.timestamps.clone(),
        values,
    }
}

/// Frame stream at the effective 5 fps: a Gaussian blob whose vertical
/// position and brightness are affine in the latent value, plus per-pixel
/// noise, quantized to 8 bits.
pub fn emit_frames(
    latent: &LatentTrace,
    resolution: (usize, usize),
    pixel_noise_std: f64,
    range: LabelRange,
    seed: u64,
) -> FrameStream {
    let (h, w) = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration_ms = latent.len() as i64 * TICK_MS;
    let n_frames = (duration_ms / FRAME_MS) as usize;
    let sigma = 0.18 * h.min(w) as f64;
    let cx = (w - 1) as f64 / 2.0;
    let mut data = Vec::with_capacity(n_frames * h * w);
    for j in 0..n_frames {
        let x = latent.value_at_ms(j as i64 * FRAME_MS);
        let u = (x - range.lo) / range.width();
        let cy = (0.2 + 0.6 * u) * (h - 1) as f64;
        let brightness = 0.35 + 0.6 * u;
        for y in 0..h {
            for xx in 0..w {
                let dy = y as f64 - cy;
                let dx = xx as f64 - cx;
                let blob = brightness * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * pixel_noise_std;
                let v = (blob + noise).clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
    }
    FrameStream {
        frames: Arc::new(FrameBlock { height: h, width: w, data }),
        native_fps: 5,
        skip: 1,
    }
}

/// Annotator traces: `clip(x(t) + bias_i + jitter)` with a per-annotator
/// bias drawn once and per-tick Gaussian jitter.
pub fn emit_annotations(
    latent: &LatentTrace,
    n_annotators: usize,
    bias_std: f64,
    noise_std: f64,
    range: LabelRange,
    seed: u64,
) -> Vec<AnnotationTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let biases: Vec<f64> = (0..n_annotators)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * bias_std)
        .collect();
    emit_annotations_with_biases(latent, &biases, noise_std, range, &mut rng)
}

/// Annotator traces with caller-chosen biases.
pub fn emit_annotations_with_biases(
    latent: &LatentTrace,
    biases: &[f64],
    noise_std: f64,
    range: LabelRange,
    rng: &mut impl Rng,
) -> Vec<AnnotationTrace> {
    biases
        .iter()
        .enumerate()
        .map(|(i, &bias)| AnnotationTrace {
            annotator_id: format!("a{i}"),
            timestamps: latent.timestamps.clone(),
            values: latent
                .values
                .iter()
                .map(|&x| {
                    let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * noise_std;
                    range.clip(x + bias + jitter)
                })
                .collect(),
        })
        .collect()
}

/// Synthesize one session (latent trace plus all derived streams).
pub fn generate_session(cfg: &GeneratorConfig, index: usize) -> (Session, LatentTrace) {
    let range = cfg.range();
    let readout = PrivilegedReadout::seeded(cfg.privileged_dim, derive_seed(cfg.seed, 0, "readout"));
    let latent = generate_latent(
        derive_seed(cfg.seed, index as u64, "latent"),
        cfg.session_duration,
        cfg.latent_smoothness,
        range,
    );
    let features = emit_privileged(
        &latent,
        &readout,
        cfg.privileged_noise_std,
        derive_seed(cfg.seed, index as u64, "priv"),
    );
    let frames = emit_frames(
        &latent,
        cfg.frame_resolution,
        cfg.pixel_noise_std,
        range,
        derive_seed(cfg.seed, index as u64, "frames"),
    );
    let annotations = emit_annotations(
        &latent,
        cfg.n_annotators,
        cfg.annotator_bias_std,
        cfg.annotator_noise_std,
        range,
        derive_seed(cfg.seed, index as u64, "annotations"),
    );
    let session = Session {
        participant_id: format!("p{index:02}"),
        duration: cfg.session_duration,
        frame_stream: frames,
        feature_streams: vec![features],
        annotation_traces: annotations,
        label_range: range,
    };
    (session, latent)
}

/// Synthesize the whole corpus in memory.
pub fn generate_sessions(cfg: &GeneratorConfig) -> Result<Vec<Session>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.n_participants).map(|i| generate_session(cfg, i).0).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: GeneratorConfig,
    pub corpus_hash: String,
    pub participants: Vec<String>,
}

/// Generate and write the corpus in the adapter layout, with a manifest.
///
/// Refuses a non-empty output directory unless `overwrite` is set.
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    out_dir: &Path,
    overwrite: bool,
) -> Result<CorpusManifest, SynthError> {
    cfg.validate()?;
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty {
            if !overwrite {
                return Err(SynthError::Corpus(CorpusError::NonEmptyOutput(out_dir.to_path_buf())));
            }
            std::fs::remove_dir_all(out_dir).map_err(|e| {
                SynthError::Corpus(CorpusError::Io { path: out_dir.to_path_buf(), source: e })
            })?;
        }
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| SynthError::Corpus(CorpusError::Io { path: out_dir.to_path_buf(), source: e }))?;
    let mut participants = Vec::new();
    for i in 0..cfg.n_participants {
        let (session, _) = generate_session(cfg, i);
        let dir = out_dir.join(&session.participant_id);
        corpus::write_session(&dir, &session)?;
        participants.push(session.participant_id);
    }
    let corpus_hash = corpus::hash_tree(out_dir)?;
    let manifest = CorpusManifest { config: cfg.clone(), corpus_hash, participants };
    let manifest_path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, body + "\n")
        .map_err(|e| SynthError::Corpus(CorpusError::Io { path: manifest_path, source: e }))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pcc;

    fn unit_range() -> LabelRange {
        LabelRange { lo: -1.0, hi: 1.0 }
    }

    /// Least-squares probe oracle: best affine map from a scalar series to
    /// the latent, scored by PCC.
    fn affine_probe_pcc(inputs: &[f64], target: &[f64]) -> f64 {
        pcc(inputs, target).map(|r| r.abs()).unwrap_or(0.0)
    }

    /// Multivariate ridge-probe oracle: predict target from feature rows.
    pub(crate) fn linear_probe_pcc(rows: &[Vec<f64>], target: &[f64]) -> f64 {
        let n = rows.len();
        let d = rows[0].len();
        // ridge-regularized normal equations on centered data
        let mut xm = vec![0.0; d];
        for r in rows {
            for (m, v) in xm.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut xm {
            *m /= n as f64;
        }
        let ym = target.iter().sum::<f64>() / n as f64;
        let mut xtx = Array2::<f64>::zeros((d, d));
        let mut xty = vec![0.0; d];
        for (r, &y) in rows.iter().zip(target) {
            for i in 0..d {
                let xi = r[i] - xm[i];
                xty[i] += xi * (y - ym);
                for j in 0..d {
                    xtx[[i, j]] += xi * (r[j] - xm[j]);
                }
            }
        }
        for i in 0..d {
            xtx[[i, i]] += 1e-8 * n as f64;
        }
        let w = solve_spd(&xtx, &xty);
        let preds: Vec<f64> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&w)
                    .zip(&xm)
                    .map(|((v, wi), m)| (v - m) * wi)
                    .sum::<f64>()
            })
            .collect();
        pcc(&preds, target).map(|r| r.abs()).unwrap_or(0.0)
    }

    /// Gaussian elimination for the small SPD probe systems.
    fn solve_spd(a: &Array2<f64>, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m = a.clone();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if m[[r, col]].abs() > m[[pivot, col]].abs() {
                    pivot = r;
                }
            }
            if pivot != col {
                for c in 0..n {
                    let tmp = m[[col, c]];
                    m[[col, c]] = m[[pivot, c]];
                    m[[pivot, c]] = tmp;
                }
                rhs.swap(col, pivot);
            }
            let diag = m[[col, col]];
            for r in col + 1..n {
                let f = m[[r, col]] / diag;
                for c in col..n {
                    m[[r, c]] -= f * m[[col, c]];
                }
                rhs[r] -= f * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = rhs[r];
            for c in r + 1..n {
                acc -= m[[r, c]] * x[c];
            }
            x[r] = acc / m[[r, r]];
        }
        x
    }

    #[test]
    fn full_smoothing_freezes_the_trace() {
        let t = generate_latent(7, 10.0, 1.0, unit_range());
        assert!(t.values.iter().all(|v| *v == t.values[0]));
    }

    #[test]
    fn latent_is_deterministic_per_seed() {
        let a = generate_latent(123, 30.0, 0.9, unit_range());
        let b = generate_latent(123, 30.0, 0.9, unit_range());
        assert_eq!(a.values, b.values);
        let c = generate_latent(124, 30.0, 0.9, unit_range());
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn latent_autocorrelation_stays_high() {
        // empirical oracle over 100 seeds at smoothness 0.95
        for seed in 0..100 {
            let t = generate_latent(seed, 60.0, 0.95, unit_range());
            let r = lag1_autocorr(&t.values).unwrap();
            assert!(r >= 0.9, "seed {seed}: lag-1 autocorr {r}");
        }
    }

    #[test]
    fn latent_stays_in_bounds() {
        for seed in 0..20 {
            let t = generate_latent(seed, 60.0, 0.5, unit_range());
            assert!(t.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_readout_reproduces_latent() {
        let latent = generate_latent(3, 10.0, 0.9, unit_range());
        let readout =
            PrivilegedReadout::from_weights(Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap());
        let stream = emit_privileged(&latent, &readout, 0.0, 99);
        assert_eq!(stream.dim, 1);
        assert_eq!(stream.values, latent.values);
    }

    #[test]
    fn noiseless_privileged_probe_recovers_latent() {
        let latent = generate_latent(5, 30.0, 0.9, unit_range());
        let readout = PrivilegedReadout::seeded(8, derive_seed(42, 0, "readout"));
        let stream = emit_privileged(&latent, &readout, 0.0, 1);
        let rows: Vec<Vec<f64>> =
            (0..stream.len()).map(|i| stream.vector(i).to_vec()).collect();
        let r = linear_probe_pcc(&rows, &latent.values);
        assert!(r >= 0.99, "probe PCC {r}");
    }

    #[test]
    fn noise_streams_differ_per_seed_with_shared_readout() {
        let latent = generate_latent(5, 5.0, 0.9, unit_range());
        let readout = PrivilegedReadout::seeded(4, 77);
        let a = emit_privileged(&latent, &readout, 0.5, 1);
        let b = emit_privileged(&latent, &readout, 0.5, 2);
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn noiseless_blob_centroid_tracks_latent() {
        let latent = generate_latent(9, 30.0, 0.9, unit_range());
        let frames = emit_frames(&latent, (32, 18), 0.0, unit_range(), 11);
        let block = &frames.frames;
        // centroid-regression oracle: intensity-weighted row index per frame
        let mut centroids = Vec::new();
        let mut xs = Vec::new();
        for j in 0..block.n_frames() {
            let frame = block.frame(j);
            let mut wsum = 0.0;
            let mut ysum = 0.0;
            for y in 0..block.height {
                for x in 0..block.width {
                    let v = frame[y * block.width + x] as f64;
                    wsum += v;
                    ysum += v * y as f64;
                }
            }
            centroids.push(ysum / wsum);
            xs.push(latent.value_at_ms(j as i64 * 200));
        }
        let r = affine_probe_pcc(&centroids, &xs);
        assert!(r >= 0.98, "centroid PCC {r}");
    }

    #[test]
    fn blob_centered_at_range_midpoint() {
        let latent = LatentTrace {
            timestamps: (0..25).map(|i| i as f64 * 0.04).collect(),
            values: vec![0.0; 25],
        };
        let frames = emit_frames(&latent, (33, 19), 0.0, unit_range(), 0);
        let frame = frames.frames.frame(0);
        let w = frames.frames.width;
        // brightest row should be the vertical center (0.2 + 0.6*0.5 = 0.5)
        let best_row = (0..frames.frames.height)
            .max_by_key(|y| frame[y * w..(y + 1) * w].iter().map(|v| *v as u32).sum::<u32>())
            .unwrap();
        assert_eq!(best_row, 16);
    }

    #[test]
    fn heavy_pixel_noise_degrades_centroid_below_privileged_probe() {
        let latent = generate_latent(13, 30.0, 0.9, unit_range());
        let readout = PrivilegedReadout::seeded(8, derive_seed(13, 0, "readout"));
        let priv_stream = emit_privileged(&latent, &readout, 0.1, 2);
        let rows: Vec<Vec<f64>> =
            (0..priv_stream.len()).map(|i| priv_stream.vector(i).to_vec()).collect();
        let priv_r = linear_probe_pcc(&rows, &latent.values);

        // noise at blob amplitude drowns the centroid readout
        let frames = emit_frames(&latent, (32, 18), 0.95, unit_range(), 3);
        let block = &frames.frames;
        let mut centroids = Vec::new();
        let mut xs = Vec::new();
        for j in 0..block.n_frames() {
            let frame = block.frame(j);
            let mut wsum = 0.0;
            let mut ysum = 0.0;
            for y in 0..block.height {
                for x in 0..block.width {
                    let v = frame[y * block.width + x] as f64;
                    wsum += v;
                    ysum += v * y as f64;
                }
            }
            centroids.push(ysum / wsum.max(1.0));
            xs.push(latent.value_at_ms(j as i64 * 200));
        }
        let pixel_r = affine_probe_pcc(&centroids, &xs);
        assert!(
            pixel_r < priv_r,
            "pixel probe {pixel_r} should trail privileged probe {priv_r}"
        );
    }

    #[test]
    fn annotations_without_noise_equal_latent() {
        let latent = generate_latent(21, 10.0, 0.9, unit_range());
        let traces = emit_annotations(&latent, 3, 0.0, 0.0, unit_range(), 5);
        assert_eq!(traces.len(), 3);
        for t in traces {
            assert_eq!(t.values, latent.values);
        }
    }

    #[test]
    fn single_biased_annotator_is_clipped_shift() {
        let latent = generate_latent(22, 5.0, 0.9, unit_range());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traces =
            emit_annotations_with_biases(&latent, &[0.1], 0.0, unit_range(), &mut rng);
        let shifted: Vec<f64> =
            latent.values.iter().map(|x| (x + 0.1f64).clamp(-1.0, 1.0)).collect();
        assert_eq!(traces[0].values, shifted);
    }

    #[test]
    fn median_of_annotators_concentrates_on_latent() {
        // median-concentration oracle across seeds
        let noise = 0.3;
        for seed in 0..10 {
            let latent = generate_latent(seed, 20.0, 0.95, unit_range());
            let traces = emit_annotations(&latent, 6, 0.0, noise, unit_range(), seed + 100);
            let mut abs_err_sum = 0.0;
            for (i, &x) in latent.values.iter().enumerate() {
                let mut vals: Vec<f64> = traces.iter().map(|t| t.values[i]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = 0.5 * (vals[2] + vals[3]);
                abs_err_sum += (med - x).abs();
            }
            let mae = abs_err_sum / latent.len() as f64;
            assert!(mae <= noise, "seed {seed}: median MAE {mae} > noise {noise}");
        }
    }

    #[test]
    fn corpus_generation_is_byte_identical_and_roundtrips() {
        let cfg = GeneratorConfig {
            n_participants: 2,
            session_duration: 4.0,
            ..GeneratorConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_corpus(&cfg, d1.path(), false).unwrap();
        let m2 = generate_corpus(&cfg, d2.path(), false).unwrap();
        assert_eq!(m1.corpus_hash, m2.corpus_hash);

        // ingest and compare stream-for-stream
        let (sessions, _) = corpus::read_corpus(d1.path()).unwrap();
        assert_eq!(sessions.len(), 2);
        let (regen, _) = generate_session(&cfg, 0);
        assert_eq!(sessions[0].participant_id, regen.participant_id);
        assert_eq!(sessions[0].frame_stream.frames, regen.frame_stream.frames);
        assert_eq!(sessions[0].feature_streams, regen.feature_streams);
        assert_eq!(sessions[0].annotation_traces, regen.annotation_traces);
    }

    #[test]
    fn refuses_nonempty_output_without_overwrite() {
        let cfg = GeneratorConfig {
            n_participants: 1,
            session_duration: 2.0,
            ..GeneratorConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("keep.txt"), "data").unwrap();
        assert!(matches!(
            generate_corpus(&cfg, dir.path(), false),
            Err(SynthError::Corpus(CorpusError::NonEmptyOutput(_)))
        ));
        assert!(generate_corpus(&cfg, dir.path(), true).is_ok());
    }

    #[test]
    fn default_config_keeps_privileged_more_informative() {
        // informativeness-ordering invariant, checked via both probes on
        // window-free raw streams
        let cfg = GeneratorConfig { n_participants: 1, session_duration: 30.0, ..Default::default() };
        let (session, latent) = generate_session(&cfg, 0);
        let stream = &session.feature_streams[0];
        let rows: Vec<Vec<f64>> = (0..stream.len()).map(|i| stream.vector(i).to_vec()).collect();
        let priv_r = linear_probe_pcc(&rows, &latent.values);

        let block = &session.frame_stream.frames;
        // flattened, 4x-downscaled pixels as the probe features
        let mut pix_rows = Vec::new();
        let mut xs = Vec::new();
        for j in 0..block.n_frames() {
            let frame = block.frame(j);
            let mut row = Vec::new();
            for by in (0..block.height).step_by(4) {
                for bx in (0..block.width).step_by(4) {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for y in by..(by + 4).min(block.height) {
                        for x in bx..(bx + 4).min(block.width) {
                            acc += frame[y * block.width + x] as f64;
                            cnt += 1.0;
                        }
                    }
                    row.push(acc / cnt / 255.0);
                }
            }
            pix_rows.push(row);
            xs.push(latent.value_at_ms(j as i64 * 200));
        }
        let pix_r = linear_probe_pcc(&pix_rows, &xs);
        assert!(
            priv_r > pix_r,
            "privileged probe {priv_r} must beat pixel probe {pix_r}"
        );
    }
}
