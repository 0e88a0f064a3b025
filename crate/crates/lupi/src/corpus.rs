//! Session data model and the corpus-on-disk adapter.
//!
//! A corpus is a directory with one subdirectory per session:
//!
//! ```text
//! corpus/
//!   p01/
//!     meta.json            participant_id, duration, fps, label_range
//!     frames/000000.png    8-bit grayscale, zero-padded frame index
//!     features_<mod>.csv   header: t,f0,f1,...
//!     annotations.csv      header: t,<annotator_id>,...
//! ```
//!
//! Timestamps are seconds with 3-decimal precision. The same reader ingests
//! synthetic corpora written by [`crate::synth`] and real recordings exported
//! by external tooling; nothing downstream knows the difference.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: row {row}: expected {expected} columns, found {found}")]
    ColumnCount {
        file: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{file}: row {row}: {message}")]
    BadValue {
        file: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{file}: {message}")]
    BadFile { file: PathBuf, message: String },
    #[error("session {session}: {message}")]
    BadSession { session: String, message: String },
    #[error("missing required file {0}")]
    MissingFile(PathBuf),
    #[error("duplicate participant id {0}")]
    DuplicateParticipant(String),
    #[error("output directory {0} exists and is not empty (pass overwrite to replace)")]
    NonEmptyOutput(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.to_path_buf(), source }
}

/// Inclusive label bounds declared by the corpus (e.g. [-1, 1] or [0, 1]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRange {
    pub lo: f64,
    pub hi: f64,
}

impl LabelRange {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// One annotator's continuous trace on the shared timestamp grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTrace {
    pub annotator_id: String,
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

/// Dense block of same-sized grayscale frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBlock {
    pub height: usize,
    pub width: usize,
    /// `n_frames * height * width` intensities, frame-major.
    pub data: Vec<u8>,
}

impl FrameBlock {
    pub fn n_frames(&self) -> usize {
        if self.height * self.width == 0 {
            0
        } else {
            self.data.len() / (self.height * self.width)
        }
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let sz = self.height * self.width;
        &self.data[i * sz..(i + 1) * sz]
    }
}

/// Raw footage frames with their native rate and skip factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub frames: Arc<FrameBlock>,
    pub native_fps: u32,
    pub skip: u32,
}

impl FrameStream {
    /// Timestamp of native frame `i`.
    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 / self.native_fps as f64
    }

    pub fn effective_fps(&self) -> u32 {
        self.native_fps / self.skip
    }
}

/// One feature modality: fixed-dimension vectors on an increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub modality: String,
    pub dim: usize,
    pub timestamps: Vec<f64>,
    /// `timestamps.len() * dim` values, row-major.
    pub values: Vec<f64>,
}

impl FeatureStream {
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// One participant's synchronized recording.
#[derive(Debug, Clone)]
pub struct Session {
    pub participant_id: String,
    pub duration: f64,
    pub frame_stream: FrameStream,
    /// Sorted by modality name so downstream fusion order is deterministic.
    pub feature_streams: Vec<FeatureStream>,
    pub annotation_traces: Vec<AnnotationTrace>,
    pub label_range: LabelRange,
}

impl Session {
    /// Structural invariants: increasing grids, shared annotation grid,
    /// bounded values, positive duration.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let sid = &self.participant_id;
        let fail = |message: String| CorpusError::BadSession { session: sid.clone(), message };
        if !(self.duration > 0.0) {
            return Err(fail("duration must be positive".into()));
        }
        if self.annotation_traces.is_empty() {
            return Err(fail("at least one annotation trace required".into()));
        }
        if self.frame_stream.skip < 1 {
            return Err(fail("frame skip must be >= 1".into()));
        }
        let grid = &self.annotation_traces[0].timestamps;
        for trace in &self.annotation_traces {
            if trace.timestamps.len() != trace.values.len() {
                return Err(fail(format!(
                    "annotator {}: {} timestamps vs {} values",
                    trace.annotator_id,
                    trace.timestamps.len(),
                    trace.values.len()
                )));
            }
            if !strictly_increasing(&trace.timestamps) {
                return Err(fail(format!(
                    "annotator {}: timestamps not strictly increasing",
                    trace.annotator_id
                )));
            }
            if trace.timestamps != *grid {
                return Err(fail(format!(
                    "annotator {} is not on the shared timestamp grid",
                    trace.annotator_id
                )));
            }
            if let Some(v) = trace.values.iter().find(|v| !self.label_range.contains(**v)) {
                return Err(fail(format!(
                    "annotator {}: value {v} outside label range [{}, {}]",
                    trace.annotator_id, self.label_range.lo, self.label_range.hi
                )));
            }
        }
        for stream in &self.feature_streams {
            if !strictly_increasing(&stream.timestamps) {
                return Err(fail(format!(
                    "feature stream {}: timestamps not increasing",
                    stream.modality
                )));
            }
            if stream.values.len() != stream.timestamps.len() * stream.dim {
                return Err(fail(format!(
                    "feature stream {}: ragged value matrix",
                    stream.modality
                )));
            }
        }
        Ok(())
    }

    pub fn feature_stream(&self, modality: &str) -> Option<&FeatureStream> {
        self.feature_streams.iter().find(|s| s.modality == modality)
    }
}

fn strictly_increasing(ts: &[f64]) -> bool {
    ts.windows(2).all(|w| w[0] < w[1])
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionMeta {
    participant_id: String,
    duration: f64,
    fps: u32,
    label_range: (f64, f64),
}

/// Effective frame rate every corpus must provide after skipping.
pub const EFFECTIVE_FPS: u32 = 5;

fn fmt_ts(t: f64) -> String {
    format!("{t:.3}")
}

/// Write one session in the adapter layout under `dir` (created fresh).
pub fn write_session(dir: &Path, session: &Session) -> Result<(), CorpusError> {
    session.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let meta = SessionMeta {
        participant_id: session.participant_id.clone(),
        duration: session.duration,
        fps: session.frame_stream.native_fps,
        label_range: (session.label_range.lo, session.label_range.hi),
    };
    let meta_path = dir.join("meta.json");
    let mut f = fs::File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    serde_json::to_writer_pretty(&mut f, &meta)
        .map_err(|e| CorpusError::BadFile { file: meta_path.clone(), message: e.to_string() })?;
    f.write_all(b"\n").map_err(|e| io_err(&meta_path, e))?;

    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    let block = &session.frame_stream.frames;
    for i in 0..block.n_frames() {
        let path = frames_dir.join(format!("{i:06}.png"));
        image::save_buffer(
            &path,
            block.frame(i),
            block.width as u32,
            block.height as u32,
            image::ColorType::L8,
        )
        .map_err(|e| CorpusError::Image { path: path.clone(), message: e.to_string() })?;
    }

    for stream in &session.feature_streams {
        let path = dir.join(format!("features_{}.csv", stream.modality));
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| CorpusError::BadFile { file: path.clone(), message: e.to_string() })?;
        let mut header = vec!["t".to_string()];
        header.extend((0..stream.dim).map(|i| format!("f{i}")));
        w.write_record(&header)
            .map_err(|e| CorpusError::BadFile { file: path.clone(), message: e.to_string() })?;
        for (i, t) in stream.timestamps.iter().enumerate() {
            let mut rec = vec![fmt_ts(*t)];
            rec.extend(stream.vector(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec)
                .map_err(|e| CorpusError::BadFile { file: path.clone(), message: e.to_string() })?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }

    let ann_path = dir.join("annotations.csv");
    let mut w = csv::Writer::from_path(&ann_path)
        .map_err(|e| CorpusError::BadFile { file: ann_path.clone(), message: e.to_string() })?;
    let mut header = vec!["t".to_string()];
    header.extend(session.annotation_traces.iter().map(|a| a.annotator_id.clone()));
    w.write_record(&header)
        .map_err(|e| CorpusError::BadFile { file: ann_path.clone(), message: e.to_string() })?;
    let grid = &session.annotation_traces[0].timestamps;
    for (i, t) in grid.iter().enumerate() {
        let mut rec = vec![fmt_ts(*t)];
        rec.extend(session.annotation_traces.iter().map(|a| format!("{}", a.values[i])));
        w.write_record(&rec)
            .map_err(|e| CorpusError::BadFile { file: ann_path.clone(), message: e.to_string() })?;
    }
    w.flush().map_err(|e| io_err(&ann_path, e))?;
    Ok(())
}

fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| CorpusError::BadFile { file: path.to_path_buf(), message: e.to_string() })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CorpusError::BadFile { file: path.to_path_buf(), message: e.to_string() })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() || header[0] != "t" {
        return Err(CorpusError::BadFile {
            file: path.to_path_buf(),
            message: "first header column must be `t`".into(),
        });
    }
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row_no = idx + 2; // 1-based, after header
        let rec = rec
            .map_err(|e| CorpusError::BadFile { file: path.to_path_buf(), message: e.to_string() })?;
        if rec.len() != header.len() {
            return Err(CorpusError::ColumnCount {
                file: path.to_path_buf(),
                row: row_no,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let mut row = Vec::with_capacity(rec.len());
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| CorpusError::BadValue {
                file: path.to_path_buf(),
                row: row_no,
                message: format!("not a number: {field:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Read one session directory.
pub fn read_session(dir: &Path) -> Result<Session, CorpusError> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|_| CorpusError::MissingFile(meta_path.clone()))?;
    let meta: SessionMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CorpusError::BadFile { file: meta_path.clone(), message: e.to_string() })?;
    if meta.fps == 0 || meta.fps % EFFECTIVE_FPS != 0 {
        return Err(CorpusError::BadFile {
            file: meta_path.clone(),
            message: format!("fps {} is not a multiple of the effective rate {EFFECTIVE_FPS}", meta.fps),
        });
    }
    let skip = meta.fps / EFFECTIVE_FPS;

    // frames, in index order
    let frames_dir = dir.join("frames");
    let mut frame_files: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(|_| CorpusError::MissingFile(frames_dir.clone()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    frame_files.sort();
    if frame_files.is_empty() {
        return Err(CorpusError::BadFile { file: frames_dir, message: "no frames".into() });
    }
    let mut height = 0usize;
    let mut width = 0usize;
    let mut data: Vec<u8> = Vec::new();
    for path in &frame_files {
        let img = image::open(path)
            .map_err(|e| CorpusError::Image { path: path.clone(), message: e.to_string() })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if height == 0 {
            height = h;
            width = w;
        } else if (h, w) != (height, width) {
            return Err(CorpusError::Image {
                path: path.clone(),
                message: format!("resolution {w}x{h} differs from first frame {width}x{height}"),
            });
        }
        data.extend_from_slice(img.as_raw());
    }
    let frame_stream = FrameStream {
        frames: Arc::new(FrameBlock { height, width, data }),
        native_fps: meta.fps,
        skip,
    };

    // feature streams
    let mut feature_streams = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(modality) = name.strip_prefix("features_").and_then(|n| n.strip_suffix(".csv")) {
            let (header, rows) = read_numeric_csv(&path)?;
            let dim = header.len() - 1;
            if dim == 0 {
                return Err(CorpusError::BadFile { file: path, message: "no feature columns".into() });
            }
            let mut timestamps = Vec::with_capacity(rows.len());
            let mut values = Vec::with_capacity(rows.len() * dim);
            for row in rows {
                timestamps.push(row[0]);
                values.extend_from_slice(&row[1..]);
            }
            feature_streams.push(FeatureStream { modality: modality.to_string(), dim, timestamps, values });
        }
    }
    feature_streams.sort_by(|a, b| a.modality.cmp(&b.modality));

    // annotations
    let ann_path = dir.join("annotations.csv");
    if !ann_path.exists() {
        return Err(CorpusError::MissingFile(ann_path));
    }
    let (header, rows) = read_numeric_csv(&ann_path)?;
    if header.len() < 2 {
        return Err(CorpusError::BadFile { file: ann_path, message: "no annotator columns".into() });
    }
    let timestamps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let annotation_traces: Vec<AnnotationTrace> = header[1..]
        .iter()
        .enumerate()
        .map(|(k, id)| AnnotationTrace {
            annotator_id: id.clone(),
            timestamps: timestamps.clone(),
            values: rows.iter().map(|r| r[k + 1]).collect(),
        })
        .collect();

    let session = Session {
        participant_id: meta.participant_id,
        duration: meta.duration,
        frame_stream,
        feature_streams,
        annotation_traces,
        label_range: LabelRange { lo: meta.label_range.0, hi: meta.label_range.1 },
    };
    session.validate()?;
    Ok(session)
}

/// Per-session coverage facts gathered while validating a corpus.
#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub participant_id: String,
    pub duration: f64,
    pub n_frames: usize,
    pub modalities: BTreeMap<String, usize>,
    pub n_annotators: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusReport {
    pub sessions: Vec<SessionSummary>,
    pub label_range: (f64, f64),
}

/// Read every session under `root`, enforcing cross-session consistency:
/// unique participants, one shared label range, one dimension per modality.
pub fn read_corpus(root: &Path) -> Result<(Vec<Session>, CorpusReport), CorpusError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("meta.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CorpusError::BadFile {
            file: root.to_path_buf(),
            message: "no session directories (subdirectory with meta.json) found".into(),
        });
    }
    let mut sessions = Vec::new();
    let mut summaries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut modality_dims: BTreeMap<String, usize> = BTreeMap::new();
    let mut label_range: Option<LabelRange> = None;
    for dir in dirs {
        let session = read_session(&dir)?;
        if !seen.insert(session.participant_id.clone()) {
            return Err(CorpusError::DuplicateParticipant(session.participant_id));
        }
        match label_range {
            None => label_range = Some(session.label_range),
            Some(r) if r == session.label_range => {}
            Some(r) => {
                return Err(CorpusError::BadSession {
                    session: session.participant_id.clone(),
                    message: format!(
                        "label range [{}, {}] differs from corpus range [{}, {}]",
                        session.label_range.lo, session.label_range.hi, r.lo, r.hi
                    ),
                });
            }
        }
        for stream in &session.feature_streams {
            match modality_dims.get(&stream.modality) {
                None => {
                    modality_dims.insert(stream.modality.clone(), stream.dim);
                }
                Some(&d) if d == stream.dim => {}
                Some(&d) => {
                    return Err(CorpusError::BadSession {
                        session: session.participant_id.clone(),
                        message: format!(
                            "modality {} has dimension {} here but {} elsewhere",
                            stream.modality, stream.dim, d
                        ),
                    });
                }
            }
        }
        summaries.push(SessionSummary {
            participant_id: session.participant_id.clone(),
            duration: session.duration,
            n_frames: session.frame_stream.frames.n_frames(),
            modalities: session
                .feature_streams
                .iter()
                .map(|s| (s.modality.clone(), s.dim))
                .collect(),
            n_annotators: session.annotation_traces.len(),
        });
        sessions.push(session);
    }
    let range = label_range.expect("at least one session");
    Ok((sessions, CorpusReport { sessions: summaries, label_range: (range.lo, range.hi) }))
}

/// SHA-256 over every file under `root`, keyed by sorted relative path.
pub fn hash_tree(root: &Path) -> Result<String, CorpusError> {
    fn walk(dir: &Path, base: &Path, files: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, base, files)?;
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                files.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, root, &mut files).map_err(|e| io_err(root, e))?;
    files.sort();
    let mut hasher = Sha256::new();
    for (rel, path) in files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&path).map_err(|e| io_err(&path, e))?);
    }
    Ok(hex_digest(hasher))
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_session(pid: &str) -> Session {
        let h = 8;
        let w = 6;
        let n_frames = 10; // 2 s at 5 fps
        let mut data = Vec::with_capacity(n_frames * h * w);
        for i in 0..n_frames {
            data.extend(std::iter::repeat((i * 20) as u8).take(h * w));
        }
        let grid: Vec<f64> = (0..50).map(|i| (i * 40) as f64 / 1000.0).collect();
        Session {
            participant_id: pid.to_string(),
            duration: 2.0,
            frame_stream: FrameStream {
                frames: Arc::new(FrameBlock { height: h, width: w, data }),
                native_fps: 5,
                skip: 1,
            },
            feature_streams: vec![FeatureStream {
                modality: "priv".into(),
                dim: 3,
                timestamps: grid.clone(),
                values: (0..50 * 3).map(|i| i as f64 * 0.01).collect(),
            }],
            annotation_traces: vec![
                AnnotationTrace {
                    annotator_id: "a0".into(),
                    timestamps: grid.clone(),
                    values: vec![0.25; 50],
                },
                AnnotationTrace {
                    annotator_id: "a1".into(),
                    timestamps: grid,
                    values: vec![-0.25; 50],
                },
            ],
            label_range: LabelRange { lo: -1.0, hi: 1.0 },
        }
    }

    #[test]
    fn roundtrip_preserves_session() {
        let dir = tempfile::tempdir().unwrap();
        let session = tiny_session("p00");
        write_session(dir.path(), &session).unwrap();
        let back = read_session(dir.path()).unwrap();
        assert_eq!(back.participant_id, session.participant_id);
        assert_eq!(back.duration, session.duration);
        assert_eq!(back.frame_stream.frames, session.frame_stream.frames);
        assert_eq!(back.frame_stream.skip, 1);
        assert_eq!(back.feature_streams, session.feature_streams);
        assert_eq!(back.annotation_traces, session.annotation_traces);
    }

    #[test]
    fn wrong_column_count_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), &tiny_session("p00")).unwrap();
        let path = dir.path().join("features_priv.csv");
        let mut content = fs::read_to_string(&path).unwrap();
        content.push_str("9.999,1.0\n"); // 2 columns instead of 4
        fs::write(&path, content).unwrap();
        let err = read_session(dir.path()).unwrap_err();
        match err {
            CorpusError::ColumnCount { row, expected, found, .. } => {
                assert_eq!(expected, 4);
                assert_eq!(found, 2);
                assert_eq!(row, 52);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_annotations_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_session(dir.path(), &tiny_session("p00")).unwrap();
        fs::remove_file(dir.path().join("annotations.csv")).unwrap();
        assert!(matches!(read_session(dir.path()), Err(CorpusError::MissingFile(_))));
    }

    #[test]
    fn corpus_rejects_duplicate_participants() {
        let dir = tempfile::tempdir().unwrap();
        write_session(&dir.path().join("s0"), &tiny_session("p00")).unwrap();
        write_session(&dir.path().join("s1"), &tiny_session("p00")).unwrap();
        assert!(matches!(
            read_corpus(dir.path()),
            Err(CorpusError::DuplicateParticipant(_))
        ));
    }

    #[test]
    fn out_of_range_annotation_rejected() {
        let mut session = tiny_session("p00");
        session.annotation_traces[0].values[3] = 2.0;
        assert!(session.validate().is_err());
    }

    #[test]
    fn tree_hash_changes_with_content() {
        let dir = tempfile::tempdir().unwrap();
        write_session(&dir.path().join("s0"), &tiny_session("p00")).unwrap();
        let h1 = hash_tree(dir.path()).unwrap();
        let h1b = hash_tree(dir.path()).unwrap();
        assert_eq!(h1, h1b);
        write_session(&dir.path().join("s1"), &tiny_session("p01")).unwrap();
        let h2 = hash_tree(dir.path()).unwrap();
        assert_ne!(h1, h2);
    }
}
