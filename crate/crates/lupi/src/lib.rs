//! Teacher/student training with privileged modalities for affect models.
//!
//! A participant's recording session carries several synchronized streams:
//! raw footage frames plus feature streams (audio, visual, physiology) that
//! need lab equipment or heavyweight software to produce. Models deployed
//! outside the lab only get the frames. This crate trains *teacher* networks
//! on the privileged streams, then distills their knowledge into a *student*
//! that predicts arousal/valence from pixels alone, for both classification
//! and regression.
//!
//! The crate is organized around the experiment lifecycle:
//!
//! * [`corpus`] — session data model and the on-disk corpus format
//! * [`synth`] — seeded synthetic corpora with controllable modality noise
//! * [`windowing`] — sliding windows, label aggregation, binarization
//! * [`nn`] — the four network architectures and their exact gradients
//! * [`losses`] — blended task/distillation losses
//! * [`train`] — Adam optimization with grouped validation early stopping
//! * [`metrics`] — accuracy, Pearson and concordance correlation
//! * [`stats`] — normality-gated paired significance tests
//! * [`cv`] — participant-grouped repeated cross-validation
//! * [`experiment`] — sweep/compare orchestration and run manifests
//! * [`report`] — CSV tables and SVG plots from result trees

pub mod corpus;
pub mod cv;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod stats;
pub mod synth;
pub mod train;
pub mod windowing;

pub use corpus::{AnnotationTrace, FeatureStream, FrameStream, Session};
pub use losses::LupiLossConfig;
pub use metrics::MetricsReport;
pub use nn::{ModelKind, ModelSpec, TaskKind};
pub use stats::SignificanceReport;
pub use train::TrainConfig;

/// Book chapters double as doc-tests so the guide can never drift from the
/// API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(ch01, "../../../book/src/overview.md");
    chapter!(ch02, "../../../book/src/corpus.md");
    chapter!(ch03, "../../../book/src/windowing.md");
    chapter!(ch04, "../../../book/src/models.md");
    chapter!(ch05, "../../../book/src/losses.md");
    chapter!(ch06, "../../../book/src/training.md");
    chapter!(ch07, "../../../book/src/evaluation.md");
    chapter!(ch08, "../../../book/src/experiments.md");
}
