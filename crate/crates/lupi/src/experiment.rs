//! Experiment orchestration (sweeps, comparisons, manifests).

// implemented after the training stack compiles
