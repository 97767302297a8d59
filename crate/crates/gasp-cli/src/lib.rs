//! Command implementations and file formats for the `gasp` binary:
//! dataset generation with a checksummed manifest, training with step logs
//! and checkpoints, held-out evaluation reports, finite-difference gradient
//! verification, and ablation sweeps.
//!
//! Everything here is deterministic given the run seed; identical
//! invocations produce byte-identical datasets, logs, checkpoints, and
//! reports. All binary formats are little-endian, carry a magic tag plus a
//! format version, and readers reject unknown versions.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod errors;
pub mod eval_cmd;
pub mod gradcheck;
pub mod report;
pub mod seeds;
pub mod train_cmd;
