//! Geometry-aware supervision for a small multimodal transformer.
//!
//! This crate contains everything needed to train and probe patch
//! correspondence inside a transformer on synthetic multi-view data:
//!
//! * [`geometry`] — pinhole cameras, back-projection / projection round
//!   trips, occlusion-aware track generation, and frame sampling.
//! * [`scenegen`] — deterministic synthetic scenes: planar surfaces carrying
//!   feature points, rasterized depth maps, and token grids with exact
//!   ground-truth correspondences.
//! * [`autodiff`] — a dense-tensor reverse-mode tape with the operations the
//!   model and losses need, plus finite-difference checking utilities.
//! * [`model`] — a decoder with frozen random-orthogonal attention
//!   projections, trainable low-rank adapters, and per-layer correspondence
//!   heads.
//! * [`losses`] — contrastive correspondence loss, soft-argmax expected
//!   depth with a scale-invariant depth-consistency penalty, and the
//!   combined training objective.
//! * [`trainer`] — AdamW with cosine schedule and warmup, gradient
//!   clipping, and the deterministic interleaved training loop.
//! * [`eval`] — query/key similarity probing, PCK, confidence calibration,
//!   and temporal-robustness curves.
//!
//! Everything is `f64`, seeded, and deterministic: identical inputs produce
//! bit-identical outputs. The crate is `no_std`-compatible (with `alloc`);
//! file formats and the command-line driver live in the companion
//! `gasp-cli` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod eval;
pub mod geometry;
pub mod lang;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod scenegen;
pub mod trainer;
