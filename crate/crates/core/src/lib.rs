//! Desk-scale subjective-response indicator (SRI) pipeline and hypergraph
//! multimodal training core.
//!
//! The crate is organised bottom-up:
//!
//! - [`signal`]: per-timestamp engagement, emotion and eye-movement ratio,
//!   plus the class table mapping indicator values to labels.
//! - [`aggregation`]: demographic grouping and scene-window aggregation into
//!   labelled records.
//! - [`fsvr`]: adaptive scene-cut detection, middle-frame keyframes and the
//!   fixed 8-frame selection.
//! - [`hypergraph`]: k-NN hypergraph construction and the spectral
//!   hypergraph convolution (forward and backward).
//! - [`salm`]: toy visual encoder, query cross-attention, projector, mixer,
//!   tiny language model and the two-stage training loop.
//! - [`synth`]: seeded generators with planted ground truth.
//! - [`harness`]: metrics, baselines, evaluation and the λ ablation.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and a plain iterator otherwise. Results are
//! always reduced in index order so both paths produce identical bits.

pub mod aggregation;
pub mod fsvr;
pub mod harness;
pub mod hypergraph;
pub mod io;
pub mod nn;
pub mod par;
pub mod salm;
pub mod signal;
pub mod synth;

pub use par::Execution;
