//! A desk-scale offline RL laboratory for latent-steered one-step policies.
//!
//! The crate trains generative base policies (mean-flow one-step models and
//! flow-matching models) on offline action-chunk demonstrations, then
//! extracts value from a chunk-level critic ensemble either in action space
//! or by steering the base policy's latent input. Everything runs on a
//! hand-rolled reverse-mode tape over dense row-major tensors, with ChaCha
//! streams making every run a pure function of its config.
//!
//! Module map:
//! * [`tensor`], [`rng`], [`exec`], [`error`] -- substrate.
//! * [`autodiff`] -- the tape: reverse gradients, forward tangents,
//!   stop-gradients, finite-difference checks.
//! * [`nn`] -- MLPs, Adam, polyak averaging, parameter (de)serialization.
//! * [`latent`] -- prior geometries (sphere / normal / truncated) and the
//!   differentiable heads that keep actors on them.
//! * [`meanflow`] -- base policies: average-velocity training with the
//!   tangent-derived target, flow matching, one-step decoding.
//! * [`critic`] -- chunk-return critic ensembles with polyak targets.
//! * [`agents`] -- the extraction algorithms and the three-phase train step.
//! * [`envlab`] -- toy environments, scripted demonstrators, datasets,
//!   chunk sampling, policy evaluation.
//! * [`harness`] -- configs, metrics files, runs, sweeps, diagnostics.

pub mod agents;
pub mod autodiff;
pub mod critic;
pub mod envlab;
pub mod error;
pub mod exec;
pub mod harness;
pub mod latent;
pub mod meanflow;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{LpsError, Result};
