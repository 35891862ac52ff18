//! Desk-scale laboratory for long-range distillation of a chaotic
//! autoregressive teacher into a single-timestep probabilistic student.
//!
//! The pipeline, end to end:
//!
//! 1. [`dynsys`] — a two-scale Lorenz-96 ring with seasonally modulated
//!    forcing acts as the deterministic "teacher" of synthetic climate.
//! 2. [`datagen`] — large ensembles of teacher runs are integrated,
//!    pruned for instability, averaged to daily frames and persisted.
//! 3. [`targets`] — time-averaged long-range targets, conditioning
//!    histories and climatological baselines are cut from trajectories.
//! 4. [`student`] — a conditional denoising network on the ring is
//!    trained with the EDM objective (log-uniform sigma, condition
//!    dropout) using hand-rolled reverse-mode gradients and Adam.
//! 5. [`sampler`] — deterministic Heun ODE sampling with classifier-free
//!    guidance turns the trained denoiser into ensemble forecasts.
//! 6. [`perturb`] — Matern-correlated initial-condition noise and the
//!    amplitude-tuning procedure for perfect-model experiments.
//! 7. [`verify`] — CRPS, spread-skill, bias correction, significance
//!    maps and bootstrap intervals for scoring the forecasts.
//! 8. [`qrbaseline`] — a quintile-classification baseline sharing the
//!    student's backbone.

pub mod datagen;
pub mod dynsys;
pub mod error;
pub mod perturb;
pub mod qrbaseline;
pub mod rng;
pub mod sampler;
pub mod student;
pub mod targets;
pub mod verify;

pub use error::{Error, Result};
