//! Offline-to-online safe reinforcement learning on desk-scale CMDPs.
//!
//! The pipeline has three stages: conservative offline pretraining of a
//! policy and reward/cost critics ([`offline`]), value pre-alignment of the
//! critics by entropy-augmented fitted Q-evaluation ([`vpa`]), and
//! SAC-Lagrangian online finetuning whose multiplier is driven by a dual
//! ascent, PID, or adaptive PID controller ([`lagrange`], [`online`]).
//! Exact tabular solvers in [`oracle`] supply ground truth for the discrete
//! environment.

pub mod approx;
pub mod cmdp;
pub mod error;
pub mod experiment;

pub mod lagrange;
pub mod offline;
pub mod online;
pub mod oracle;
pub mod rng;
pub mod vpa;

pub use error::{Error, Result};
