//! Temporal range: how far back a sequence model looks.
//!
//! For a model producing outputs `y_s` from observations `x_1..x_s`, the
//! influence of position `t` is the aggregated matrix norm of the Jacobian
//! blocks `∂y_s/∂x_t` over later steps `s`. The temporal range is the
//! influence-weighted sum of lags `T - t`; its normalized form is the
//! influence-weighted mean lag.
//!
//! Modules, bottom-up:
//!
//! * [`linalg`], [`rng`]: dense matrices, norms, reproducible random streams.
//! * [`model`]: linear / GRU / LSTM / LEM sequence models and checkpoints.
//! * [`grad`]: input Jacobian blocks, BPTT parameter gradients, FD oracles.
//! * [`metric`]: influence weights, ranges, calibration-set analysis.
//! * [`oracles`]: closed-form ranges and the axiom property suite.
//! * [`tasks`]: Copy-k, RepeatFirst, CartPole and datasets.
//! * [`trainer`]: Adam with global-norm clipping, supervised training.
//! * [`ablation`]: truncated-window evaluation and deployment checks.

#![allow(clippy::needless_range_loop)]

pub mod ablation;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod metric;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use grad::{input_jacobians, JacobianBlocks, JacobianMode, LossKind, Target};
pub use linalg::{mat_norm, mat_pow, Matrix, NormKind};
pub use metric::{analyze, Aggregation, InfluenceProfile, NormalizedRange, TemporalRangeReport, TrConfig};
pub use model::{CellKind, CellSpec, EncoderSpec, ModelSpec, ObservationSequence, SequenceModel};
pub use rng::Rng;
