//! Sparse energy-based generative multivariate curve resolution.
//!
//! A mixture `x` is modelled as the superposition of learned non-negative
//! components, each switched on per sample by an energy-based selection gate
//! and masked entry-wise by a static sparsity gate:
//!
//! ```text
//! x ≈ Σ_i δ_i(x) · c_i(x) · (S_i ⊙ M_i)
//! ```
//!
//! Modules follow the pipeline: [`numerics`] substrate, gates
//! ([`static_gate`], [`dynamic_gate`]), the generative [`model`], its
//! [`optimizer`], the [`synth`] benchmark generator, classical
//! [`baselines`], [`metrics`], and the chromatogram [`decontam`] pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod decontam;
pub mod dynamic_gate;
pub mod error;
pub mod io;
pub mod metrics;
mod mlp;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod static_gate;
pub mod synth;

pub use error::{GmcrError, Result};
pub use mlp::Mlp;
pub use model::{GmcrModel, ModelConfig};
pub use numerics::{Matrix, Rng};
pub use optimizer::{HyperParams, LossBreakdown, SolverCheckpoint, TrainOutcome};
