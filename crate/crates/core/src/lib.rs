//! Hierarchical Thompson sampling over a growing domain tree, with
//! sliding-window change detection, for steering multi-model data synthesis.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f64` or `f32`); the
//! aliases below fix it to `f64` for the orchestrator and CLI.

pub mod bandit;
pub mod detect;
pub mod llm;
pub mod oracle;
pub mod orchestrator;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod tree;

pub type Posterior = bandit::ArmPosterior<f64>;
pub type PosteriorTable = bandit::PosteriorTable<f64>;
pub type IrConfig = detect::IrConfig<f64>;
pub type SwblrtResult = detect::SwblrtResult<f64>;

pub type Posterior32 = bandit::ArmPosterior<f32>;
pub type PosteriorTable32 = bandit::PosteriorTable<f32>;
pub type IrConfig32 = detect::IrConfig<f32>;
pub type SwblrtResult32 = detect::SwblrtResult<f32>;
