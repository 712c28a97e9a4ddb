//! Stochastic gradient MCMC for hidden Markov models, autoregressive HMMs,
//! linear Gaussian state space models and switching linear dynamical systems.
//!
//! Gradients are estimated from short subsequences whose latent-state messages
//! are passed over a buffered window around the subsequence. The samplers are
//! Langevin (SGLD) and Riemannian Langevin (SGRLD) dynamics in an unconstrained
//! parameterization.

pub mod buffer_theory;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod grad_estimators;
pub mod linalg;
pub mod message_passing;
pub mod models;
pub mod preconditioners;
pub mod samplers;

pub use error::{Error, Result};
pub use models::prior::PriorSpec;
pub use models::{
    ArhmmParams, BlockGroup, BlockInfo, BlockKind, Family, GaussianHmmParams, GradientVector,
    InitialDist, Layout, LgssmParams, ModelParams, ObservationSequence, SldsParams,
};
pub use models::synthetic::{synthetic_star, SyntheticTag};
pub use grad_estimators::{buffered_gradient, full_gradient, BufferedSubsequence, SubsequenceScheme};
pub use samplers::{run_chain, SamplerConfig, SamplerKind, StepSchedule, Trace};
pub use evaluation::MetricReport;
pub use experiments::ExperimentConfig;
