//! Multi-fidelity Gaussian process modeling.
//!
//! The crate provides three interchangeable surrogate models over datasets
//! observed at several ordered fidelity levels:
//!
//! * [`baselines::Ar1Model`] — the linear autoregressive co-kriging model,
//!   trained jointly over all levels.
//! * [`baselines::NargpModel`] — sequentially trained composite-kernel GPs
//!   with Monte-Carlo uncertainty propagation between levels.
//! * [`mfdgp::MfdgpModel`] — a deep GP with one sparse variational layer per
//!   fidelity, trained end-to-end on a joint evidence lower bound.
//!
//! Models are registered by name in [`registry`] and selected at runtime.
//! Supporting layers: dense linear algebra with a deterministic jitter
//! ladder ([`linalg`]), a reverse-mode gradient engine over matrix
//! operations ([`diff`]), Adam with per-segment freeze masks
//! ([`optimizer`]), covariance functions ([`kernels`]), closed-form
//! benchmark problems and metrics ([`benchmarks`]), and a k-DPP sampler for
//! posterior-driven experimental design ([`dpp`]).

pub mod baselines;
pub mod data;
pub mod diff;
pub mod gp_exact;
pub mod kernels;
pub mod linalg;
pub mod mfdgp;
pub mod optimizer;
pub mod registry;
pub mod rng;
pub mod svgp;

pub use data::MultiFidelityDataset;
pub use linalg::{CholeskyFactor, DenseMatrix, JitterPolicy};
