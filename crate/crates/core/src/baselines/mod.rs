//! Comparison models: the linear autoregressive AR1 model (joint
//! Kennedy–O'Hagan covariance over all fidelities) and NARGP (sequentially
//! trained composite-kernel GPs with Monte-Carlo uncertainty propagation).

mod ar1;
mod nargp;

pub use ar1::{Ar1Builder, Ar1Config, Ar1Model};
pub use nargp::{NargpBuilder, NargpConfig, NargpModel};
