//! Surrogate-model strategy registry.
//!
//! Each model family (AR1, NARGP, MF-DGP) implements [`ModelBuilder`] and
//! is registered under its name; callers select a strategy at runtime via
//! configuration and drive it through the [`SurrogateModel`] trait object.

use thiserror::Error;

use crate::data::{DataError, MultiFidelityDataset};
use crate::diff::{DiffError, ParamVector};
use crate::kernels::KernelError;
use crate::linalg::{DenseMatrix, LinalgError};
use crate::optimizer::OptimError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unknown fidelity level {level} (model has {max})")]
    UnknownFidelity { level: usize, max: usize },
    #[error("model requires at least {needed} fidelity levels, got {got}")]
    UnsupportedFidelityCount { needed: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("predictive variance {0} is negative beyond round-off")]
    NegativeVariance(f64),
}

/// One monitored point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub objective: f64,
    pub lr: f64,
}

/// Outcome of a training run: the monitored trace and whether the run was
/// cut short by a non-finite objective (the model then holds the last
/// finite state).
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub points: Vec<TracePoint>,
    pub diverged: bool,
}

/// Moment-matched predictions at a fidelity level.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// A trained multi-fidelity surrogate.
pub trait SurrogateModel: Send {
    fn name(&self) -> &'static str;

    fn num_levels(&self) -> usize;

    /// Moment-matched predictive mean and variance at `level` for raw
    /// (unscaled) inputs.
    fn predict(
        &self,
        x: &DenseMatrix,
        level: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Prediction, ModelError>;

    /// Per-point log predictive density of `y` at `level`, with
    /// observation noise included.
    fn log_density(
        &self,
        x: &DenseMatrix,
        y: &[f64],
        level: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError>;

    /// Joint posterior over a candidate set at `level`: mean vector and a
    /// full covariance matrix, estimated from propagated sample paths for
    /// compositional models.
    fn joint_posterior(
        &self,
        x: &DenseMatrix,
        level: usize,
        samples: usize,
        seed: u64,
    ) -> Result<(Vec<f64>, DenseMatrix), ModelError>;

    /// Flat parameter vector (for checkpointing).
    fn params(&self) -> &ParamVector;
}

/// Per-model training settings; each model reads its own section.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub ar1: crate::baselines::Ar1Config,
    pub nargp: crate::baselines::NargpConfig,
    pub mfdgp: crate::mfdgp::MfdgpConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            ar1: Default::default(),
            nargp: Default::default(),
            mfdgp: Default::default(),
        }
    }
}

/// Fits models of one family and restores them from checkpointed
/// parameters.
pub trait ModelBuilder: Sync {
    fn name(&self) -> &'static str;

    fn fit(
        &self,
        data: &MultiFidelityDataset,
        config: &FitConfig,
        seed: u64,
    ) -> Result<(Box<dyn SurrogateModel>, FitTrace), ModelError>;

    /// Rebuilds a trained model from its parameter vector. The dataset and
    /// configuration must match the ones used at training time.
    fn restore(
        &self,
        data: &MultiFidelityDataset,
        config: &FitConfig,
        seed: u64,
        params: &[(String, Vec<f64>)],
    ) -> Result<Box<dyn SurrogateModel>, ModelError>;
}

/// All registered model strategies.
pub fn builders() -> &'static [&'static dyn ModelBuilder] {
    &[
        &crate::baselines::Ar1Builder,
        &crate::baselines::NargpBuilder,
        &crate::mfdgp::MfdgpBuilder,
    ]
}

/// Looks a strategy up by name.
pub fn lookup(name: &str) -> Option<&'static dyn ModelBuilder> {
    builders().iter().copied().find(|b| b.name() == name)
}

/// Overlays checkpointed segment values onto a freshly built layout.
pub(crate) fn restore_params(
    params: &mut ParamVector,
    stored: &[(String, Vec<f64>)],
) -> Result<(), ModelError> {
    let expected = params.layout().segments().len();
    if stored.len() != expected {
        return Err(ModelError::ConfigError(format!(
            "checkpoint has {} segments, model expects {}",
            stored.len(),
            expected
        )));
    }
    for (name, values) in stored {
        params
            .set_segment(name, values)
            .map_err(|e| ModelError::ConfigError(format!("checkpoint segment '{name}': {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_all_three_strategies() {
        let names: Vec<&str> = builders().iter().map(|b| b.name()).collect();
        assert_eq!(names, vec!["ar1", "nargp", "mfdgp"]);
        assert!(lookup("mfdgp").is_some());
        assert!(lookup("deep-mf").is_none());
    }
}
