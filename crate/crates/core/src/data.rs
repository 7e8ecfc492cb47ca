//! Multi-fidelity datasets and input scaling.

use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("dataset needs at least one fidelity level")]
    NoLevels,
    #[error("fidelity level {level} has no observations")]
    EmptyLevel { level: usize },
    #[error("fidelity level {level} has input dim {found}, expected {expected}")]
    MixedInputDim { level: usize, expected: usize, found: usize },
    #[error("fidelity level {level} has output dim {found}, expected {expected}")]
    MixedOutputDim { level: usize, expected: usize, found: usize },
    #[error("fidelity level {level} has {inputs} inputs but {outputs} outputs")]
    CountMismatch { level: usize, inputs: usize, outputs: usize },
}

/// Observations at one fidelity level: inputs `x` (N x D_in) and targets
/// `y` (N x D_out).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelData {
    pub x: DenseMatrix,
    pub y: DenseMatrix,
}

/// Inputs and targets for `T` ordered fidelity levels; level `T` (the last
/// entry) is the highest fidelity. `output_scale` records the constant the
/// raw targets were divided by at generation time (1.0 when unscaled).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFidelityDataset {
    pub levels: Vec<LevelData>,
    pub output_scale: f64,
}

impl MultiFidelityDataset {
    pub fn new(levels: Vec<LevelData>) -> Result<Self, DataError> {
        let ds = Self { levels, output_scale: 1.0 };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.levels.is_empty() {
            return Err(DataError::NoLevels);
        }
        let d_in = self.levels[0].x.cols();
        let d_out = self.levels[0].y.cols();
        for (i, level) in self.levels.iter().enumerate() {
            let number = i + 1;
            if level.x.rows() == 0 {
                return Err(DataError::EmptyLevel { level: number });
            }
            if level.x.cols() != d_in {
                return Err(DataError::MixedInputDim {
                    level: number,
                    expected: d_in,
                    found: level.x.cols(),
                });
            }
            if level.y.cols() != d_out {
                return Err(DataError::MixedOutputDim {
                    level: number,
                    expected: d_out,
                    found: level.y.cols(),
                });
            }
            if level.x.rows() != level.y.rows() {
                return Err(DataError::CountMismatch {
                    level: number,
                    inputs: level.x.rows(),
                    outputs: level.y.rows(),
                });
            }
        }
        Ok(())
    }

    /// Number of fidelity levels `T`.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.levels[0].y.cols()
    }

    /// Observation count at a 1-based fidelity level.
    pub fn count(&self, level: usize) -> usize {
        self.levels[level - 1].x.rows()
    }

    pub fn level(&self, level: usize) -> &LevelData {
        &self.levels[level - 1]
    }
}

/// Min-max scaler mapping training inputs onto the unit box; constant
/// dimensions are passed through unshifted.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    pub mins: Vec<f64>,
    pub ranges: Vec<f64>,
}

impl InputScaler {
    /// Fits per-dimension min/range over all levels' inputs.
    pub fn fit(data: &MultiFidelityDataset) -> Self {
        let d = data.input_dim();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for level in &data.levels {
            for i in 0..level.x.rows() {
                for (k, v) in level.x.row(i).iter().enumerate() {
                    mins[k] = mins[k].min(*v);
                    maxs[k] = maxs[k].max(*v);
                }
            }
        }
        let ranges = mins
            .iter()
            .zip(maxs.iter())
            .map(|(lo, hi)| if hi - lo > 0.0 { hi - lo } else { 1.0 })
            .collect();
        Self { mins, ranges }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mins: vec![0.0; dim], ranges: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mins[j]) / self.ranges[j]
        })
    }
}
