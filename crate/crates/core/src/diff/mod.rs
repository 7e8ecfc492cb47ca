//! Gradients of scalar objectives with respect to flat parameter vectors.
//!
//! Objectives are built on a reverse-mode tape of matrix operations
//! ([`Graph`]); [`gradient`] evaluates the objective and returns the exact
//! gradient, and [`check_grad`] verifies it against central finite
//! differences. Stochastic objectives must capture a fixed noise
//! realization so that both paths see the same deterministic function.

mod graph;

pub use graph::{Graph, Var};

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("objective or gradient is not finite: {0}")]
    NonFiniteObjective(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter segment '{0}'")]
    UnknownSegment(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A named, contiguous slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Segment layout of a [`ParamVector`]; segments are contiguous,
/// non-overlapping, and cover the vector exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder { segments: Vec::new(), total: 0 }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

pub struct LayoutBuilder {
    segments: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    pub fn add(mut self, name: impl Into<String>, len: usize) -> Self {
        let name = name.into();
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment name '{name}'"
        );
        self.segments.push(Segment { name, offset: self.total, len });
        self.total += len;
        self
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout { segments: self.segments, total: self.total })
    }
}

/// Flat parameter vector in unconstrained space with a named segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        Self { layout, values: vec![0.0; n] }
    }

    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != layout.total_len() {
            return Err(DiffError::Shape(format!(
                "parameter vector length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> Result<&[f64], DiffError> {
        let seg = self
            .layout
            .find(name)
            .ok_or_else(|| DiffError::UnknownSegment(name.to_string()))?;
        Ok(&self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64], DiffError> {
        let seg = self
            .layout
            .find(name)
            .cloned()
            .ok_or_else(|| DiffError::UnknownSegment(name.to_string()))?;
        Ok(&mut self.values[seg.offset..seg.offset + seg.len])
    }

    pub fn set_segment(&mut self, name: &str, vals: &[f64]) -> Result<(), DiffError> {
        let dst = self.segment_mut(name)?;
        if dst.len() != vals.len() {
            return Err(DiffError::Shape(format!(
                "segment '{}' has length {}, got {}",
                name,
                dst.len(),
                vals.len()
            )));
        }
        dst.copy_from_slice(vals);
        Ok(())
    }
}

/// Objective value and gradient, aligned with the parameter layout.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Objective builder: constructs the scalar output on the tape.
pub trait ObjectiveFn: Fn(&mut Graph, &ParamVector) -> Result<Var, DiffError> {}
impl<F: Fn(&mut Graph, &ParamVector) -> Result<Var, DiffError>> ObjectiveFn for F {}

/// Evaluates the objective and its reverse-mode gradient.
pub fn gradient<F: ObjectiveFn>(f: F, at: &ParamVector) -> Result<GradResult, DiffError> {
    let mut g = Graph::new(at.len());
    let out = f(&mut g, at)?;
    let value = g.scalar_value(out)?;
    if !value.is_finite() {
        return Err(DiffError::NonFiniteObjective(format!("objective value {value}")));
    }
    let grad = g.backward(out)?;
    if let Some(idx) = grad.iter().position(|v| !v.is_finite()) {
        return Err(DiffError::NonFiniteObjective(format!(
            "gradient entry {idx} is {}",
            grad[idx]
        )));
    }
    Ok(GradResult { value, gradient: grad })
}

/// Evaluates the objective without differentiating.
pub fn evaluate<F: ObjectiveFn>(f: F, at: &ParamVector) -> Result<f64, DiffError> {
    let mut g = Graph::new(at.len());
    let out = f(&mut g, at)?;
    g.scalar_value(out)
}

/// Outcome of comparing the tape gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

const CHECK_GRAD_FLOOR: f64 = 1e-8;

/// Compares the reverse-mode gradient against `(f(x+h) - f(x-h)) / 2h` per
/// coordinate; the relative error uses a safeguarded denominator
/// `max(|fd|, 1e-8)`. Failures are reported, not thrown.
pub fn check_grad<F: ObjectiveFn>(
    f: F,
    at: &ParamVector,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, DiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let res = gradient(&f, at)?;
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut shifted = at.clone();
    for i in 0..at.len() {
        let orig = at.values()[i];
        shifted.values_mut()[i] = orig + step;
        let fp = evaluate(&f, &shifted)?;
        shifted.values_mut()[i] = orig - step;
        let fm = evaluate(&f, &shifted)?;
        shifted.values_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let rel = (res.gradient[i] - fd).abs() / fd.abs().max(CHECK_GRAD_FLOOR);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_index, tol, passed: max_rel_err <= tol })
}
