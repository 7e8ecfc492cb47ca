//! Adam with per-segment freeze masks.
//!
//! A single optimizer drives every training loop in the crate; the freeze
//! mask realizes two-phase schedules (and permanently fixed segments such
//! as non-trainable inducing inputs) without separate optimizer instances.

use thiserror::Error;

use crate::diff::{Layout, ParamVector};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error("length mismatch: state {state}, params {params}, grad {grad}")]
    LengthMismatch { state: usize, params: usize, grad: usize },
    #[error("freeze mask covers {mask} segments, layout has {layout}")]
    MaskMismatch { mask: usize, layout: usize },
}

/// First/second moment state for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-segment frozen flags, aligned with a parameter layout.
#[derive(Debug, Clone)]
pub struct FreezeMask {
    layout: Arc<Layout>,
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none(layout: Arc<Layout>) -> Self {
        let n = layout.segments().len();
        Self { layout, frozen: vec![false; n] }
    }

    /// Freezes every segment whose name is in `names`.
    pub fn freeze_named(layout: Arc<Layout>, names: &[&str]) -> Self {
        let frozen = layout
            .segments()
            .iter()
            .map(|s| names.contains(&s.name.as_str()))
            .collect();
        Self { layout, frozen }
    }

    /// Freezes segments selected by a predicate on the segment name.
    pub fn freeze_where(layout: Arc<Layout>, pred: impl Fn(&str) -> bool) -> Self {
        let frozen = layout.segments().iter().map(|s| pred(&s.name)).collect();
        Self { layout, frozen }
    }

    pub fn all(layout: Arc<Layout>) -> Self {
        let n = layout.segments().len();
        Self { layout, frozen: vec![true; n] }
    }

    pub fn is_frozen(&self, segment_index: usize) -> bool {
        self.frozen[segment_index]
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }
}

/// One Adam update with bias correction. Frozen segments receive zero
/// update and their moments are not advanced.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamVector,
    grad: &[f64],
    mask: &FreezeMask,
) -> Result<(), OptimError> {
    let n = params.len();
    if state.m.len() != n || grad.len() != n {
        return Err(OptimError::LengthMismatch {
            state: state.m.len(),
            params: n,
            grad: grad.len(),
        });
    }
    if mask.frozen.len() != params.layout().segments().len() {
        return Err(OptimError::MaskMismatch {
            mask: mask.frozen.len(),
            layout: params.layout().segments().len(),
        });
    }
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient(idx));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let segments: Vec<(usize, usize)> = params
        .layout()
        .segments()
        .iter()
        .map(|s| (s.offset, s.len))
        .collect();
    let values = params.values_mut();
    for (si, (offset, len)) in segments.into_iter().enumerate() {
        if mask.is_frozen(si) {
            continue;
        }
        for i in offset..offset + len {
            let g = grad[i];
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
