//! Dense real matrices, Cholesky factorization with a deterministic jitter
//! ladder, triangular solves, and log-determinants.
//!
//! Everything downstream (kernel Gram matrices, GP conditionals, the ELBO)
//! runs on these routines. Matrices are row-major `f64` with no sparse or
//! blocked formats; problem sizes in this crate stay at desk scale.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e} exceeds tolerance)")]
    NotSymmetric { max_asym: f64 },
    #[error("matrix not positive definite after jitter ladder (last jitter {jitter_tried:.3e})")]
    NotPositiveDefinite { jitter_tried: f64 },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting NaN/Inf entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite {
                    row: i / cols.max(1),
                    col: i % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic already known finite-shaped.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Single-column matrix from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self::from_raw(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        // i-k-j loop order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &DenseMatrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(DenseMatrix::from_raw(self.rows, self.cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        self.map(|v| v * s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diag(&self) -> Vec<f64> {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).collect()
    }
}

/// Whether a triangular solve uses `L` or `L^T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriSide {
    Lower,
    LowerTranspose,
}

/// Diagonal-inflation retry schedule for near-singular factorizations.
///
/// The ladder is deterministic: identical input and policy always produce
/// the same `jitter_used`.
#[derive(Debug, Clone)]
pub struct JitterPolicy {
    /// First jitter, as a fraction of the mean diagonal.
    pub initial_scale: f64,
    /// Multiplicative escalation per retry.
    pub factor: f64,
    /// Number of jittered retries after the plain attempt.
    pub max_retries: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial_scale: 1e-8,
            factor: 10.0,
            max_retries: 6,
        }
    }
}

/// Lower-triangular Cholesky factor together with the jitter that was
/// required to obtain it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: DenseMatrix,
    pub jitter_used: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }
}

const SYMMETRY_RTOL: f64 = 1e-10;

/// Factors a symmetric positive-definite matrix, escalating diagonal jitter
/// through the policy's ladder when the plain factorization fails.
pub fn cholesky(a: &DenseMatrix, policy: &JitterPolicy) -> Result<CholeskyFactor, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "cholesky of {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let scale = a.max_abs();
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_asym > SYMMETRY_RTOL * scale.max(1.0) {
        return Err(LinalgError::NotSymmetric { max_asym });
    }
    // Symmetrize before factoring; asymmetry within tolerance is round-off.
    let sym = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));

    let mean_diag = if n > 0 {
        sym.diag().iter().map(|v| v.abs()).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let base_jitter = if mean_diag > 0.0 {
        policy.initial_scale * mean_diag
    } else {
        policy.initial_scale
    };

    let mut jitter = 0.0;
    for attempt in 0..=policy.max_retries {
        if let Some(lower) = try_factor(&sym, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
        jitter = base_jitter * policy.factor.powi(attempt as i32);
    }
    Err(LinalgError::NotPositiveDefinite {
        jitter_tried: jitter / policy.factor,
    })
}

fn try_factor(a: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j) + if i == j { jitter } else { 0.0 };
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` or `L^T x = b` column-by-column against a raw
/// lower-triangular matrix.
pub fn tri_solve_raw(
    lower: &DenseMatrix,
    b: &DenseMatrix,
    side: TriSide,
) -> Result<DenseMatrix, LinalgError> {
    let n = lower.rows();
    if !lower.is_square() || b.rows() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "tri_solve {}x{} with rhs {}x{}",
            lower.rows(),
            lower.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let m = b.cols();
    let mut x = b.clone();
    match side {
        TriSide::Lower => {
            for i in 0..n {
                for k in 0..i {
                    let lik = lower.get(i, k);
                    if lik == 0.0 {
                        continue;
                    }
                    let (head, tail) = x.data.split_at_mut(i * m);
                    let xk = &head[k * m..(k + 1) * m];
                    let xi = &mut tail[..m];
                    for (xi_j, xk_j) in xi.iter_mut().zip(xk.iter()) {
                        *xi_j -= lik * xk_j;
                    }
                }
                let d = lower.get(i, i);
                for j in 0..m {
                    x.data[i * m + j] /= d;
                }
            }
        }
        TriSide::LowerTranspose => {
            for i in (0..n).rev() {
                for k in (i + 1)..n {
                    let lki = lower.get(k, i);
                    if lki == 0.0 {
                        continue;
                    }
                    let (head, tail) = x.data.split_at_mut(k * m);
                    let xi = &mut head[i * m..(i + 1) * m];
                    let xk = &tail[..m];
                    for (xi_j, xk_j) in xi.iter_mut().zip(xk.iter()) {
                        *xi_j -= lki * xk_j;
                    }
                }
                let d = lower.get(i, i);
                for j in 0..m {
                    x.data[i * m + j] /= d;
                }
            }
        }
    }
    Ok(x)
}

/// Solves against a Cholesky factor.
pub fn tri_solve(
    factor: &CholeskyFactor,
    b: &DenseMatrix,
    side: TriSide,
) -> Result<DenseMatrix, LinalgError> {
    tri_solve_raw(&factor.lower, b, side)
}

/// Solves `(L L^T) x = b` with forward then backward substitution.
pub fn chol_solve(factor: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let y = tri_solve(factor, b, TriSide::Lower)?;
    tri_solve(factor, &y, TriSide::LowerTranspose)
}

/// Log-determinant of the factored matrix: `2 * sum(log diag(L))`.
pub fn log_det(factor: &CholeskyFactor) -> f64 {
    2.0 * factor.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn psd_matrix(n: usize, seed: &[f64]) -> DenseMatrix {
        // B B^T + small ridge is PSD by construction.
        let b = DenseMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        let mut a = b.matmul(&b.transpose()).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 1e-3);
        }
        a
    }

    proptest! {
        #[test]
        fn psd_inputs_reconstruct(seed in proptest::collection::vec(-2.0f64..2.0, 16..32), n in 2usize..6) {
            let a = psd_matrix(n, &seed);
            let f = cholesky(&a, &JitterPolicy::default()).unwrap();
            let mut target = a.clone();
            for i in 0..n {
                target.set(i, i, target.get(i, i) + f.jitter_used);
            }
            let rec = f.lower.matmul(&f.lower.transpose()).unwrap();
            let rel = rec.sub(&target).unwrap().frobenius_norm() / a.frobenius_norm();
            prop_assert!(rel <= 1e-8);
        }

        #[test]
        fn solve_then_multiply_recovers_rhs(seed in proptest::collection::vec(-2.0f64..2.0, 16..32), n in 2usize..6) {
            let a = psd_matrix(n, &seed);
            let f = cholesky(&a, &JitterPolicy::default()).unwrap();
            let b = DenseMatrix::from_fn(n, 1, |i, _| seed[i % seed.len()] + 0.1);
            let x = tri_solve(&f, &b, TriSide::Lower).unwrap();
            let back = f.lower.matmul(&x).unwrap();
            let rel = back.sub(&b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-12);
            prop_assert!(rel <= 1e-10);
        }
    }
}
