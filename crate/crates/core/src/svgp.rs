//! One sparse variational GP layer under the whitened parameterization.
//!
//! The variational Gaussian `q(v) = N(mu, Sigma)` is defined relative to
//! the prior Cholesky factor (`u = L v`), which makes the KL term
//! prior-independent. Only per-point marginal variances are materialized
//! for training; a full-covariance posterior is available for joint
//! sampling at prediction time.

use crate::diff::{DiffError, Graph, ParamVector, Var};
use crate::gp_exact::clamp_variance;
use crate::kernels::{gram, gram_diag, gram_diag_var, gram_var, Kernel, KernelVars};
use crate::linalg::{cholesky, tri_solve, DenseMatrix, JitterPolicy, TriSide};
use crate::registry::ModelError;

/// Inducing inputs of one layer. For layers past the first, the input
/// dimension is `d_in + d_out`: the original location plus its evaluation
/// up to the previous layer, and the set is fixed during optimization.
#[derive(Debug, Clone)]
pub struct InducingSet {
    pub z: DenseMatrix,
    pub trainable: bool,
}

/// A sparse variational layer with concrete values (as opposed to tape
/// bindings used during training).
#[derive(Debug, Clone)]
pub struct SvgpLayer {
    pub z: DenseMatrix,
    pub kernel: Kernel,
    /// Whitened variational mean, `M x Q`.
    pub q_mu: DenseMatrix,
    /// Per-output-column lower-triangular factor of the whitened
    /// variational covariance.
    pub q_sqrt: Vec<DenseMatrix>,
}

impl SvgpLayer {
    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.q_mu.cols()
    }

    fn whitened_cross(
        &self,
        inputs: &DenseMatrix,
        policy: &JitterPolicy,
    ) -> Result<DenseMatrix, ModelError> {
        let k_zz = gram(&self.kernel, &self.z, &self.z, true)?;
        let f = cholesky(&k_zz, policy)?;
        let k_zn = gram(&self.kernel, &self.z, inputs, false)?;
        Ok(tri_solve(&f, &k_zn, TriSide::Lower)?)
    }

    /// Marginal posterior at `inputs`: mean and per-point variance, both
    /// `N x Q`.
    pub fn layer_posterior(
        &self,
        inputs: &DenseMatrix,
        policy: &JitterPolicy,
    ) -> Result<(DenseMatrix, DenseMatrix), ModelError> {
        let a = self.whitened_cross(inputs, policy)?;
        let mean = a.transpose().matmul(&self.q_mu)?;
        let knn = gram_diag(&self.kernel, inputs, true)?;
        let n = inputs.rows();
        let q = self.output_dim();
        let mut var = DenseMatrix::zeros(n, q);
        for (c, factor) in self.q_sqrt.iter().enumerate() {
            let b = factor.transpose().matmul(&a)?;
            for s in 0..n {
                let mut nystrom = 0.0;
                let mut extra = 0.0;
                for m in 0..a.rows() {
                    nystrom += a.get(m, s) * a.get(m, s);
                    extra += b.get(m, s) * b.get(m, s);
                }
                var.set(s, c, clamp_variance(knn[s] - nystrom + extra)?);
            }
        }
        Ok((mean, var))
    }

    /// Posterior with full cross-covariance per output column.
    pub fn layer_posterior_full(
        &self,
        inputs: &DenseMatrix,
        policy: &JitterPolicy,
    ) -> Result<(DenseMatrix, Vec<DenseMatrix>), ModelError> {
        let a = self.whitened_cross(inputs, policy)?;
        let mean = a.transpose().matmul(&self.q_mu)?;
        let knn = gram(&self.kernel, inputs, inputs, true)?;
        let nystrom = a.transpose().matmul(&a)?;
        let mut covs = Vec::with_capacity(self.q_sqrt.len());
        for factor in &self.q_sqrt {
            let b = factor.transpose().matmul(&a)?;
            let extra = b.transpose().matmul(&b)?;
            covs.push(knn.sub(&nystrom)?.add(&extra)?);
        }
        Ok((mean, covs))
    }

    /// Analytic KL from the whitened variational Gaussian to the standard
    /// normal prior, summed over output columns.
    pub fn kl_term(&self) -> f64 {
        let m = self.num_inducing() as f64;
        let mut kl = 0.0;
        for (c, factor) in self.q_sqrt.iter().enumerate() {
            let mut mu_sq = 0.0;
            for i in 0..self.q_mu.rows() {
                let v = self.q_mu.get(i, c);
                mu_sq += v * v;
            }
            let trace: f64 = factor.data().iter().map(|v| v * v).sum();
            let log_det: f64 = factor.diag().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            kl += 0.5 * (mu_sq + trace - m - log_det);
        }
        kl
    }

    /// Reparameterized draw `mean + eps * sqrt(var)` with externally
    /// supplied standard-normal `eps` (`N x Q`).
    pub fn sample(
        &self,
        inputs: &DenseMatrix,
        eps: &DenseMatrix,
        policy: &JitterPolicy,
    ) -> Result<DenseMatrix, ModelError> {
        let (mean, var) = self.layer_posterior(inputs, policy)?;
        if eps.rows() != mean.rows() || eps.cols() != mean.cols() {
            return Err(ModelError::ConfigError(format!(
                "epsilon is {}x{}, expected {}x{}",
                eps.rows(),
                eps.cols(),
                mean.rows(),
                mean.cols()
            )));
        }
        let std = var.map(f64::sqrt);
        Ok(mean.add(&eps.hadamard(&std)?)?)
    }
}

// ---------------------------------------------------------------------------
// Tape-side construction
// ---------------------------------------------------------------------------

/// Tape handles for one layer's parameters.
pub struct LayerVars {
    pub z: Var,
    pub kernel: KernelVars,
    pub q_mu: Var,
    /// Assembled lower factors, one per output column.
    pub q_sqrt: Vec<Var>,
    /// Log-diagonals of the factors (for the KL log-determinant).
    pub q_log_diag: Vec<Var>,
}

/// Marginal layer posterior on the tape: mean and variance, each `N x Q`.
pub fn layer_posterior_var(
    g: &mut Graph,
    layer: &LayerVars,
    inputs: Var,
    policy: &JitterPolicy,
) -> Result<(Var, Var), DiffError> {
    let k_zz = gram_var(g, &layer.kernel, layer.z, layer.z, true)?;
    let l = g.cholesky(k_zz, policy)?;
    let k_zn = gram_var(g, &layer.kernel, layer.z, inputs, false)?;
    let a = g.solve_lower(l, k_zn)?;
    let at = g.transpose(a);
    let mean = g.matmul(at, layer.q_mu)?;
    let knn = gram_diag_var(g, &layer.kernel, inputs, true)?;
    let nystrom = g.col_sum_sq(a);
    let base = g.sub(knn, nystrom)?;
    let mut var_cols = Vec::with_capacity(layer.q_sqrt.len());
    for factor in &layer.q_sqrt {
        let ft = g.transpose(*factor);
        let b = g.matmul(ft, a)?;
        let extra = g.col_sum_sq(b);
        var_cols.push(g.add(base, extra)?);
    }
    let mut var = var_cols[0];
    for col in &var_cols[1..] {
        var = g.concat_cols(var, *col)?;
    }
    Ok((mean, var))
}

/// Analytic whitened KL on the tape, summed over output columns:
/// `0.5 (|mu|^2 + |F|_F^2 - M Q) - sum(log diag F)`.
pub fn kl_var(g: &mut Graph, layer: &LayerVars) -> Result<Var, DiffError> {
    let m = g.value(layer.q_mu).rows() as f64;
    let q = layer.q_sqrt.len() as f64;
    let mut total = g.sum_sq(layer.q_mu);
    for factor in &layer.q_sqrt {
        let tr = g.sum_sq(*factor);
        total = g.add(total, tr)?;
    }
    let neg_mq = g.scalar(-m * q);
    total = g.add(total, neg_mq)?;
    let half = g.scalar(0.5);
    let mut kl = g.hadamard(total, half)?;
    for ld in &layer.q_log_diag {
        let s = g.sum(*ld);
        let neg = g.neg(s);
        kl = g.add(kl, neg)?;
    }
    Ok(kl)
}

/// Adds the variational segments of one layer/column family under
/// `prefix`: `q_mu` plus per-column `q_log_diag.{c}` / `q_lower.{c}`.
pub fn layout_variational(
    mut b: crate::diff::LayoutBuilder,
    prefix: &str,
    m: usize,
    q: usize,
) -> crate::diff::LayoutBuilder {
    b = b.add(format!("{prefix}.q_mu"), m * q);
    for c in 0..q {
        b = b.add(format!("{prefix}.q_log_diag.{c}"), m);
        if m > 1 {
            b = b.add(format!("{prefix}.q_lower.{c}"), m * (m - 1) / 2);
        }
    }
    b
}

/// Initializes the variational segments: mean `mu0` (or zero) and factor
/// `sqrt(var0) * I`.
pub fn init_variational(
    p: &mut ParamVector,
    prefix: &str,
    m: usize,
    q: usize,
    mu0: Option<&DenseMatrix>,
    var0: f64,
) -> Result<(), DiffError> {
    if let Some(mu) = mu0 {
        p.set_segment(&format!("{prefix}.q_mu"), mu.data())?;
    }
    let log_diag = vec![0.5 * var0.ln(); m];
    for c in 0..q {
        p.set_segment(&format!("{prefix}.q_log_diag.{c}"), &log_diag)?;
    }
    Ok(())
}

/// Binds the variational segments as tape variables.
pub fn bind_variational(
    g: &mut Graph,
    p: &ParamVector,
    prefix: &str,
    m: usize,
    q: usize,
) -> Result<(Var, Vec<Var>, Vec<Var>), DiffError> {
    let q_mu = g.param(p, &format!("{prefix}.q_mu"), m, q)?;
    let mut factors = Vec::with_capacity(q);
    let mut log_diags = Vec::with_capacity(q);
    for c in 0..q {
        let ld = g.param(p, &format!("{prefix}.q_log_diag.{c}"), m, 1)?;
        let diag = g.exp(ld);
        let strict = if m > 1 {
            g.param(p, &format!("{prefix}.q_lower.{c}"), m * (m - 1) / 2, 1)?
        } else {
            g.constant(DenseMatrix::zeros(1, 1))
        };
        factors.push(g.lower_from_parts(diag, strict)?);
        log_diags.push(ld);
    }
    Ok((q_mu, factors, log_diags))
}

/// Reads the variational segments as plain matrices: `(q_mu, q_sqrt)`.
pub fn read_variational(
    p: &ParamVector,
    prefix: &str,
    m: usize,
    q: usize,
) -> Result<(DenseMatrix, Vec<DenseMatrix>), DiffError> {
    let mu_vals = p.segment(&format!("{prefix}.q_mu"))?.to_vec();
    let q_mu = DenseMatrix::from_raw(m, q, mu_vals);
    let mut q_sqrt = Vec::with_capacity(q);
    for c in 0..q {
        let ld = p.segment(&format!("{prefix}.q_log_diag.{c}"))?;
        let mut f = DenseMatrix::zeros(m, m);
        for i in 0..m {
            f.set(i, i, ld[i].exp());
        }
        if m > 1 {
            let strict = p.segment(&format!("{prefix}.q_lower.{c}"))?;
            for i in 0..m {
                for j in 0..i {
                    f.set(i, j, strict[i * (i - 1) / 2 + j]);
                }
            }
        }
        q_sqrt.push(f);
    }
    Ok((q_mu, q_sqrt))
}
