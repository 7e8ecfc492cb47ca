//! Covariance functions: RBF/ARD, linear, white noise, and the
//! multi-fidelity composite used at intermediate layers, in both plain and
//! tape (differentiable) form.
//!
//! Positive quantities are stored as logs so optimizers act on
//! unconstrained values. Composite kernels act on augmented points whose
//! first `d_in` coordinates are the original input and whose trailing
//! `d_out` coordinates are the previous layer's output.

use thiserror::Error;

use crate::diff::{DiffError, Graph, LayoutBuilder, ParamVector, Var};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Default white-noise variance used when a kernel models observation
/// noise: `exp(DEFAULT_LOG_NOISE) = 1e-2`.
pub const DEFAULT_LOG_NOISE: f64 = -4.605170185988091; // ln(1e-2)

/// Unconstrained parameters of one RBF component:
/// `sigma^2 = exp(log_variance)`, `l_d = exp(log_lengthscales[d])`.
/// A single lengthscale entry is shared across all dimensions.
/// `log_noise`, when present, is the variance of an additive white
/// component applied to like-point Gram matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise: Option<f64>,
}

impl KernelParams {
    pub fn unit(n_lengthscales: usize) -> Self {
        Self {
            log_variance: 0.0,
            log_lengthscales: vec![0.0; n_lengthscales],
            log_noise: None,
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    fn inv_sq_lengthscale(&self, d: usize, dim: usize) -> Result<f64, KernelError> {
        let l = match self.log_lengthscales.len() {
            1 => self.log_lengthscales[0],
            n if n == dim => self.log_lengthscales[d],
            n => {
                return Err(KernelError::DimensionMismatch(format!(
                    "{n} lengthscales for {dim}-dimensional input"
                )))
            }
        };
        Ok((-2.0 * l).exp())
    }
}

/// Parameters of the composite intermediate-layer covariance
/// `k_rho(x,x') * [sigma_l^2 f^T f' + k_prev(f,f')] + k_delta(x,x')`;
/// without the linear term the bracket is just `k_prev`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfCompositeParams {
    pub rho: KernelParams,
    pub prev: KernelParams,
    pub delta: KernelParams,
    /// `log(sigma_l^2)` of the linear term; `None` disables it.
    pub log_linear_variance: Option<f64>,
    pub log_noise: Option<f64>,
}

/// A covariance function with concrete parameter values.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Rbf { dim: usize, params: KernelParams },
    MfComposite { d_in: usize, d_out: usize, params: MfCompositeParams },
}

impl Kernel {
    pub fn input_dim(&self) -> usize {
        match self {
            Kernel::Rbf { dim, .. } => *dim,
            Kernel::MfComposite { d_in, d_out, .. } => d_in + d_out,
        }
    }

    pub fn log_noise(&self) -> Option<f64> {
        match self {
            Kernel::Rbf { params, .. } => params.log_noise,
            Kernel::MfComposite { params, .. } => params.log_noise,
        }
    }

    /// Pairwise evaluation, excluding any white-noise component.
    pub fn eval(&self, zi: &[f64], zj: &[f64]) -> Result<f64, KernelError> {
        match self {
            Kernel::Rbf { params, .. } => rbf(zi, zj, params),
            Kernel::MfComposite { d_in, d_out, params } => {
                mf_composite(zi, zj, *d_in, *d_out, params)
            }
        }
    }

    /// Variance `k(z, z)` excluding white noise.
    pub fn eval_diag(&self, zi: &[f64]) -> Result<f64, KernelError> {
        match self {
            Kernel::Rbf { params, .. } => Ok(params.variance()),
            Kernel::MfComposite { d_in, d_out, params } => {
                let f = &zi[*d_in..*d_in + *d_out];
                let mut inner = params.prev.variance();
                if let Some(lv) = params.log_linear_variance {
                    inner += lv.exp() * f.iter().map(|v| v * v).sum::<f64>();
                }
                Ok(params.rho.variance() * inner + params.delta.variance())
            }
        }
    }
}

/// Exponentiated-quadratic covariance
/// `sigma^2 exp(-0.5 (xi-xj)^T Lambda^{-1} (xi-xj))`.
pub fn rbf(xi: &[f64], xj: &[f64], p: &KernelParams) -> Result<f64, KernelError> {
    if xi.len() != xj.len() {
        return Err(KernelError::DimensionMismatch(format!(
            "rbf inputs of length {} and {}",
            xi.len(),
            xj.len()
        )));
    }
    let mut q = 0.0;
    for d in 0..xi.len() {
        let diff = xi[d] - xj[d];
        q += diff * diff * p.inv_sq_lengthscale(d, xi.len())?;
    }
    Ok(p.variance() * (-0.5 * q).exp())
}

/// Dot-product covariance `variance * xi^T xj`.
pub fn linear(xi: &[f64], xj: &[f64], variance: f64) -> Result<f64, KernelError> {
    if xi.len() != xj.len() {
        return Err(KernelError::DimensionMismatch(format!(
            "linear inputs of length {} and {}",
            xi.len(),
            xj.len()
        )));
    }
    Ok(variance * xi.iter().zip(xj.iter()).map(|(a, b)| a * b).sum::<f64>())
}

/// Composite intermediate-layer covariance on augmented points
/// `(x, f_prev)`.
pub fn mf_composite(
    zi: &[f64],
    zj: &[f64],
    d_in: usize,
    d_out: usize,
    p: &MfCompositeParams,
) -> Result<f64, KernelError> {
    let dim = d_in + d_out;
    if zi.len() != dim || zj.len() != dim {
        return Err(KernelError::DimensionMismatch(format!(
            "augmented points of length {} and {}, expected {}",
            zi.len(),
            zj.len(),
            dim
        )));
    }
    let (xi, fi) = zi.split_at(d_in);
    let (xj, fj) = zj.split_at(d_in);
    let k_rho = rbf(xi, xj, &p.rho)?;
    let k_prev = rbf(fi, fj, &p.prev)?;
    let inner = match p.log_linear_variance {
        Some(lv) => linear(fi, fj, lv.exp())? + k_prev,
        None => k_prev,
    };
    let k_delta = rbf(xi, xj, &p.delta)?;
    Ok(k_rho * inner + k_delta)
}

/// Pairwise Gram matrix. When `a` and `b` are the same point set and
/// `include_white_noise` is set, the kernel's white variance is added to
/// the diagonal.
pub fn gram(
    kernel: &Kernel,
    a: &DenseMatrix,
    b: &DenseMatrix,
    include_white_noise: bool,
) -> Result<DenseMatrix, KernelError> {
    let dim = kernel.input_dim();
    if a.cols() != dim || b.cols() != dim {
        return Err(KernelError::DimensionMismatch(format!(
            "gram points have {} and {} columns, kernel expects {}",
            a.cols(),
            b.cols(),
            dim
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, kernel.eval(a.row(i), b.row(j))?);
        }
    }
    if include_white_noise {
        if let Some(log_noise) = kernel.log_noise() {
            let noise = log_noise.exp();
            let n = out.rows().min(out.cols());
            for i in 0..n {
                out.set(i, i, out.get(i, i) + noise);
            }
        }
    }
    Ok(out)
}

/// Diagonal of `gram(kernel, a, a, include_white_noise)` without building
/// the full matrix.
pub fn gram_diag(
    kernel: &Kernel,
    a: &DenseMatrix,
    include_white_noise: bool,
) -> Result<Vec<f64>, KernelError> {
    let noise = if include_white_noise {
        kernel.log_noise().map(f64::exp).unwrap_or(0.0)
    } else {
        0.0
    };
    (0..a.rows())
        .map(|i| kernel.eval_diag(a.row(i)).map(|v| v + noise))
        .collect()
}

// ---------------------------------------------------------------------------
// Tape-side construction
// ---------------------------------------------------------------------------

/// Tape handles for one RBF component's parameters.
#[derive(Debug, Clone, Copy)]
pub struct RbfVars {
    pub log_variance: Var,
    pub log_lengthscales: Var,
}

/// Tape handles for a kernel's parameters, mirroring [`Kernel`].
#[derive(Debug, Clone)]
pub enum KernelVars {
    Rbf { params: RbfVars, log_noise: Option<Var> },
    MfComposite {
        d_in: usize,
        d_out: usize,
        rho: RbfVars,
        prev: RbfVars,
        delta: RbfVars,
        log_linear_variance: Option<Var>,
        log_noise: Option<Var>,
    },
}

impl KernelVars {
    pub fn log_noise(&self) -> Option<Var> {
        match self {
            KernelVars::Rbf { log_noise, .. } => *log_noise,
            KernelVars::MfComposite { log_noise, .. } => *log_noise,
        }
    }
}

/// Gram matrix on the tape; `symmetric_white` adds the white variance to
/// the diagonal (valid only when `a` and `b` are the same point set).
pub fn gram_var(
    g: &mut Graph,
    kernel: &KernelVars,
    a: Var,
    b: Var,
    symmetric_white: bool,
) -> Result<Var, DiffError> {
    let core = match kernel {
        KernelVars::Rbf { params, .. } => {
            g.rbf_gram(a, b, params.log_variance, params.log_lengthscales)?
        }
        KernelVars::MfComposite { d_in, d_out, rho, prev, delta, log_linear_variance, .. } => {
            let ax = g.slice_cols(a, 0, *d_in)?;
            let af = g.slice_cols(a, *d_in, *d_out)?;
            let (bx, bf) = if a == b {
                (ax, af)
            } else {
                (g.slice_cols(b, 0, *d_in)?, g.slice_cols(b, *d_in, *d_out)?)
            };
            let k_rho = g.rbf_gram(ax, bx, rho.log_variance, rho.log_lengthscales)?;
            let k_prev = g.rbf_gram(af, bf, prev.log_variance, prev.log_lengthscales)?;
            let inner = match log_linear_variance {
                Some(lv) => {
                    let bft = g.transpose(bf);
                    let dots = g.matmul(af, bft)?;
                    let var = g.exp(*lv);
                    let lin = g.scale(dots, var)?;
                    g.add(lin, k_prev)?
                }
                None => k_prev,
            };
            let scaled = g.hadamard(k_rho, inner)?;
            let k_delta = g.rbf_gram(ax, bx, delta.log_variance, delta.log_lengthscales)?;
            g.add(scaled, k_delta)?
        }
    };
    if symmetric_white {
        if let Some(log_noise) = kernel.log_noise() {
            let noise = g.exp(log_noise);
            return g.add_scaled_eye(core, noise);
        }
    }
    Ok(core)
}

/// Diagonal of the Gram matrix on the tape, as an `n x 1` column.
pub fn gram_diag_var(
    g: &mut Graph,
    kernel: &KernelVars,
    a: Var,
    include_white: bool,
) -> Result<Var, DiffError> {
    let n = g.value(a).rows();
    let ones = g.constant(DenseMatrix::from_raw(n, 1, vec![1.0; n]));
    let core = match kernel {
        KernelVars::Rbf { params, .. } => {
            let var = g.exp(params.log_variance);
            g.scale(ones, var)?
        }
        KernelVars::MfComposite { d_in, d_out, rho, prev, delta, log_linear_variance, .. } => {
            let af = g.slice_cols(a, *d_in, *d_out)?;
            let prev_var = g.exp(prev.log_variance);
            let inner = match log_linear_variance {
                Some(lv) => {
                    let sq = g.row_sum_sq(af);
                    let var = g.exp(*lv);
                    let lin = g.scale(sq, var)?;
                    g.add_scalar(lin, prev_var)?
                }
                None => g.scale(ones, prev_var)?,
            };
            let rho_var = g.exp(rho.log_variance);
            let scaled = g.scale(inner, rho_var)?;
            let delta_var = g.exp(delta.log_variance);
            g.add_scalar(scaled, delta_var)?
        }
    };
    if include_white {
        if let Some(log_noise) = kernel.log_noise() {
            let noise = g.exp(log_noise);
            return g.add_scalar(core, noise);
        }
    }
    Ok(core)
}

// ---------------------------------------------------------------------------
// Parameter-vector plumbing
// ---------------------------------------------------------------------------

/// Declarative kernel tree: fixes the structure while parameter values live
/// in a [`ParamVector`] under a segment prefix.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelShape {
    Rbf { dim: usize, ard: bool },
    MfComposite { d_in: usize, d_out: usize, use_linear: bool },
}

impl KernelShape {
    pub fn input_dim(&self) -> usize {
        match self {
            KernelShape::Rbf { dim, .. } => *dim,
            KernelShape::MfComposite { d_in, d_out, .. } => d_in + d_out,
        }
    }

    fn n_ls(dim: usize, ard: bool) -> usize {
        if ard {
            dim
        } else {
            1
        }
    }

    /// Adds this kernel's segments under `prefix`; `with_white` adds a
    /// `log_noise` segment for an additive white component.
    pub fn layout(&self, b: LayoutBuilder, prefix: &str, with_white: bool) -> LayoutBuilder {
        let b = match self {
            KernelShape::Rbf { dim, ard } => layout_rbf(b, prefix, Self::n_ls(*dim, *ard)),
            KernelShape::MfComposite { d_in, d_out, use_linear } => {
                let b = layout_rbf(b, &format!("{prefix}.rho"), Self::n_ls(*d_in, true));
                let b = layout_rbf(b, &format!("{prefix}.prev"), Self::n_ls(*d_out, true));
                let b = layout_rbf(b, &format!("{prefix}.delta"), Self::n_ls(*d_in, true));
                if *use_linear {
                    b.add(format!("{prefix}.log_linear_variance"), 1)
                } else {
                    b
                }
            }
        };
        if with_white {
            b.add(format!("{prefix}.log_noise"), 1)
        } else {
            b
        }
    }

    /// Writes default initial values: zeros for variances/lengthscales
    /// (unit scale) and `ln(1e-2)` for the white-noise variance.
    pub fn init_segments(&self, p: &mut ParamVector, prefix: &str, with_white: bool) {
        if with_white {
            p.set_segment(&format!("{prefix}.log_noise"), &[DEFAULT_LOG_NOISE])
                .expect("white segment present");
        }
    }

    /// Binds this kernel's segments as tape variables.
    pub fn bind(
        &self,
        g: &mut Graph,
        p: &ParamVector,
        prefix: &str,
        with_white: bool,
    ) -> Result<KernelVars, DiffError> {
        let log_noise = if with_white {
            Some(g.scalar_param(p, &format!("{prefix}.log_noise"))?)
        } else {
            None
        };
        Ok(match self {
            KernelShape::Rbf { .. } => KernelVars::Rbf {
                params: bind_rbf(g, p, prefix)?,
                log_noise,
            },
            KernelShape::MfComposite { d_in, d_out, use_linear } => KernelVars::MfComposite {
                d_in: *d_in,
                d_out: *d_out,
                rho: bind_rbf(g, p, &format!("{prefix}.rho"))?,
                prev: bind_rbf(g, p, &format!("{prefix}.prev"))?,
                delta: bind_rbf(g, p, &format!("{prefix}.delta"))?,
                log_linear_variance: if *use_linear {
                    Some(g.scalar_param(p, &format!("{prefix}.log_linear_variance"))?)
                } else {
                    None
                },
                log_noise,
            },
        })
    }

    /// Reads this kernel's plain values.
    pub fn read(
        &self,
        p: &ParamVector,
        prefix: &str,
        with_white: bool,
    ) -> Result<Kernel, DiffError> {
        let log_noise = if with_white {
            Some(p.segment(&format!("{prefix}.log_noise"))?[0])
        } else {
            None
        };
        Ok(match self {
            KernelShape::Rbf { dim, .. } => Kernel::Rbf {
                dim: *dim,
                params: KernelParams { log_noise, ..read_rbf(p, prefix)? },
            },
            KernelShape::MfComposite { d_in, d_out, use_linear } => Kernel::MfComposite {
                d_in: *d_in,
                d_out: *d_out,
                params: MfCompositeParams {
                    rho: read_rbf(p, &format!("{prefix}.rho"))?,
                    prev: read_rbf(p, &format!("{prefix}.prev"))?,
                    delta: read_rbf(p, &format!("{prefix}.delta"))?,
                    log_linear_variance: if *use_linear {
                        Some(p.segment(&format!("{prefix}.log_linear_variance"))?[0])
                    } else {
                        None
                    },
                    log_noise,
                },
            },
        })
    }
}

/// Adds the segments of one RBF component under `prefix`.
pub fn layout_rbf(b: LayoutBuilder, prefix: &str, n_lengthscales: usize) -> LayoutBuilder {
    b.add(format!("{prefix}.log_variance"), 1)
        .add(format!("{prefix}.log_lengthscales"), n_lengthscales)
}

/// Binds one RBF component's segments as tape variables.
pub fn bind_rbf(g: &mut Graph, p: &ParamVector, prefix: &str) -> Result<RbfVars, DiffError> {
    let lv = g.scalar_param(p, &format!("{prefix}.log_variance"))?;
    let n = p.segment(&format!("{prefix}.log_lengthscales"))?.len();
    let ls = g.param(p, &format!("{prefix}.log_lengthscales"), n, 1)?;
    Ok(RbfVars { log_variance: lv, log_lengthscales: ls })
}

/// Reads one RBF component's plain values.
pub fn read_rbf(p: &ParamVector, prefix: &str) -> Result<KernelParams, DiffError> {
    Ok(KernelParams {
        log_variance: p.segment(&format!("{prefix}.log_variance"))?[0],
        log_lengthscales: p.segment(&format!("{prefix}.log_lengthscales"))?.to_vec(),
        log_noise: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky, JitterPolicy};
    use rand::Rng;

    fn unit_rbf(n: usize) -> KernelParams {
        KernelParams::unit(n)
    }

    #[test]
    fn rbf_zero_distance_is_variance() {
        let p = KernelParams { log_variance: 3.0_f64.ln(), ..KernelParams::unit(2) };
        let x = [0.4, -1.0];
        assert!((rbf(&x, &x, &p).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rbf_unit_distance() {
        let p = unit_rbf(1);
        let v = rbf(&[0.0], &[1.0], &p).unwrap();
        assert!((v - (-0.5_f64).exp()).abs() < 1e-12);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn rbf_ard_quadratic_form_by_hand() {
        // sigma^2 = 2, lengthscales (1, 2), diff (1, 2): 2 exp(-(1+1)/2) = 2/e.
        let p = KernelParams {
            log_variance: 2.0_f64.ln(),
            log_lengthscales: vec![0.0, 2.0_f64.ln()],
            log_noise: None,
        };
        let v = rbf(&[1.0, 2.0], &[0.0, 0.0], &p).unwrap();
        assert!((v - 2.0 * (-1.0_f64).exp()).abs() < 1e-12);
        assert!((v - 0.73576).abs() < 1e-5);
    }

    #[test]
    fn rbf_is_translation_invariant() {
        let p = KernelParams {
            log_variance: 0.3,
            log_lengthscales: vec![0.1, -0.4],
            log_noise: None,
        };
        let a = [0.2, 0.9];
        let b = [-0.5, 0.1];
        let shift = [3.0, -7.0];
        let a2 = [a[0] + shift[0], a[1] + shift[1]];
        let b2 = [b[0] + shift[0], b[1] + shift[1]];
        assert!((rbf(&a, &b, &p).unwrap() - rbf(&a2, &b2, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn linear_kernel_cases() {
        assert_eq!(linear(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), 0.0);
        assert_eq!(linear(&[2.0], &[2.0], 1.0).unwrap(), 4.0);
        assert_eq!(linear(&[1.0, 2.0], &[3.0, 1.0], 0.5).unwrap(), 2.5);
        assert!(linear(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    fn composite(d_in: usize, d_out: usize, linear_on: bool) -> Kernel {
        Kernel::MfComposite {
            d_in,
            d_out,
            params: MfCompositeParams {
                rho: KernelParams::unit(d_in),
                prev: KernelParams::unit(d_out),
                delta: KernelParams::unit(d_in),
                log_linear_variance: if linear_on { Some(0.0) } else { None },
                log_noise: None,
            },
        }
    }

    #[test]
    fn composite_zero_distance_without_linear_is_two() {
        let k = composite(1, 1, false);
        let z = [0.3, 1.7];
        assert!((k.eval(&z, &z).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn composite_unit_f_gap() {
        // x = x', f - f' = 1, unit params, no linear: 1 * e^{-1/2} + 1.
        let k = composite(1, 1, false);
        let v = k.eval(&[0.3, 1.0], &[0.3, 0.0]).unwrap();
        assert!((v - (1.0 * (-0.5_f64).exp() + 1.0)).abs() < 1e-12);
        assert!((v - 1.60653).abs() < 1e-5);
    }

    #[test]
    fn composite_rho_variance_to_zero_leaves_delta() {
        let k = Kernel::MfComposite {
            d_in: 1,
            d_out: 1,
            params: MfCompositeParams {
                rho: KernelParams {
                    log_variance: -60.0,
                    log_lengthscales: vec![0.0],
                    log_noise: None,
                },
                prev: KernelParams::unit(1),
                delta: KernelParams::unit(1),
                log_linear_variance: None,
                log_noise: None,
            },
        };
        let zi = [0.1, 0.5];
        let zj = [0.7, -0.3];
        let delta_only = rbf(&zi[..1], &zj[..1], &KernelParams::unit(1)).unwrap();
        assert!((k.eval(&zi, &zj).unwrap() - delta_only).abs() < 1e-12);
    }

    #[test]
    fn composite_with_zero_f_coordinates_reduces_to_x_terms() {
        let k = composite(2, 1, false);
        let zi = [0.1, 0.9, 0.0];
        let zj = [0.4, 0.2, 0.0];
        let rho = rbf(&zi[..2], &zj[..2], &unit_rbf(2)).unwrap();
        let delta = rbf(&zi[..2], &zj[..2], &unit_rbf(2)).unwrap();
        // k_prev(0,0) = prev variance = 1.
        let expected = rho * 1.0 + delta;
        assert!((k.eval(&zi, &zj).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gram_single_point_and_symmetry() {
        let k = Kernel::Rbf {
            dim: 1,
            params: KernelParams { log_variance: 3.0_f64.ln(), ..KernelParams::unit(1) },
        };
        let x = DenseMatrix::from_vec(1, 1, vec![0.2]).unwrap();
        let g = gram(&k, &x, &x, false).unwrap();
        assert!((g.get(0, 0) - 3.0).abs() < 1e-12);

        let mut rng = crate::rng::stream(11, "kern", 0);
        let pts = DenseMatrix::from_fn(20, 2, |_, _| rng.gen_range(-1.0..1.0));
        let k2 = Kernel::Rbf { dim: 2, params: KernelParams::unit(2) };
        let g2 = gram(&k2, &pts, &pts, false).unwrap();
        assert_eq!(g2, g2.transpose());
    }

    #[test]
    fn noisy_gram_factorizes_without_jitter() {
        let mut rng = crate::rng::stream(3, "kern", 1);
        let pts = DenseMatrix::from_fn(50, 2, |_, _| rng.gen_range(0.0..1.0));
        let k = Kernel::Rbf {
            dim: 2,
            params: KernelParams {
                log_noise: Some(DEFAULT_LOG_NOISE),
                ..KernelParams::unit(2)
            },
        };
        let g = gram(&k, &pts, &pts, true).unwrap();
        let f = cholesky(&g, &JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter_used, 0.0);
    }

    #[test]
    fn gram_diag_matches_full_gram() {
        let mut rng = crate::rng::stream(5, "kern", 2);
        let pts = DenseMatrix::from_fn(7, 3, |_, _| rng.gen_range(-1.0..1.0));
        let k = Kernel::MfComposite {
            d_in: 2,
            d_out: 1,
            params: MfCompositeParams {
                rho: KernelParams::unit(2),
                prev: KernelParams::unit(1),
                delta: KernelParams::unit(2),
                log_linear_variance: Some(-0.7),
                log_noise: Some(-3.0),
            },
        };
        let full = gram(&k, &pts, &pts, true).unwrap();
        let diag = gram_diag(&k, &pts, true).unwrap();
        for i in 0..7 {
            assert!((full.get(i, i) - diag[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_gram_matches_plain_gram() {
        use crate::diff::Layout;

        let mut rng = crate::rng::stream(17, "kern", 3);
        let pts = DenseMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let layout = Layout::builder();
        let layout = layout_rbf(layout, "rho", 2);
        let layout = layout_rbf(layout, "prev", 1);
        let layout = layout_rbf(layout, "delta", 2);
        let layout = layout.add("log_linear_variance", 1).add("log_noise", 1).build();
        let mut p = ParamVector::zeros(layout);
        p.set_segment("rho.log_variance", &[0.2]).unwrap();
        p.set_segment("prev.log_lengthscales", &[0.4]).unwrap();
        p.set_segment("log_linear_variance", &[-0.7]).unwrap();
        p.set_segment("log_noise", &[-3.0]).unwrap();

        let plain = Kernel::MfComposite {
            d_in: 2,
            d_out: 1,
            params: MfCompositeParams {
                rho: read_rbf(&p, "rho").unwrap(),
                prev: read_rbf(&p, "prev").unwrap(),
                delta: read_rbf(&p, "delta").unwrap(),
                log_linear_variance: Some(-0.7),
                log_noise: Some(-3.0),
            },
        };
        let expect = gram(&plain, &pts, &pts, true).unwrap();
        let expect_diag = gram_diag(&plain, &pts, true).unwrap();

        let mut g = Graph::new(p.len());
        let kv = KernelVars::MfComposite {
            d_in: 2,
            d_out: 1,
            rho: bind_rbf(&mut g, &p, "rho").unwrap(),
            prev: bind_rbf(&mut g, &p, "prev").unwrap(),
            delta: bind_rbf(&mut g, &p, "delta").unwrap(),
            log_linear_variance: Some(g.scalar_param(&p, "log_linear_variance").unwrap()),
            log_noise: Some(g.scalar_param(&p, "log_noise").unwrap()),
        };
        let a = g.constant(pts.clone());
        let kg = gram_var(&mut g, &kv, a, a, true).unwrap();
        let diff = g.value(kg).sub(&expect).unwrap().max_abs();
        assert!(diff < 1e-12, "tape vs plain gram differ by {diff}");

        let kd = gram_diag_var(&mut g, &kv, a, true).unwrap();
        for i in 0..6 {
            assert!((g.value(kd).get(i, 0) - expect_diag[i]).abs() < 1e-12);
        }
    }
}
