//! Exact Gaussian-process regression: marginal likelihood, Adam-based
//! hyperparameter training, and posterior predictions. Used standalone and
//! as the building block for the AR1 and NARGP baselines.

use crate::diff::{self, DiffError, Graph, Layout, ParamVector, Var};
use crate::kernels::{gram, gram_diag, gram_var, Kernel, KernelShape, DEFAULT_LOG_NOISE};
use crate::linalg::{
    chol_solve, cholesky, tri_solve, CholeskyFactor, DenseMatrix, JitterPolicy, TriSide,
};
use crate::optimizer::{adam_step, AdamState, FreezeMask};
use crate::registry::{FitTrace, ModelError, TracePoint};

pub const DEFAULT_FIT_STEPS: usize = 1500;
pub const DEFAULT_FIT_LR: f64 = 0.01;
/// Noise variances below `exp(LOG_NOISE_FLOOR) = 1e-8` make factorizations
/// singular; the parameter is clamped after every optimizer step.
pub const LOG_NOISE_FLOOR: f64 = -18.420680743952367;

const LN_2PI: f64 = 1.8378770664093453;

/// Clamps tiny negative variances produced by round-off; anything below
/// `-1e-10` is a genuine error.
pub(crate) fn clamp_variance(v: f64) -> Result<f64, ModelError> {
    if v < -1e-10 {
        Err(ModelError::NegativeVariance(v))
    } else {
        Ok(v.max(0.0))
    }
}

struct GpCache {
    kernel: Kernel,
    noise: f64,
    factor: CholeskyFactor,
    alpha: DenseMatrix,
}

/// Exact GP with a Gaussian likelihood; the kernel Gram factor is cached
/// and invalidated on any parameter change.
pub struct ExactGp {
    x: DenseMatrix,
    y: DenseMatrix,
    shape: KernelShape,
    params: ParamVector,
    policy: JitterPolicy,
    cache: Option<GpCache>,
}

impl ExactGp {
    /// Builds a GP with default hyperparameters (unit kernel scales,
    /// noise variance 1e-2) and a ready prediction cache.
    pub fn new(x: DenseMatrix, y: DenseMatrix, shape: KernelShape) -> Result<Self, ModelError> {
        if x.rows() == 0 {
            return Err(ModelError::InsufficientData("exact GP needs at least one point".into()));
        }
        if x.rows() != y.rows() || y.cols() != 1 {
            return Err(ModelError::ConfigError(format!(
                "exact GP inputs {}x{} with targets {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            )));
        }
        if x.cols() != shape.input_dim() {
            return Err(ModelError::ConfigError(format!(
                "kernel expects {} input dims, data has {}",
                shape.input_dim(),
                x.cols()
            )));
        }
        let layout = shape.layout(Layout::builder(), "kern", false).add("log_noise", 1).build();
        let mut params = ParamVector::zeros(layout);
        params.set_segment("log_noise", &[DEFAULT_LOG_NOISE]).expect("segment exists");
        let mut gp = Self {
            x,
            y,
            shape,
            params,
            policy: JitterPolicy::default(),
            cache: None,
        };
        gp.refresh()?;
        Ok(gp)
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn num_points(&self) -> usize {
        self.x.rows()
    }

    pub fn noise_variance(&self) -> f64 {
        self.params.segment("log_noise").expect("segment exists")[0].exp()
    }

    pub fn kernel(&self) -> Result<Kernel, ModelError> {
        Ok(self.shape.read(&self.params, "kern", false)?)
    }

    /// Replaces the parameter vector and rebuilds the prediction cache.
    pub fn set_params(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::ConfigError(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.values_mut().copy_from_slice(values);
        self.refresh()
    }

    fn refresh(&mut self) -> Result<(), ModelError> {
        let kernel = self.kernel()?;
        let noise = self.noise_variance();
        let mut k = gram(&kernel, &self.x, &self.x, false)?;
        for i in 0..k.rows() {
            k.set(i, i, k.get(i, i) + noise);
        }
        let factor = cholesky(&k, &self.policy)?;
        let alpha = chol_solve(&factor, &self.y)?;
        self.cache = Some(GpCache { kernel, noise, factor, alpha });
        Ok(())
    }

    fn cache(&self) -> &GpCache {
        self.cache.as_ref().expect("cache is rebuilt on every parameter change")
    }

    /// Negative log marginal likelihood
    /// `0.5 y^T (K + s I)^{-1} y + 0.5 log det(K + s I) + N/2 log 2 pi`.
    pub fn nlml(&self) -> f64 {
        let c = self.cache();
        let fit: f64 = self
            .y
            .data()
            .iter()
            .zip(c.alpha.data().iter())
            .map(|(a, b)| a * b)
            .sum();
        0.5 * fit + 0.5 * crate::linalg::log_det(&c.factor) + 0.5 * self.x.rows() as f64 * LN_2PI
    }

    /// Builds the NLML on the tape for gradient-based training.
    pub fn nlml_objective(
        &self,
    ) -> impl Fn(&mut Graph, &ParamVector) -> Result<Var, DiffError> + '_ {
        let n = self.x.rows() as f64;
        move |g: &mut Graph, p: &ParamVector| {
            let kern = self.shape.bind(g, p, "kern", false)?;
            let xv = g.constant(self.x.clone());
            let k = gram_var(g, &kern, xv, xv, false)?;
            let log_noise = g.scalar_param(p, "log_noise")?;
            let noise = g.exp(log_noise);
            let kn = g.add_scaled_eye(k, noise)?;
            let l = g.cholesky(kn, &self.policy)?;
            let yv = g.constant(self.y.clone());
            let a = g.solve_lower(l, yv)?;
            let ss = g.sum_sq(a);
            let half = g.scalar(0.5);
            let fit = g.hadamard(ss, half)?;
            let dg = g.diag_part(l)?;
            let ln = g.ln(dg);
            let logdet_half = g.sum(ln);
            let c = g.scalar(0.5 * n * LN_2PI);
            let partial = g.add(fit, logdet_half)?;
            g.add(partial, c)
        }
    }

    /// Minimizes the NLML with Adam over all unconstrained parameters.
    pub fn fit(&mut self, steps: usize, lr: f64) -> Result<FitTrace, ModelError> {
        self.fit_masked(steps, lr, &[])
    }

    /// As [`fit`](Self::fit) but with the named segments frozen.
    pub fn fit_masked(
        &mut self,
        steps: usize,
        lr: f64,
        frozen: &[&str],
    ) -> Result<FitTrace, ModelError> {
        let mask = FreezeMask::freeze_named(self.params.layout().clone(), frozen);
        let mut adam = AdamState::new(self.params.len(), lr);
        let mut trace = FitTrace::default();
        let objective = self.nlml_objective();
        let mut params = self.params.clone();
        for step in 0..steps {
            let prev = params.clone();
            match diff::gradient(&objective, &params) {
                Ok(gr) => {
                    if step % 100 == 0 {
                        trace.points.push(TracePoint { step, objective: gr.value, lr });
                    }
                    adam_step(&mut adam, &mut params, &gr.gradient, &mask)?;
                    let noise = params.segment_mut("log_noise")?;
                    if noise[0] < LOG_NOISE_FLOOR {
                        noise[0] = LOG_NOISE_FLOOR;
                    }
                }
                Err(DiffError::NonFiniteObjective(_)) => {
                    params = prev;
                    trace.diverged = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        drop(objective);
        self.params = params;
        self.refresh()?;
        trace.points.push(TracePoint { step: steps, objective: self.nlml(), lr });
        Ok(trace)
    }

    /// Latent posterior mean and variance at `xs`.
    pub fn predict(&self, xs: &DenseMatrix) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let c = self.cache();
        let k_star = gram(&c.kernel, &self.x, xs, false)?; // N x S
        let mut mean = vec![0.0; xs.rows()];
        for i in 0..self.x.rows() {
            let alpha_i = c.alpha.get(i, 0);
            for (s, m) in mean.iter_mut().enumerate() {
                *m += k_star.get(i, s) * alpha_i;
            }
        }
        let v = tri_solve(&c.factor, &k_star, TriSide::Lower)?;
        let prior_diag = gram_diag(&c.kernel, xs, false)?;
        let mut var = vec![0.0; xs.rows()];
        for (s, out) in var.iter_mut().enumerate() {
            let mut explained = 0.0;
            for i in 0..self.x.rows() {
                let vi = v.get(i, s);
                explained += vi * vi;
            }
            *out = clamp_variance(prior_diag[s] - explained)?;
        }
        Ok((mean, var))
    }

    /// Latent posterior mean and full covariance at `xs`.
    pub fn predict_full(&self, xs: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), ModelError> {
        let c = self.cache();
        let k_star = gram(&c.kernel, &self.x, xs, false)?;
        let mut mean = vec![0.0; xs.rows()];
        for i in 0..self.x.rows() {
            let alpha_i = c.alpha.get(i, 0);
            for (s, m) in mean.iter_mut().enumerate() {
                *m += k_star.get(i, s) * alpha_i;
            }
        }
        let v = tri_solve(&c.factor, &k_star, TriSide::Lower)?;
        let prior = gram(&c.kernel, xs, xs, false)?;
        let explained = v.transpose().matmul(&v)?;
        let cov = prior.sub(&explained)?;
        let cov = DenseMatrix::from_fn(cov.rows(), cov.cols(), |i, j| {
            0.5 * (cov.get(i, j) + cov.get(j, i))
        });
        Ok((mean, cov))
    }

    /// Observation noise variance `exp(log_noise)` of the cached state.
    pub fn cached_noise(&self) -> f64 {
        self.cache().noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_grad;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rbf_shape(dim: usize) -> KernelShape {
        KernelShape::Rbf { dim, ard: true }
    }

    fn col(vals: &[f64]) -> DenseMatrix {
        DenseMatrix::column(vals)
    }

    #[test]
    fn nlml_single_point_unit_kernel_tiny_noise() {
        // N=1, k(x,x)=1, noise at the floor, y=0: 0.5 log 2 pi.
        let mut gp = ExactGp::new(col(&[0.0]), col(&[0.0]), rbf_shape(1)).unwrap();
        let mut vals = gp.params().values().to_vec();
        let seg = gp.params().layout().find("log_noise").unwrap().offset;
        vals[seg] = LOG_NOISE_FLOOR;
        gp.set_params(&vals).unwrap();
        assert!((gp.nlml() - 0.5 * LN_2PI).abs() < 1e-6);
        assert!((gp.nlml() - 0.91894).abs() < 1e-4);
    }

    #[test]
    fn nlml_single_point_total_variance_four() {
        // Kernel variance 3 plus noise 1: total 4, y = 2.
        let mut gp = ExactGp::new(col(&[0.0]), col(&[2.0]), rbf_shape(1)).unwrap();
        let mut vals = gp.params().values().to_vec();
        let layout = gp.params().layout().clone();
        vals[layout.find("kern.log_variance").unwrap().offset] = 3.0_f64.ln();
        vals[layout.find("log_noise").unwrap().offset] = 0.0;
        gp.set_params(&vals).unwrap();
        let expected = 0.5 * (4.0 / 4.0) + 0.5 * 4.0_f64.ln() + 0.5 * LN_2PI;
        assert!((gp.nlml() - expected).abs() < 1e-9);
        assert!((gp.nlml() - 2.11208).abs() < 1e-4);
    }

    #[test]
    fn duplicate_training_point_changes_nlml() {
        let single = ExactGp::new(col(&[0.3]), col(&[1.0]), rbf_shape(1)).unwrap();
        let doubled =
            ExactGp::new(col(&[0.3, 0.3]), col(&[1.0, 1.0]), rbf_shape(1)).unwrap();
        assert!((single.nlml() - doubled.nlml()).abs() > 1e-3);
    }

    #[test]
    fn fit_descends_on_sine_data() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin()).collect();
        let mut gp = ExactGp::new(col(&xs), col(&ys), rbf_shape(1)).unwrap();
        let before = gp.nlml();
        gp.fit(300, 0.02).unwrap();
        assert!(gp.nlml() < before, "nlml {} -> {}", before, gp.nlml());
    }

    #[test]
    fn fit_on_zero_targets_stays_finite() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let mut gp = ExactGp::new(col(&xs), col(&vec![0.0; 10]), rbf_shape(1)).unwrap();
        let trace = gp.fit(300, 0.05).unwrap();
        assert!(!trace.diverged);
        assert!(gp.nlml().is_finite());
        assert!(gp.params().values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fit_recovers_prior_hyperparameters_to_near_optimality() {
        // Data drawn from the prior at known hyperparameters; the fitted
        // minimum must be at least as good as the truth (up to tolerance).
        let n = 25;
        let mut rng = crate::rng::stream(91, "gp-prior", 0);
        let x = DenseMatrix::from_fn(n, 1, |_, _| rng.gen_range(0.0..4.0));
        let true_kernel = Kernel::Rbf {
            dim: 1,
            params: crate::kernels::KernelParams {
                log_variance: 0.5,
                log_lengthscales: vec![-0.3],
                log_noise: None,
            },
        };
        let true_noise = 0.01;
        let mut k = gram(&true_kernel, &x, &x, false).unwrap();
        for i in 0..n {
            k.set(i, i, k.get(i, i) + true_noise);
        }
        let f = cholesky(&k, &JitterPolicy::default()).unwrap();
        let eps = DenseMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
        let y = f.lower.matmul(&eps).unwrap();

        let mut gp = ExactGp::new(x, y, rbf_shape(1)).unwrap();
        let layout = gp.params().layout().clone();
        let mut truth = gp.params().values().to_vec();
        truth[layout.find("kern.log_variance").unwrap().offset] = 0.5;
        truth[layout.find("kern.log_lengthscales").unwrap().offset] = -0.3;
        truth[layout.find("log_noise").unwrap().offset] = true_noise.ln();
        gp.set_params(&truth).unwrap();
        let nlml_truth = gp.nlml();

        let mut fitted = ExactGp::new(
            gp.x.clone(),
            gp.y.clone(),
            rbf_shape(1),
        )
        .unwrap();
        fitted.fit(DEFAULT_FIT_STEPS, DEFAULT_FIT_LR).unwrap();
        assert!(
            fitted.nlml() <= nlml_truth + 1e-3,
            "fitted {} vs truth {}",
            fitted.nlml(),
            nlml_truth
        );
    }

    #[test]
    fn predict_interpolates_with_tiny_noise() {
        let xs = [0.0, 0.4, 0.9];
        let ys = [1.0, -0.5, 0.3];
        let mut gp = ExactGp::new(col(&xs), col(&ys), rbf_shape(1)).unwrap();
        let mut vals = gp.params().values().to_vec();
        vals[gp.params().layout().find("log_noise").unwrap().offset] = LOG_NOISE_FLOOR;
        gp.set_params(&vals).unwrap();
        let (mean, var) = gp.predict(&col(&xs)).unwrap();
        for i in 0..3 {
            assert!((mean[i] - ys[i]).abs() < 1e-5);
            assert!(var[i] < 1e-6);
        }
    }

    #[test]
    fn predict_reverts_to_prior_far_away() {
        let gp = ExactGp::new(col(&[0.0]), col(&[5.0]), rbf_shape(1)).unwrap();
        let (mean, var) = gp.predict(&col(&[20.0])).unwrap();
        assert!(mean[0].abs() < 1e-10);
        assert!((var[0] - 1.0).abs() < 1e-10); // prior variance exp(0) = 1
    }

    #[test]
    fn predict_single_point_closed_form() {
        let gp = ExactGp::new(col(&[0.0]), col(&[2.0]), rbf_shape(1)).unwrap();
        let k = gp.kernel().unwrap();
        let x_star = 0.7;
        let k_sx = k.eval(&[x_star], &[0.0]).unwrap();
        let k_xx = k.eval(&[0.0], &[0.0]).unwrap();
        let expected = k_sx * 2.0 / (k_xx + gp.noise_variance());
        let (mean, _) = gp.predict(&col(&[x_star])).unwrap();
        assert!((mean[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn predict_is_permutation_invariant() {
        let xs = [0.1, 0.5, 0.8, 0.3];
        let ys = [1.0, 0.2, -0.7, 0.4];
        let gp = ExactGp::new(col(&xs), col(&ys), rbf_shape(1)).unwrap();
        let perm_x = [0.3, 0.8, 0.1, 0.5];
        let perm_y = [0.4, -0.7, 1.0, 0.2];
        let gp2 = ExactGp::new(col(&perm_x), col(&perm_y), rbf_shape(1)).unwrap();
        let grid = col(&[0.0, 0.25, 0.6, 1.0]);
        let (m1, v1) = gp.predict(&grid).unwrap();
        let (m2, v2) = gp2.predict(&grid).unwrap();
        for i in 0..4 {
            assert!((m1[i] - m2[i]).abs() < 1e-10);
            assert!((v1[i] - v2[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn predictive_variance_nonnegative_everywhere() {
        let mut rng = crate::rng::stream(7, "gp-var", 0);
        let x = DenseMatrix::from_fn(15, 2, |_, _| rng.gen_range(0.0..1.0));
        let y = DenseMatrix::from_fn(15, 1, |_, _| rng.gen_range(-1.0..1.0));
        let mut gp = ExactGp::new(x, y, rbf_shape(2)).unwrap();
        gp.fit(200, 0.05).unwrap();
        let grid = DenseMatrix::from_fn(50, 2, |_, _| rng.gen_range(-0.5..1.5));
        let (_, var) = gp.predict(&grid).unwrap();
        assert!(var.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn nlml_gradient_passes_finite_difference_check() {
        let mut rng = crate::rng::stream(13, "gp-grad", 0);
        for case in 0..3 {
            let x = DenseMatrix::from_fn(10, 2, |_, _| rng.gen_range(0.0..1.0));
            let y = DenseMatrix::from_fn(10, 1, |_, _| rng.gen_range(-1.0..1.0));
            let mut gp = ExactGp::new(x, y, rbf_shape(2)).unwrap();
            // Random but tame parameter point.
            let vals: Vec<f64> = gp
                .params()
                .values()
                .iter()
                .map(|v| v + rng.gen_range(-0.3..0.3))
                .collect();
            gp.set_params(&vals).unwrap();
            let report = check_grad(gp.nlml_objective(), gp.params(), 1e-5, 1e-4).unwrap();
            assert!(
                report.passed,
                "case {case}: max rel err {} at {}",
                report.max_rel_err, report.worst_index
            );
        }
    }

    #[test]
    fn composite_kernel_gp_gradient_passes_finite_difference_check() {
        let mut rng = crate::rng::stream(29, "gp-grad", 1);
        let x = DenseMatrix::from_fn(8, 3, |_, _| rng.gen_range(0.0..1.0));
        let y = DenseMatrix::from_fn(8, 1, |_, _| rng.gen_range(-1.0..1.0));
        let shape = KernelShape::MfComposite { d_in: 2, d_out: 1, use_linear: true };
        let gp = ExactGp::new(x, y, shape).unwrap();
        let report = check_grad(gp.nlml_objective(), gp.params(), 1e-5, 1e-4).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }
}
