//! Linear autoregressive multi-fidelity GP in the joint Kennedy–O'Hagan
//! form: `f_t = rho_t f_{t-1} + delta_t` with independent per-level delta
//! processes, trained by minimizing the joint NLML over all kernels,
//! scaling factors, and per-level noises in one optimizer run.



use crate::data::{InputScaler, MultiFidelityDataset};
use crate::diff::{self, DiffError, Graph, Layout, ParamVector, Var};
use crate::gp_exact::{clamp_variance, LOG_NOISE_FLOOR};
use crate::kernels::{gram_var, Kernel, KernelShape, KernelVars, DEFAULT_LOG_NOISE};
use crate::linalg::{
    cholesky, tri_solve, CholeskyFactor, DenseMatrix, JitterPolicy, TriSide,
};
use crate::optimizer::{adam_step, AdamState, FreezeMask};
use crate::registry::{
    FitConfig, FitTrace, ModelBuilder, ModelError, Prediction, SurrogateModel, TracePoint,
};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Config {
    pub steps: usize,
    pub lr: f64,
}

impl Default for Ar1Config {
    fn default() -> Self {
        Self { steps: 1500, lr: 0.01 }
    }
}

struct Ar1Cache {
    kernels: Vec<Kernel>,
    rho: Vec<f64>,
    factor: CholeskyFactor,
    alpha: DenseMatrix,
}

pub struct Ar1Model {
    data: MultiFidelityDataset,
    scaler: InputScaler,
    scaled_x: Vec<DenseMatrix>,
    params: ParamVector,
    policy: JitterPolicy,
    cache: Option<Ar1Cache>,
}

impl Ar1Model {
    /// Builds the model with unit kernels, `rho = 1`, and noise variance
    /// 1e-2 per level. Requires at least two fidelity levels.
    pub fn build(data: &MultiFidelityDataset, seed: u64) -> Result<Self, ModelError> {
        let _ = seed; // initialization is deterministic
        data.validate()?;
        let t_levels = data.num_levels();
        if t_levels < 2 {
            return Err(ModelError::UnsupportedFidelityCount { needed: 2, got: t_levels });
        }
        if data.output_dim() != 1 {
            return Err(ModelError::ConfigError("AR1 expects univariate targets".into()));
        }
        let d = data.input_dim();
        let scaler = InputScaler::fit(data);
        let scaled_x = data.levels.iter().map(|l| scaler.apply(&l.x)).collect();

        let mut builder = Layout::builder();
        for t in 1..=t_levels {
            builder = KernelShape::Rbf { dim: d, ard: true }.layout(
                builder,
                &format!("level{t}.kern"),
                false,
            );
            builder = builder.add(format!("level{t}.log_noise"), 1);
        }
        builder = builder.add("rho", t_levels - 1);
        let layout = builder.build();
        let mut params = ParamVector::zeros(layout);
        for t in 1..=t_levels {
            params.set_segment(&format!("level{t}.log_noise"), &[DEFAULT_LOG_NOISE])?;
        }
        params.set_segment("rho", &vec![1.0; t_levels - 1])?;

        let mut model = Self {
            data: data.clone(),
            scaler,
            scaled_x,
            params,
            policy: JitterPolicy::default(),
            cache: None,
        };
        model.refresh()?;
        Ok(model)
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

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

    pub fn num_levels(&self) -> usize {
        self.data.num_levels()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.params.segment("rho").expect("segment exists").to_vec()
    }

    pub fn noise_variance(&self, level: usize) -> Result<f64, ModelError> {
        self.check_level(level)?;
        Ok(self.params.segment(&format!("level{level}.log_noise"))?[0].exp())
    }

    fn check_level(&self, level: usize) -> Result<(), ModelError> {
        if level == 0 || level > self.num_levels() {
            return Err(ModelError::UnknownFidelity { level, max: self.num_levels() });
        }
        Ok(())
    }

    fn read_kernels(&self) -> Result<Vec<Kernel>, ModelError> {
        (1..=self.num_levels())
            .map(|t| {
                let shape = KernelShape::Rbf { dim: self.data.input_dim(), ard: true };
                Ok(shape.read(&self.params, &format!("level{t}.kern"), false)?)
            })
            .collect()
    }

    /// Covariance implied by unrolling the recursion: for `s <= t`,
    /// `cov(f_s(x), f_t(x')) = (prod_{k=s+1..t} rho_k)
    ///   * sum_{j=1..s} (prod_{k=j+1..s} rho_k^2) k_j(x, x')`.
    fn cov_entry(
        kernels: &[Kernel],
        rho: &[f64],
        xi: &[f64],
        level_i: usize,
        xj: &[f64],
        level_j: usize,
    ) -> Result<f64, ModelError> {
        let (s, t, a, b) = if level_i <= level_j {
            (level_i, level_j, xi, xj)
        } else {
            (level_j, level_i, xj, xi)
        };
        let mut outer = 1.0;
        for k in (s + 1)..=t {
            outer *= rho[k - 2];
        }
        let mut total = 0.0;
        for j in 1..=s {
            let mut c = 1.0;
            for k in (j + 1)..=s {
                c *= rho[k - 2] * rho[k - 2];
            }
            total += c * kernels[j - 1].eval(a, b)?;
        }
        Ok(outer * total)
    }

    /// Joint prior covariance of arbitrary leveled points (raw inputs);
    /// with `add_noise`, each diagonal entry gains its level's noise.
    pub fn build_cov(
        &self,
        x: &DenseMatrix,
        levels: &[usize],
        add_noise: bool,
    ) -> Result<DenseMatrix, ModelError> {
        if x.rows() != levels.len() {
            return Err(ModelError::ConfigError(format!(
                "{} points with {} level tags",
                x.rows(),
                levels.len()
            )));
        }
        for &l in levels {
            self.check_level(l)?;
        }
        let kernels = self.read_kernels()?;
        let rho = self.rho();
        let noises: Vec<f64> =
            (1..=self.num_levels()).map(|t| self.noise_variance(t)).collect::<Result<_, _>>()?;
        let xs = self.scaler.apply(x);
        let n = x.rows();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v =
                    Self::cov_entry(&kernels, &rho, xs.row(i), levels[i], xs.row(j), levels[j])?;
                out.set(i, j, v);
                out.set(j, i, v);
            }
            if add_noise {
                out.set(i, i, out.get(i, i) + noises[levels[i] - 1]);
            }
        }
        Ok(out)
    }

    fn stacked_levels(&self) -> Vec<usize> {
        let mut levels = Vec::new();
        for t in 1..=self.num_levels() {
            levels.extend(std::iter::repeat(t).take(self.data.count(t)));
        }
        levels
    }

    fn stacked_y(&self) -> DenseMatrix {
        let mut vals = Vec::new();
        for level in &self.data.levels {
            vals.extend_from_slice(level.y.data());
        }
        DenseMatrix::from_raw(vals.len(), 1, vals)
    }

    fn refresh(&mut self) -> Result<(), ModelError> {
        let kernels = self.read_kernels()?;
        let rho = self.rho();
        let noises: Vec<f64> =
            (1..=self.num_levels()).map(|t| self.noise_variance(t)).collect::<Result<_, _>>()?;
        let levels = self.stacked_levels();
        let n = levels.len();
        let mut k = DenseMatrix::zeros(n, n);
        let rows: Vec<(&DenseMatrix, usize)> = (1..=self.num_levels())
            .map(|t| (&self.scaled_x[t - 1], t))
            .collect();
        // Stacked scaled inputs in level order.
        let mut flat: Vec<&[f64]> = Vec::with_capacity(n);
        for (xs, _) in &rows {
            for i in 0..xs.rows() {
                flat.push(xs.row(i));
            }
        }
        for i in 0..n {
            for j in i..n {
                let v = Self::cov_entry(&kernels, &rho, flat[i], levels[i], flat[j], levels[j])?;
                k.set(i, j, v);
                k.set(j, i, v);
            }
            k.set(i, i, k.get(i, i) + noises[levels[i] - 1]);
        }
        let factor = cholesky(&k, &self.policy)?;
        let y = self.stacked_y();
        let alpha = crate::linalg::chol_solve(&factor, &y)?;
        self.cache = Some(Ar1Cache { kernels, rho, factor, alpha });
        Ok(())
    }

    fn cache(&self) -> &Ar1Cache {
        self.cache.as_ref().expect("cache is rebuilt on every parameter change")
    }

    /// Joint negative log marginal likelihood over all fidelity blocks.
    pub fn nlml(&self) -> f64 {
        let c = self.cache();
        let y = self.stacked_y();
        let fit: f64 =
            y.data().iter().zip(c.alpha.data().iter()).map(|(a, b)| a * b).sum();
        0.5 * fit
            + 0.5 * crate::linalg::log_det(&c.factor)
            + 0.5 * y.rows() as f64 * LN_2PI
    }

    fn rho_var(&self, g: &mut Graph, p: &ParamVector, t: usize) -> Result<Var, DiffError> {
        // rho_t for t in 2..=T lives at index t-2 of the rho segment.
        let rho = g.param(p, "rho", self.num_levels() - 1, 1)?;
        let rt = g.transpose(rho);
        g.slice_cols(rt, t - 2, 1)
    }

    /// Joint NLML on the tape.
    pub fn nlml_objective(
        &self,
    ) -> impl Fn(&mut Graph, &ParamVector) -> Result<Var, DiffError> + '_ {
        move |g: &mut Graph, p: &ParamVector| {
            let t_levels = self.num_levels();
            let d = self.data.input_dim();
            let shape = KernelShape::Rbf { dim: d, ard: true };
            let kerns: Vec<KernelVars> = (1..=t_levels)
                .map(|t| shape.bind(g, p, &format!("level{t}.kern"), false))
                .collect::<Result<_, _>>()?;
            let xs: Vec<Var> =
                (0..t_levels).map(|i| g.constant(self.scaled_x[i].clone())).collect();
            let rho: Vec<Var> = (2..=t_levels)
                .map(|t| self.rho_var(g, p, t))
                .collect::<Result<_, _>>()?;

            // Upper-triangular blocks, then mirror by transposition.
            let mut blocks: Vec<Vec<Option<Var>>> = vec![vec![None; t_levels]; t_levels];
            for s in 1..=t_levels {
                for t in s..=t_levels {
                    let mut block: Option<Var> = None;
                    for j in 1..=s {
                        let gram = gram_var(g, &kerns[j - 1], xs[s - 1], xs[t - 1], false)?;
                        let mut coef = g.scalar(1.0);
                        for k in (s + 1)..=t {
                            coef = g.hadamard(coef, rho[k - 2])?;
                        }
                        for k in (j + 1)..=s {
                            let sq = g.square(rho[k - 2]);
                            coef = g.hadamard(coef, sq)?;
                        }
                        let term = g.scale(gram, coef)?;
                        block = Some(match block {
                            None => term,
                            Some(b) => g.add(b, term)?,
                        });
                    }
                    let mut block = block.expect("s >= 1");
                    if s == t {
                        let log_noise = g.scalar_param(p, &format!("level{t}.log_noise"))?;
                        let noise = g.exp(log_noise);
                        block = g.add_scaled_eye(block, noise)?;
                    }
                    blocks[s - 1][t - 1] = Some(block);
                }
            }
            let mut rows: Vec<Var> = Vec::with_capacity(t_levels);
            for s in 1..=t_levels {
                let mut row: Option<Var> = None;
                for t in 1..=t_levels {
                    let cell = if s <= t {
                        blocks[s - 1][t - 1].expect("upper block built")
                    } else {
                        let upper = blocks[t - 1][s - 1].expect("upper block built");
                        g.transpose(upper)
                    };
                    row = Some(match row {
                        None => cell,
                        Some(r) => g.concat_cols(r, cell)?,
                    });
                }
                rows.push(row.expect("t_levels >= 1"));
            }
            let mut k = rows[0];
            for row in &rows[1..] {
                k = g.concat_rows(k, *row)?;
            }
            let l = g.cholesky(k, &self.policy)?;
            let y = g.constant(self.stacked_y());
            let a = g.solve_lower(l, y)?;
            let ss = g.sum_sq(a);
            let half = g.scalar(0.5);
            let fit = g.hadamard(ss, half)?;
            let dg = g.diag_part(l)?;
            let ln = g.ln(dg);
            let logdet_half = g.sum(ln);
            let c = g.scalar(0.5 * self.stacked_y().rows() as f64 * LN_2PI);
            let partial = g.add(fit, logdet_half)?;
            g.add(partial, c)
        }
    }

    /// Minimizes the joint NLML over kernels, scaling factors, and
    /// per-level noises simultaneously.
    pub fn fit(&mut self, steps: usize, lr: f64) -> Result<FitTrace, ModelError> {
        let mask = FreezeMask::none(self.params.layout().clone());
        let mut adam = AdamState::new(self.params.len(), lr);
        let mut trace = FitTrace::default();
        let objective = self.nlml_objective();
        let mut params = self.params.clone();
        let noise_names: Vec<String> =
            (1..=self.num_levels()).map(|t| format!("level{t}.log_noise")).collect();
        for step in 0..steps {
            let prev = params.clone();
            match diff::gradient(&objective, &params) {
                Ok(gr) => {
                    if step % 100 == 0 {
                        trace.points.push(TracePoint { step, objective: gr.value, lr });
                    }
                    adam_step(&mut adam, &mut params, &gr.gradient, &mask)?;
                    for name in &noise_names {
                        let seg = params.segment_mut(name)?;
                        if seg[0] < LOG_NOISE_FLOOR {
                            seg[0] = LOG_NOISE_FLOOR;
                        }
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
        trace.points.push(TracePoint {
            step: steps,
            objective: self.nlml(),
            lr,
        });
        Ok(trace)
    }

    /// Gaussian conditional of the joint prior on all training blocks:
    /// latent mean and variance at `x_star` for the requested level.
    pub fn predict(
        &self,
        x_star: &DenseMatrix,
        level: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        self.check_level(level)?;
        let c = self.cache();
        let xs = self.scaler.apply(x_star);
        let train_levels = self.stacked_levels();
        let n = train_levels.len();
        let m = xs.rows();
        let mut flat_train: Vec<&[f64]> = Vec::with_capacity(n);
        for t in 1..=self.num_levels() {
            let x = &self.scaled_x[t - 1];
            for i in 0..x.rows() {
                flat_train.push(x.row(i));
            }
        }
        let mut cross = DenseMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                cross.set(
                    i,
                    j,
                    Self::cov_entry(
                        &c.kernels,
                        &c.rho,
                        flat_train[i],
                        train_levels[i],
                        xs.row(j),
                        level,
                    )?,
                );
            }
        }
        let mut mean = vec![0.0; m];
        for i in 0..n {
            let a = c.alpha.get(i, 0);
            for (j, out) in mean.iter_mut().enumerate() {
                *out += cross.get(i, j) * a;
            }
        }
        let v = tri_solve(&c.factor, &cross, TriSide::Lower)?;
        let mut var = vec![0.0; m];
        for (j, out) in var.iter_mut().enumerate() {
            let prior =
                Self::cov_entry(&c.kernels, &c.rho, xs.row(j), level, xs.row(j), level)?;
            let mut explained = 0.0;
            for i in 0..n {
                let vi = v.get(i, j);
                explained += vi * vi;
            }
            *out = clamp_variance(prior - explained)?;
        }
        Ok((mean, var))
    }
}

/// Registry entry for the AR1 baseline.
pub struct Ar1Builder;

impl ModelBuilder for Ar1Builder {
    fn name(&self) -> &'static str {
        "ar1"
    }

    fn fit(
        &self,
        data: &MultiFidelityDataset,
        config: &FitConfig,
        seed: u64,
    ) -> Result<(Box<dyn SurrogateModel>, FitTrace), ModelError> {
        let mut model = Ar1Model::build(data, seed)?;
        let trace = model.fit(config.ar1.steps, config.ar1.lr)?;
        Ok((Box::new(model), trace))
    }

    fn restore(
        &self,
        data: &MultiFidelityDataset,
        config: &FitConfig,
        seed: u64,
        params: &[(String, Vec<f64>)],
    ) -> Result<Box<dyn SurrogateModel>, ModelError> {
        let _ = config;
        let mut model = Ar1Model::build(data, seed)?;
        let mut fresh = model.params.clone();
        crate::registry::restore_params(&mut fresh, params)?;
        model.set_params(&fresh.values().to_vec())?;
        Ok(Box::new(model))
    }
}

impl SurrogateModel for Ar1Model {
    fn name(&self) -> &'static str {
        "ar1"
    }

    fn num_levels(&self) -> usize {
        self.data.num_levels()
    }

    fn predict(
        &self,
        x: &DenseMatrix,
        level: usize,
        _samples: usize,
        _seed: u64,
    ) -> Result<Prediction, ModelError> {
        let (mean, variance) = Ar1Model::predict(self, x, level)?;
        Ok(Prediction { mean, variance })
    }

    fn log_density(
        &self,
        x: &DenseMatrix,
        y: &[f64],
        level: usize,
        _samples: usize,
        _seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        let (mean, var) = Ar1Model::predict(self, x, level)?;
        let noise = self.noise_variance(level)?;
        Ok(mean
            .iter()
            .zip(var.iter())
            .zip(y.iter())
            .map(|((m, v), yi)| {
                let total = v + noise;
                let d = yi - m;
                -0.5 * (LN_2PI + total.ln()) - d * d / (2.0 * total)
            })
            .collect())
    }

    fn joint_posterior(
        &self,
        x: &DenseMatrix,
        level: usize,
        _samples: usize,
        _seed: u64,
    ) -> Result<(Vec<f64>, DenseMatrix), ModelError> {
        self.check_level(level)?;
        let c = self.cache();
        let (mean, _) = Ar1Model::predict(self, x, level)?;
        // Full conditional covariance: K_ss - V^T V.
        let xs = self.scaler.apply(x);
        let train_levels = self.stacked_levels();
        let n = train_levels.len();
        let m = xs.rows();
        let mut flat_train: Vec<&[f64]> = Vec::with_capacity(n);
        for t in 1..=self.num_levels() {
            let xt = &self.scaled_x[t - 1];
            for i in 0..xt.rows() {
                flat_train.push(xt.row(i));
            }
        }
        let mut cross = DenseMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                cross.set(
                    i,
                    j,
                    Self::cov_entry(
                        &c.kernels,
                        &c.rho,
                        flat_train[i],
                        train_levels[i],
                        xs.row(j),
                        level,
                    )?,
                );
            }
        }
        let v = tri_solve(&c.factor, &cross, TriSide::Lower)?;
        let mut cov = DenseMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let prior =
                    Self::cov_entry(&c.kernels, &c.rho, xs.row(a), level, xs.row(b), level)?;
                let mut explained = 0.0;
                for i in 0..n {
                    explained += v.get(i, a) * v.get(i, b);
                }
                let val = prior - explained;
                cov.set(a, b, val);
                cov.set(b, a, val);
            }
        }
        Ok((mean, cov))
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }
}
