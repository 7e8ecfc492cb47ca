//! Nonlinear autoregressive multi-fidelity GP: one exact GP per level,
//! trained sequentially in isolation. Level 1 is a plain RBF GP; level t
//! regresses on the input augmented with the level-(t-1) posterior mean at
//! that input, under the composite multi-fidelity kernel. Prediction
//! propagates Monte-Carlo samples level to level.

use rand_distr::{Distribution, StandardNormal};

use crate::data::{InputScaler, MultiFidelityDataset};
use crate::diff::ParamVector;
use crate::gp_exact::{clamp_variance, ExactGp};
use crate::kernels::KernelShape;
use crate::linalg::{cholesky, DenseMatrix, JitterPolicy};
use crate::registry::{
    FitConfig, FitTrace, ModelBuilder, ModelError, Prediction, SurrogateModel, TracePoint,
};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq)]
pub struct NargpConfig {
    /// Steps per optimization phase (noise frozen, then freed).
    pub phase_steps: usize,
    pub lr: f64,
    /// Default Monte-Carlo sample count for prediction propagation.
    pub sample_count: usize,
    /// Linear term inside the composite kernel bracket (off in the
    /// original formulation, which is all-RBF).
    pub use_linear: bool,
}

impl Default for NargpConfig {
    fn default() -> Self {
        Self { phase_steps: 1000, lr: 0.01, sample_count: 1000, use_linear: false }
    }
}

pub struct NargpModel {
    scaler: InputScaler,
    levels: Vec<ExactGp>,
    /// Concatenation of all level parameter vectors, rebuilt after fit
    /// (exposed for checkpointing).
    flat_params: ParamVector,
}

impl NargpModel {
    /// Trains level 1 as a plain GP, then each higher level on augmented
    /// inputs `(x, mean of level t-1 at x)`, never revisiting lower
    /// levels. Each level uses the two-step schedule: noise frozen, then
    /// freed.
    pub fn fit(
        data: &MultiFidelityDataset,
        config: &NargpConfig,
        _seed: u64,
    ) -> Result<(Self, FitTrace), ModelError> {
        data.validate()?;
        if data.output_dim() != 1 {
            return Err(ModelError::ConfigError("NARGP expects univariate targets".into()));
        }
        let d = data.input_dim();
        let scaler = InputScaler::fit(data);
        let mut levels: Vec<ExactGp> = Vec::with_capacity(data.num_levels());
        let mut trace = FitTrace::default();
        for t in 1..=data.num_levels() {
            let xs = scaler.apply(&data.levels[t - 1].x);
            let y = data.levels[t - 1].y.clone();
            let mut gp = if t == 1 {
                ExactGp::new(xs, y, KernelShape::Rbf { dim: d, ard: true })?
            } else {
                let prev_mean = Self::mean_chain(&levels, &xs)?;
                let aug = augment(&xs, &prev_mean);
                ExactGp::new(
                    aug,
                    y,
                    KernelShape::MfComposite {
                        d_in: d,
                        d_out: 1,
                        use_linear: config.use_linear,
                    },
                )?
            };
            let t1 = gp.fit_masked(config.phase_steps, config.lr, &["log_noise"])?;
            let t2 = gp.fit(config.phase_steps, config.lr)?;
            trace.diverged |= t1.diverged || t2.diverged;
            let offset = (t - 1) * 2 * config.phase_steps;
            for p in t1.points.into_iter().chain(t2.points) {
                trace.points.push(TracePoint { step: offset + p.step, ..p });
            }
            levels.push(gp);
        }
        let flat_params = flatten_params(&levels);
        Ok((Self { scaler, levels, flat_params }, trace))
    }

    /// Deterministic mean chain through the trained levels at scaled
    /// inputs.
    fn mean_chain(levels: &[ExactGp], xs: &DenseMatrix) -> Result<Vec<f64>, ModelError> {
        let mut mean = levels[0].predict(xs)?.0;
        for gp in &levels[1..] {
            let aug = augment(xs, &mean);
            mean = gp.predict(&aug)?.0;
        }
        Ok(mean)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, t: usize) -> &ExactGp {
        &self.levels[t - 1]
    }

    pub fn level_mut(&mut self, t: usize) -> &mut ExactGp {
        &mut self.levels[t - 1]
    }

    fn check_level(&self, level: usize) -> Result<(), ModelError> {
        if level == 0 || level > self.num_levels() {
            return Err(ModelError::UnknownFidelity { level, max: self.num_levels() });
        }
        Ok(())
    }

    /// One sample chain with externally supplied standard-normal draws:
    /// `eps[l]` perturbs the level-(l+1) output. Returns the final level's
    /// mean and variance.
    pub fn propagate_sample(
        &self,
        xs_scaled: &DenseMatrix,
        level: usize,
        eps: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        debug_assert_eq!(eps.len(), level - 1);
        let (mut mean, mut var) = self.levels[0].predict(xs_scaled)?;
        for l in 2..=level {
            let f: Vec<f64> = mean
                .iter()
                .zip(var.iter())
                .zip(eps[l - 2].iter())
                .map(|((m, v), e)| m + e * v.sqrt())
                .collect();
            let aug = augment(xs_scaled, &f);
            let next = self.levels[l - 1].predict(&aug)?;
            mean = next.0;
            var = next.1;
        }
        Ok((mean, var))
    }

    /// Monte-Carlo prediction: `s` Gaussian chains propagated level to
    /// level, returning the per-chain final draws plus moment-matched
    /// mean and variance. Level 1 is analytic.
    pub fn predict_mc(
        &self,
        x: &DenseMatrix,
        level: usize,
        s: usize,
        seed: u64,
    ) -> Result<(Prediction, Vec<Vec<f64>>), ModelError> {
        self.check_level(level)?;
        let xs = self.scaler.apply(x);
        let n = x.rows();
        let mut rng = crate::rng::stream(seed, "nargp-predict", level as u64);

        if level == 1 {
            let (mean, variance) = self.levels[0].predict(&xs)?;
            let mut samples = Vec::with_capacity(s);
            for _ in 0..s {
                samples.push(
                    mean.iter()
                        .zip(variance.iter())
                        .map(|(m, v)| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            m + e * v.sqrt()
                        })
                        .collect(),
                );
            }
            return Ok((Prediction { mean, variance }, samples));
        }

        let s = s.max(1);
        let mut samples = Vec::with_capacity(s);
        let mut mean_sum = vec![0.0; n];
        let mut mean_sq_sum = vec![0.0; n];
        let mut var_sum = vec![0.0; n];
        for _ in 0..s {
            let eps: Vec<Vec<f64>> = (0..level - 1)
                .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let (mean, var) = self.propagate_sample(&xs, level, &eps)?;
            let draw: Vec<f64> = mean
                .iter()
                .zip(var.iter())
                .map(|(m, v)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + e * v.sqrt()
                })
                .collect();
            samples.push(draw);
            for i in 0..n {
                mean_sum[i] += mean[i];
                mean_sq_sum[i] += mean[i] * mean[i];
                var_sum[i] += var[i];
            }
        }
        let inv = 1.0 / s as f64;
        let mean: Vec<f64> = mean_sum.iter().map(|v| v * inv).collect();
        let variance = (0..n)
            .map(|i| {
                let spread = mean_sq_sum[i] * inv - mean[i] * mean[i];
                clamp_variance(var_sum[i] * inv + spread)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((Prediction { mean, variance }, samples))
    }
}

fn augment(xs: &DenseMatrix, f: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(xs.rows(), xs.cols() + 1, |i, j| {
        if j < xs.cols() {
            xs.get(i, j)
        } else {
            f[i]
        }
    })
}

fn flatten_params(levels: &[ExactGp]) -> ParamVector {
    let mut builder = crate::diff::Layout::builder();
    for (i, gp) in levels.iter().enumerate() {
        for seg in gp.params().layout().segments() {
            builder = builder.add(format!("level{}.{}", i + 1, seg.name), seg.len);
        }
    }
    let layout = builder.build();
    let mut values = Vec::with_capacity(layout.total_len());
    for gp in levels {
        values.extend_from_slice(gp.params().values());
    }
    ParamVector::new(layout, values).expect("lengths match by construction")
}

/// Registry entry for the NARGP baseline.
pub struct NargpBuilder;

impl ModelBuilder for NargpBuilder {
    fn name(&self) -> &'static str {
        "nargp"
    }

    fn fit(
        &self,
        data: &MultiFidelityDataset,
        config: &FitConfig,
        seed: u64,
    ) -> Result<(Box<dyn SurrogateModel>, FitTrace), ModelError> {
        let (model, trace) = NargpModel::fit(data, &config.nargp, seed)?;
        Ok((Box::new(model), trace))
    }

    fn restore(
        &self,
        data: &MultiFidelityDataset,
        config: &FitConfig,
        seed: u64,
        params: &[(String, Vec<f64>)],
    ) -> Result<Box<dyn SurrogateModel>, ModelError> {
        // Rebuild the level stack without training, then overlay values.
        let mut cfg = config.nargp.clone();
        cfg.phase_steps = 0;
        let (mut model, _) = NargpModel::fit(data, &cfg, seed)?;
        let mut flat = model.flat_params.clone();
        crate::registry::restore_params(&mut flat, params)?;
        // Push the restored values back into each level; level order
        // matters because later levels' training inputs use earlier
        // levels' means.
        for t in 1..=model.num_levels() {
            let gp = &model.levels[t - 1];
            let mut vals = Vec::with_capacity(gp.params().len());
            for seg in gp.params().layout().segments() {
                vals.extend_from_slice(flat.segment(&format!("level{t}.{}", seg.name))?);
            }
            model.levels[t - 1].set_params(&vals)?;
        }
        // Re-derive augmented training inputs under the restored lower
        // levels so the cached factors match training time.
        let d = data.input_dim();
        for t in 2..=data.num_levels() {
            let xs = model.scaler.apply(&data.levels[t - 1].x);
            let prev_mean = NargpModel::mean_chain(&model.levels[..t - 1], &xs)?;
            let aug = augment(&xs, &prev_mean);
            let old = &model.levels[t - 1];
            let mut gp = ExactGp::new(
                aug,
                data.levels[t - 1].y.clone(),
                KernelShape::MfComposite { d_in: d, d_out: 1, use_linear: config.nargp.use_linear },
            )?;
            gp.set_params(&old.params().values().to_vec())?;
            model.levels[t - 1] = gp;
        }
        model.flat_params = flatten_params(&model.levels);
        Ok(Box::new(model))
    }
}

impl SurrogateModel for NargpModel {
    fn name(&self) -> &'static str {
        "nargp"
    }

    fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn predict(
        &self,
        x: &DenseMatrix,
        level: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Prediction, ModelError> {
        Ok(self.predict_mc(x, level, samples, seed)?.0)
    }

    fn log_density(
        &self,
        x: &DenseMatrix,
        y: &[f64],
        level: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_level(level)?;
        let xs = self.scaler.apply(x);
        let noise = self.levels[level - 1].noise_variance();
        let n = x.rows();
        let mut rng = crate::rng::stream(seed, "nargp-predict", level as u64);
        let s = if level == 1 { 1 } else { samples.max(1) };
        let mut comp: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(s); n];
        for _ in 0..s {
            let (mean, var) = if level == 1 {
                self.levels[0].predict(&xs)?
            } else {
                let eps: Vec<Vec<f64>> = (0..level - 1)
                    .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                self.propagate_sample(&xs, level, &eps)?
            };
            for i in 0..n {
                comp[i].push((mean[i], var[i] + noise));
            }
        }
        Ok(comp
            .iter()
            .zip(y.iter())
            .map(|(parts, yi)| {
                let logs: Vec<f64> = parts
                    .iter()
                    .map(|(m, v)| {
                        let dvar = yi - m;
                        -0.5 * (LN_2PI + v.ln()) - dvar * dvar / (2.0 * v)
                    })
                    .collect();
                crate::mfdgp::log_sum_exp(&logs) - (parts.len() as f64).ln()
            })
            .collect())
    }

    fn joint_posterior(
        &self,
        x: &DenseMatrix,
        level: usize,
        samples: usize,
        seed: u64,
    ) -> Result<(Vec<f64>, DenseMatrix), ModelError> {
        self.check_level(level)?;
        let xs = self.scaler.apply(x);
        let n = x.rows();
        if level == 1 {
            return self.levels[0].predict_full(&xs);
        }
        let s = samples.max(1);
        let mut rng = crate::rng::stream(seed, "nargp-joint", level as u64);
        let policy = JitterPolicy::default();
        let mut mean_sum = vec![0.0; n];
        let mut outer_sum = DenseMatrix::zeros(n, n);
        let mut cov_sum = DenseMatrix::zeros(n, n);
        for _ in 0..s {
            let mut f: Option<Vec<f64>> = None;
            let mut last: Option<(Vec<f64>, DenseMatrix)> = None;
            for l in 1..=level {
                let inputs = match &f {
                    None => xs.clone(),
                    Some(fv) => augment(&xs, fv),
                };
                let (mean, cov) = self.levels[l - 1].predict_full(&inputs)?;
                if l < level {
                    let factor = cholesky(&cov, &policy)?;
                    let eps = DenseMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
                    let corr = factor.lower.matmul(&eps)?;
                    f = Some((0..n).map(|i| mean[i] + corr.get(i, 0)).collect());
                } else {
                    last = Some((mean, cov));
                }
            }
            let (mean, cov) = last.expect("loop reaches l == level");
            for i in 0..n {
                mean_sum[i] += mean[i];
            }
            cov_sum = cov_sum.add(&cov)?;
            let mcol = DenseMatrix::column(&mean);
            outer_sum = outer_sum.add(&mcol.matmul(&mcol.transpose())?)?;
        }
        let inv = 1.0 / s as f64;
        let mean: Vec<f64> = mean_sum.iter().map(|v| v * inv).collect();
        let mut cov = cov_sum.scale(inv);
        for i in 0..n {
            for j in 0..n {
                let spread = outer_sum.get(i, j) * inv - mean[i] * mean[j];
                cov.set(i, j, cov.get(i, j) + spread);
            }
        }
        Ok((mean, cov))
    }

    fn params(&self) -> &ParamVector {
        &self.flat_params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LevelData;
    use rand::Rng;

    fn two_level_data(n1: usize, n2: usize, seed: u64) -> MultiFidelityDataset {
        let mut rng = crate::rng::stream(seed, "nargp-data", 0);
        let l1x = DenseMatrix::from_fn(n1, 1, |_, _| rng.gen_range(0.0..1.0));
        let l1y = DenseMatrix::from_fn(n1, 1, |i, _| (8.0 * l1x.get(i, 0)).sin());
        let l2x = DenseMatrix::from_fn(n2, 1, |_, _| rng.gen_range(0.0..1.0));
        let l2y = DenseMatrix::from_fn(n2, 1, |i, _| {
            let v = (8.0 * l2x.get(i, 0)).sin();
            v * v
        });
        MultiFidelityDataset::new(vec![
            LevelData { x: l1x, y: l1y },
            LevelData { x: l2x, y: l2y },
        ])
        .unwrap()
    }

    fn quick_config() -> NargpConfig {
        NargpConfig { phase_steps: 100, ..Default::default() }
    }

    #[test]
    fn single_fidelity_reduces_to_exact_gp() {
        let mut rng = crate::rng::stream(1, "nargp", 0);
        let x = DenseMatrix::from_fn(10, 1, |_, _| rng.gen_range(0.0..1.0));
        let y = DenseMatrix::from_fn(10, 1, |i, _| (3.0 * x.get(i, 0)).cos());
        let data = MultiFidelityDataset::new(vec![LevelData { x: x.clone(), y: y.clone() }])
            .unwrap();
        let cfg = quick_config();
        let (model, _) = NargpModel::fit(&data, &cfg, 0).unwrap();

        let scaler = InputScaler::fit(&data);
        let mut gp =
            ExactGp::new(scaler.apply(&x), y, KernelShape::Rbf { dim: 1, ard: true }).unwrap();
        gp.fit_masked(cfg.phase_steps, cfg.lr, &["log_noise"]).unwrap();
        gp.fit(cfg.phase_steps, cfg.lr).unwrap();

        let grid = DenseMatrix::column(&[0.15, 0.55, 0.95]);
        let pred = model.predict_mc(&grid, 1, 1, 0).unwrap().0;
        let (gm, gv) = gp.predict(&scaler.apply(&grid)).unwrap();
        for i in 0..3 {
            assert!((pred.mean[i] - gm[i]).abs() < 1e-12);
            assert!((pred.variance[i] - gv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sequential_training_leaves_lower_levels_isolated() {
        let data = two_level_data(12, 6, 2);
        let (mut model, _) = NargpModel::fit(&data, &quick_config(), 0).unwrap();
        let level2_before: Vec<u64> =
            model.level(2).params().values().iter().map(|v| v.to_bits()).collect();
        // Re-fitting level 1 after the fact must not touch level 2.
        model.level_mut(1).fit(50, 0.01).unwrap();
        let level2_after: Vec<u64> =
            model.level(2).params().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(level2_before, level2_after);
    }

    #[test]
    fn zero_eps_single_sample_is_deterministic_mean_chain() {
        let data = two_level_data(12, 6, 3);
        let (model, _) = NargpModel::fit(&data, &quick_config(), 0).unwrap();
        let grid = DenseMatrix::column(&[0.2, 0.8]);
        let xs = model.scaler.apply(&grid);
        let zero = vec![vec![0.0; 2]];
        let (m1, v1) = model.propagate_sample(&xs, 2, &zero).unwrap();
        let (m2, v2) = model.propagate_sample(&xs, 2, &zero).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
        // And it matches the deterministic mean chain used at training.
        let chain = NargpModel::mean_chain(&model.levels[..1], &xs).unwrap();
        let aug = augment(&xs, &chain);
        let (direct, _) = model.level(2).predict(&aug).unwrap();
        for i in 0..2 {
            assert!((m1[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_moments_converge_between_sample_counts() {
        let data = two_level_data(12, 6, 4);
        let (model, _) = NargpModel::fit(&data, &quick_config(), 0).unwrap();
        let grid = DenseMatrix::column(&[0.3, 0.7]);
        let (small, _) = model.predict_mc(&grid, 2, 1_000, 5).unwrap();
        let (large, _) = model.predict_mc(&grid, 2, 100_000, 6).unwrap();
        for i in 0..2 {
            // Spread of chain means dominates the estimator error.
            let se = (large.variance[i] / 1_000.0).sqrt();
            assert!(
                (small.mean[i] - large.mean[i]).abs() <= 3.0 * se,
                "point {i}: {} vs {} (3se = {})",
                small.mean[i],
                large.mean[i],
                3.0 * se
            );
        }
    }

    #[test]
    fn level_two_variance_grows_with_propagated_uncertainty() {
        let data = two_level_data(12, 6, 7);
        let (model, _) = NargpModel::fit(&data, &quick_config(), 0).unwrap();
        let grid = DenseMatrix::column(&[0.45]);
        let xs = model.scaler.apply(&grid);
        let mut rng = crate::rng::stream(8, "nargp-mono", 0);
        let base_eps: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Scaling eps by sqrt(c) propagates N(m, c * v) from level 1.
        let mut spreads = Vec::new();
        for scale in [0.25f64, 1.0, 4.0] {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut var_acc = 0.0;
            for e in &base_eps {
                let eps = vec![vec![e * scale.sqrt()]];
                let (m, v) = model.propagate_sample(&xs, 2, &eps).unwrap();
                sum += m[0];
                sum_sq += m[0] * m[0];
                var_acc += v[0];
            }
            let n = base_eps.len() as f64;
            let total = var_acc / n + (sum_sq / n - (sum / n).powi(2));
            assert!(total >= 0.0);
            spreads.push(total);
        }
        assert!(spreads[0] <= spreads[1] + 1e-9);
        assert!(spreads[1] <= spreads[2] + 1e-9);
    }

    #[test]
    fn unknown_fidelity_is_rejected() {
        let data = two_level_data(6, 3, 9);
        let (model, _) = NargpModel::fit(&data, &quick_config(), 0).unwrap();
        let grid = DenseMatrix::column(&[0.5]);
        assert!(matches!(
            model.predict_mc(&grid, 3, 10, 0),
            Err(ModelError::UnknownFidelity { level: 3, max: 2 })
        ));
    }
}
