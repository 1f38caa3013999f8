//! Training losses and their weighted combination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{ArchConfig, ArchError};
use crate::stats::{self, GaussianVars, StatsError};
use crate::tensor::{Graph, TensorError, Var};

/// Logits are clamped to this magnitude before entering the softplus.
pub const LOGIT_CLAMP: f64 = 30.0;

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
}

/// Weights of the four per-cycle loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// `alpha1`: variational information bound.
    pub bound: f64,
    /// `alpha2`: cycle reconstruction.
    pub recon: f64,
    /// `alpha3`: adversarial (generator side).
    pub gan: f64,
    /// `alpha4`: MMD plus likelihood.
    pub vae: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bound: 1.0,
            recon: 1.0,
            gan: 1.0,
            vae: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Image reconstruction weight.
    pub lambda1: f64,
    /// Domain-specific code consistency weight.
    pub lambda2: f64,
    /// Domain-invariant code consistency weight.
    pub lambda3: f64,
    /// Weights for the X -> Y -> X cycle.
    pub cycle1: LossWeights,
    /// Weights for the Y -> X -> Y cycle.
    pub cycle2: LossWeights,
    /// When set, each cycle's `vae` weight becomes `beta * bound`.
    pub beta: Option<f64>,
    /// MMD kernel bandwidth; `2 / code_dim` when absent.
    pub mmd_sigma: Option<f64>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    /// Write elapsed seconds into the metrics; off keeps the file reproducible.
    pub log_wall_time: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 1.0,
            cycle1: LossWeights::default(),
            cycle2: LossWeights::default(),
            beta: None,
            mmd_sigma: None,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 20_000,
            seed: 0,
            checkpoint_every: 500,
            sample_every: 500,
            log_wall_time: false,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.arch.validate()?;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut weights = vec![
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (tag, w) in [("cycle1", self.cycle1), ("cycle2", self.cycle2)] {
            weights.push((tag, w.bound));
            weights.push((tag, w.recon));
            weights.push((tag, w.gan));
            weights.push((tag, w.vae));
        }
        if let Some(b) = self.beta {
            weights.push(("beta", b));
        }
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} weights must be finite and non-negative, got {w}"));
            }
        }
        if self.beta.is_some() && (self.cycle1.bound <= 0.0 || self.cycle2.bound <= 0.0) {
            return bad("beta needs a positive bound weight in both cycles".into());
        }
        if let Some(s) = self.mmd_sigma {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("mmd_sigma must be positive, got {s}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.checkpoint_every == 0 || self.sample_every == 0 {
            return bad("checkpoint_every and sample_every must be positive".into());
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.mmd_sigma.unwrap_or(2.0 / self.arch.code_dim as f64)
    }

    /// Weights with `beta` applied.
    pub fn weights(&self) -> [LossWeights; 2] {
        let mut w = [self.cycle1, self.cycle2];
        if let Some(b) = self.beta {
            for c in &mut w {
                c.vae = b * c.bound;
            }
        }
        w
    }
}

/// Nodes produced by one translation cycle. Field names follow the
/// X -> Y -> X cycle; the Y -> X -> Y cycle fills them with roles swapped.
#[derive(Debug, Clone, Copy)]
pub struct CycleOutputs {
    pub input: Var,
    /// `c1 = E_c(x)`.
    pub code: Var,
    /// `q(v_x1 | x)`.
    pub posterior: GaussianVars,
    /// `v_y1 ~ N(0, I)`, fed to the output generator.
    pub v_prior: Var,
    /// `y_g = G_y(c1, v_y1)`.
    pub translated: Var,
    /// `c1_hat = E_c(y_g)`.
    pub code_hat: Var,
    /// `q(v_y1_hat | y_g)`.
    pub posterior_hat: GaussianVars,
    /// Reparametrized `v_x1`.
    pub v_sample: Var,
    /// `x_hat = G_x(c1_hat, v_x1)`.
    pub recon: Var,
}

/// Softplus of a clamped logit map, averaged.
fn mean_softplus(g: &mut Graph, logits: Var, sign: f64) -> Var {
    let z = g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let z = g.scale(z, sign);
    let s = g.softplus(z);
    g.mean(s)
}

/// `-mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake)))`.
pub fn gan_loss_discriminator(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    if g.shape(real) != g.shape(fake) {
        return Err(TensorError::ShapeMismatch {
            op: "gan_loss_discriminator",
            shapes: vec![g.shape(real).to_vec(), g.shape(fake).to_vec()],
        }
        .into());
    }
    let r = mean_softplus(g, real, -1.0);
    let f = mean_softplus(g, fake, 1.0);
    Ok(g.add(r, f)?)
}

/// Non-saturating generator loss `-mean(log sigmoid(fake))`.
pub fn gan_loss_generator(g: &mut Graph, fake: Var) -> Var {
    mean_softplus(g, fake, -1.0)
}

/// `l1 * MSE(x_hat, x) + l2 * MSE(mean of q(v_hat), v) + l3 * MSE(c_hat, c)`.
pub fn cycle_reconstruction_loss(g: &mut Graph, out: &CycleOutputs, cfg: &TrainConfig) -> Result<Var> {
    let image = g.mse(out.recon, out.input)?;
    let v = g.mse(out.posterior_hat.mu, out.v_prior)?;
    let c = g.mse(out.code_hat, out.code)?;
    let terms = [(image, cfg.lambda1), (v, cfg.lambda2), (c, cfg.lambda3)];
    Ok(weighted_sum(g, &terms)?)
}

/// MMD between encoded samples and prior samples plus the L1 likelihood term.
pub fn vae_loss(g: &mut Graph, v_samples: Var, prior_samples: Var, x: Var, x_hat: Var, sigma: f64) -> Result<Var> {
    let n = g.shape(v_samples)[0];
    if n < 2 {
        return Err(StatsError::TooFewSamples {
            what: "vae_loss",
            needed: 2,
            got: n,
        });
    }
    let m = stats::mmd_var(g, v_samples, prior_samples, sigma)?;
    let l1 = g.mean_abs_diff(x, x_hat)?;
    Ok(g.add(m, l1)?)
}

/// Batch mean of `KL[q(v_hat | x_n) || N(0, I)]`.
pub fn info_bound_loss(g: &mut Graph, posteriors: GaussianVars) -> Result<Var> {
    let n = g.shape(posteriors.mu)[0];
    if n == 0 {
        return Err(StatsError::TooFewSamples {
            what: "info_bound_loss",
            needed: 1,
            got: 0,
        });
    }
    let total = stats::kl_to_standard_normal_var(g, posteriors)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Generator-side loss terms of one cycle.
#[derive(Debug, Clone, Copy)]
pub struct CycleTerms {
    pub bound: Var,
    pub recon: Var,
    pub gan: Var,
    pub vae: Var,
}

impl CycleTerms {
    /// Computes every generator-side term from a cycle and the discriminator
    /// logits of its translated image. `prior` is a fresh `N(0, I)` batch for the MMD.
    pub fn compute(
        g: &mut Graph,
        out: &CycleOutputs,
        fake_logits: Var,
        prior: Var,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Ok(Self {
            bound: info_bound_loss(g, out.posterior_hat)?,
            recon: cycle_reconstruction_loss(g, out, cfg)?,
            gan: gan_loss_generator(g, fake_logits),
            vae: vae_loss(g, out.v_sample, prior, out.input, out.recon, cfg.sigma())?,
        })
    }
}

fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> std::result::Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("at least one term"))
}

/// Weighted generator/encoder objective over both cycles.
pub fn generator_objective(g: &mut Graph, cycles: &[CycleTerms; 2], cfg: &TrainConfig) -> Result<Var> {
    let w = cfg.weights();
    let mut terms = Vec::with_capacity(8);
    for (t, w) in cycles.iter().zip(w) {
        terms.extend([(t.bound, w.bound), (t.recon, w.recon), (t.gan, w.gan), (t.vae, w.vae)]);
    }
    Ok(weighted_sum(g, &terms)?)
}

/// Sum of the discriminator-side adversarial losses of both cycles.
pub fn discriminator_objective(g: &mut Graph, gan_d: [Var; 2]) -> Result<Var> {
    Ok(g.add(gan_d[0], gan_d[1])?)
}

/// `(discriminator objective, generator/encoder objective)`.
pub fn total_loss(g: &mut Graph, cycles: &[CycleTerms; 2], gan_d: [Var; 2], cfg: &TrainConfig) -> Result<(Var, Var)> {
    Ok((discriminator_objective(g, gan_d)?, generator_objective(g, cycles, cfg)?))
}

/// Plain-number version of [`generator_objective`] for bookkeeping checks.
/// Each entry is `[bound, recon, gan, vae]`.
pub fn combine_terms(values: &[[f64; 4]; 2], cfg: &TrainConfig) -> f64 {
    let w = cfg.weights();
    let mut total = 0.0;
    for (t, w) in values.iter().zip(w) {
        total += t[0] * w.bound + t[1] * w.recon + t[2] * w.gan + t[3] * w.vae;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn zero_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let d = gan_loss_discriminator(&mut g, z, z).unwrap();
        close(g.value(d).item(), 2.0 * 2f64.ln(), 1e-12);
        let gl = gan_loss_generator(&mut g, z);
        close(g.value(gl).item(), 2f64.ln(), 1e-12);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let mut g = Graph::new();
        let real = g.constant(Tensor::full(&[1, 1, 2, 2], 1e6));
        let fake = g.constant(Tensor::full(&[1, 1, 2, 2], -1e6));
        let d = gan_loss_discriminator(&mut g, real, fake).unwrap();
        assert!(g.value(d).item() < 1e-12);
        let gl = gan_loss_generator(&mut g, real);
        assert!(g.value(gl).item() < 1e-12);
    }

    #[test]
    fn fake_logit_gradient_is_nonnegative() {
        let mut g = Graph::new();
        let real = g.constant(Tensor::new(vec![4], vec![0.3, -2.0, 5.0, 0.0]).unwrap());
        let fake = g.param(Tensor::new(vec![4], vec![-7.0, -0.5, 0.0, 12.0]).unwrap());
        let d = gan_loss_discriminator(&mut g, real, fake).unwrap();
        let grads = g.backward(d).unwrap();
        assert!(grads.get(fake).unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(gan_loss_discriminator(&mut g, a, b).is_err());
    }

    fn cycle(g: &mut Graph, recon_offset: f64, v_offset: f64) -> CycleOutputs {
        let x = Tensor::new(vec![2, 1, 2, 2], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let mut xr = x.clone();
        xr.data_mut().iter_mut().for_each(|v| *v += recon_offset);
        let v = Tensor::new(vec![2, 2], vec![0.5, -1.0, 0.2, 0.7]).unwrap();
        let mut vh = v.clone();
        vh.data_mut().iter_mut().for_each(|e| *e += v_offset);
        let c = Tensor::full(&[2, 1, 1, 1], 0.4);
        let input = g.constant(x);
        let recon = g.constant(xr);
        let v_prior = g.constant(v);
        let mu_hat = g.constant(vh);
        let lv = g.constant(Tensor::zeros(&[2, 2]));
        let code = g.constant(c.clone());
        let code_hat = g.constant(c);
        CycleOutputs {
            input,
            code,
            posterior: GaussianVars { mu: v_prior, log_var: lv },
            v_prior,
            translated: input,
            code_hat,
            posterior_hat: GaussianVars { mu: mu_hat, log_var: lv },
            v_sample: v_prior,
            recon,
        }
    }

    #[test]
    fn reconstruction_examples() {
        let cfg = TrainConfig::default();
        let mut g = Graph::new();
        let perfect = cycle(&mut g, 0.0, 0.0);
        let l = cycle_reconstruction_loss(&mut g, &perfect, &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let off = cycle(&mut g, 0.1, 0.0);
        let l = cycle_reconstruction_loss(&mut g, &off, &cfg).unwrap();
        close(g.value(l).item(), 0.1, 1e-12);
    }

    #[test]
    fn reconstruction_is_linear_in_lambda2() {
        let mut cfg = TrainConfig::default();
        let mut g = Graph::new();
        let out = cycle(&mut g, 0.1, 0.3);
        let base = cycle_reconstruction_loss(&mut g, &out, &cfg).unwrap();
        let base = g.value(base).item();
        let v_term = 0.09;
        cfg.lambda2 = 2.0;
        let doubled = cycle_reconstruction_loss(&mut g, &out, &cfg).unwrap();
        close(g.value(doubled).item() - base, v_term, 1e-12);
    }

    #[test]
    fn vae_examples() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.5, 1.0, 0.0]).unwrap());
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 0.1));
        let l = vae_loss(&mut g, s, s, x, x, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let xh = g.constant(Tensor::full(&[2, 1, 2, 2], 0.3));
        let l = vae_loss(&mut g, s, s, x, xh, 0.25).unwrap();
        close(g.value(l).item(), 0.2, 1e-12);
        let one = g.constant(Tensor::zeros(&[1, 2]));
        assert!(vae_loss(&mut g, one, one, x, x, 0.25).is_err());
    }

    #[test]
    fn vae_gradient_moves_samples_toward_prior() {
        let prior = Tensor::new(vec![4, 1], vec![-0.3, 0.1, 0.2, -0.1]).unwrap();
        let start = Tensor::new(vec![4, 1], vec![2.0, 2.4, 1.8, 2.2]).unwrap();
        let sigma = 1.0;
        let loss_at = |t: &Tensor| {
            let mut g = Graph::new();
            let s = g.param(t.clone());
            let p = g.constant(prior.clone());
            let x = g.constant(Tensor::zeros(&[1]));
            let l = vae_loss(&mut g, s, p, x, x, sigma).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.get(s).unwrap().clone())
        };
        let (before, grad) = loss_at(&start);
        let mut moved = start.clone();
        for (m, gr) in moved.data_mut().iter_mut().zip(grad.data()) {
            *m -= 0.5 * gr;
        }
        let (after, _) = loss_at(&moved);
        assert!(after < before, "{after} !< {before}");
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / 4.0;
        assert!(mean(&moved) < mean(&start));
    }

    #[test]
    fn bound_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = info_bound_loss(&mut g, GaussianVars { mu: z, log_var: z }).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // KL = 0.5 * mu^2 for unit variance: mu^2 = 1.0 and 0.6 give 0.5 and 0.3.
        let mu = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.6f64.sqrt()]).unwrap());
        let lv = g.constant(Tensor::zeros(&[2, 1]));
        let l = info_bound_loss(&mut g, GaussianVars { mu, log_var: lv }).unwrap();
        close(g.value(l).item(), 0.4, 1e-12);
    }

    #[test]
    fn bound_step_shrinks_means() {
        let mu0 = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.0, -1.5]).unwrap();
        let mut g = Graph::new();
        let mu = g.param(mu0.clone());
        let lv = g.constant(Tensor::full(&[2, 3], -0.4));
        let l = info_bound_loss(&mut g, GaussianVars { mu, log_var: lv }).unwrap();
        let grads = g.backward(l).unwrap();
        let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let stepped: Vec<f64> = mu0
            .data()
            .iter()
            .zip(grads.get(mu).unwrap().data())
            .map(|(m, gr)| m - 0.1 * gr)
            .collect();
        assert!(norm(&stepped) < norm(mu0.data()));
    }

    #[test]
    fn bound_matches_per_row_kl() {
        let mu = Tensor::new(vec![3, 2], vec![0.3, -1.0, 2.0, 0.1, 0.0, 0.7]).unwrap();
        let lv = Tensor::new(vec![3, 2], vec![-0.5, 0.2, 1.0, -2.0, 0.0, 0.3]).unwrap();
        let mut g = Graph::new();
        let m = g.constant(mu.clone());
        let v = g.constant(lv.clone());
        let gv = GaussianVars { mu: m, log_var: v };
        let l = info_bound_loss(&mut g, gv).unwrap();
        let rows: f64 = (0..3).map(|i| stats::kl_to_standard_normal(&gv.row(&g, i))).sum();
        close(g.value(l).item(), rows / 3.0, 1e-12);
    }

    fn terms(g: &mut Graph, vals: [f64; 4]) -> CycleTerms {
        let mut c = |v: f64| g.constant(Tensor::scalar(v));
        CycleTerms {
            bound: c(vals[0]),
            recon: c(vals[1]),
            gan: c(vals[2]),
            vae: c(vals[3]),
        }
    }

    #[test]
    fn total_loss_examples() {
        let mut cfg = TrainConfig::default();
        let vals = [0.4, 0.1, 0.69, 0.2];
        let mut g = Graph::new();
        let t = [terms(&mut g, vals), terms(&mut g, vals)];
        let d = [g.constant(Tensor::scalar(1.2)), g.constant(Tensor::scalar(0.3))];
        let (dl, gl) = total_loss(&mut g, &t, d, &cfg).unwrap();
        close(g.value(gl).item(), 2.78, 1e-12);
        close(g.value(dl).item(), 1.5, 1e-12);
        close(combine_terms(&[vals, vals], &cfg), 2.78, 1e-12);

        cfg.cycle1.recon = 2.0;
        cfg.cycle2.recon = 2.0;
        let gl2 = generator_objective(&mut g, &t, &cfg).unwrap();
        close(g.value(gl2).item() - 2.78, 0.2, 1e-12);

        cfg.cycle1 = LossWeights { bound: 0.0, recon: 0.0, gan: 0.0, vae: 0.0 };
        cfg.cycle2 = cfg.cycle1;
        let gl3 = generator_objective(&mut g, &t, &cfg).unwrap();
        assert_eq!(g.value(gl3).item(), 0.0);
    }

    #[test]
    fn beta_sets_vae_weight() {
        let cfg = TrainConfig {
            beta: Some(3.0),
            cycle1: LossWeights { bound: 0.5, ..Default::default() },
            ..Default::default()
        };
        let w = cfg.weights();
        assert_eq!(w[0].vae, 1.5);
        assert_eq!(w[1].vae, 3.0);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lambda2: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
        let err = serde_json::from_str::<TrainConfig>(r#"{"lamda1": 3}"#).unwrap_err();
        assert!(err.to_string().contains("lamda1"));
        let c: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.lambda1, 10.0);
        assert_eq!(c.sigma(), 0.25);
    }
}
