//! Diagonal Gaussians, KL divergences, the Gaussian-kernel MMD and the
//! Fréchet distance between Gaussian feature statistics.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("{what}: need at least {needed} samples, got {got}")]
    TooFewSamples {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("matrix square root failed: eigenvalue {0} is negative")]
    MatrixSqrt(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// `N(mu, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(StatsError::LengthMismatch(mu.len(), log_var.len()));
        }
        Ok(Self { mu, log_var })
    }

    /// The fixed spherical prior `N(0, I)`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Batch of diagonal Gaussians living on a tape: `mu` and `log_var` are both
/// `[N, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Reads row `i` back as a plain Gaussian.
    pub fn row(&self, g: &Graph, i: usize) -> DiagonalGaussian {
        let dim = g.shape(self.mu)[1];
        DiagonalGaussian {
            mu: g.value(self.mu).data()[i * dim..(i + 1) * dim].to_vec(),
            log_var: g.value(self.log_var).data()[i * dim..(i + 1) * dim].to_vec(),
        }
    }
}

/// `mu + exp(0.5 * log_var) * eps`.
pub fn reparam_sample(gauss: &DiagonalGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != gauss.dim() {
        return Err(StatsError::LengthMismatch(gauss.dim(), eps.len()));
    }
    Ok(gauss
        .mu
        .iter()
        .zip(&gauss.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Differentiable reparametrized sample; `eps` has the shape of `mu`.
pub fn reparam_sample_var(g: &mut Graph, gauss: GaussianVars, eps: Var) -> Result<Var> {
    let half = g.scale(gauss.log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    Ok(g.add(gauss.mu, noise)?)
}

/// `KL[N(mu, diag(sigma^2)) || N(0, I)]` in closed form.
pub fn kl_to_standard_normal(gauss: &DiagonalGaussian) -> f64 {
    0.5 * gauss
        .mu
        .iter()
        .zip(&gauss.log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Sum over every row of the closed-form KL to `N(0, I)`. Divide by the batch
/// size for the batch mean.
pub fn kl_to_standard_normal_var(g: &mut Graph, gauss: GaussianVars) -> Result<Var> {
    let mu2 = g.square(gauss.mu);
    let var = g.exp(gauss.log_var);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, gauss.log_var)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5))
}

/// Monte-Carlo estimate of `KL[q || N(0, I)]` from `n` samples of `q`,
/// returned with its standard error (sample std / sqrt(n)).
pub fn kl_mc_estimate(gauss: &DiagonalGaussian, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 100 {
        return Err(StatsError::TooFewSamples {
            what: "kl_mc_estimate",
            needed: 100,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for (m, lv) in gauss.mu.iter().zip(&gauss.log_var) {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = m + (0.5 * lv).exp() * e;
            // log q(z) - log r(z); the 2*pi terms cancel.
            log_ratio += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq - nf * mean * mean) / (nf - 1.0);
    Ok((mean, var.max(0.0).sqrt() / nf.sqrt()))
}

/// `exp(-||z - z'||^2 / (2 sigma^2))`.
pub fn gaussian_kernel(z: &[f64], z2: &[f64], sigma: f64) -> Result<f64> {
    if z.len() != z2.len() {
        return Err(StatsError::LengthMismatch(z.len(), z2.len()));
    }
    if sigma <= 0.0 || sigma.is_nan() {
        return Err(StatsError::InvalidBandwidth(sigma));
    }
    Ok(kernel(z, z2, 1.0 / (2.0 * sigma * sigma)))
}

fn kernel(a: &[f64], b: &[f64], inv_two_sigma2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 * inv_two_sigma2).exp()
}

fn mean_kernel(a: &[f64], b: &[f64], d: usize, inv: f64) -> f64 {
    let mut total = 0.0;
    for ra in a.chunks(d) {
        for rb in b.chunks(d) {
            total += kernel(ra, rb, inv);
        }
    }
    total / ((a.len() / d) * (b.len() / d)) as f64
}

fn check_samples(p: &Tensor, q: &Tensor, sigma: f64) -> Result<usize> {
    let (dp, dq) = match (p.shape(), q.shape()) {
        (&[_, dp], &[_, dq]) => (dp, dq),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "mmd",
                shapes: vec![p.shape().to_vec(), q.shape().to_vec()],
            }
            .into())
        }
    };
    if dp != dq {
        return Err(StatsError::LengthMismatch(dp, dq));
    }
    if sigma <= 0.0 || sigma.is_nan() {
        return Err(StatsError::InvalidBandwidth(sigma));
    }
    Ok(dp)
}

/// Total order on sample sets, used to evaluate `mmd(p, q)` and `mmd(q, p)`
/// with the exact same floating-point operations.
fn canonical_swap(p: &Tensor, q: &Tensor) -> bool {
    let ord = p.shape().cmp(q.shape()).then_with(|| {
        p.data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    ord == Ordering::Greater
}

/// Biased (V-statistic) squared MMD between the rows of `p: [n, d]` and
/// `q: [m, d]` under the Gaussian kernel.
pub fn mmd(p: &Tensor, q: &Tensor, sigma: f64) -> Result<f64> {
    let d = check_samples(p, q, sigma)?;
    let (p, q) = if canonical_swap(p, q) { (q, p) } else { (p, q) };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let kpp = mean_kernel(p.data(), p.data(), d, inv);
    let kqq = mean_kernel(q.data(), q.data(), d, inv);
    let kpq = mean_kernel(p.data(), q.data(), d, inv);
    Ok((kpp + kqq) - 2.0 * kpq)
}

/// Gradient of the mean kernel value between `a` and `b` with respect to the
/// rows of `a`, scaled by `coef`.
fn mean_kernel_grad(a: &[f64], b: &[f64], d: usize, inv: f64, coef: f64, out: &mut [f64]) {
    let norm = coef / ((a.len() / d) * (b.len() / d)) as f64;
    for (ra, ga) in a.chunks(d).zip(out.chunks_mut(d)) {
        for rb in b.chunks(d) {
            let k = kernel(ra, rb, inv);
            // d/da exp(-|a-b|^2 * inv) = -2 inv (a - b) k
            let s = -2.0 * inv * k * norm;
            for ((g, x), y) in ga.iter_mut().zip(ra).zip(rb) {
                *g += s * (x - y);
            }
        }
    }
}

/// [`mmd`] recorded on the tape; differentiable with respect to both sample
/// sets.
pub fn mmd_var(g: &mut Graph, p: Var, q: Var, sigma: f64) -> Result<Var> {
    let value = mmd(g.value(p), g.value(q), sigma)?;
    let d = g.shape(p)[1];
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(g.custom(
        &[p, q],
        Tensor::scalar(value),
        Box::new(move |inputs, _out, grad| {
            let (p, q) = (inputs[0].data(), inputs[1].data());
            let mut gp = vec![0.0; p.len()];
            let mut gq = vec![0.0; q.len()];
            // Self terms depend on each row twice, hence the factor 2.
            mean_kernel_grad(p, p, d, inv, 2.0, &mut gp);
            mean_kernel_grad(p, q, d, inv, -2.0, &mut gp);
            mean_kernel_grad(q, q, d, inv, 2.0, &mut gq);
            mean_kernel_grad(q, p, d, inv, -2.0, &mut gq);
            for v in gp.iter_mut().chain(gq.iter_mut()) {
                *v *= grad[0];
            }
            vec![Some(gp), Some(gq)]
        }),
    ))
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance of the rows of `samples: [n, d]`.
pub fn fit_gaussian_stats(samples: &Tensor) -> Result<GaussianStats> {
    let (n, d) = match *samples.shape() {
        [n, d] => (n, d),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "fit_gaussian_stats",
                shapes: vec![samples.shape().to_vec()],
            }
            .into())
        }
    };
    if n < d + 1 || n < 2 {
        return Err(StatsError::TooFewSamples {
            what: "fit_gaussian_stats",
            needed: (d + 1).max(2),
            got: n,
        });
    }
    let x = DMatrix::from_row_slice(n, d, samples.data());
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, covariance })
}

/// Eigenvalues of a symmetric PSD matrix, with round-off negatives (down to
/// -1e-9) clamped to zero.
fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for l in eig.eigenvalues.iter_mut() {
        if *l < -1e-9 {
            return Err(StatsError::MatrixSqrt(*l));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of `(S_a S_b)^{1/2}` is computed as the trace of the square root
/// of the symmetric PSD matrix `S_a^{1/2} S_b S_a^{1/2}`, which has the same
/// eigenvalues as `S_a S_b`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(StatsError::LengthMismatch(a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ea = psd_eigen(a.covariance.clone())?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.covariance * &sqrt_a;
    let cross: f64 = psd_eigen(inner)?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let d = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckOptions};

    fn t2(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    fn randn(shape: &[usize], seed: u64, shift: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                shift + z
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn reparam_examples() {
        let e = [0.3, -1.2];
        assert_eq!(reparam_sample(&DiagonalGaussian::standard(2), &e).unwrap(), e.to_vec());
        let g = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(reparam_sample(&g, &[0.0]).unwrap(), vec![1.0]);
        let g = DiagonalGaussian::new(vec![0.0], vec![4f64.ln()]).unwrap();
        assert!((reparam_sample(&g, &[1.0]).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!(matches!(
            reparam_sample(&g, &[1.0, 2.0]),
            Err(StatsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_to_standard_normal(&DiagonalGaussian::standard(4)), 0.0);
        let g = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_to_standard_normal(&g) - 0.5).abs() < 1e-15);
        let g = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let expected = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl_to_standard_normal(&g) - expected).abs() < 1e-15);
        assert!((expected - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn kl_mc_matches_closed_form() {
        for (mu, lv) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
            let g = DiagonalGaussian::new(vec![mu], vec![lv]).unwrap();
            let (est, se) = kl_mc_estimate(&g, 100_000, 11).unwrap();
            let exact = kl_to_standard_normal(&g);
            assert!((est - exact).abs() <= 3.0 * se.max(1e-12), "{est} vs {exact} (se {se})");
        }
        assert!(kl_mc_estimate(&DiagonalGaussian::standard(1), 99, 0).is_err());
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(gaussian_kernel(&[0.3, 2.0], &[0.3, 2.0], 0.7).unwrap(), 1.0);
        assert!((gaussian_kernel(&[0.0], &[1.0], 1.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_kernel(&[0.0, 0.0], &[3.0, 4.0], 5.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!(matches!(
            gaussian_kernel(&[0.0], &[1.0], 0.0),
            Err(StatsError::InvalidBandwidth(_))
        ));
    }

    #[test]
    fn mmd_examples() {
        let s = randn(&[20, 3], 1, 0.0);
        assert_eq!(mmd(&s, &s, 0.5).unwrap(), 0.0);
        let p = t2(&[&[0.0]]);
        let q = t2(&[&[1.0]]);
        let expected = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((mmd(&p, &q, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.7869).abs() < 1e-4);
        assert!(mmd(&p, &t2(&[&[1.0, 2.0]]), 1.0).is_err());
    }

    #[test]
    fn mmd_gradient_passes_check() {
        let p = randn(&[5, 3], 2, 0.0);
        let q = randn(&[4, 3], 3, 0.5);
        let r = grad_check(
            |g, v| mmd_var(g, v[0], v[1], 1.3),
            &[p, q],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn frechet_examples() {
        let stats = |m: f64, v: f64| GaussianStats {
            mean: DVector::from_vec(vec![m]),
            covariance: DMatrix::from_vec(1, 1, vec![v]),
        };
        let a = stats(0.0, 1.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        assert!((frechet_distance(&a, &stats(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((frechet_distance(&a, &stats(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_stats_examples() {
        let same = t2(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let s = fit_gaussian_stats(&same).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 2.0]);
        assert!(s.covariance.iter().all(|&v| v == 0.0));

        let s = fit_gaussian_stats(&t2(&[&[0.0], &[2.0]])).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.covariance[(0, 0)], 2.0);

        assert!(matches!(
            fit_gaussian_stats(&t2(&[&[0.0, 1.0], &[2.0, 3.0]])),
            Err(StatsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn fit_stats_recovers_standard_normal() {
        let s = fit_gaussian_stats(&randn(&[100_000, 2], 5, 0.0)).unwrap();
        for i in 0..2 {
            assert!(s.mean[i].abs() < 0.02);
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((s.covariance[(i, j)] - target).abs() < 0.02);
            }
        }
    }
}
