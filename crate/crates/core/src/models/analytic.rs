//! Small analytic test models with closed-form scores, Hessians and (where
//! they exist) maximum-likelihood estimates. These serve as oracles for the
//! optimizer and inference test suites.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::likelihood::LikelihoodProblem;
use crate::optim::AnalyticProblem;

/// `-L = (theta - target)' A (theta - target) / 2`, split evenly over units.
/// With `use_fixed_metric`, the scoring matrix is overridden by `A` itself,
/// which makes the RVS step an exact Newton step.
pub struct QuadraticProblem {
    pub a: DMatrix<f64>,
    pub target: DVector<f64>,
    pub n: usize,
    pub use_fixed_metric: bool,
}

impl QuadraticProblem {
    pub fn new(a: DMatrix<f64>, target: DVector<f64>, n: usize) -> Self {
        assert_eq!(a.nrows(), target.len());
        QuadraticProblem { a, target, n, use_fixed_metric: false }
    }

    pub fn with_fixed_metric(mut self) -> Self {
        self.use_fixed_metric = true;
        self
    }
}

impl LikelihoodProblem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn n_units(&self) -> usize {
        self.n
    }
    fn unit_loglik(&self, _: usize, theta: &DVector<f64>) -> Result<f64> {
        let d = theta - &self.target;
        Ok(-0.5 * d.dot(&(&self.a * &d)) / self.n as f64)
    }
}

impl AnalyticProblem for QuadraticProblem {
    fn unit_score(&self, _: usize, theta: &DVector<f64>) -> DVector<f64> {
        (&self.a * (theta - &self.target)) / self.n as f64
    }
    fn hessian(&self, _: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn fixed_metric(&self) -> Option<DMatrix<f64>> {
        self.use_fixed_metric.then(|| self.a.clone())
    }
}

/// Gaussian location model with known unit variance: `y_i ~ N(mu, 1)`.
pub struct GaussianMeanProblem {
    pub y: Vec<f64>,
}

impl GaussianMeanProblem {
    pub fn new(y: Vec<f64>) -> Self {
        GaussianMeanProblem { y }
    }

    /// Simulates `n` draws from `N(mu, sigma2)` (the model still assumes unit
    /// variance, which makes this a convenient mis-specification testbed).
    pub fn simulate(n: usize, mu: f64, sigma2: f64, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let y = (0..n)
            .map(|_| mu + sigma2.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        GaussianMeanProblem { y }
    }

    /// Sample mean: the closed-form MLE.
    pub fn analytic_mle(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Fisher information `n / sigma2` with the model's sigma2 = 1.
    pub fn information(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.y.len() as f64)
    }
}

impl LikelihoodProblem for GaussianMeanProblem {
    fn dim(&self) -> usize {
        1
    }
    fn n_units(&self) -> usize {
        self.y.len()
    }
    fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
        let d = self.y[unit] - theta[0];
        Ok(-0.5 * ((2.0 * std::f64::consts::PI).ln() + d * d))
    }
}

impl AnalyticProblem for GaussianMeanProblem {
    fn unit_score(&self, unit: usize, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[theta[0] - self.y[unit]])
    }
    fn hessian(&self, _: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.y.len() as f64)
    }
}

/// Gaussian model with both parameters free: `theta = (mu, sigma2)`,
/// feasible region `sigma2 > 0`.
pub struct GaussianMeanVarProblem {
    pub y: Vec<f64>,
}

impl GaussianMeanVarProblem {
    pub fn new(y: Vec<f64>) -> Self {
        GaussianMeanVarProblem { y }
    }

    pub fn simulate(n: usize, mu: f64, sigma2: f64, seed: u64) -> Self {
        GaussianMeanVarProblem { y: GaussianMeanProblem::simulate(n, mu, sigma2, seed).y }
    }

    /// `(sample mean, maximum-likelihood variance)`.
    pub fn analytic_mle(&self) -> DVector<f64> {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let s2 = self.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        DVector::from_column_slice(&[mean, s2])
    }

    /// Fisher information `diag(n/sigma2, n/(2 sigma2^2))` at `theta`.
    pub fn information(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.y.len() as f64;
        let s2 = theta[1];
        DMatrix::from_row_slice(2, 2, &[n / s2, 0.0, 0.0, n / (2.0 * s2 * s2)])
    }
}

impl LikelihoodProblem for GaussianMeanVarProblem {
    fn dim(&self) -> usize {
        2
    }
    fn n_units(&self) -> usize {
        self.y.len()
    }
    fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
        let (mu, s2) = (theta[0], theta[1]);
        if !(s2 > 0.0) {
            return Err(Error::Evaluation { unit, reason: format!("sigma2 = {s2} infeasible") });
        }
        let d = self.y[unit] - mu;
        Ok(-0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + d * d / s2))
    }
}

impl AnalyticProblem for GaussianMeanVarProblem {
    fn unit_score(&self, unit: usize, theta: &DVector<f64>) -> DVector<f64> {
        let (mu, s2) = (theta[0], theta[1]);
        let d = self.y[unit] - mu;
        DVector::from_column_slice(&[-d / s2, 0.5 / s2 - d * d / (2.0 * s2 * s2)])
    }
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let (mu, s2) = (theta[0], theta[1]);
        let n = self.y.len() as f64;
        let sum_d: f64 = self.y.iter().map(|v| v - mu).sum();
        let sum_d2: f64 = self.y.iter().map(|v| (v - mu) * (v - mu)).sum();
        let h_mm = n / s2;
        let h_ms = sum_d / (s2 * s2);
        let h_ss = sum_d2 / (s2 * s2 * s2) - n / (2.0 * s2 * s2);
        DMatrix::from_row_slice(2, 2, &[h_mm, h_ms, h_ms, h_ss])
    }
}

/// One-parameter logistic regression through the origin:
/// `P(y_i = 1) = logistic(beta x_i)`.
pub struct LogisticProblem {
    pub x: Vec<f64>,
    pub y: Vec<bool>,
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl LogisticProblem {
    pub fn new(x: Vec<f64>, y: Vec<bool>) -> Self {
        assert_eq!(x.len(), y.len());
        LogisticProblem { x, y }
    }

    pub fn simulate(n: usize, beta: f64, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 1.5;
            let p = logistic(beta * xi);
            x.push(xi);
            y.push(rand::Rng::random::<f64>(&mut rng) < p);
        }
        LogisticProblem { x, y }
    }

    /// Golden-section search on the analytic log-likelihood; serves as the
    /// "analytic MLE" oracle (there is no closed form).
    pub fn mle_by_golden_section(&self, lo: f64, hi: f64) -> f64 {
        let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let f = |b: f64| {
            let theta = DVector::from_column_slice(&[b]);
            crate::likelihood::total_loglik(self, &theta).unwrap()
        };
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        while (b - a).abs() > 1e-9 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = f(d);
            }
        }
        0.5 * (a + b)
    }

    /// Fisher information `sum x_i^2 p_i (1 - p_i)` at `beta`.
    pub fn information(&self, beta: f64) -> DMatrix<f64> {
        let info: f64 = self
            .x
            .iter()
            .map(|&xi| {
                let p = logistic(beta * xi);
                xi * xi * p * (1.0 - p)
            })
            .sum();
        DMatrix::from_element(1, 1, info)
    }
}

impl LikelihoodProblem for LogisticProblem {
    fn dim(&self) -> usize {
        1
    }
    fn n_units(&self) -> usize {
        self.x.len()
    }
    fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
        let t = theta[0] * self.x[unit];
        // log p = -log(1 + e^{-t}), log(1-p) = -t - log(1 + e^{-t})
        let log1pe = if t > 30.0 { (-t).exp() } else { (1.0 + (-t).exp()).ln() };
        Ok(if self.y[unit] { -log1pe } else { -t - log1pe })
    }
}

impl AnalyticProblem for LogisticProblem {
    fn unit_score(&self, unit: usize, theta: &DVector<f64>) -> DVector<f64> {
        let p = logistic(theta[0] * self.x[unit]);
        let yi = if self.y[unit] { 1.0 } else { 0.0 };
        DVector::from_column_slice(&[-self.x[unit] * (yi - p)])
    }
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.information(theta[0])
    }
}

/// The three canned oracle instances used across the test suites.
pub fn analytic_test_models() -> (GaussianMeanProblem, GaussianMeanVarProblem, LogisticProblem) {
    let mean = GaussianMeanProblem::new(vec![1.0, 2.0, 3.0]);
    let meanvar = GaussianMeanVarProblem::new(vec![0.4, 1.2, -0.3, 2.0, 0.7, 1.5]);
    let logit = LogisticProblem::new(
        vec![-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0],
        vec![false, false, true, false, true, false, true, true],
    );
    (mean, meanvar, logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::total_loglik;

    #[test]
    fn gaussian_mean_mle_is_sample_mean() {
        let (mean, _, _) = analytic_test_models();
        assert!((mean.analytic_mle() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mean_variance_information_shape() {
        let (_, mv, _) = analytic_test_models();
        let mle = mv.analytic_mle();
        let info = mv.information(&mle);
        let n = mv.y.len() as f64;
        assert!((info[(0, 0)] - n / mle[1]).abs() < 1e-12);
        assert!((info[(1, 1)] - n / (2.0 * mle[1] * mle[1])).abs() < 1e-12);
        // Analytic Hessian equals the information at the MLE for this model.
        let h = mv.hessian(&mle);
        assert!((h[(0, 0)] - info[(0, 0)]).abs() < 1e-9 * info[(0, 0)]);
        assert!((h[(1, 1)] - info[(1, 1)]).abs() < 1e-9 * info[(1, 1)]);
        assert!(h[(0, 1)].abs() < 1e-9 * info[(0, 0)]);
    }

    #[test]
    fn logistic_golden_section_is_stationary() {
        let (_, _, logit) = analytic_test_models();
        let b = logit.mle_by_golden_section(-5.0, 5.0);
        let theta = DVector::from_column_slice(&[b]);
        let u: f64 = (0..logit.n_units()).map(|i| logit.unit_score(i, &theta)[0]).sum();
        assert!(u.abs() < 1e-6, "score at golden-section MLE: {u}");
    }

    #[test]
    fn analytic_scores_match_finite_differences() {
        let (_, mv, logit) = analytic_test_models();
        let step = crate::likelihood::StepRule::default();

        let theta = DVector::from_column_slice(&[0.6, 1.4]);
        let fd = crate::likelihood::score_bundle(&mv, &theta, &step).unwrap();
        for i in 0..mv.n_units() {
            let exact = mv.unit_score(i, &theta);
            for j in 0..2 {
                assert!((fd.scores[(i, j)] - exact[j]).abs() < 1e-7);
            }
        }

        let theta = DVector::from_column_slice(&[0.8]);
        let fd = crate::likelihood::score_bundle(&logit, &theta, &step).unwrap();
        for i in 0..logit.n_units() {
            let exact = logit.unit_score(i, &theta);
            assert!((fd.scores[(i, 0)] - exact[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_total_is_quadratic_form() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]);
        let p = QuadraticProblem::new(a.clone(), DVector::from_column_slice(&[1.0, -1.0]), 3);
        let theta = DVector::from_column_slice(&[2.0, 1.0]);
        let l = total_loglik(&p, &theta).unwrap();
        let d = &theta - &p.target;
        assert!((l + 0.5 * d.dot(&(&a * &d))).abs() < 1e-12);
    }
}
