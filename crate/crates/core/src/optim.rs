//! Newton-like likelihood maximization: the robust-variance scoring (RVS)
//! iteration and a damped-Newton (Marquardt) reference, both driven by the
//! scaled score-test stopping criterion `C_k = U' G^{-1} U / m`.
//!
//! Both algorithms minimize the negative log-likelihood with steps
//! `theta - alpha * G^{-1} U`. For RVS, `G` is the scoring matrix built from
//! individual scores (a by-product of the centered-difference score, 2m
//! likelihood evaluations per iteration); for Marquardt it is `H + lambda I`
//! with adaptively tuned `lambda` (m(m+5)/2 evaluations per iteration).

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{
    self, hessian_with_score, score_bundle_with_loglik, total_loglik, CurvatureBundle,
    LikelihoodProblem, ScoreBundle, StepRule,
};
use crate::scoring::{build_g, ScoringMatrix};

/// Which iteration to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Rvs,
    Marquardt,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Rvs => "rvs",
            Algorithm::Marquardt => "marquardt",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rvs" => Ok(Algorithm::Rvs),
            "marquardt" => Ok(Algorithm::Marquardt),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// When the backtracking search runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSearchMode {
    /// Search every iteration, keeping the best improving step length.
    Always,
    /// Take the full step when it improves the likelihood; search otherwise.
    OnFailureOnly,
}

const LAMBDA_FACTOR: f64 = 10.0;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e10;
const LINE_SEARCH_HALVINGS: u32 = 20;

/// Optimizer settings. `max_iter = None` selects the per-algorithm default:
/// 30 for Marquardt and `ceil(30 (m+5)/4)` for RVS.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub stopping_value: f64,
    pub max_iter: Option<usize>,
    pub eta_initial: f64,
    pub lambda_initial: f64,
    pub line_search: LineSearchMode,
    pub step: StepRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            stopping_value: 1e-4,
            max_iter: None,
            eta_initial: 1.0,
            lambda_initial: 1e-3,
            line_search: LineSearchMode::OnFailureOnly,
            step: StepRule::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn max_iterations(&self, algorithm: Algorithm, dim: usize) -> usize {
        self.max_iter.unwrap_or(match algorithm {
            Algorithm::Marquardt => 30,
            Algorithm::Rvs => (30 * (dim + 5)).div_ceil(4),
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.stopping_value > 0.0) {
            return Err(Error::Config("stopping_value must be positive".into()));
        }
        if let Some(0) = self.max_iter {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.lambda_initial > 0.0) {
            return Err(Error::Config("lambda_initial must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eta_initial) {
            return Err(Error::Config("eta_initial must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One row of the iteration trace.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub iteration: usize,
    pub theta: DVector<f64>,
    pub loglik: f64,
    pub criterion: f64,
    /// Step length actually taken (1.0 when the full step was accepted).
    pub alpha: f64,
    /// Adaptive constant in force: `eta` for RVS, `lambda` for Marquardt.
    pub damping: f64,
    /// Ridge applied by the scoring-matrix safeguard (RVS only).
    pub ridge: f64,
    /// Total-likelihood evaluations consumed by this iteration.
    pub evaluations: u64,
}

/// Trial record carried by a failed step.
#[derive(Debug, Clone)]
pub struct FitFailure {
    pub message: String,
    /// `(alpha or lambda, trial log-likelihood)` pairs attempted.
    pub trials: Vec<(f64, f64)>,
}

/// Outcome of a fit: estimate, final scoring matrix, convergence status and
/// the full iteration trace.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub algorithm: Algorithm,
    pub theta_hat: DVector<f64>,
    /// Log-likelihood at `theta_hat` (maximization scale).
    pub loglik: f64,
    /// Final value of `C_k`.
    pub criterion: f64,
    /// Metric at `theta_hat`: the RVS scoring matrix, or `H + lambda I` for
    /// Marquardt (with `ridge()` recording `lambda`).
    pub g_final: ScoringMatrix,
    pub converged: bool,
    pub iterations: usize,
    /// Total-likelihood evaluation equivalents (one pass over all units).
    pub likelihood_evaluations: u64,
    /// Wall-clock seconds.
    pub wall_time: f64,
    pub trace: Vec<TraceRecord>,
    pub failure: Option<FitFailure>,
    pub dim: usize,
    pub n_units: usize,
}

/// Stopping criterion `C_k = U' G^{-1} U / m`: the estimated ratio of
/// approximation error to statistical error, and a score-test statistic for
/// `E[U(theta_k)] = 0`.
pub fn criterion_value(bundle: &ScoreBundle, gm: &ScoringMatrix) -> f64 {
    gm.quad_form_inv(&bundle.total_score) / bundle.dim() as f64
}

/// Source of scores and curvature for the drivers. The finite-difference
/// implementation is [`FdOracle`]; problems with closed-form derivatives can
/// implement [`AnalyticProblem`] and use [`AnalyticOracle`].
pub trait ScoreOracle {
    fn dim(&self) -> usize;
    fn n_units(&self) -> usize;
    fn loglik(&self, theta: &DVector<f64>) -> Result<f64>;
    fn bundle(&self, theta: &DVector<f64>) -> Result<ScoreBundle>;
    fn bundle_with_loglik(&self, theta: &DVector<f64>, loglik: f64) -> Result<ScoreBundle>;
    fn curvature(&self, theta: &DVector<f64>, known_loglik: Option<f64>) -> Result<CurvatureBundle>;
    /// Scoring matrix for a bundle; the default is the safeguarded build.
    fn scoring_matrix(&self, bundle: &ScoreBundle, eta: f64) -> Result<ScoringMatrix> {
        build_g(bundle, eta)
    }
    /// Total-likelihood evaluation equivalents consumed so far.
    fn evaluations(&self) -> u64;
}

/// Centered-difference oracle over a [`LikelihoodProblem`].
pub struct FdOracle<'a, P: LikelihoodProblem + ?Sized> {
    problem: &'a P,
    step: StepRule,
    unit_evals: AtomicU64,
}

impl<'a, P: LikelihoodProblem + ?Sized> FdOracle<'a, P> {
    pub fn new(problem: &'a P, step: StepRule) -> Self {
        FdOracle { problem, step, unit_evals: AtomicU64::new(0) }
    }

    fn counted(&self) -> CountingProblem<'_, P> {
        CountingProblem { inner: self.problem, unit_evals: &self.unit_evals }
    }
}

struct CountingProblem<'a, P: LikelihoodProblem + ?Sized> {
    inner: &'a P,
    unit_evals: &'a AtomicU64,
}

impl<'a, P: LikelihoodProblem + ?Sized> LikelihoodProblem for CountingProblem<'a, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn n_units(&self) -> usize {
        self.inner.n_units()
    }
    fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
        self.unit_evals.fetch_add(1, Ordering::Relaxed);
        self.inner.unit_loglik(unit, theta)
    }
}

impl<'a, P: LikelihoodProblem + ?Sized> ScoreOracle for FdOracle<'a, P> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }
    fn n_units(&self) -> usize {
        self.problem.n_units()
    }
    fn loglik(&self, theta: &DVector<f64>) -> Result<f64> {
        total_loglik(&self.counted(), theta)
    }
    fn bundle(&self, theta: &DVector<f64>) -> Result<ScoreBundle> {
        likelihood::score_bundle(&self.counted(), theta, &self.step)
    }
    fn bundle_with_loglik(&self, theta: &DVector<f64>, loglik: f64) -> Result<ScoreBundle> {
        score_bundle_with_loglik(&self.counted(), theta, &self.step, loglik)
    }
    fn curvature(&self, theta: &DVector<f64>, known_loglik: Option<f64>) -> Result<CurvatureBundle> {
        hessian_with_score(&self.counted(), theta, &self.step, known_loglik)
    }
    fn evaluations(&self) -> u64 {
        // Each pass over all units counts as one total-likelihood evaluation.
        self.unit_evals.load(Ordering::Relaxed) / self.problem.n_units() as u64
    }
}

/// Problems that also expose exact derivatives, used by tests and by the
/// exactness acceptance checks.
pub trait AnalyticProblem: LikelihoodProblem {
    /// `U_i = -dL_i/dtheta`.
    fn unit_score(&self, unit: usize, theta: &DVector<f64>) -> DVector<f64>;
    /// `H = -d2L/dtheta2`.
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64>;
    /// Optional fixed metric overriding the scoring-matrix build.
    fn fixed_metric(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// Exact-derivative oracle over an [`AnalyticProblem`].
pub struct AnalyticOracle<'a, P: AnalyticProblem + ?Sized> {
    problem: &'a P,
    evals: AtomicU64,
}

impl<'a, P: AnalyticProblem + ?Sized> AnalyticOracle<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        AnalyticOracle { problem, evals: AtomicU64::new(0) }
    }
}

impl<'a, P: AnalyticProblem + ?Sized> ScoreOracle for AnalyticOracle<'a, P> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }
    fn n_units(&self) -> usize {
        self.problem.n_units()
    }
    fn loglik(&self, theta: &DVector<f64>) -> Result<f64> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        total_loglik(self.problem, theta)
    }
    fn bundle(&self, theta: &DVector<f64>) -> Result<ScoreBundle> {
        let loglik = self.loglik(theta)?;
        self.bundle_with_loglik(theta, loglik)
    }
    fn bundle_with_loglik(&self, theta: &DVector<f64>, loglik: f64) -> Result<ScoreBundle> {
        let n = self.problem.n_units();
        let m = self.problem.dim();
        let mut scores = DMatrix::zeros(n, m);
        for i in 0..n {
            let u = self.problem.unit_score(i, theta);
            for j in 0..m {
                scores[(i, j)] = u[j];
            }
        }
        Ok(ScoreBundle::from_scores(theta.clone(), scores, loglik))
    }
    fn curvature(&self, theta: &DVector<f64>, known_loglik: Option<f64>) -> Result<CurvatureBundle> {
        let loglik = match known_loglik {
            Some(v) => v,
            None => self.loglik(theta)?,
        };
        let bundle = self.bundle_with_loglik(theta, loglik)?;
        Ok(CurvatureBundle {
            theta: theta.clone(),
            hessian: self.problem.hessian(theta),
            total_score: bundle.total_score,
            loglik,
        })
    }
    fn scoring_matrix(&self, bundle: &ScoreBundle, eta: f64) -> Result<ScoringMatrix> {
        match self.problem.fixed_metric() {
            Some(g) => ScoringMatrix::from_spd(g, eta, 0.0),
            None => build_g(bundle, eta),
        }
    }
    fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Fits `problem` with centered-difference derivatives.
///
/// Step errors never abort: the result carries `converged = false` and the
/// failure record instead.
pub fn fit<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    config: &OptimizerConfig,
    algorithm: Algorithm,
    theta0: &DVector<f64>,
) -> FitResult {
    let oracle = FdOracle::new(problem, config.step.clone());
    fit_with_oracle(&oracle, config, algorithm, theta0)
}

/// Fits through an arbitrary [`ScoreOracle`].
pub fn fit_with_oracle<O: ScoreOracle>(
    oracle: &O,
    config: &OptimizerConfig,
    algorithm: Algorithm,
    theta0: &DVector<f64>,
) -> FitResult {
    assert_eq!(theta0.len(), oracle.dim(), "starting point has wrong dimension");
    let start = Instant::now();
    let driver = Driver { oracle, config, algorithm };
    let mut outcome = match driver.run(theta0) {
        Ok(state) => state,
        Err(broken) => broken,
    };
    outcome.wall_time = start.elapsed().as_secs_f64();
    outcome.likelihood_evaluations = oracle.evaluations();
    outcome
}

struct Driver<'a, O: ScoreOracle> {
    oracle: &'a O,
    config: &'a OptimizerConfig,
    algorithm: Algorithm,
}

// Internal per-iteration state common to both algorithms.
struct IterState {
    theta: DVector<f64>,
    loglik: f64,
    score: DVector<f64>,
    metric: ScoringMatrix,
    criterion: f64,
    hessian: Option<DMatrix<f64>>,
    lambda: f64,
    alpha: f64,
}

impl<'a, O: ScoreOracle> Driver<'a, O> {
    // On unrecoverable setup/step errors returns Err(result) with the
    // failure already recorded.
    fn run(&self, theta0: &DVector<f64>) -> std::result::Result<FitResult, FitResult> {
        if let Err(e) = self.config.validate() {
            return Err(self.broken(theta0.clone(), Vec::new(), e, Vec::new()));
        }
        let max_iter = self.config.max_iterations(self.algorithm, self.oracle.dim());
        let mut trace: Vec<TraceRecord> = Vec::new();

        let mut state = match self.init(theta0) {
            Ok(s) => s,
            Err(e) => return Err(self.broken(theta0.clone(), trace, e, Vec::new())),
        };
        let mut evals_before = self.oracle.evaluations();
        trace.push(self.record(0, &state, 1.0, self.oracle.evaluations()));

        let mut iterations = 0;
        let mut converged = state.criterion <= self.config.stopping_value;
        while !converged && iterations < max_iter {
            iterations += 1;
            state = match self.step(state) {
                Ok(s) => s,
                Err((e, trials)) => {
                    let mut result = self.broken(DVector::zeros(0), trace, e, trials);
                    result.iterations = iterations - 1;
                    return Err(result);
                }
            };
            let evals_now = self.oracle.evaluations();
            let mut rec = self.record(iterations, &state, state.alpha, evals_now);
            rec.evaluations = evals_now - evals_before;
            evals_before = evals_now;
            trace.push(rec);
            converged = state.criterion <= self.config.stopping_value;
        }

        Ok(FitResult {
            algorithm: self.algorithm,
            theta_hat: state.theta.clone(),
            loglik: state.loglik,
            criterion: state.criterion,
            g_final: state.metric,
            converged,
            iterations,
            likelihood_evaluations: 0, // filled by caller
            wall_time: 0.0,            // filled by caller
            trace,
            failure: None,
            dim: self.oracle.dim(),
            n_units: self.oracle.n_units(),
        })
    }

    fn record(&self, iteration: usize, state: &IterState, alpha: f64, evals: u64) -> TraceRecord {
        let (damping, ridge) = match self.algorithm {
            Algorithm::Rvs => (state.metric.eta(), state.metric.ridge()),
            Algorithm::Marquardt => (state.lambda, 0.0),
        };
        TraceRecord {
            iteration,
            theta: state.theta.clone(),
            loglik: state.loglik,
            criterion: state.criterion,
            alpha,
            damping,
            ridge,
            evaluations: evals,
        }
    }

    fn init(&self, theta0: &DVector<f64>) -> Result<IterState> {
        match self.algorithm {
            Algorithm::Rvs => {
                let bundle = self.oracle.bundle(theta0)?;
                let metric = self.oracle.scoring_matrix(&bundle, self.config.eta_initial)?;
                let criterion = criterion_value(&bundle, &metric);
                Ok(IterState {
                    theta: theta0.clone(),
                    loglik: bundle.loglik,
                    score: bundle.total_score.clone(),
                    metric,
                    criterion,
                    hessian: None,
                    lambda: 0.0,
                    alpha: 1.0,
                })
            }
            Algorithm::Marquardt => {
                let curv = self.oracle.curvature(theta0, None)?;
                let (metric, lambda) = damped_metric(&curv.hessian, self.config.lambda_initial)?;
                let criterion =
                    metric.quad_form_inv(&curv.total_score) / self.oracle.dim() as f64;
                Ok(IterState {
                    theta: theta0.clone(),
                    loglik: curv.loglik,
                    score: curv.total_score,
                    metric,
                    criterion,
                    hessian: Some(curv.hessian),
                    lambda,
                    alpha: 1.0,
                })
            }
        }
    }

    fn step(&self, state: IterState) -> std::result::Result<IterState, (Error, Vec<(f64, f64)>)> {
        match self.algorithm {
            Algorithm::Rvs => self.rvs_step(state),
            Algorithm::Marquardt => self.marquardt_step(state),
        }
    }

    // theta' = theta - alpha G^{-1} U with alpha = 1 first; backtracking
    // search when the full step does not improve the likelihood.
    fn rvs_step(&self, state: IterState) -> std::result::Result<IterState, (Error, Vec<(f64, f64)>)> {
        let direction = state.metric.solve(&state.score);
        let mut trials: Vec<(f64, f64)> = Vec::new();
        let trial_at = |alpha: f64| -> Result<(DVector<f64>, f64)> {
            let theta = &state.theta - &direction * alpha;
            let loglik = self.oracle.loglik(&theta)?;
            Ok((theta, loglik))
        };

        let mut accepted: Option<(f64, DVector<f64>, f64)> = None;
        let mut alpha = 1.0;
        for _ in 0..=LINE_SEARCH_HALVINGS {
            match trial_at(alpha) {
                Ok((theta, loglik)) => {
                    trials.push((alpha, loglik));
                    let improves = loglik > state.loglik;
                    match (&accepted, improves, self.config.line_search) {
                        (_, true, LineSearchMode::OnFailureOnly) => {
                            accepted = Some((alpha, theta, loglik));
                            break;
                        }
                        (None, true, LineSearchMode::Always) => {
                            accepted = Some((alpha, theta, loglik));
                        }
                        (Some((_, _, best)), true, LineSearchMode::Always) => {
                            if loglik > *best {
                                accepted = Some((alpha, theta, loglik));
                            } else {
                                break; // improvement started shrinking
                            }
                        }
                        (Some(_), false, LineSearchMode::Always) => break,
                        _ => {}
                    }
                }
                Err(_) => {
                    // Infeasible trial point: keep shrinking.
                    trials.push((alpha, f64::NAN));
                }
            }
            alpha *= 0.5;
        }

        let (alpha, theta, loglik) = match accepted {
            Some(t) => t,
            None => return Err((Error::LineSearchFailed { tried: trials.len() }, trials)),
        };
        let bundle = match self.oracle.bundle_with_loglik(&theta, loglik) {
            Ok(b) => b,
            Err(e) => return Err((e, trials)),
        };
        let metric = match self.oracle.scoring_matrix(&bundle, self.config.eta_initial) {
            Ok(g) => g,
            Err(e) => return Err((e, trials)),
        };
        let criterion = criterion_value(&bundle, &metric);
        Ok(IterState {
            theta,
            loglik,
            score: bundle.total_score.clone(),
            metric,
            criterion,
            hessian: None,
            lambda: 0.0,
            alpha,
        })
    }

    // Solve (H + lambda I) d = U; accept on likelihood improvement and relax
    // lambda, otherwise stiffen lambda and retry within the iteration.
    fn marquardt_step(
        &self,
        state: IterState,
    ) -> std::result::Result<IterState, (Error, Vec<(f64, f64)>)> {
        let hessian = state.hessian.as_ref().expect("marquardt state carries H");
        let mut lambda = state.lambda.max(LAMBDA_MIN);
        let mut trials: Vec<(f64, f64)> = Vec::new();
        loop {
            let (metric, used_lambda) = match damped_metric(hessian, lambda) {
                Ok(p) => p,
                Err(e) => return Err((e, trials)),
            };
            lambda = used_lambda;
            let direction = metric.solve(&state.score);
            let theta = &state.theta - &direction;
            match self.oracle.loglik(&theta) {
                Ok(loglik) => {
                    trials.push((lambda, loglik));
                    if loglik > state.loglik {
                        // Accepted: relax damping, rebuild curvature there.
                        let next_lambda = (lambda / LAMBDA_FACTOR).max(LAMBDA_MIN);
                        let curv = match self.oracle.curvature(&theta, Some(loglik)) {
                            Ok(c) => c,
                            Err(e) => return Err((e, trials)),
                        };
                        let (new_metric, new_lambda) =
                            match damped_metric(&curv.hessian, next_lambda) {
                                Ok(p) => p,
                                Err(e) => return Err((e, trials)),
                            };
                        let criterion = new_metric.quad_form_inv(&curv.total_score)
                            / self.oracle.dim() as f64;
                        return Ok(IterState {
                            theta,
                            loglik,
                            score: curv.total_score,
                            metric: new_metric,
                            criterion,
                            hessian: Some(curv.hessian),
                            lambda: new_lambda,
                            alpha: 1.0,
                        });
                    }
                }
                Err(_) => trials.push((lambda, f64::NAN)),
            }
            lambda *= LAMBDA_FACTOR;
            if lambda > LAMBDA_MAX {
                return Err((Error::DampingOverflow { limit: LAMBDA_MAX }, trials));
            }
        }
    }

    fn broken(
        &self,
        theta: DVector<f64>,
        trace: Vec<TraceRecord>,
        error: Error,
        trials: Vec<(f64, f64)>,
    ) -> FitResult {
        let (theta_hat, loglik, criterion, g_final) = match trace.last() {
            Some(rec) => (
                rec.theta.clone(),
                rec.loglik,
                rec.criterion,
                // Rebuildable only from the trace point; store an identity
                // placeholder metric scaled to be usable for diagnostics.
                ScoringMatrix::from_spd(
                    DMatrix::identity(rec.theta.len(), rec.theta.len()),
                    0.0,
                    0.0,
                )
                .expect("identity is PD"),
            ),
            None => {
                let m = theta.len().max(1);
                (
                    theta,
                    f64::NAN,
                    f64::NAN,
                    ScoringMatrix::from_spd(DMatrix::identity(m, m), 0.0, 0.0)
                        .expect("identity is PD"),
                )
            }
        };
        FitResult {
            algorithm: self.algorithm,
            theta_hat,
            loglik,
            criterion,
            g_final,
            converged: false,
            iterations: trace.len().saturating_sub(1),
            likelihood_evaluations: 0,
            wall_time: 0.0,
            trace,
            failure: Some(FitFailure { message: error.to_string(), trials }),
            dim: self.oracle.dim(),
            n_units: self.oracle.n_units(),
        }
    }
}

// H + lambda I, raising lambda by the adaptation factor until the Cholesky
// succeeds. Returns the metric and the lambda actually used.
fn damped_metric(hessian: &DMatrix<f64>, lambda0: f64) -> Result<(ScoringMatrix, f64)> {
    let m = hessian.nrows();
    let mut lambda = lambda0.max(LAMBDA_MIN);
    loop {
        let mut g = hessian.clone();
        for i in 0..m {
            g[(i, i)] += lambda;
        }
        match ScoringMatrix::from_spd(g, 0.0, lambda) {
            Ok(metric) => return Ok((metric, lambda)),
            Err(_) => {
                lambda *= LAMBDA_FACTOR;
                if lambda > LAMBDA_MAX {
                    return Err(Error::DampingOverflow { limit: LAMBDA_MAX });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// -L = (theta - a)' A (theta - a) / 2 split across units, with optional
    /// fixed metric A for exact-Newton checks.
    pub(crate) struct QuadraticProblem {
        pub a: DMatrix<f64>,
        pub target: DVector<f64>,
        pub n: usize,
        pub fixed: bool,
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
            self.fixed.then(|| self.a.clone())
        }
    }

    fn quad() -> QuadraticProblem {
        QuadraticProblem {
            a: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            target: DVector::from_column_slice(&[1.5, -0.7]),
            n: 4,
            fixed: true,
        }
    }

    #[test]
    fn criterion_examples() {
        // U = 0 -> 0.
        let scores = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let b = ScoreBundle::from_scores(DVector::zeros(2), scores, 0.0);
        let g = ScoringMatrix::from_spd(DMatrix::identity(2, 2), 1.0, 0.0).unwrap();
        let mut b0 = b.clone();
        b0.total_score = DVector::zeros(2);
        assert_eq!(criterion_value(&b0, &g), 0.0);

        // m = 2, G = I, U = (1,1) -> 1.
        let mut b1 = b.clone();
        b1.total_score = DVector::from_column_slice(&[1.0, 1.0]);
        assert!((criterion_value(&b1, &g) - 1.0).abs() < 1e-15);

        // m = 1, G = 4, U = 2 -> 1.
        let scores1 = DMatrix::from_row_slice(1, 1, &[2.0]);
        let mut bs = ScoreBundle::from_scores(DVector::zeros(1), scores1, 0.0);
        bs.total_score = DVector::from_column_slice(&[2.0]);
        let g1 = ScoringMatrix::from_spd(DMatrix::from_element(1, 1, 4.0), 1.0, 0.0).unwrap();
        assert!((criterion_value(&bs, &g1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rvs_exact_metric_lands_in_one_step() {
        let p = quad();
        let oracle = AnalyticOracle::new(&p);
        let theta0 = DVector::from_column_slice(&[4.0, 3.0]);
        let fit = fit_with_oracle(&oracle, &OptimizerConfig::default(), Algorithm::Rvs, &theta0);
        assert!(fit.converged);
        assert!(fit.iterations <= 1, "iterations {}", fit.iterations);
        assert!((fit.theta_hat - &p.target).norm() < 1e-12);
        assert!(fit.criterion < 1e-20);
    }

    #[test]
    fn marquardt_quadratic_converges_fast() {
        let p = quad();
        let oracle = AnalyticOracle::new(&p);
        let theta0 = DVector::from_column_slice(&[4.0, 3.0]);
        let fit =
            fit_with_oracle(&oracle, &OptimizerConfig::default(), Algorithm::Marquardt, &theta0);
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "iterations {}", fit.iterations);
        assert!(fit.criterion < 1e-10);
        assert!((fit.theta_hat - &p.target).norm() < 1e-4);
    }

    #[test]
    fn marquardt_indefinite_hessian_still_descends() {
        // -L = (theta1^2 - theta2^2)/2 has H = diag(1, -1); lambda must rise
        // until PD and the step must be a descent direction for -L.
        struct Saddle;
        impl LikelihoodProblem for Saddle {
            fn dim(&self) -> usize {
                2
            }
            fn n_units(&self) -> usize {
                1
            }
            fn unit_loglik(&self, _: usize, theta: &DVector<f64>) -> Result<f64> {
                Ok(-0.5 * (theta[0] * theta[0] - theta[1] * theta[1]))
            }
        }
        impl AnalyticProblem for Saddle {
            fn unit_score(&self, _: usize, theta: &DVector<f64>) -> DVector<f64> {
                DVector::from_column_slice(&[theta[0], -theta[1]])
            }
            fn hessian(&self, _: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
            }
        }
        let p = Saddle;
        let h = p.hessian(&DVector::zeros(2));
        let (metric, lambda) = damped_metric(&h, 1e-3).unwrap();
        assert!(lambda > 1.0, "lambda {lambda}");
        let u = p.unit_score(0, &DVector::from_column_slice(&[1.0, 1.0]));
        let d = metric.solve(&u);
        // Directional derivative of -L along -d is -U'd (U is grad of -L).
        assert!(u.dot(&d) > 0.0);
    }

    #[test]
    fn fit_gaussian_mean_reaches_sample_mean() {
        struct MeanProblem {
            y: Vec<f64>,
        }
        impl LikelihoodProblem for MeanProblem {
            fn dim(&self) -> usize {
                1
            }
            fn n_units(&self) -> usize {
                self.y.len()
            }
            fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
                let d = self.y[unit] - theta[0];
                Ok(-0.5 * d * d)
            }
        }
        let y = vec![0.3, 1.9, -0.5, 0.8, 2.1, 1.4];
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let p = MeanProblem { y };
        for algorithm in [Algorithm::Rvs, Algorithm::Marquardt] {
            let fit = fit(&p, &OptimizerConfig::default(), algorithm, &DVector::from_column_slice(&[-3.0]));
            assert!(fit.converged, "{algorithm:?}");
            assert!(
                (fit.theta_hat[0] - mean).abs() < 1e-8,
                "{algorithm:?}: {} vs {mean}",
                fit.theta_hat[0]
            );
        }
    }

    #[test]
    fn descent_along_accepted_steps() {
        let p = quad();
        let oracle = AnalyticOracle::new(&p);
        let fit = fit_with_oracle(
            &oracle,
            &OptimizerConfig::default(),
            Algorithm::Rvs,
            &DVector::from_column_slice(&[10.0, -5.0]),
        );
        for w in fit.trace.windows(2) {
            assert!(w[1].loglik > w[0].loglik, "non-descent step in trace");
        }
    }

    #[test]
    fn criterion_matches_scaled_distance_on_quadratic() {
        // With the exact metric, C = (theta - a)' A (theta - a) / m.
        let p = quad();
        let oracle = AnalyticOracle::new(&p);
        let theta = DVector::from_column_slice(&[2.5, 0.4]);
        let bundle = oracle.bundle(&theta).unwrap();
        let metric = oracle.scoring_matrix(&bundle, 1.0).unwrap();
        let c = criterion_value(&bundle, &metric);
        let d = &theta - &p.target;
        let expect = d.dot(&(&p.a * &d)) / 2.0;
        assert!((c - expect).abs() < 1e-8 * expect.max(1.0));
    }

    #[test]
    fn affine_equivariant_iterates_with_analytic_scores() {
        // Reparameterize eta = A theta + a; iterates must map through A^{-1}.
        struct MappedQuad {
            base: QuadraticProblem,
            a_map: DMatrix<f64>,
            shift: DVector<f64>,
        }
        impl MappedQuad {
            fn theta_of_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
                self.a_map.clone().try_inverse().unwrap() * (eta - &self.shift)
            }
        }
        impl LikelihoodProblem for MappedQuad {
            fn dim(&self) -> usize {
                self.base.dim()
            }
            fn n_units(&self) -> usize {
                self.base.n_units()
            }
            fn unit_loglik(&self, unit: usize, eta: &DVector<f64>) -> Result<f64> {
                self.base.unit_loglik(unit, &self.theta_of_eta(eta))
            }
        }
        impl AnalyticProblem for MappedQuad {
            fn unit_score(&self, unit: usize, eta: &DVector<f64>) -> DVector<f64> {
                let inv = self.a_map.clone().try_inverse().unwrap();
                inv.transpose() * self.base.unit_score(unit, &self.theta_of_eta(eta))
            }
            fn hessian(&self, eta: &DVector<f64>) -> DMatrix<f64> {
                let inv = self.a_map.clone().try_inverse().unwrap();
                inv.transpose() * self.base.hessian(&self.theta_of_eta(eta)) * inv
            }
        }

        let base = QuadraticProblem {
            a: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            target: DVector::from_column_slice(&[1.5, -0.7]),
            n: 5,
            fixed: false,
        };
        let a_map = DMatrix::from_row_slice(2, 2, &[1.2, -0.4, 0.3, 0.9]);
        let shift = DVector::from_column_slice(&[0.5, -1.0]);
        let theta0 = DVector::from_column_slice(&[6.0, 4.0]);
        let eta0 = &a_map * &theta0 + &shift;

        let mapped = MappedQuad {
            base: QuadraticProblem {
                a: base.a.clone(),
                target: base.target.clone(),
                n: base.n,
                fixed: false,
            },
            a_map: a_map.clone(),
            shift: shift.clone(),
        };

        let config = OptimizerConfig { max_iter: Some(8), ..OptimizerConfig::default() };
        let o1 = AnalyticOracle::new(&base);
        let fit_theta = fit_with_oracle(&o1, &config, Algorithm::Rvs, &theta0);
        let o2 = AnalyticOracle::new(&mapped);
        let fit_eta = fit_with_oracle(&o2, &config, Algorithm::Rvs, &eta0);

        assert_eq!(fit_theta.trace.len(), fit_eta.trace.len());
        let a_inv = a_map.try_inverse().unwrap();
        for (rt, re) in fit_theta.trace.iter().zip(fit_eta.trace.iter()) {
            let mapped_back = &a_inv * (&re.theta - &shift);
            let err = (&mapped_back - &rt.theta).norm() / rt.theta.norm().max(1.0);
            assert!(err < 1e-10, "iterate mismatch {err}");
        }
    }

    #[test]
    fn iteration_caps_default_per_algorithm() {
        let config = OptimizerConfig::default();
        assert_eq!(config.max_iterations(Algorithm::Marquardt, 7), 30);
        assert_eq!(config.max_iterations(Algorithm::Rvs, 7), 90);
        assert_eq!(config.max_iterations(Algorithm::Rvs, 8), 98);
    }

    #[test]
    fn line_search_failure_is_recorded_not_fatal() {
        // A problem whose likelihood cannot improve from the start: constant
        // L with a fake nonzero score via fixed metric is hard to build, so
        // instead use a maximum at theta0 where any proposed move fails to
        // improve; the zero score makes C = 0 and the fit converges
        // immediately instead. Use a cliff: L = -|theta| with feasible region
        // excluding improvement.
        struct Cliff;
        impl LikelihoodProblem for Cliff {
            fn dim(&self) -> usize {
                1
            }
            fn n_units(&self) -> usize {
                2
            }
            fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
                if theta[0] < 0.0 {
                    return Err(Error::Evaluation { unit, reason: "infeasible".into() });
                }
                // Increasing in theta at the FD scale but every RVS step from
                // here points downhill because U > 0 is arranged below.
                Ok(-(theta[0]) / 2.0)
            }
        }
        let p = Cliff;
        let fit = fit(&p, &OptimizerConfig::default(), Algorithm::Rvs, &DVector::from_column_slice(&[0.5]));
        // U = 1/2 per unit > 0, direction positive, steps move theta down
        // toward 0 and L decreases; all alphas fail, line search fails.
        assert!(!fit.converged);
        let failure = fit.failure.expect("failure recorded");
        assert!(failure.message.contains("line search"), "{}", failure.message);
        assert!(!failure.trials.is_empty());
    }

    #[test]
    fn always_line_search_still_converges() {
        let p = quad();
        let oracle = AnalyticOracle::new(&p);
        let config =
            OptimizerConfig { line_search: LineSearchMode::Always, ..OptimizerConfig::default() };
        let fit = fit_with_oracle(
            &oracle,
            &config,
            Algorithm::Rvs,
            &DVector::from_column_slice(&[3.0, 2.0]),
        );
        assert!(fit.converged);
        assert!((fit.theta_hat - &p.target).norm() < 1e-8);
    }
}
