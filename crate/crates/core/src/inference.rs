//! Post-fit inference: model-based and sandwich variance estimates, Wald
//! intervals, the score-test confidence ellipsoid, and the conservative
//! region for early-stopped fits.
//!
//! The scoring matrix at the maximum estimates the information for a
//! well-specified model, so `G^{-1}` estimates the estimator covariance; the
//! sandwich `H^{-1} G H^{-1}` stays valid under misspecification at the cost
//! of one Hessian evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{hessian_with_score, score_bundle, LikelihoodProblem, StepRule};
use crate::linalg;
use crate::optim::FitResult;
use crate::scoring::build_g;
use crate::special::{chi2_quantile, norm_quantile};

/// Variance estimates and per-parameter Wald intervals.
#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub theta: DVector<f64>,
    /// `G^{-1}` at the estimate, optionally bias-corrected.
    pub variance_model: DMatrix<f64>,
    /// `H^{-1} G H^{-1}` when requested.
    pub variance_sandwich: Option<DMatrix<f64>>,
    /// Per-parameter `(lower, upper)` at the report's confidence level.
    pub wald_intervals: Vec<(f64, f64)>,
    /// Early-stopping variance inflation factor (1 when fully converged).
    pub inflation_factor: f64,
    pub confidence_level: f64,
}

/// `G^{-1}(theta_hat)`, or `((n/(n-m)) G)^{-1}` with the small-sample bias
/// correction.
pub fn model_variance(fit: &FitResult, bias_correct: bool) -> Result<DMatrix<f64>> {
    let mut v = fit.g_final.inverse();
    if bias_correct {
        let (n, m) = (fit.n_units, fit.dim);
        if n <= m {
            return Err(Error::Config(format!(
                "bias correction needs n > m (n = {n}, m = {m})"
            )));
        }
        v *= (n as f64 - m as f64) / n as f64;
    }
    Ok(v)
}

/// Sandwich algebra on explicit matrices: `H^{-1} G H^{-1}`, symmetrized.
pub fn sandwich_from_parts(hessian: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let factor = linalg::cholesky(hessian)?;
    let hinv_g = factor.solve_matrix(g);
    let mut s = factor.solve_matrix(&hinv_g.transpose());
    linalg::symmetrize(&mut s);
    Ok(s)
}

/// Sandwich estimator at the fitted maximum, computing the Hessian once.
/// Fails with the positive-definiteness diagnostic when the curvature at the
/// estimate is not PD (boundary or saddle).
pub fn sandwich_variance<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    fit: &FitResult,
    step: &StepRule,
) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(Error::Config("sandwich variance needs a converged fit".into()));
    }
    let curv = hessian_with_score(problem, &fit.theta_hat, step, Some(fit.loglik))?;
    let bundle = score_bundle(problem, &fit.theta_hat, step)?;
    let g = build_g(&bundle, 1.0)?;
    sandwich_from_parts(&curv.hessian, g.matrix())
}

/// Score-test statistic `U(theta)' G^{-1}(theta) U(theta)` evaluated at an
/// arbitrary parameter point (not at the estimate).
pub fn score_statistic<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    theta: &DVector<f64>,
    step: &StepRule,
) -> Result<f64> {
    let bundle = score_bundle(problem, theta, step)?;
    let g = build_g(&bundle, 1.0)?;
    Ok(g.quad_form_inv(&bundle.total_score))
}

/// Membership test for the score-test confidence ellipsoid
/// `{theta : U'G^{-1}U <= c_alpha}` with `c_alpha` the `1 - alpha`
/// chi-squared quantile on `m` degrees of freedom.
pub fn score_ellipsoid_contains<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    theta: &DVector<f64>,
    alpha: f64,
    step: &StepRule,
) -> Result<bool> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let stat = score_statistic(problem, theta, step)?;
    let c = chi2_quantile(1.0 - alpha, problem.dim())?;
    Ok(stat <= c)
}

fn wald_intervals(
    theta: &DVector<f64>,
    variance: &DMatrix<f64>,
    level: f64,
    inflation: f64,
) -> Vec<(f64, f64)> {
    let z = norm_quantile(0.5 + level / 2.0);
    (0..theta.len())
        .map(|j| {
            let half = z * (variance[(j, j)] * inflation).max(0.0).sqrt();
            (theta[j] - half, theta[j] + half)
        })
        .collect()
}

/// Standard report at a converged fit: `G^{-1}` variances and Wald intervals
/// at level `1 - alpha`, no inflation.
pub fn wald_report(fit: &FitResult, alpha: f64, bias_correct: bool) -> Result<InferenceReport> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let variance = model_variance(fit, bias_correct)?;
    let level = 1.0 - alpha;
    let intervals = wald_intervals(&fit.theta_hat, &variance, level, 1.0);
    Ok(InferenceReport {
        theta: fit.theta_hat.clone(),
        variance_model: variance,
        variance_sandwich: None,
        wald_intervals: intervals,
        inflation_factor: 1.0,
        confidence_level: level,
    })
}

/// Conservative report for an early-stopped fit.
///
/// The squared distance from the stopped iterate to the exact maximum is
/// estimated by `m * C_k`; the confidence region radius grows from
/// `c_alpha` to `c_alpha + m C_k`, so `G^{-1}` is inflated by
/// `(c_alpha + m C_k) / c_alpha` and interval half-widths by its square
/// root.
pub fn conservative_region(fit_early: &FitResult, alpha: f64) -> Result<InferenceReport> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let m = fit_early.dim;
    let c_alpha = chi2_quantile(1.0 - alpha, m)?;
    let distance = (m as f64 * fit_early.criterion).max(0.0);
    let inflation = (c_alpha + distance) / c_alpha;
    let variance = model_variance(fit_early, false)?;
    let level = 1.0 - alpha;
    let intervals = wald_intervals(&fit_early.theta_hat, &variance, level, inflation);
    Ok(InferenceReport {
        theta: fit_early.theta_hat.clone(),
        variance_model: variance,
        variance_sandwich: None,
        wald_intervals: intervals,
        inflation_factor: inflation,
        confidence_level: level,
    })
}

/// Exploratory score-test bounds for one coordinate, holding the others at
/// the fitted values: bisection for the crossing of
/// `U'G^{-1}U = c_alpha` on each side of the estimate.
pub fn score_interval_1d<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    fit: &FitResult,
    index: usize,
    alpha: f64,
    step: &StepRule,
) -> Result<(f64, f64)> {
    if index >= fit.dim {
        return Err(Error::Config(format!("parameter index {index} out of range")));
    }
    let c = chi2_quantile(1.0 - alpha, problem.dim())?;
    let stat_at = |v: f64| -> Result<f64> {
        let mut theta = fit.theta_hat.clone();
        theta[index] = v;
        score_statistic(problem, &theta, step)
    };
    let center = fit.theta_hat[index];
    let scale = model_variance(fit, false)?[(index, index)].max(1e-12).sqrt();

    let bracket = |dir: f64| -> Result<f64> {
        let mut width = scale;
        for _ in 0..60 {
            let v = center + dir * width;
            if stat_at(v)? > c {
                // Bisect between the inside point and v.
                let mut lo = center + dir * width * 0.5;
                let mut hi = v;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if stat_at(mid)? > c {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if (hi - lo).abs() < 1e-7 * scale.max(1.0) {
                        break;
                    }
                }
                return Ok(0.5 * (lo + hi));
            }
            width *= 2.0;
        }
        Err(Error::Config("score-interval bracket did not close".into()))
    };
    Ok((bracket(-1.0)?, bracket(1.0)?))
}
