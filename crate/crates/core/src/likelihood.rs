//! Likelihood-problem contract and centered-difference derivatives.
//!
//! A problem exposes per-unit log-likelihood contributions `L_i(theta)`;
//! everything downstream works with the minimization convention, so scores
//! are `U_i = -dL_i/dtheta` and the Hessian is `H = -d2L/dtheta2`. All
//! reported log-likelihood values stay on the original maximization scale.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Contract supplying per-unit log-likelihood contributions.
///
/// Implementations must be pure: repeated evaluation at identical arguments
/// returns bit-identical values, and concurrent calls are safe.
pub trait LikelihoodProblem: Sync {
    /// Number of parameters `m`.
    fn dim(&self) -> usize;
    /// Number of independent observation units `n`.
    fn n_units(&self) -> usize;
    /// Log-likelihood contribution of unit `unit` at `theta`.
    fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64>;
}

/// Per-coordinate finite-difference increment rule:
/// `h_j = max(|theta_j|, 1) * scale`, with `scale = cbrt(machine epsilon)`
/// by default (the usual balance of truncation and rounding error for
/// centered differences).
#[derive(Debug, Clone)]
pub struct StepRule {
    pub scale: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule { scale: f64::EPSILON.cbrt() }
    }
}

impl StepRule {
    pub fn with_scale(scale: f64) -> Self {
        StepRule { scale }
    }

    pub fn step(&self, theta_j: f64) -> f64 {
        theta_j.abs().max(1.0) * self.scale
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("degenerate finite-difference step {}", self.scale)));
        }
        Ok(())
    }
}

/// Individual scores, total score and log-likelihood at one parameter point.
#[derive(Debug, Clone)]
pub struct ScoreBundle {
    pub theta: DVector<f64>,
    /// `n x m`; row `i` is `U_i = -dL_i/dtheta`.
    pub scores: DMatrix<f64>,
    /// Column sums of `scores`.
    pub total_score: DVector<f64>,
    /// Total log-likelihood at `theta` (maximization scale).
    pub loglik: f64,
}

impl ScoreBundle {
    /// Builds a bundle from externally computed rows; the total score is the
    /// column sum taken in unit order.
    pub fn from_scores(theta: DVector<f64>, scores: DMatrix<f64>, loglik: f64) -> Self {
        assert_eq!(theta.len(), scores.ncols(), "score bundle dimension mismatch");
        let m = scores.ncols();
        let mut total = DVector::zeros(m);
        for i in 0..scores.nrows() {
            for j in 0..m {
                total[j] += scores[(i, j)];
            }
        }
        ScoreBundle { theta, scores, total_score: total, loglik }
    }

    pub fn n_units(&self) -> usize {
        self.scores.nrows()
    }

    pub fn dim(&self) -> usize {
        self.scores.ncols()
    }
}

fn check_theta<P: LikelihoodProblem + ?Sized>(problem: &P, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != problem.dim() {
        return Err(Error::Config(format!(
            "theta has length {}, problem dimension is {}",
            theta.len(),
            problem.dim()
        )));
    }
    Ok(())
}

fn finite_or_err(value: f64, unit: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Evaluation { unit, reason: format!("non-finite log-likelihood {value}") })
    }
}

/// Total log-likelihood: the sum of the per-unit contributions.
///
/// Units are evaluated in parallel but summed in unit order, so the result is
/// deterministic.
pub fn total_loglik<P: LikelihoodProblem + ?Sized>(problem: &P, theta: &DVector<f64>) -> Result<f64> {
    check_theta(problem, theta)?;
    let values: Vec<Result<f64>> = (0..problem.n_units())
        .into_par_iter()
        .map(|i| problem.unit_loglik(i, theta).and_then(|v| finite_or_err(v, i)))
        .collect();
    let mut sum = 0.0;
    for v in values {
        sum += v?;
    }
    Ok(sum)
}

// Centered difference for one unit and one coordinate, retrying once with a
// halved increment when a perturbed point fails to evaluate (feasibility
// boundaries can sit close to theta).
fn unit_centered_diff<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    unit: usize,
    theta: &DVector<f64>,
    j: usize,
    h: f64,
) -> Result<f64> {
    let eval_pair = |hh: f64| -> Result<(f64, f64)> {
        let mut t = theta.clone();
        t[j] = theta[j] + hh;
        let up = problem.unit_loglik(unit, &t).and_then(|v| finite_or_err(v, unit))?;
        t[j] = theta[j] - hh;
        let dn = problem.unit_loglik(unit, &t).and_then(|v| finite_or_err(v, unit))?;
        Ok((up, dn))
    };
    let (up, dn, used_h) = match eval_pair(h) {
        Ok((up, dn)) => (up, dn, h),
        Err(_) => {
            let (up, dn) = eval_pair(0.5 * h)?;
            (up, dn, 0.5 * h)
        }
    };
    // U_j = -dL/dtheta_j.
    Ok(-(up - dn) / (2.0 * used_h))
}

/// Centered-difference score bundle: exactly `2m` evaluations of each unit's
/// log-likelihood plus one evaluation of the total log-likelihood at `theta`.
pub fn score_bundle<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    theta: &DVector<f64>,
    step: &StepRule,
) -> Result<ScoreBundle> {
    let loglik = total_loglik(problem, theta)?;
    score_bundle_with_loglik(problem, theta, step, loglik)
}

/// As [`score_bundle`] but reusing an already computed total log-likelihood,
/// which keeps per-iteration evaluation counts at `2m + 1`.
pub fn score_bundle_with_loglik<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    theta: &DVector<f64>,
    step: &StepRule,
    loglik: f64,
) -> Result<ScoreBundle> {
    check_theta(problem, theta)?;
    step.validate()?;
    let n = problem.n_units();
    let m = problem.dim();
    let steps: Vec<f64> = (0..m).map(|j| step.step(theta[j])).collect();

    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; m];
            for j in 0..m {
                row[j] = unit_centered_diff(problem, i, theta, j, steps[j])?;
            }
            Ok(row)
        })
        .collect();

    let mut scores = DMatrix::zeros(n, m);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for j in 0..m {
            scores[(i, j)] = row[j];
        }
    }
    Ok(ScoreBundle::from_scores(theta.clone(), scores, loglik))
}

/// Finite-difference Hessian of the negative total log-likelihood together
/// with the centered-difference total score, `H = -d2L/dtheta2`.
#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    pub theta: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub total_score: DVector<f64>,
    pub loglik: f64,
}

/// Hessian scheme with one dedicated evaluation per second derivative:
///
/// * singles `L(theta +/- h_j e_j)` give the centered total score,
/// * pair points `L(theta + h_j e_j + h_k e_k)` (with the doubled point
///   `theta + 2 h_j e_j` on the diagonal) give forward differences of the
///   forward score differences.
///
/// Total cost: `m(m+5)/2` total-likelihood evaluations, plus one for the
/// center when it is not supplied.
pub fn hessian_with_score<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    theta: &DVector<f64>,
    step: &StepRule,
    known_loglik: Option<f64>,
) -> Result<CurvatureBundle> {
    check_theta(problem, theta)?;
    step.validate()?;
    let m = problem.dim();
    let f0 = match known_loglik {
        Some(v) => v,
        None => total_loglik(problem, theta)?,
    };
    let steps: Vec<f64> = (0..m).map(|j| step.step(theta[j])).collect();

    let at = |offsets: &[(usize, f64)]| -> DVector<f64> {
        let mut t = theta.clone();
        for &(j, h) in offsets {
            t[j] += h;
        }
        t
    };

    // Evaluation points: 2m singles, m(m-1)/2 mixed pairs, m doubled points.
    let mut points: Vec<DVector<f64>> = Vec::with_capacity(m * (m + 5) / 2);
    for j in 0..m {
        points.push(at(&[(j, steps[j])]));
        points.push(at(&[(j, -steps[j])]));
    }
    for j in 0..m {
        for k in j..m {
            if j == k {
                points.push(at(&[(j, 2.0 * steps[j])]));
            } else {
                points.push(at(&[(j, steps[j]), (k, steps[k])]));
            }
        }
    }
    let values: Vec<Result<f64>> =
        points.par_iter().map(|t| total_loglik(problem, t)).collect();
    let mut vals = Vec::with_capacity(values.len());
    for v in values {
        vals.push(v?);
    }

    let fp: Vec<f64> = (0..m).map(|j| vals[2 * j]).collect();
    let fm: Vec<f64> = (0..m).map(|j| vals[2 * j + 1]).collect();
    let mut score = DVector::zeros(m);
    for j in 0..m {
        score[j] = -(fp[j] - fm[j]) / (2.0 * steps[j]);
    }

    let mut h = DMatrix::zeros(m, m);
    let mut idx = 2 * m;
    for j in 0..m {
        for k in j..m {
            let fjk = vals[idx];
            idx += 1;
            let second = if j == k {
                (fjk - 2.0 * fp[j] + f0) / (steps[j] * steps[j])
            } else {
                (fjk - fp[j] - fp[k] + f0) / (steps[j] * steps[k])
            };
            // H = -d2L.
            h[(j, k)] = -second;
            h[(k, j)] = -second;
        }
    }
    crate::linalg::symmetrize(&mut h);
    Ok(CurvatureBundle { theta: theta.clone(), hessian: h, total_score: score, loglik: f0 })
}

/// Symmetric finite-difference Hessian of the negative total log-likelihood.
/// Costs `m(m+5)/2 + 1` evaluations of the total log-likelihood.
pub fn hessian<P: LikelihoodProblem + ?Sized>(
    problem: &P,
    theta: &DVector<f64>,
    step: &StepRule,
) -> Result<DMatrix<f64>> {
    Ok(hessian_with_score(problem, theta, step, None)?.hessian)
}
