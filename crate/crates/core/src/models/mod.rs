//! Longitudinal linear mixed models with left-censored responses.
//!
//! Two data-generating covariance families are supported:
//!
//! * autocorrelated errors, `cov(w_ij, w_il) = sigma2_w exp(-delta |t_ij - t_il|)`
//!   plus independent measurement error;
//! * random intercept and slope with unstructured 2x2 covariance plus
//!   independent measurement error.
//!
//! The per-subject likelihood with left censoring is the Gaussian density of
//! the observed measurements times the conditional Gaussian rectangle
//! probability of the censored ones given the observed ones, evaluated with
//! the deterministic quasi-Monte Carlo CDF in [`mvn`].
//!
//! For optimization every dispersion parameter is mapped to an unconstrained
//! scale (logs of variances, Cholesky entries for the random-effects
//! covariance), so that every iterate stays feasible; asymptotic variances
//! are mapped back to the natural scale by the delta method.

pub mod analytic;
pub mod mvn;

pub use analytic::{
    analytic_test_models, GaussianMeanProblem, GaussianMeanVarProblem, LogisticProblem,
    QuadraticProblem,
};
pub use mvn::{mvn_cdf, mvn_logpdf};

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::likelihood::LikelihoodProblem;
use crate::linalg;
use crate::optim::{self, Algorithm, OptimizerConfig};

/// Default absolute tolerance for each subject's censored-rectangle
/// probability.
pub const DEFAULT_MVN_TOL: f64 = 1e-7;

/// Which covariance family generates / fits the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Autocorrelated within-subject errors (7 parameters).
    Ar,
    /// Random intercept and slope (8 parameters).
    Re,
}

impl ModelKind {
    pub fn dim(&self) -> usize {
        match self {
            ModelKind::Ar => 7,
            ModelKind::Re => 8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Ar => "ar",
            ModelKind::Re => "re",
        }
    }

    pub fn parameter_names(&self) -> &'static [&'static str] {
        match self {
            ModelKind::Ar => {
                &["beta0", "beta1", "beta2", "beta3", "sigma2_w", "delta", "sigma2_e"]
            }
            ModelKind::Re => {
                &["beta0", "beta1", "beta2", "beta3", "sigma2_0", "sigma_01", "sigma2_1", "sigma2_e"]
            }
        }
    }

    /// Maps an unconstrained optimization vector to natural parameters.
    pub fn to_natural(&self, opt: &DVector<f64>) -> ModelParams {
        assert_eq!(opt.len(), self.dim());
        let beta = [opt[0], opt[1], opt[2], opt[3]];
        match self {
            ModelKind::Ar => ModelParams::Ar(ArParams {
                beta,
                sigma2_w: opt[4].exp(),
                delta: opt[5].exp(),
                sigma2_e: opt[6].exp(),
            }),
            ModelKind::Re => {
                let l11 = (0.5 * opt[4]).exp();
                let l21 = opt[5];
                let l22_sq = opt[6].exp();
                ModelParams::Re(ReParams {
                    beta,
                    sigma2_0: l11 * l11,
                    sigma_01: l11 * l21,
                    sigma2_1: l21 * l21 + l22_sq,
                    sigma2_e: opt[7].exp(),
                })
            }
        }
    }

    /// Inverse of [`ModelKind::to_natural`]; fails when the natural
    /// parameters are infeasible.
    pub fn to_optimization(&self, params: &ModelParams) -> Result<DVector<f64>> {
        params.validate()?;
        match (self, params) {
            (ModelKind::Ar, ModelParams::Ar(p)) => Ok(DVector::from_column_slice(&[
                p.beta[0],
                p.beta[1],
                p.beta[2],
                p.beta[3],
                p.sigma2_w.ln(),
                p.delta.ln(),
                p.sigma2_e.ln(),
            ])),
            (ModelKind::Re, ModelParams::Re(p)) => {
                let l11 = p.sigma2_0.sqrt();
                let l21 = p.sigma_01 / l11;
                let l22_sq = p.sigma2_1 - l21 * l21;
                Ok(DVector::from_column_slice(&[
                    p.beta[0],
                    p.beta[1],
                    p.beta[2],
                    p.beta[3],
                    p.sigma2_0.ln(),
                    l21,
                    l22_sq.ln(),
                    p.sigma2_e.ln(),
                ]))
            }
            _ => Err(Error::Config("model kind does not match parameter family".into())),
        }
    }

    /// Jacobian `d(natural)/d(optimization)` for the delta method.
    pub fn natural_jacobian(&self, opt: &DVector<f64>) -> DMatrix<f64> {
        let m = self.dim();
        let mut j = DMatrix::zeros(m, m);
        for i in 0..4 {
            j[(i, i)] = 1.0;
        }
        match self {
            ModelKind::Ar => {
                j[(4, 4)] = opt[4].exp();
                j[(5, 5)] = opt[5].exp();
                j[(6, 6)] = opt[6].exp();
            }
            ModelKind::Re => {
                let l11 = (0.5 * opt[4]).exp();
                let l21 = opt[5];
                j[(4, 4)] = opt[4].exp();
                j[(5, 4)] = 0.5 * l11 * l21;
                j[(5, 5)] = l11;
                j[(6, 5)] = 2.0 * l21;
                j[(6, 6)] = opt[6].exp();
                j[(7, 7)] = opt[7].exp();
            }
        }
        j
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ar" => Ok(ModelKind::Ar),
            "re" => Ok(ModelKind::Re),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

/// Autocorrelated-error model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArParams {
    pub beta: [f64; 4],
    pub sigma2_w: f64,
    pub delta: f64,
    pub sigma2_e: f64,
}

impl ArParams {
    /// Parameter values used throughout the simulation study.
    pub fn simulation_default() -> Self {
        ArParams { beta: [4.0, -0.5, -0.5, -0.1], sigma2_w: 1.0, delta: 0.1, sigma2_e: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma2_w > 0.0 && self.delta > 0.0 && self.sigma2_e > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("autocorrelated model needs positive sigma2_w, delta, sigma2_e".into()))
        }
    }
}

/// Random intercept and slope model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReParams {
    pub beta: [f64; 4],
    pub sigma2_0: f64,
    pub sigma2_1: f64,
    pub sigma_01: f64,
    pub sigma2_e: f64,
}

impl ReParams {
    /// Parameter values used throughout the simulation study.
    pub fn simulation_default() -> Self {
        ReParams {
            beta: [4.0, -0.5, -0.5, -0.1],
            sigma2_0: 0.25,
            sigma2_1: 0.1,
            sigma_01: -0.1,
            sigma2_e: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.sigma2_0 * self.sigma2_1 - self.sigma_01 * self.sigma_01;
        if self.sigma2_0 > 0.0 && self.sigma2_1 > 0.0 && det > 0.0 && self.sigma2_e > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(
                "random-effects covariance must be positive definite with sigma2_e > 0".into(),
            ))
        }
    }
}

/// Model family plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelParams {
    Ar(ArParams),
    Re(ReParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Ar(_) => ModelKind::Ar,
            ModelParams::Re(_) => ModelKind::Re,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Ar(p) => p.validate(),
            ModelParams::Re(p) => p.validate(),
        }
    }

    pub fn beta(&self) -> &[f64; 4] {
        match self {
            ModelParams::Ar(p) => &p.beta,
            ModelParams::Re(p) => &p.beta,
        }
    }

    /// Natural-scale vector in reporting order.
    pub fn natural_vector(&self) -> DVector<f64> {
        match self {
            ModelParams::Ar(p) => DVector::from_column_slice(&[
                p.beta[0], p.beta[1], p.beta[2], p.beta[3], p.sigma2_w, p.delta, p.sigma2_e,
            ]),
            ModelParams::Re(p) => DVector::from_column_slice(&[
                p.beta[0], p.beta[1], p.beta[2], p.beta[3], p.sigma2_0, p.sigma_01, p.sigma2_1,
                p.sigma2_e,
            ]),
        }
    }

    /// Mean response at `(t, x)`.
    fn mean_at(&self, t: f64, x: f64) -> f64 {
        let b = self.beta();
        b[0] + b[1] * t + b[2] * x + b[3] * x * t
    }

    /// Within-subject covariance matrix at the given measurement times.
    pub fn covariance(&self, times: &[f64]) -> DMatrix<f64> {
        let k = times.len();
        match self {
            ModelParams::Ar(p) => DMatrix::from_fn(k, k, |i, j| {
                let c = p.sigma2_w * (-p.delta * (times[i] - times[j]).abs()).exp();
                if i == j {
                    c + p.sigma2_e
                } else {
                    c
                }
            }),
            ModelParams::Re(p) => DMatrix::from_fn(k, k, |i, j| {
                let c = p.sigma2_0
                    + p.sigma_01 * (times[i] + times[j])
                    + p.sigma2_1 * times[i] * times[j];
                if i == j {
                    c + p.sigma2_e
                } else {
                    c
                }
            }),
        }
    }

    pub fn mean_vector(&self, times: &[f64], x: f64) -> DVector<f64> {
        DVector::from_iterator(times.len(), times.iter().map(|&t| self.mean_at(t, x)))
    }
}

/// One subject's longitudinal record. Censored entries carry the threshold
/// as their value and `censored = true`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub times: Vec<f64>,
    /// Binary covariate, stored as 0.0 / 1.0.
    pub covariate: f64,
    pub values: Vec<f64>,
    pub censored: Vec<bool>,
}

impl Subject {
    pub fn n_measures(&self) -> usize {
        self.times.len()
    }
}

/// A generated or loaded dataset with its detection limit.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
    pub threshold: f64,
}

impl LongitudinalDataset {
    pub fn n_measurements(&self) -> usize {
        self.subjects.iter().map(|s| s.n_measures()).sum()
    }

    pub fn censored_fraction(&self) -> f64 {
        let total = self.n_measurements();
        if total == 0 {
            return 0.0;
        }
        let censored: usize =
            self.subjects.iter().map(|s| s.censored.iter().filter(|&&c| c).count()).sum();
        censored as f64 / total as f64
    }

    /// Copy with all censoring flags cleared; censored entries keep the
    /// threshold as an imputed value.
    pub fn impute_threshold(&self) -> LongitudinalDataset {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                times: s.times.clone(),
                covariate: s.covariate,
                values: s.values.clone(),
                censored: vec![false; s.n_measures()],
            })
            .collect();
        LongitudinalDataset { subjects, threshold: f64::NEG_INFINITY }
    }

    /// Writes the delimited representation: a header row, then one row per
    /// measurement with 17-significant-digit values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "subject_id,t,x,y,censored")?;
        for (id, s) in self.subjects.iter().enumerate() {
            for j in 0..s.n_measures() {
                writeln!(
                    w,
                    "{},{:.16e},{},{:.16e},{}",
                    id,
                    s.times[j],
                    s.covariate as u8,
                    s.values[j],
                    u8::from(s.censored[j]),
                )?;
            }
        }
        Ok(())
    }

    /// Reads the delimited representation written by [`Self::write_csv`].
    /// The detection limit is recovered from the censored rows (they all
    /// carry it as their value); a dataset without censored rows gets
    /// `-inf`.
    pub fn read_csv<R: Read>(r: R) -> Result<LongitudinalDataset> {
        let reader = BufReader::new(r);
        let mut subjects: Vec<Subject> = Vec::new();
        let mut current_id: Option<usize> = None;
        let mut threshold: Option<f64> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(format!("read error: {e}")))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed.starts_with("subject_id") {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Config(format!(
                    "line {}: expected 5 fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!("line {}: bad {what} '{s}'", lineno + 1))
                })
            };
            let id = fields[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("line {}: bad subject_id", lineno + 1)))?;
            let t = parse(fields[1], "time")?;
            let x = parse(fields[2], "covariate")?;
            let y = parse(fields[3], "response")?;
            let censored = match fields[4].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: censored flag must be 0 or 1, found '{other}'",
                        lineno + 1
                    )))
                }
            };
            if current_id != Some(id) {
                if id != subjects.len() {
                    return Err(Error::Config(format!(
                        "line {}: subject ids must be consecutive from 0",
                        lineno + 1
                    )));
                }
                subjects.push(Subject {
                    times: Vec::new(),
                    covariate: x,
                    values: Vec::new(),
                    censored: Vec::new(),
                });
                current_id = Some(id);
            }
            let subject = subjects.last_mut().expect("pushed above");
            subject.times.push(t);
            subject.values.push(y);
            subject.censored.push(censored);
            if censored {
                match threshold {
                    None => threshold = Some(y),
                    Some(existing) if existing == y => {}
                    Some(existing) => {
                        return Err(Error::Config(format!(
                            "line {}: censored value {y} disagrees with threshold {existing}",
                            lineno + 1
                        )))
                    }
                }
            }
        }
        if subjects.is_empty() {
            return Err(Error::Config("dataset contains no measurements".into()));
        }
        Ok(LongitudinalDataset { subjects, threshold: threshold.unwrap_or(f64::NEG_INFINITY) })
    }
}

/// Simulates a dataset: per subject, 5..=11 measurement times drawn i.i.d.
/// from U[0,6] (sorted), a Bernoulli(0.5) covariate, a Gaussian response with
/// the model covariance, then left censoring at `threshold`.
pub fn generate_dataset(
    params: &ModelParams,
    n_subjects: usize,
    threshold: f64,
    seed: u64,
) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    generate_dataset_with_rng(params, n_subjects, threshold, &mut rng)
}

/// As [`generate_dataset`] with a caller-provided stream (the harness splits
/// one scenario seed into independent per-replicate streams).
pub fn generate_dataset_with_rng<R: Rng>(
    params: &ModelParams,
    n_subjects: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<LongitudinalDataset> {
    params.validate()?;
    if n_subjects == 0 {
        return Err(Error::Config("n_subjects must be at least 1".into()));
    }
    let mut subjects = Vec::with_capacity(n_subjects);
    for _ in 0..n_subjects {
        let k: usize = rng.random_range(5..=11);
        let x = f64::from(rng.random_bool(0.5));
        let mut times: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..6.0)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let cov = params.covariance(&times);
        let chol = linalg::cholesky(&cov).expect("model covariance is PD for valid params");
        let z = DVector::from_iterator(
            k,
            (0..k).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)),
        );
        let y = params.mean_vector(&times, x) + chol.lower() * z;
        let mut values = Vec::with_capacity(k);
        let mut censored = Vec::with_capacity(k);
        for j in 0..k {
            if y[j] < threshold {
                values.push(threshold);
                censored.push(true);
            } else {
                values.push(y[j]);
                censored.push(false);
            }
        }
        subjects.push(Subject { times, covariate: x, values, censored });
    }
    Ok(LongitudinalDataset { subjects, threshold })
}

/// Log-likelihood contribution of one subject: the Gaussian density of the
/// observed measurements times the conditional Gaussian rectangle probability
/// of the censored ones given the observed ones.
pub fn subject_loglik(params: &ModelParams, subject: &Subject, mvn_tol: f64) -> Result<f64> {
    let k = subject.n_measures();
    if k == 0 {
        return Err(Error::Config("subject has no measurements".into()));
    }
    let mu = params.mean_vector(&subject.times, subject.covariate);
    let cov = params.covariance(&subject.times);

    let obs: Vec<usize> = (0..k).filter(|&j| !subject.censored[j]).collect();
    let cen: Vec<usize> = (0..k).filter(|&j| subject.censored[j]).collect();

    if cen.is_empty() {
        let y = DVector::from_iterator(k, subject.values.iter().copied());
        return mvn_logpdf(&y, &mu, &cov);
    }
    if obs.is_empty() {
        let upper = DVector::from_iterator(k, subject.values.iter().copied());
        let p = mvn_cdf(&upper, &mu, &cov, mvn_tol)?;
        return log_probability(p);
    }

    let pick_vec = |idx: &[usize], v: &DVector<f64>| {
        DVector::from_iterator(idx.len(), idx.iter().map(|&j| v[j]))
    };
    let pick_mat = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])])
    };

    let y_obs = DVector::from_iterator(obs.len(), obs.iter().map(|&j| subject.values[j]));
    let mu_obs = pick_vec(&obs, &mu);
    let cov_oo = pick_mat(&obs, &obs);
    let factor = linalg::cholesky(&cov_oo)?;

    let resid = &y_obs - &mu_obs;
    let n_obs = obs.len() as f64;
    let density = -0.5
        * (n_obs * (2.0 * std::f64::consts::PI).ln()
            + factor.log_det()
            + factor.quad_form_inv(&resid));

    // Conditional moments of the censored block given the observed one.
    let cov_oc = pick_mat(&obs, &cen);
    let cov_cc = pick_mat(&cen, &cen);
    let w = factor.solve_matrix(&cov_oc); // Sigma_oo^{-1} Sigma_oc
    let mu_cond = pick_vec(&cen, &mu) + w.transpose() * &resid;
    let mut cov_cond = cov_cc - cov_oc.transpose() * w;
    linalg::symmetrize(&mut cov_cond);

    let upper = DVector::from_iterator(cen.len(), cen.iter().map(|&j| subject.values[j]));
    let p = mvn_cdf(&upper, &mu_cond, &cov_cond, mvn_tol)?;
    Ok(density + log_probability(p)?)
}

fn log_probability(p: f64) -> Result<f64> {
    if p > 0.0 {
        Ok(p.ln())
    } else {
        Err(Error::Evaluation {
            unit: 0,
            reason: "censored-region probability underflowed to zero".into(),
        })
    }
}

/// Likelihood problem over a censored dataset on the unconstrained
/// optimization scale; one unit per subject.
pub struct CensoredMixedModel {
    kind: ModelKind,
    dataset: LongitudinalDataset,
    mvn_tol: f64,
}

impl CensoredMixedModel {
    pub fn new(kind: ModelKind, dataset: LongitudinalDataset) -> Self {
        CensoredMixedModel { kind, dataset, mvn_tol: DEFAULT_MVN_TOL }
    }

    pub fn with_tolerance(mut self, mvn_tol: f64) -> Self {
        self.mvn_tol = mvn_tol;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dataset(&self) -> &LongitudinalDataset {
        &self.dataset
    }

    pub fn natural_params(&self, opt: &DVector<f64>) -> ModelParams {
        self.kind.to_natural(opt)
    }
}

impl LikelihoodProblem for CensoredMixedModel {
    fn dim(&self) -> usize {
        self.kind.dim()
    }
    fn n_units(&self) -> usize {
        self.dataset.subjects.len()
    }
    fn unit_loglik(&self, unit: usize, theta: &DVector<f64>) -> Result<f64> {
        let params = self.kind.to_natural(theta);
        subject_loglik(&params, &self.dataset.subjects[unit], self.mvn_tol).map_err(|e| {
            match e {
                Error::Evaluation { reason, .. } => Error::Evaluation { unit, reason },
                other => Error::Evaluation { unit, reason: other.to_string() },
            }
        })
    }
}

/// Starting values: ordinary least squares on the pooled measurements after
/// imputing the threshold for censored entries, dispersion heuristics from
/// the residual variance, then a Marquardt polish of the imputed-data
/// (uncensored) likelihood. Returns the optimization-scale vector.
pub fn starting_values(kind: ModelKind, dataset: &LongitudinalDataset) -> Result<DVector<f64>> {
    let imputed = dataset.impute_threshold();

    // Pooled OLS for the fixed effects.
    let mut xtx: DMatrix<f64> = DMatrix::zeros(4, 4);
    let mut xty: DVector<f64> = DVector::zeros(4);
    let mut n_rows = 0.0;
    for s in &imputed.subjects {
        for j in 0..s.n_measures() {
            let row = [1.0, s.times[j], s.covariate, s.covariate * s.times[j]];
            for a in 0..4 {
                for b in 0..4 {
                    xtx[(a, b)] += row[a] * row[b];
                }
                xty[a] += row[a] * s.values[j];
            }
            n_rows += 1.0;
        }
    }
    for i in 0..4 {
        xtx[(i, i)] += 1e-8 * xtx[(i, i)].max(1.0);
    }
    let beta = linalg::cholesky(&xtx)?.solve(&xty);

    let mut ss = 0.0;
    for s in &imputed.subjects {
        for j in 0..s.n_measures() {
            let fitted =
                beta[0] + beta[1] * s.times[j] + beta[2] * s.covariate + beta[3] * s.covariate * s.times[j];
            let r = s.values[j] - fitted;
            ss += r * r;
        }
    }
    let s2 = (ss / n_rows).max(1e-4);

    let params = match kind {
        ModelKind::Ar => ModelParams::Ar(ArParams {
            beta: [beta[0], beta[1], beta[2], beta[3]],
            sigma2_w: 0.5 * s2,
            delta: 0.3,
            sigma2_e: 0.5 * s2,
        }),
        ModelKind::Re => ModelParams::Re(ReParams {
            beta: [beta[0], beta[1], beta[2], beta[3]],
            sigma2_0: 0.25 * s2,
            sigma2_1: (s2 / 40.0).max(1e-3),
            sigma_01: 0.0,
            sigma2_e: 0.5 * s2,
        }),
    };
    let theta0 = kind.to_optimization(&params)?;

    // Polish on the imputed (fully observed) likelihood.
    let problem = CensoredMixedModel::new(kind, imputed);
    let fit = optim::fit(&problem, &OptimizerConfig::default(), Algorithm::Marquardt, &theta0);
    if fit.theta_hat.len() == kind.dim() && fit.theta_hat.iter().all(|v| v.is_finite()) {
        Ok(fit.theta_hat)
    } else {
        Ok(theta0)
    }
}
