//! Multivariate normal density and rectangle probabilities.
//!
//! The CDF uses the separation-of-variables transform with a greedy
//! Cholesky variable reordering, integrated by a shifted Kronecker
//! low-discrepancy rule split into fixed batches. The shifts are stored
//! constants, so results are bit-reproducible; the spread of the batch means
//! supplies the error estimate. The point budget is 5e4 per call.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::special::{norm_cdf, norm_pdf, norm_quantile};

/// Maximum supported dimension (subjects carry at most 11 measurements).
pub const MAX_DIM: usize = 11;
/// Total integrand-evaluation budget per call.
pub const POINT_BUDGET: usize = 50_000;

const BATCHES: usize = 8;
const INITIAL_BATCH: usize = 32;
const SHIFT_SEED: u64 = 0x52_56_53_5f_4d_56_4e; // fixed; determinism contract

// sqrt(prime) fractional generators for the Kronecker sequence.
const PRIMES: [f64; MAX_DIM] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0];

fn shifts() -> &'static [[f64; MAX_DIM]; BATCHES] {
    static SHIFTS: OnceLock<[[f64; MAX_DIM]; BATCHES]> = OnceLock::new();
    SHIFTS.get_or_init(|| {
        let mut rng = ChaCha12Rng::seed_from_u64(SHIFT_SEED);
        let mut s = [[0.0; MAX_DIM]; BATCHES];
        for row in s.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random::<f64>();
            }
        }
        s
    })
}

/// Log-density of `N(mean, cov)` at `y`.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let k = y.len();
    assert_eq!(mean.len(), k);
    assert_eq!(cov.nrows(), k);
    let chol = linalg::cholesky(cov)?;
    let r = y - mean;
    let quad = chol.quad_form_inv(&r);
    Ok(-0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + quad))
}

// Reordered Cholesky factor and transformed upper limits for the
// separation-of-variables integrand. Variables are brought forward greedily
// by smallest conditional probability, substituting truncated-normal
// expectations for the integrated-out coordinates.
struct SovTransform {
    lower: DMatrix<f64>,
    limits: Vec<f64>,
}

fn sov_transform(upper: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<SovTransform> {
    let k = upper.len();
    let mut c = cov.clone();
    let mut b: Vec<f64> = (0..k).map(|i| upper[i] - mean[i]).collect();
    let max_diag = (0..k).map(|i| cov[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    if !(max_diag > 0.0) {
        return Err(Error::NotPositiveDefinite { index: 0, pivot: max_diag });
    }
    let threshold = linalg::PIVOT_RTOL * max_diag;
    let mut y_exp = vec![0.0; k];

    for j in 0..k {
        // Pick the remaining variable with the smallest conditional
        // probability given the already-transformed coordinates.
        let mut best = j;
        let mut best_p = f64::INFINITY;
        for i in j..k {
            let mut s2 = c[(i, i)];
            let mut num = b[i];
            for l in 0..j {
                s2 -= c[(i, l)] * c[(i, l)];
                num -= c[(i, l)] * y_exp[l];
            }
            let p = if s2 > threshold { norm_cdf(num / s2.sqrt()) } else if num >= 0.0 { 1.0 } else { 0.0 };
            if p < best_p {
                best_p = p;
                best = i;
            }
        }
        if best != j {
            c.swap_rows(j, best);
            c.swap_columns(j, best);
            b.swap(j, best);
        }

        let mut d = c[(j, j)];
        for l in 0..j {
            d -= c[(j, l)] * c[(j, l)];
        }
        if !(d > threshold) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let cjj = d.sqrt();
        c[(j, j)] = cjj;
        for i in j + 1..k {
            let mut s = c[(i, j)];
            for l in 0..j {
                s -= c[(i, l)] * c[(j, l)];
            }
            c[(i, j)] = s / cjj;
        }
        for i in 0..j {
            c[(i, j)] = 0.0;
        }

        // Expected value of the conditioning coordinate under truncation.
        let mut num = b[j];
        for l in 0..j {
            num -= c[(j, l)] * y_exp[l];
        }
        let e_std = num / cjj;
        let p = norm_cdf(e_std);
        y_exp[j] = if p > 1e-300 { -norm_pdf(e_std) / p } else { -e_std.abs() - 1.0 };
    }

    Ok(SovTransform { lower: c, limits: b })
}

impl SovTransform {
    // Integrand over the unit cube of dimension k-1.
    fn evaluate(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let k = self.limits.len();
        let l = &self.lower;
        let mut e = norm_cdf(self.limits[0] / l[(0, 0)]);
        let mut p = e;
        for i in 1..k {
            if p == 0.0 {
                return 0.0;
            }
            let t = (w[i - 1] * e).clamp(1e-300, 1.0 - 1e-16);
            y[i - 1] = norm_quantile(t);
            let mut num = self.limits[i];
            for j in 0..i {
                num -= l[(i, j)] * y[j];
            }
            e = norm_cdf(num / l[(i, i)]);
            p *= e;
        }
        p
    }
}

/// `P(Z <= upper)` for `Z ~ N(mean, cov)` with estimated absolute error at
/// most `tol`; fails with the error estimate if the point budget runs out
/// first. Deterministic: the rule and its shifts are fixed.
pub fn mvn_cdf(upper: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>, tol: f64) -> Result<f64> {
    let k = upper.len();
    if k == 0 || k > MAX_DIM {
        return Err(Error::Config(format!("mvn_cdf supports dimensions 1..={MAX_DIM}, got {k}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config("mvn_cdf tolerance must be positive".into()));
    }
    assert_eq!(mean.len(), k);
    assert_eq!(cov.nrows(), k);
    assert_eq!(cov.ncols(), k);

    if k == 1 {
        let s2 = cov[(0, 0)];
        if !(s2 > 0.0) {
            return Err(Error::NotPositiveDefinite { index: 0, pivot: s2 });
        }
        return Ok(norm_cdf((upper[0] - mean[0]) / s2.sqrt()));
    }

    let transform = sov_transform(upper, mean, cov)?;
    let qdim = k - 1;
    let shifts = shifts();

    let mut sums = [0.0f64; BATCHES];
    let mut count_per_batch: usize = 0;
    let mut next_index: usize = 1;
    let mut round = INITIAL_BATCH;
    let mut y = vec![0.0; qdim];
    let mut w = vec![0.0; qdim];

    loop {
        for s in next_index..next_index + round {
            let sf = s as f64;
            for (b, sums_b) in sums.iter_mut().enumerate() {
                for j in 0..qdim {
                    let v = sf * PRIMES[j].sqrt() + shifts[b][j];
                    // Tent transform of the shifted Kronecker point.
                    w[j] = (2.0 * v.fract() - 1.0).abs();
                }
                *sums_b += transform.evaluate(&w, &mut y);
            }
        }
        next_index += round;
        count_per_batch += round;

        let means: Vec<f64> = sums.iter().map(|s| s / count_per_batch as f64).collect();
        let grand = means.iter().sum::<f64>() / BATCHES as f64;
        let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>()
            / (BATCHES as f64 - 1.0);
        let err = 3.0 * (var / BATCHES as f64).sqrt();
        let total = count_per_batch * BATCHES;
        if err <= tol {
            return Ok(grand.clamp(0.0, 1.0));
        }
        if total >= POINT_BUDGET {
            return Err(Error::IntegrationTolerance { requested: tol, estimate: err });
        }
        // Double the sample each round, clipped to the remaining budget.
        round = count_per_batch.min((POINT_BUDGET - total).div_ceil(BATCHES));
    }
}
