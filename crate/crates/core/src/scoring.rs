//! Scoring matrix `G = sum_i U_i U_i^T - eta/n * U U^T` with the
//! positive-definiteness safeguard ladder and the penalized-likelihood
//! variant.
//!
//! `eta = 1` gives the centered variance estimator of the score; `eta = 0`
//! gives the plain outer-product sum. When the requested `eta` produces a
//! matrix whose Cholesky fails, the ladder first lowers `eta` through
//! `{0.9, 0.5, 0}` and then adds a diagonal ridge proportional to the mean
//! diagonal entry.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::ScoreBundle;
use crate::linalg::{self, CholeskyFactor};

const ETA_LADDER: [f64; 3] = [0.9, 0.5, 0.0];
const RIDGE_LADDER: [f64; 4] = [1e-8, 1e-6, 1e-4, 1e-2];

/// Symmetric positive-definite scoring matrix with its cached Cholesky
/// factor and a record of the safeguards actually applied.
#[derive(Debug, Clone)]
pub struct ScoringMatrix {
    g: DMatrix<f64>,
    eta: f64,
    ridge: f64,
    chol: CholeskyFactor,
}

impl ScoringMatrix {
    /// Wraps an externally built symmetric PD matrix (used for the damped
    /// Newton metric `H + lambda I`, where `ridge` records `lambda`).
    pub fn from_spd(g: DMatrix<f64>, eta: f64, ridge: f64) -> Result<Self> {
        let chol = linalg::cholesky(&g)?;
        Ok(ScoringMatrix { g, eta, ridge, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Correction weight actually used.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Diagonal inflation actually applied (0 when none was needed).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn cholesky(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// `G^{-1} v` through the cached triangular factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve_matrix(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `v^T G^{-1} v`.
    pub fn quad_form_inv(&self, v: &DVector<f64>) -> f64 {
        self.chol.quad_form_inv(v)
    }
}

fn raw_g(bundle: &ScoreBundle, eta: f64) -> DMatrix<f64> {
    let n = bundle.n_units() as f64;
    let u = &bundle.total_score;
    let mut g = bundle.scores.transpose() * &bundle.scores;
    if eta != 0.0 {
        let corr = u * u.transpose() * (eta / n);
        g -= corr;
    }
    linalg::symmetrize(&mut g);
    g
}

/// Builds the scoring matrix at the bundle's parameter point.
///
/// The requested `eta` is tried first; on Cholesky failure the safeguard
/// ladder lowers `eta` and finally adds a ridge to the `eta = 0` matrix. The
/// values actually used are recorded on the result.
pub fn build_g(bundle: &ScoreBundle, eta: f64) -> Result<ScoringMatrix> {
    build_g_with_curvature(bundle, eta, None)
}

/// Penalized variant: adds the penalty curvature so that near the maximum
/// `G` approximates the curvature of the negative penalized log-likelihood.
/// In the minimization frame the convex penalty curvature is added.
pub fn build_g_penalized(
    bundle: &ScoreBundle,
    eta: f64,
    penalty: &Penalty,
    theta: &DVector<f64>,
) -> Result<ScoringMatrix> {
    let m = bundle.dim();
    let curv = penalty.hessian(theta);
    if curv.nrows() != m || curv.ncols() != m {
        return Err(Error::Config(format!(
            "penalty curvature is {}x{}, expected {m}x{m}",
            curv.nrows(),
            curv.ncols()
        )));
    }
    if penalty.is_quadratic() {
        let asym = (&curv - curv.transpose()).norm();
        let scale = curv.norm().max(1.0);
        if asym > 1e-10 * scale {
            return Err(Error::Config("quadratic penalty curvature is not symmetric".into()));
        }
        let min_eig = linalg::min_eigenvalue(&curv);
        if min_eig < -1e-10 * scale {
            return Err(Error::Config(format!(
                "quadratic penalty curvature is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
    }
    build_g_with_curvature(bundle, eta, Some(&curv))
}

fn build_g_with_curvature(
    bundle: &ScoreBundle,
    eta: f64,
    extra: Option<&DMatrix<f64>>,
) -> Result<ScoringMatrix> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0,1], got {eta}")));
    }
    let assemble = |e: f64, ridge: f64| -> DMatrix<f64> {
        let mut g = raw_g(bundle, e);
        if let Some(c) = extra {
            g += c;
        }
        if ridge > 0.0 {
            for i in 0..g.nrows() {
                g[(i, i)] += ridge;
            }
        }
        g
    };

    let mut etas = vec![eta];
    etas.extend(ETA_LADDER.iter().copied().filter(|&e| e < eta));
    for &e in &etas {
        let g = assemble(e, 0.0);
        if let Ok(chol) = linalg::cholesky(&g) {
            return Ok(ScoringMatrix { g, eta: e, ridge: 0.0, chol });
        }
    }

    let base = assemble(0.0, 0.0);
    let diag_mean = (0..base.nrows()).map(|i| base[(i, i)]).sum::<f64>() / base.nrows() as f64;
    if !(diag_mean > 0.0) {
        // A nonpositive mean diagonal means the scores themselves vanish;
        // a relative ridge cannot rescue that.
        return Err(Error::SingularScoringMatrix {
            min_eigenvalue: linalg::min_eigenvalue(&base),
        });
    }
    for &lam in &RIDGE_LADDER {
        let ridge = lam * diag_mean;
        let g = assemble(0.0, ridge);
        if let Ok(chol) = linalg::cholesky(&g) {
            return Ok(ScoringMatrix { g, eta: 0.0, ridge, chol });
        }
    }

    Err(Error::SingularScoringMatrix { min_eigenvalue: linalg::min_eigenvalue(&assemble(eta, 0.0)) })
}

/// Smooth penalty `J(theta, kappa)` with its curvature, for penalized
/// likelihood `pl = L - J`.
pub struct Penalty {
    value: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    hessian: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    kappa: DVector<f64>,
    quadratic: bool,
}

impl Penalty {
    pub fn new(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        hessian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        kappa: DVector<f64>,
    ) -> Self {
        Penalty { value: Box::new(value), hessian: Box::new(hessian), kappa, quadratic: false }
    }

    /// Quadratic roughness penalty `J = kappa/2 * theta' C theta` with
    /// constant curvature `kappa * C`; declares itself quadratic so the PSD
    /// check applies.
    pub fn quadratic(kappa: f64, curvature: DMatrix<f64>) -> Self {
        let c_val = curvature.clone();
        let c_hess = curvature;
        Penalty {
            value: Box::new(move |theta| 0.5 * kappa * theta.dot(&(&c_val * theta))),
            hessian: Box::new(move |_| &c_hess * kappa),
            kappa: DVector::from_element(1, kappa),
            quadratic: true,
        }
    }

    /// Null penalty (J identically zero).
    pub fn none(dim: usize) -> Self {
        Penalty {
            value: Box::new(|_| 0.0),
            hessian: Box::new(move |_| DMatrix::zeros(dim, dim)),
            kappa: DVector::zeros(0),
            quadratic: true,
        }
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        (self.value)(theta)
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(theta)
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    pub fn is_quadratic(&self) -> bool {
        self.quadratic
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(rows: &[&[f64]]) -> ScoreBundle {
        let n = rows.len();
        let m = rows[0].len();
        let mut scores = DMatrix::zeros(n, m);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                scores[(i, j)] = v;
            }
        }
        ScoreBundle::from_scores(DVector::zeros(m), scores, 0.0)
    }

    #[test]
    fn cancelling_scores_give_plain_outer_product() {
        // U = 0, so the correction term vanishes: G = 1 + 1 = 2.
        let b = bundle(&[&[1.0], &[-1.0]]);
        let g = build_g(&b, 1.0).unwrap();
        assert!((g.matrix()[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(g.eta(), 1.0);
        assert_eq!(g.ridge(), 0.0);
    }

    #[test]
    fn single_unit_degeneracy_triggers_safeguard() {
        // n = 1, eta = 1: u^2 - u^2 = 0; the ladder must recover.
        let b = bundle(&[&[3.0]]);
        let g = build_g(&b, 1.0).unwrap();
        assert!(g.eta() < 1.0 || g.ridge() > 0.0);
        // First ladder entry: eta = 0.9 gives 0.1 * u^2 = 0.9.
        assert!((g.matrix()[(0, 0)] - 0.9).abs() < 1e-12);
        assert_eq!(g.eta(), 0.9);
    }

    #[test]
    fn hand_computed_two_dim_matrix() {
        let b = bundle(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let g = build_g(&b, 1.0).unwrap();
        // Brute-force the same sum for cross-checking.
        let mut expect = DMatrix::zeros(2, 2);
        for r in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
            let v = DVector::from_column_slice(&r);
            expect += &v * v.transpose();
        }
        let u = DVector::from_column_slice(&[2.0, 2.0]);
        expect -= &u * u.transpose() / 3.0;
        assert!((g.matrix() - &expect).norm() < 1e-14);
        let handmade = DMatrix::from_row_slice(
            2,
            2,
            &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0],
        );
        assert!((g.matrix() - &handmade).norm() < 1e-14);
    }

    #[test]
    fn eta_zero_is_plain_outer_product_sum() {
        let b = bundle(&[&[1.0, 2.0], &[0.5, -1.0], &[2.0, 0.0]]);
        let g = build_g(&b, 0.0).unwrap();
        let expect = b.scores.transpose() * &b.scores;
        assert!((g.matrix() - &expect).norm() < 1e-14);
    }

    #[test]
    fn solve_diagonal_and_hand_case() {
        let g = ScoringMatrix::from_spd(DMatrix::from_diagonal_element(2, 2, 2.0), 1.0, 0.0)
            .unwrap();
        let x = g.solve(&DVector::from_column_slice(&[4.0, 6.0]));
        assert!((x - DVector::from_column_slice(&[2.0, 3.0])).norm() < 1e-14);

        let b = bundle(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let g = build_g(&b, 1.0).unwrap();
        let x = g.solve(&DVector::from_column_slice(&[1.0, 0.0]));
        assert!((x - DVector::from_column_slice(&[2.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn penalized_reduces_to_unpenalized_for_null_penalty() {
        let b = bundle(&[&[1.0, 0.3], &[-0.4, 1.0], &[0.7, -0.2]]);
        let g0 = build_g(&b, 1.0).unwrap();
        let gp = build_g_penalized(&b, 1.0, &Penalty::none(2), &DVector::zeros(2)).unwrap();
        assert!((g0.matrix() - gp.matrix()).norm() < 1e-15);
    }

    #[test]
    fn quadratic_penalty_adds_constant_curvature() {
        let b = bundle(&[&[1.0, 0.3], &[-0.4, 1.0], &[0.7, -0.2]]);
        let g0 = build_g(&b, 1.0).unwrap();
        let pen = Penalty::quadratic(2.0, DMatrix::identity(2, 2));
        let gp = build_g_penalized(&b, 1.0, &pen, &DVector::zeros(2)).unwrap();
        let diff = gp.matrix() - g0.matrix();
        assert!((diff - DMatrix::from_diagonal_element(2, 2, 2.0)).norm() < 1e-13);
    }

    #[test]
    fn roughness_penalty_curvature_is_second_difference_form() {
        // Second-difference roughness on 4 coefficients: J = k/2 |D theta|^2,
        // curvature k D'D.
        let d = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
        let dtd = d.transpose() * &d;
        let pen = Penalty::quadratic(1.0, dtd.clone());
        let b = bundle(&[
            &[1.0, 0.1, 0.0, 0.2],
            &[0.0, 1.0, -0.1, 0.3],
            &[0.2, -0.3, 1.0, 0.0],
            &[0.1, 0.0, 0.4, 1.0],
            &[-0.2, 0.5, 0.0, 0.7],
        ]);
        let g0 = build_g(&b, 1.0).unwrap();
        let gp = build_g_penalized(&b, 1.0, &pen, &DVector::zeros(4)).unwrap();
        assert!((gp.matrix() - g0.matrix() - &dtd).norm() < 1e-12);
        let theta = DVector::from_column_slice(&[1.0, 2.0, 3.0, 5.0]);
        let dv = &d * &theta;
        assert!((pen.value(&theta) - 0.5 * dv.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn non_psd_quadratic_penalty_rejected() {
        let pen = Penalty::quadratic(1.0, DMatrix::from_diagonal_element(2, 2, -1.0));
        let b = bundle(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(
            build_g_penalized(&b, 1.0, &pen, &DVector::zeros(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn affine_reparameterization_identity() {
        // eta = A theta + a transforms scores by U_i -> A^{-T} U_i and the
        // matrices satisfy G_theta = A' G_eta A exactly.
        let rows: Vec<Vec<f64>> = vec![
            vec![0.7, -0.3, 1.2],
            vec![-0.5, 0.8, 0.1],
            vec![1.1, 0.4, -0.9],
            vec![0.2, -1.3, 0.5],
        ];
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -0.3, 1.5, 0.2, 0.1, 0.0, 0.8]);
        let a_inv_t = a.clone().try_inverse().unwrap().transpose();
        let theta_rows: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let b_theta = bundle(&theta_rows);
        let mut eta_scores = DMatrix::zeros(4, 3);
        for (i, r) in rows.iter().enumerate() {
            let u = DVector::from_column_slice(r);
            let ue = &a_inv_t * u;
            for j in 0..3 {
                eta_scores[(i, j)] = ue[j];
            }
        }
        let b_eta = ScoreBundle::from_scores(DVector::zeros(3), eta_scores, 0.0);
        for eta_weight in [0.0, 0.5, 1.0] {
            let g_theta = build_g(&b_theta, eta_weight).unwrap();
            let g_eta = build_g(&b_eta, eta_weight).unwrap();
            let mapped = a.transpose() * g_eta.matrix() * &a;
            let rel = (g_theta.matrix() - &mapped).norm() / g_theta.matrix().norm();
            assert!(rel < 1e-10, "eta {eta_weight}: relative error {rel}");
        }
    }

    #[test]
    fn exhausted_ladder_reports_singularity() {
        // All-zero scores cannot be rescued by eta or a relative ridge.
        let b = bundle(&[&[0.0, 0.0], &[0.0, 0.0]]);
        match build_g(&b, 1.0) {
            Err(Error::SingularScoringMatrix { min_eigenvalue }) => {
                assert!(min_eigenvalue.abs() < 1e-12);
            }
            other => panic!("expected singularity, got {other:?}"),
        }
    }
}
