//! Estimation of shared-representation reward models from comparisons.
//!
//! The maximum-likelihood program
//!
//! ```text
//! max_{ωωᵀ=I, ‖θᵢ‖≤B} Σᵢ Σⱼ log Φ(±⟨ω(φ₀ − φ₁), θᵢ⟩)
//! ```
//!
//! is solved by alternating ascent: per-user projected gradient steps on
//! the θᵢ (the objective is concave in θ for fixed ω because the link is
//! log-concave) and Riemannian gradient steps on ω with a QR retraction
//! onto the orthonormal manifold. The confidence radius
//!
//! ```text
//! ζ′ = C₈·(k·ξ²κ²·L/(η²·N·N_p) + ξ²·(k + log(N/δ))/(η²·N_p) + λB²)
//! ```
//!
//! uses the link constants over [−2R_max, 2R_max]
//!
//! ```text
//! ξ = max |Φ′/Φ|,   κ = (min Φ′)⁻¹,   η = min (Φ′² − Φ″Φ)/Φ²
//! ```
//!
//! with L a configurable complexity term standing in for the bracketing
//! log; the default is the linear-representation bound
//! (dk + Nk)·log(R_max·N·N_p/δ). Transfer fits for a new user freeze ω̂
//! and use the log(1/δ) radius variant.
//!
//! Representations are only identified up to a k×k orthonormal transform,
//! so recovery is evaluated after a Procrustes alignment.

mod cluster;
mod solver;

pub use cluster::{cluster_fit, Clustering};
pub use solver::{
    dataset_log_likelihood, mle_fit, omega_euclidean_gradient, theta_gradient, transfer_fit,
    user_log_likelihood, FitLogRow, FitOutcome, TransferOutcome,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::Link;
use crate::model::ComparisonDatum;
use crate::sobol;

/// Solver and confidence-set configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Outer alternating iterations.
    pub max_iters: usize,
    /// θ ascent steps per user per outer iteration.
    pub inner_iters: usize,
    /// Initial step size for both blocks (backtracked).
    pub step_size: f64,
    /// Stop when the projected-gradient norm falls below this.
    pub tol: f64,
    /// Random restarts; the best run by log-likelihood wins.
    pub restarts: usize,
    /// Ridge λ > 0 added to empirical designs.
    pub lambda: f64,
    /// Stand-in for the bracketing log `log(N_G(1/(N·N_p))/δ)`.
    /// `None` selects the linear-representation default.
    pub complexity_term: Option<f64>,
    /// Confidence level parameter δ ∈ (0, 1].
    pub delta: f64,
    /// Leading constant C₈ of the radius.
    pub c8: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            inner_iters: 4,
            step_size: 0.5,
            tol: 1e-6,
            restarts: 2,
            lambda: 0.01,
            complexity_term: None,
            delta: 0.1,
            c8: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::Validation("tol must be positive".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Validation("lambda must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) || self.delta == 0.0 {
            return Err(Error::Validation("delta must be in (0, 1]".into()));
        }
        if self.step_size <= 0.0 || self.max_iters == 0 || self.inner_iters == 0 {
            return Err(Error::Validation(
                "step size and iteration budgets must be positive".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::Validation("need at least one restart".into()));
        }
        Ok(())
    }
}

/// Problem dimensions feeding the confidence radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDims {
    /// Representation dimension k.
    pub rep_dim: usize,
    /// Feature dimension d.
    pub feat_dim: usize,
    pub n_users: usize,
    /// Comparisons per user.
    pub n_pairs: usize,
    pub bound_b: f64,
    pub r_max: f64,
}

/// Link curvature constants over [−2R_max, 2R_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConstants {
    /// max |Φ′/Φ|.
    pub xi: f64,
    /// (min Φ′)⁻¹.
    pub kappa: f64,
    /// min (Φ′² − Φ″Φ)/Φ²; positive iff the link is log-concave there.
    pub eta: f64,
}

const CONSTANTS_GRID: usize = 10_000;

/// Compute (ξ, κ, η) for a link over [−2R_max, 2R_max]. Links with a
/// closed form use it; others are scanned on a 10⁴-point grid.
pub fn link_constants(link: &dyn Link, r_max: f64) -> Result<LinkConstants> {
    if r_max < 0.0 || !r_max.is_finite() {
        return Err(Error::Domain(format!(
            "R_max must be a nonnegative real, got {r_max}"
        )));
    }
    let (xi, kappa, eta) = match link.closed_form_constants(r_max) {
        Some((xi, inv_min_dphi, eta)) => (xi, inv_min_dphi, eta),
        None => {
            let half_span = 2.0 * r_max;
            let mut xi = f64::NEG_INFINITY;
            let mut min_dphi = f64::INFINITY;
            let mut eta = f64::INFINITY;
            for t in 0..=CONSTANTS_GRID {
                let x = -half_span + 2.0 * half_span * t as f64 / CONSTANTS_GRID as f64;
                let (p, dp, d2p) = (link.phi(x), link.dphi(x), link.d2phi(x));
                xi = xi.max((dp / p).abs());
                min_dphi = min_dphi.min(dp);
                eta = eta.min((dp * dp - d2p * p) / (p * p));
            }
            if min_dphi <= 0.0 {
                return Err(Error::Validation(format!(
                    "link {} is not strictly increasing on [-2R, 2R] (min phi' = {min_dphi})",
                    link.name()
                )));
            }
            (xi, 1.0 / min_dphi, eta)
        }
    };
    if eta <= 0.0 {
        return Err(Error::Validation(format!(
            "link {} is not log-concave on [-2R, 2R] (eta = {eta})",
            link.name()
        )));
    }
    Ok(LinkConstants { xi, kappa, eta })
}

/// Default complexity term for the linear representation class:
/// (dk + Nk)·log(R_max·N·N_p/δ).
pub fn default_complexity_term(dims: FitDims, delta: f64) -> f64 {
    let (d, k, n, np) = (
        dims.feat_dim as f64,
        dims.rep_dim as f64,
        dims.n_users as f64,
        dims.n_pairs as f64,
    );
    (d * k + n * k) * (dims.r_max * n * np / delta).ln().max(1.0)
}

fn radius(cfg: &FitConfig, consts: &LinkConstants, dims: FitDims, log_term: f64) -> f64 {
    let complexity = cfg
        .complexity_term
        .unwrap_or_else(|| default_complexity_term(dims, cfg.delta));
    let (k, n, np) = (
        dims.rep_dim as f64,
        dims.n_users as f64,
        dims.n_pairs as f64,
    );
    let xi2 = consts.xi * consts.xi;
    let eta2 = consts.eta * consts.eta;
    cfg.c8
        * (k * xi2 * consts.kappa * consts.kappa * complexity / (eta2 * n * np)
            + xi2 * (k + log_term) / (eta2 * np)
            + cfg.lambda * dims.bound_b * dims.bound_b)
}

/// Confidence radius ζ′ for the joint fit (log(N/δ) concentration term).
pub fn confidence_radius(cfg: &FitConfig, consts: &LinkConstants, dims: FitDims) -> f64 {
    radius(cfg, consts, dims, (dims.n_users as f64 / cfg.delta).ln())
}

/// Radius variant for a transfer fit: log(1/δ) in place of log(N/δ).
pub fn transfer_radius(cfg: &FitConfig, consts: &LinkConstants, dims: FitDims) -> f64 {
    radius(cfg, consts, dims, (1.0 / cfg.delta).ln())
}

/// A per-user confidence ellipsoid {θ : ‖θ − center‖²_design ≤ radius}.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceEllipsoid {
    center: DVector<f64>,
    design: DMatrix<f64>,
    radius: f64,
}

impl ConfidenceEllipsoid {
    /// `design` must be symmetric positive definite (Σ̂ + λI with λ > 0).
    pub fn new(center: DVector<f64>, design: DMatrix<f64>, radius: f64) -> Result<Self> {
        if radius < 0.0 || !radius.is_finite() {
            return Err(Error::Validation(format!(
                "ellipsoid radius must be a nonnegative real, got {radius}"
            )));
        }
        if design.nrows() != design.ncols() || design.nrows() != center.len() {
            return Err(Error::Shape {
                what: "ellipsoid design",
                expected: center.len(),
                got: design.nrows(),
            });
        }
        if design.clone().cholesky().is_none() {
            return Err(Error::Validation(
                "ellipsoid design must be positive definite".into(),
            ));
        }
        Ok(Self {
            center,
            design,
            radius,
        })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// ‖v‖_{design⁻¹}, with a floor-regularized retry if the
    /// factorization degenerates numerically.
    pub fn inv_design_norm(&self, v: &DVector<f64>) -> f64 {
        let mut design = self.design.clone();
        let mut floor = 0.0;
        for _ in 0..12 {
            if let Some(chol) = design.clone().cholesky() {
                let y = chol.solve(v);
                return v.dot(&y).max(0.0).sqrt();
            }
            floor = if floor == 0.0 { 1e-10 } else { floor * 10.0 };
            log::warn!("singular ellipsoid design; applying floor {floor}");
            design = &self.design + DMatrix::identity(design.nrows(), design.ncols()) * floor;
        }
        f64::INFINITY
    }
}

/// Joint estimate of the representation and all user parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// k×d representation, orthonormal rows (within solver tolerance).
    pub omega_hat: DMatrix<f64>,
    pub thetas_hat: Vec<DVector<f64>>,
    /// Per-user empirical designs Σ̂ᵢ = (1/N_p)·Σⱼ xⱼxⱼᵀ with
    /// xⱼ = ω̂(φ₀ − φ₁).
    pub designs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub bound_b: f64,
}

impl Estimate {
    pub fn rep_dim(&self) -> usize {
        self.omega_hat.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.thetas_hat.len()
    }

    /// Θ̂ as a k×N matrix.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        let k = self.rep_dim();
        DMatrix::from_fn(k, self.n_users(), |r, c| self.thetas_hat[c][r])
    }

    /// The user's ellipsoid at ridge `lambda` and radius `zeta`.
    pub fn ellipsoid(&self, user: usize, lambda: f64, zeta: f64) -> Result<ConfidenceEllipsoid> {
        if user >= self.n_users() {
            return Err(Error::Input(format!(
                "user {user} out of range for {} users",
                self.n_users()
            )));
        }
        let k = self.rep_dim();
        let design = &self.designs[user] + DMatrix::identity(k, k) * lambda;
        ConfidenceEllipsoid::new(self.thetas_hat[user].clone(), design, zeta)
    }
}

/// Best orthonormal alignment of an estimated parameter matrix to a
/// reference: P minimizing ‖Θ̂ − PᵀΘ⋆‖_F, via the SVD of Θ⋆Θ̂ᵀ.
/// Returns (P, attained Frobenius residual).
pub fn procrustes_align(
    theta_hat: &DMatrix<f64>,
    theta_star: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    if theta_hat.shape() != theta_star.shape() {
        return Err(Error::Shape {
            what: "parameter matrices",
            expected: theta_star.ncols(),
            got: theta_hat.ncols(),
        });
    }
    let k = theta_hat.nrows();
    let m = theta_star * theta_hat.transpose();
    let svd = m.svd(true, true);
    let rank_tol = 1e-12 * svd.singular_values.max().max(1.0);
    if svd.singular_values.iter().any(|&s| s < rank_tol) {
        log::warn!("procrustes product is rank-deficient; the minimizer is not unique");
    }
    let u = svd.u.ok_or_else(|| Error::Numerical {
        what: "svd failed to produce U".into(),
        iter: 0,
    })?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical {
        what: "svd failed to produce V^T".into(),
        iter: 0,
    })?;
    let p = &u * &vt;
    debug_assert!((&p * p.transpose() - DMatrix::identity(k, k)).norm() < 1e-10);
    let residual = (theta_hat - p.transpose() * theta_star).norm();
    Ok((p, residual))
}

/// Grid lower bound of the label discrepancy between two users' data:
/// max over the θ grid of |mean log-likelihood on `data_i` − mean
/// log-likelihood on `data_j`| under the frozen representation.
pub fn label_discrepancy(
    data_i: &[&ComparisonDatum],
    data_j: &[&ComparisonDatum],
    omega: &DMatrix<f64>,
    theta_grid: &[DVector<f64>],
    link: &dyn Link,
) -> Result<f64> {
    if theta_grid.is_empty() {
        return Err(Error::Input("theta grid is empty".into()));
    }
    if data_i.is_empty() || data_j.is_empty() {
        return Err(Error::Input(
            "label discrepancy needs data on both sides".into(),
        ));
    }
    let mut best: f64 = 0.0;
    for theta in theta_grid {
        let mean_i = user_log_likelihood(data_i, omega, theta, link)? / data_i.len() as f64;
        let mean_j = user_log_likelihood(data_j, omega, theta, link)? / data_j.len() as f64;
        best = best.max((mean_i - mean_j).abs());
    }
    Ok(best)
}

/// The default discrepancy grid: a 4096-point low-discrepancy set in the
/// radius-`b` ball.
pub fn default_theta_grid(k: usize, b: f64) -> Result<Vec<DVector<f64>>> {
    Ok(sobol::ball_grid(k, b, 4096)?
        .into_iter()
        .map(DVector::from_vec)
        .collect())
}
