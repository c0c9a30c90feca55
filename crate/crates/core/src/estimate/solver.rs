//! Alternating maximum-likelihood solver.
//!
//! Per-user data is cached as a matrix of feature differences
//! Z_i (N_p×d) with outcome signs s ∈ {±1}; for a representation ω the
//! projected features are X_i = Z_i ωᵀ and each datum contributes
//! log Φ(sⱼ·⟨xⱼ, θᵢ⟩) to the likelihood. Gradients:
//!
//! ```text
//! ∇_θᵢ ℓ = Xᵢᵀ c        with cⱼ = sⱼ·Φ′(uⱼ)/Φ(uⱼ), uⱼ = sⱼ⟨xⱼ, θᵢ⟩
//! ∇_ω  ℓ = Σᵢ θᵢ (Zᵢᵀ cᵢ)ᵀ
//! ```
//!
//! The θ block takes projected gradient ascent steps onto the B-ball
//! (backtracked, so the likelihood never decreases); the ω block takes a
//! Riemannian step: the Euclidean gradient is projected onto the tangent
//! space of {ω : ωωᵀ = I} and retracted with a thin QR factorization.
//! Convergence is declared on the joint projected-gradient norm.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::Link;
use crate::model::{ComparisonDatum, Dataset};

use super::{ConfidenceEllipsoid, Estimate, FitConfig, FitDims};

const MAX_BACKTRACKS: usize = 40;
/// Orthonormality tolerance after projection steps.
const RETRACTION_TOL: f64 = 1e-8;

/// One row of the fit log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitLogRow {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

/// A fitted estimate plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub estimate: Estimate,
    pub converged: bool,
    /// Terminal projected-gradient norm.
    pub grad_norm: f64,
    pub iterations: usize,
    pub trace: Vec<FitLogRow>,
}

/// Transfer fit for a new user against a frozen representation.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub theta: DVector<f64>,
    pub ellipsoid: ConfidenceEllipsoid,
    pub log_likelihood: f64,
    pub converged: bool,
}

/// Per-user cached data: differences, signs, and projected features.
struct UserBlock {
    /// N_p×d matrix of φ(τ₀) − φ(τ₁).
    z: DMatrix<f64>,
    /// +1 for o = 0, −1 for o = 1.
    signs: Vec<f64>,
    /// Z·ωᵀ under the current representation.
    x: DMatrix<f64>,
}

impl UserBlock {
    fn new(records: &[&ComparisonDatum], dim: usize) -> Self {
        let n = records.len();
        let mut z = DMatrix::zeros(n, dim);
        let mut signs = Vec::with_capacity(n);
        for (j, rec) in records.iter().enumerate() {
            for c in 0..dim {
                z[(j, c)] = rec.feat0.0[c] - rec.feat1.0[c];
            }
            signs.push(if rec.outcome == 0 { 1.0 } else { -1.0 });
        }
        Self {
            z,
            signs,
            x: DMatrix::zeros(n, 0),
        }
    }

    fn project(&mut self, omega: &DMatrix<f64>) {
        self.x = &self.z * omega.transpose();
    }

    fn log_likelihood(&self, theta: &DVector<f64>, link: &dyn Link) -> f64 {
        let g = &self.x * theta;
        g.iter()
            .zip(&self.signs)
            .map(|(&gj, &sj)| link.log_phi(sj * gj))
            .sum()
    }

    /// cⱼ = sⱼ·Φ′(uⱼ)/Φ(uⱼ).
    fn coefficients(&self, theta: &DVector<f64>, link: &dyn Link) -> DVector<f64> {
        let g = &self.x * theta;
        DVector::from_iterator(
            g.len(),
            g.iter()
                .zip(&self.signs)
                .map(|(&gj, &sj)| sj * link.ratio(sj * gj)),
        )
    }

    fn theta_gradient(&self, theta: &DVector<f64>, link: &dyn Link) -> DVector<f64> {
        self.x.tr_mul(&self.coefficients(theta, link))
    }
}

fn project_ball(theta: &DVector<f64>, b: f64) -> DVector<f64> {
    let n = theta.norm();
    if n > b {
        theta * (b / n)
    } else {
        theta.clone()
    }
}

/// Projected-gradient stationarity measure ‖θ − Π_B(θ + ∇)‖ (equals the
/// gradient norm at interior points).
fn gradient_mapping(theta: &DVector<f64>, grad: &DVector<f64>, b: f64) -> f64 {
    (theta - project_ball(&(theta + grad), b)).norm()
}

/// One backtracked projected ascent step; never decreases the likelihood.
fn theta_step(block: &UserBlock, theta: &mut DVector<f64>, link: &dyn Link, b: f64, step: f64) {
    let grad = block.theta_gradient(theta, link);
    if grad.norm() == 0.0 {
        return;
    }
    let current = block.log_likelihood(theta, link);
    let mut t = step;
    for _ in 0..MAX_BACKTRACKS {
        let cand = project_ball(&(&*theta + &grad * t), b);
        if block.log_likelihood(&cand, link) >= current {
            *theta = cand;
            return;
        }
        t *= 0.5;
    }
}

/// Thin QR retraction back onto {W : WᵀW = I}, sign-fixed so the map is
/// deterministic.
fn qr_retract(w: DMatrix<f64>) -> DMatrix<f64> {
    let k = w.ncols();
    let qr = w.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Euclidean → tangent-space projection at W (orthonormal columns):
/// ξ = G − W·sym(WᵀG).
fn tangent_project(w: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let wtg = w.tr_mul(g);
    let sym = (&wtg + wtg.transpose()) * 0.5;
    g - w * sym
}

struct Workspace {
    blocks: Vec<UserBlock>,
    thetas: Vec<DVector<f64>>,
    omega: DMatrix<f64>,
}

impl Workspace {
    fn total_log_likelihood(&self, link: &dyn Link) -> f64 {
        self.blocks
            .iter()
            .zip(&self.thetas)
            .map(|(blk, th)| blk.log_likelihood(th, link))
            .sum()
    }

    fn omega_gradient(&self, link: &dyn Link) -> DMatrix<f64> {
        let (k, d) = self.omega.shape();
        let mut grad = DMatrix::zeros(k, d);
        for (blk, theta) in self.blocks.iter().zip(&self.thetas) {
            let c = blk.coefficients(theta, link);
            let w = blk.z.tr_mul(&c); // d-vector
            grad += theta * w.transpose();
        }
        grad
    }

    /// Joint projected-gradient norm across both blocks.
    fn stationarity(&self, link: &dyn Link, b: f64) -> f64 {
        let mut acc = 0.0;
        for (blk, theta) in self.blocks.iter().zip(&self.thetas) {
            let gm = gradient_mapping(theta, &blk.theta_gradient(theta, link), b);
            acc += gm * gm;
        }
        let g = self.omega_gradient(link);
        let w = self.omega.transpose();
        let xi = tangent_project(&w, &g.transpose());
        acc += xi.norm_squared();
        acc.sqrt()
    }
}

fn grouped(dataset: &Dataset) -> Result<Vec<Vec<&ComparisonDatum>>> {
    let groups = dataset.by_user();
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Input(format!("user {i} has no comparisons")));
        }
    }
    Ok(groups)
}

fn check_finite(value: f64, iter: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Numerical {
            what: format!("log-likelihood became {value}"),
            iter,
        });
    }
    Ok(value)
}

/// Joint MLE of (ω, θ₁..θ_N) by alternating ascent; returns the best of
/// `cfg.restarts` seeded runs by log-likelihood (ties to the earliest).
pub fn mle_fit(
    dataset: &Dataset,
    link: &dyn Link,
    dims: FitDims,
    cfg: &FitConfig,
    seed: u64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let groups = grouped(dataset)?;
    if dims.rep_dim > dims.feat_dim || dims.feat_dim != dataset.dim {
        return Err(Error::Shape {
            what: "fit dimensions",
            expected: dataset.dim,
            got: dims.feat_dim,
        });
    }
    let (k, d, b) = (dims.rep_dim, dims.feat_dim, dims.bound_b);

    let mut best: Option<FitOutcome> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let init = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let omega = qr_retract(init).transpose();

        let mut ws = Workspace {
            blocks: groups.iter().map(|g| UserBlock::new(g, d)).collect(),
            thetas: vec![DVector::zeros(k); groups.len()],
            omega,
        };
        for blk in &mut ws.blocks {
            blk.project(&ws.omega);
        }

        let mut trace = Vec::new();
        let mut converged = false;
        let mut grad_norm = f64::INFINITY;
        let mut iterations = 0;

        for iter in 1..=cfg.max_iters {
            iterations = iter;
            for (blk, theta) in ws.blocks.iter().zip(ws.thetas.iter_mut()) {
                for _ in 0..cfg.inner_iters {
                    theta_step(blk, theta, link, b, cfg.step_size);
                }
            }

            // ω block: one backtracked Riemannian step.
            let w = ws.omega.transpose();
            let g_w = ws.omega_gradient(link).transpose();
            let xi = tangent_project(&w, &g_w);
            if xi.norm() > 0.0 {
                let current = ws.total_log_likelihood(link);
                let mut t = cfg.step_size / (1.0 + xi.norm());
                for _ in 0..MAX_BACKTRACKS {
                    let cand = qr_retract(&w + &xi * t).transpose();
                    let mut trial_blocks: Vec<DMatrix<f64>> = Vec::with_capacity(ws.blocks.len());
                    for blk in &ws.blocks {
                        trial_blocks.push(&blk.z * cand.transpose());
                    }
                    let trial_ll: f64 = trial_blocks
                        .iter()
                        .zip(&ws.thetas)
                        .zip(&ws.blocks)
                        .map(|((x, theta), blk)| {
                            let g = x * theta;
                            g.iter()
                                .zip(&blk.signs)
                                .map(|(&gj, &sj)| link.log_phi(sj * gj))
                                .sum::<f64>()
                        })
                        .sum();
                    if trial_ll >= current {
                        ws.omega = cand;
                        for (blk, x) in ws.blocks.iter_mut().zip(trial_blocks) {
                            blk.x = x;
                        }
                        break;
                    }
                    t *= 0.5;
                }
            }

            let objective = check_finite(ws.total_log_likelihood(link), iter)?;
            grad_norm = ws.stationarity(link, b);
            trace.push(FitLogRow {
                iter,
                objective,
                grad_norm,
            });
            if grad_norm <= cfg.tol {
                converged = true;
                break;
            }
        }

        let defect = (&ws.omega * ws.omega.transpose() - DMatrix::identity(k, k)).norm();
        debug_assert!(defect <= RETRACTION_TOL, "retraction defect {defect}");

        let log_likelihood = ws.total_log_likelihood(link);
        let designs = ws
            .blocks
            .iter()
            .map(|blk| {
                let n = blk.x.nrows() as f64;
                blk.x.tr_mul(&blk.x) / n
            })
            .collect();
        let outcome = FitOutcome {
            estimate: Estimate {
                omega_hat: ws.omega,
                thetas_hat: ws.thetas,
                designs,
                log_likelihood,
                bound_b: b,
            },
            converged,
            grad_norm,
            iterations,
            trace,
        };
        let better = match &best {
            None => true,
            Some(prev) => outcome.estimate.log_likelihood > prev.estimate.log_likelihood,
        };
        if better {
            best = Some(outcome);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// θ-only fit for a new user against a frozen orthonormal ω̂, with the
/// transfer-variant confidence ellipsoid.
pub fn transfer_fit(
    data: &[&ComparisonDatum],
    omega_hat: &DMatrix<f64>,
    link: &dyn Link,
    dims: FitDims,
    cfg: &FitConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input(
            "transfer fit needs a non-empty dataset".into(),
        ));
    }
    let k = omega_hat.nrows();
    let defect = (omega_hat * omega_hat.transpose() - DMatrix::identity(k, k)).norm();
    if defect > RETRACTION_TOL {
        return Err(Error::Validation(format!(
            "frozen representation is not orthonormal (defect {defect:.3e})"
        )));
    }
    let mut block = UserBlock::new(data, omega_hat.ncols());
    block.project(omega_hat);

    let mut theta = DVector::zeros(k);
    let mut converged = false;
    for iter in 1..=cfg.max_iters * cfg.inner_iters {
        theta_step(&block, &mut theta, link, dims.bound_b, cfg.step_size);
        let gm = gradient_mapping(&theta, &block.theta_gradient(&theta, link), dims.bound_b);
        check_finite(block.log_likelihood(&theta, link), iter)?;
        if gm <= cfg.tol {
            converged = true;
            break;
        }
    }

    let n = block.x.nrows() as f64;
    let design = block.x.tr_mul(&block.x) / n + DMatrix::identity(k, k) * cfg.lambda;
    let consts = super::link_constants(link, dims.r_max)?;
    let zeta = super::transfer_radius(cfg, &consts, dims);
    let log_likelihood = block.log_likelihood(&theta, link);
    Ok(TransferOutcome {
        ellipsoid: ConfidenceEllipsoid::new(theta.clone(), design, zeta)?,
        theta,
        log_likelihood,
        converged,
    })
}

/// Σⱼ log Φ(sⱼ·⟨ω(φ₀−φ₁), θ⟩) over one user's records.
pub fn user_log_likelihood(
    records: &[&ComparisonDatum],
    omega: &DMatrix<f64>,
    theta: &DVector<f64>,
    link: &dyn Link,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no records".into()));
    }
    let mut block = UserBlock::new(records, omega.ncols());
    block.project(omega);
    Ok(block.log_likelihood(theta, link))
}

/// Total log-likelihood of a dataset under (ω, θ₁..θ_N).
pub fn dataset_log_likelihood(
    dataset: &Dataset,
    omega: &DMatrix<f64>,
    thetas: &[DVector<f64>],
    link: &dyn Link,
) -> Result<f64> {
    let groups = grouped(dataset)?;
    if thetas.len() != groups.len() {
        return Err(Error::Shape {
            what: "theta list",
            expected: groups.len(),
            got: thetas.len(),
        });
    }
    let mut total = 0.0;
    for (g, theta) in groups.iter().zip(thetas) {
        total += user_log_likelihood(g, omega, theta, link)?;
    }
    Ok(total)
}

/// Analytic ∇_θ of one user's log-likelihood (exposed for the
/// finite-difference cross-checks).
pub fn theta_gradient(
    records: &[&ComparisonDatum],
    omega: &DMatrix<f64>,
    theta: &DVector<f64>,
    link: &dyn Link,
) -> DVector<f64> {
    let mut block = UserBlock::new(records, omega.ncols());
    block.project(omega);
    block.theta_gradient(theta, link)
}

/// Analytic Euclidean ∇_ω of the total log-likelihood.
pub fn omega_euclidean_gradient(
    dataset: &Dataset,
    omega: &DMatrix<f64>,
    thetas: &[DVector<f64>],
    link: &dyn Link,
) -> Result<DMatrix<f64>> {
    let groups = grouped(dataset)?;
    let mut ws = Workspace {
        blocks: groups
            .iter()
            .map(|g| UserBlock::new(g, omega.ncols()))
            .collect(),
        thetas: thetas.to_vec(),
        omega: omega.clone(),
    };
    for blk in &mut ws.blocks {
        blk.project(omega);
    }
    Ok(ws.omega_gradient(link))
}

/// Cached per-user blocks under a frozen representation, shared by the
/// clustering loop.
pub(super) struct FrozenBlocks {
    blocks: Vec<UserBlock>,
    bound_b: f64,
}

impl FrozenBlocks {
    pub(super) fn new(dataset: &Dataset, omega: &DMatrix<f64>, bound_b: f64) -> Result<Self> {
        let groups = grouped(dataset)?;
        let mut blocks: Vec<UserBlock> = groups
            .iter()
            .map(|g| UserBlock::new(g, omega.ncols()))
            .collect();
        for blk in &mut blocks {
            blk.project(omega);
        }
        Ok(Self { blocks, bound_b })
    }

    pub(super) fn n_users(&self) -> usize {
        self.blocks.len()
    }

    pub(super) fn user_log_likelihood(
        &self,
        user: usize,
        theta: &DVector<f64>,
        link: &dyn Link,
    ) -> f64 {
        self.blocks[user].log_likelihood(theta, link)
    }

    /// Backtracked projected ascent of θ on the pooled data of
    /// `members`; the pooled likelihood never decreases.
    pub(super) fn ascend_pooled(
        &self,
        members: &[usize],
        theta: &mut DVector<f64>,
        link: &dyn Link,
        step: f64,
        iters: usize,
    ) {
        for _ in 0..iters {
            let mut grad = DVector::zeros(theta.len());
            for &i in members {
                grad += self.blocks[i].theta_gradient(theta, link);
            }
            if grad.norm() == 0.0 {
                return;
            }
            let current: f64 = members
                .iter()
                .map(|&i| self.blocks[i].log_likelihood(theta, link))
                .sum();
            let mut t = step;
            let mut moved = false;
            for _ in 0..MAX_BACKTRACKS {
                let cand = project_ball(&(&*theta + &grad * t), self.bound_b);
                let cand_ll: f64 = members
                    .iter()
                    .map(|&i| self.blocks[i].log_likelihood(&cand, link))
                    .sum();
                if cand_ll >= current {
                    *theta = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                return;
            }
        }
    }
}
