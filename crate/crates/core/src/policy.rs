//! Policies over finite trajectory catalogs and pessimistic selection.
//!
//! A policy is an occupancy measure on a finite catalog, so its value
//! under a reward vector is a dot product. Pessimistic selection scores
//! each slate candidate by the worst case over a per-user confidence
//! ellipsoid {θ : ‖θ − θ̂‖²_Σ ≤ ζ}; because the relative value is linear
//! in θ the inner minimum is closed-form:
//!
//! ```text
//! min_θ ⟨v_π, θ⟩ = ⟨v_π, θ̂⟩ − √ζ·‖v_π‖_{Σ⁻¹},
//! v_π = E_π[ω̂φ] − E_{μ_ref}[ω̂φ]
//! ```
//!
//! The aggregated objective applies a nonlinear per-trajectory
//! aggregation before averaging, which forecloses the closed form; there
//! the inner minimum is approximated by common-seed sampling of the
//! ellipsoid boundaries plus each user's per-candidate linear minimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aggregate::{agg_reward, Alpha};
use crate::error::{Error, Result};
use crate::estimate::ConfidenceEllipsoid;
use crate::model::FeatureVector;

/// A finite trajectory space, represented by its features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCatalog {
    features: Vec<FeatureVector>,
}

impl TrajectoryCatalog {
    pub fn new(features: Vec<FeatureVector>) -> Result<Self> {
        let dim = match features.first() {
            None => return Err(Error::Input("trajectory catalog is empty".into())),
            Some(f) => f.dim(),
        };
        if features.iter().any(|f| f.dim() != dim) {
            return Err(Error::Validation(
                "trajectory catalog has inconsistent feature dimensions".into(),
            ));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    /// T×k matrix of projected features ψ(τ) = ω̂·φ(τ).
    pub fn projected(&self, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if omega.ncols() != self.dim() {
            return Err(Error::Shape {
                what: "catalog projection",
                expected: self.dim(),
                got: omega.ncols(),
            });
        }
        let k = omega.nrows();
        let mut out = DMatrix::zeros(self.len(), k);
        for (t, feat) in self.features.iter().enumerate() {
            let psi = omega * &feat.0;
            for c in 0..k {
                out[(t, c)] = psi[c];
            }
        }
        Ok(out)
    }

    /// Reward of every trajectory under (ω, θ).
    pub fn rewards(&self, omega: &DMatrix<f64>, theta: &DVector<f64>) -> Result<Vec<f64>> {
        Ok((self.projected(omega)? * theta).iter().copied().collect())
    }
}

/// An occupancy measure over the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    weights: Vec<f64>,
}

impl Policy {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Input("policy over an empty catalog".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Validation(
                "policy weights must be nonnegative reals".into(),
            ));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "policy weights sum to {s}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { weights })
    }

    pub fn point_mass(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Input(format!(
                "point mass index {index} out of range for {len} trajectories"
            )));
        }
        let mut w = vec![0.0; len];
        w[index] = 1.0;
        Ok(Self { weights: w })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("uniform policy over an empty catalog".into()));
        }
        Ok(Self {
            weights: vec![1.0 / len as f64; len],
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// E_π[row] for a T×k matrix of per-trajectory vectors.
    fn expected_row(&self, mat: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(mat.ncols());
        for (t, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                out += mat.row(t).transpose() * w;
            }
        }
        out
    }
}

/// The finite candidate set the selection argmax runs over.
#[derive(Debug, Clone)]
pub struct PolicySlate {
    candidates: Vec<Policy>,
}

impl PolicySlate {
    pub fn new(candidates: Vec<Policy>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Input("policy slate is empty".into()));
        }
        Ok(Self { candidates })
    }

    /// All point masses plus the uniform policy.
    pub fn default_for(catalog_len: usize) -> Result<Self> {
        let mut candidates: Vec<Policy> = (0..catalog_len)
            .map(|t| Policy::point_mass(t, catalog_len))
            .collect::<Result<_>>()?;
        candidates.push(Policy::uniform(catalog_len)?);
        Self::new(candidates)
    }

    pub fn candidates(&self) -> &[Policy] {
        &self.candidates
    }
}

/// J(π; r) = Σ_τ d_π(τ)·r(τ).
pub fn value(pi: &Policy, rewards: &[f64]) -> Result<f64> {
    if pi.len() != rewards.len() {
        return Err(Error::Shape {
            what: "policy value",
            expected: pi.len(),
            got: rewards.len(),
        });
    }
    Ok(pi.weights().iter().zip(rewards).map(|(w, r)| w * r).sum())
}

fn relative_direction(
    pi: &Policy,
    mu_ref: &Policy,
    projected: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if pi.len() != projected.nrows() || mu_ref.len() != projected.nrows() {
        return Err(Error::Shape {
            what: "policy over catalog",
            expected: projected.nrows(),
            got: pi.len().max(mu_ref.len()),
        });
    }
    Ok(pi.expected_row(projected) - mu_ref.expected_row(projected))
}

/// Worst-case relative value of `pi` against `mu_ref` over the ellipsoid.
pub fn pessimistic_value(
    pi: &Policy,
    ell: &ConfidenceEllipsoid,
    omega_hat: &DMatrix<f64>,
    catalog: &TrajectoryCatalog,
    mu_ref: &Policy,
) -> Result<f64> {
    let projected = catalog.projected(omega_hat)?;
    let v = relative_direction(pi, mu_ref, &projected)?;
    Ok(v.dot(ell.center()) - ell.radius().sqrt() * ell.inv_design_norm(&v))
}

/// The slate argmax chosen by a selection rule, with per-candidate scores.
#[derive(Debug, Clone)]
pub struct PolicyChoice {
    pub index: usize,
    pub chosen: Policy,
    pub scores: Vec<f64>,
}

fn argmax_choice(slate: &PolicySlate, scores: Vec<f64>) -> PolicyChoice {
    // Strict inequality keeps ties on the lowest candidate index.
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    PolicyChoice {
        index,
        chosen: slate.candidates()[index].clone(),
        scores,
    }
}

/// argmax over the slate of [`pessimistic_value`]; ties go to the lowest
/// candidate index.
pub fn pessimistic_policy(
    slate: &PolicySlate,
    ell: &ConfidenceEllipsoid,
    omega_hat: &DMatrix<f64>,
    catalog: &TrajectoryCatalog,
    mu_ref: &Policy,
) -> Result<PolicyChoice> {
    let projected = catalog.projected(omega_hat)?;
    let scores = slate
        .candidates()
        .iter()
        .map(|pi| {
            let v = relative_direction(pi, mu_ref, &projected)?;
            Ok(v.dot(ell.center()) - ell.radius().sqrt() * ell.inv_design_norm(&v))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(argmax_choice(slate, scores))
}

/// Boundary samples of each user's ellipsoid (common seed, per-user
/// substreams): θ = θ̂ + √ζ·L⁻ᵀu with Σ = LLᵀ and u uniform on the sphere.
fn boundary_samples(
    ells: &[ConfidenceEllipsoid],
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let mut out = Vec::with_capacity(ells.len());
    for (i, ell) in ells.iter().enumerate() {
        let k = ell.center().len();
        let chol = ell.design().clone().cholesky().ok_or_else(|| {
            Error::Validation("ellipsoid design must be positive definite".into())
        })?;
        // Solve Lᵀ x = u so that ‖x‖²_Σ = ‖u‖² = 1.
        let lt = chol.l().transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut user_samples = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut u = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = u.norm();
            if n < 1e-12 {
                u = DVector::from_element(k, 1.0 / (k as f64).sqrt());
            } else {
                u /= n;
            }
            let x = lt
                .clone()
                .solve_upper_triangular(&u)
                .ok_or_else(|| Error::Numerical {
                    what: "triangular solve failed".into(),
                    iter: 0,
                })?;
            user_samples.push(ell.center() + x * ell.radius().sqrt());
        }
        out.push(user_samples);
    }
    Ok(out)
}

/// Pessimistic selection under the aggregated reward: argmax over the
/// slate of the sampled inner minimum of
/// Σ_τ (d_π − μ_ref)(τ)·Agg_α(r₁(τ), …, r_N(τ)).
///
/// Every candidate is scored against the same `samples` boundary draws
/// (common seed) plus, per candidate, each user's closed-form minimizer
/// of the linear part — which makes the N = 1, α = 0 case exact.
#[allow(clippy::too_many_arguments)]
pub fn aggregated_policy(
    slate: &PolicySlate,
    ells: &[ConfidenceEllipsoid],
    omega_hat: &DMatrix<f64>,
    alpha: Alpha,
    catalog: &TrajectoryCatalog,
    mu_ref: &Policy,
    samples: usize,
    seed: u64,
) -> Result<PolicyChoice> {
    if ells.is_empty() {
        return Err(Error::Input("aggregated selection needs ellipsoids".into()));
    }
    let projected = catalog.projected(omega_hat)?;
    let n = ells.len();
    let t = catalog.len();
    let drawn = boundary_samples(ells, samples, seed)?;

    // Candidate joint parameters: index s < samples takes each user's
    // s-th boundary draw; the per-candidate analytic minimizer is
    // appended inside the scoring loop.
    let mut scores = Vec::with_capacity(slate.candidates().len());
    for pi in slate.candidates() {
        let v = relative_direction(pi, mu_ref, &projected)?;
        let weight_diff: Vec<f64> = pi
            .weights()
            .iter()
            .zip(mu_ref.weights())
            .map(|(a, b)| a - b)
            .collect();

        let objective = |thetas: &[DVector<f64>]| -> Result<f64> {
            let mut acc = 0.0;
            let mut rewards = vec![0.0; n];
            for (tau, &wd) in weight_diff.iter().enumerate().take(t) {
                if wd == 0.0 {
                    continue;
                }
                let psi = projected.row(tau).transpose();
                for (i, theta) in thetas.iter().enumerate() {
                    rewards[i] = psi.dot(theta);
                }
                acc += wd * agg_reward(alpha, &rewards)?;
            }
            Ok(acc)
        };

        let mut worst = f64::INFINITY;
        for s in 0..samples {
            let joint: Vec<DVector<f64>> = drawn.iter().map(|user| user[s].clone()).collect();
            worst = worst.min(objective(&joint)?);
        }
        // Each user's minimizer of their linear term ⟨v, θᵢ⟩.
        let analytic: Vec<DVector<f64>> = ells
            .iter()
            .map(|ell| {
                let mut design = ell.design().clone();
                let chol = loop {
                    match design.clone().cholesky() {
                        Some(c) => break c,
                        None => {
                            design += DMatrix::identity(design.nrows(), design.ncols()) * 1e-10;
                        }
                    }
                };
                let dir = chol.solve(&v);
                let norm = ell.inv_design_norm(&v);
                if norm > 0.0 {
                    ell.center() - dir * (ell.radius().sqrt() / norm)
                } else {
                    ell.center().clone()
                }
            })
            .collect();
        worst = worst.min(objective(&analytic)?);
        scores.push(worst);
    }
    Ok(argmax_choice(slate, scores))
}

/// Grid lower bound of the concentrability coefficient: the worst ratio
/// of the target-vs-reference bias of a reward error to its comparison
/// noise, with expectations exact over the finite catalog.
///
/// Grid points whose denominator vanishes (e.g. the true reward or any
/// constant shift of it) are skipped with a warning.
pub fn concentrability(
    reward_grid: &[Vec<f64>],
    pi_tar: &Policy,
    mu_ref: &Policy,
    mu0: &Policy,
    mu1: &Policy,
    r_star: &[f64],
    catalog: &TrajectoryCatalog,
) -> Result<f64> {
    if reward_grid.is_empty() {
        return Err(Error::Input("concentrability grid is empty".into()));
    }
    let t = catalog.len();
    for (p, name) in [
        (pi_tar.len(), "pi_tar"),
        (mu_ref.len(), "mu_ref"),
        (mu0.len(), "mu0"),
        (mu1.len(), "mu1"),
        (r_star.len(), "r_star"),
    ] {
        if p != t {
            return Err(Error::Input(format!(
                "{name} has length {p}, catalog has {t} trajectories"
            )));
        }
    }

    let mut best: f64 = 0.0;
    for (g, r) in reward_grid.iter().enumerate() {
        if r.len() != t {
            return Err(Error::Shape {
                what: "grid reward",
                expected: t,
                got: r.len(),
            });
        }
        let delta: Vec<f64> = r_star.iter().zip(r).map(|(s, c)| s - c).collect();
        let e = |pi: &Policy| -> f64 { pi.weights().iter().zip(&delta).map(|(w, d)| w * d).sum() };
        let numerator = e(pi_tar) - e(mu_ref);
        // E_{τ₀∼μ₀,τ₁∼μ₁}|Δ(τ₀) − Δ(τ₁)|² for independent draws.
        let m0 = e(mu0);
        let m1 = e(mu1);
        let sq = |pi: &Policy| -> f64 {
            pi.weights()
                .iter()
                .zip(&delta)
                .map(|(w, d)| w * d * d)
                .sum()
        };
        let denom_sq = sq(mu0) + sq(mu1) - 2.0 * m0 * m1;
        if denom_sq <= 1e-14 {
            log::warn!("concentrability grid point {g} has zero comparison noise; skipped");
            continue;
        }
        best = best.max(numerator / denom_sq.sqrt());
    }
    Ok(best.max(0.0))
}
