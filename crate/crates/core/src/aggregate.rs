//! Reward aggregation and probabilistic opinion pooling.
//!
//! The reward-aggregation family interpolates between egalitarian and
//! optimistic collective choice through a single extended-real parameter α:
//!
//! ```text
//! Agg_α(r)  = (1/α)·log((1/N) Σᵢ exp(α rᵢ))     α ∉ {0, ±∞}
//! Agg_0(r)  = (1/N) Σᵢ rᵢ
//! Agg_±∞(r) = min / max of rᵢ
//!
//! Agg'_α(r) = (1/(Nα)) Σᵢ (exp(α rᵢ) − 1)       finite α ≠ 0
//! ```
//!
//! `Agg` and `Agg'` are related by the strictly increasing map
//! Agg′ = (exp(α·Agg) − 1)/α, so they induce the same argmax.
//!
//! Opinion pooling aggregates rows on the probability simplex directly:
//!
//! ```text
//! pool_α(P)(a) ∝ (Σᵢ Pᵢ(a)^α)^{1/α}     α ∉ {0, ±∞}
//! pool_0(P)(a) ∝ (Πᵢ Pᵢ(a))^{1/N}       geometric pooling
//! pool_±∞(P)(a) ∝ minᵢ / maxᵢ Pᵢ(a)
//! ```
//!
//! Under the Plackett-Luce choice model with rewards R_i(a) = log P_i(a),
//! pooling opinions and softmaxing aggregated rewards coincide for every α;
//! [`pl_equivalence_gap`] measures the numerical gap of that identity.
//!
//! All exponential forms are computed with max-subtracted log-sum-exp, so
//! results are reproducible to ~1e−12 but not bit-exact across platforms.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::pl_probabilities;

/// Clamp applied to zero opinion entries where negative powers diverge.
pub const ZERO_OPINION_CLAMP: f64 = 1e-12;

/// Aggregation parameter: an extended real in [−∞, +∞].
///
/// The infinities are explicit variants rather than large finite values, so
/// the limit semantics are exact and nothing overflows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Alpha {
    NegInf,
    Finite(f64),
    PosInf,
}

impl Alpha {
    pub fn is_zero(self) -> bool {
        matches!(self, Alpha::Finite(v) if v == 0.0)
    }

    fn validate(self) -> Result<Self> {
        if let Alpha::Finite(v) = self {
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "finite alpha must be a finite real, got {v}"
                )));
            }
        }
        Ok(self)
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::NegInf => write!(f, "ninf"),
            Alpha::PosInf => write!(f, "+inf"),
            Alpha::Finite(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ninf" | "-inf" => Ok(Alpha::NegInf),
            "+inf" | "inf" | "pinf" => Ok(Alpha::PosInf),
            other => other
                .parse::<f64>()
                .map_err(|_| {
                    Error::Domain(format!(
                        "alpha must be 'ninf', '+inf', or a float, got {other:?}"
                    ))
                })
                .and_then(|v| Alpha::Finite(v).validate()),
        }
    }
}

fn check_rewards(r: &[f64]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::Input("reward vector is empty".into()));
    }
    if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("rewards must be finite, got {bad}")));
    }
    Ok(())
}

/// log((1/n) Σ exp(tᵢ)) with max subtraction.
fn log_mean_exp(t: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let m = t.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = t.map(|v| (v - m).exp()).sum();
    m + (sum / n as f64).ln()
}

/// Aggregate a reward vector under the α-family.
pub fn agg_reward(alpha: Alpha, r: &[f64]) -> Result<f64> {
    check_rewards(r)?;
    alpha.validate()?;
    let n = r.len();
    Ok(match alpha {
        Alpha::NegInf => r.iter().copied().fold(f64::INFINITY, f64::min),
        Alpha::PosInf => r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Alpha::Finite(0.0) => r.iter().sum::<f64>() / n as f64,
        Alpha::Finite(a) => log_mean_exp(r.iter().map(|&v| a * v), n) / a,
    })
}

/// The exponential-mean form of the aggregation family (finite α only).
pub fn agg_reward_prime(alpha: Alpha, r: &[f64]) -> Result<f64> {
    check_rewards(r)?;
    let a = match alpha {
        Alpha::Finite(a) => a,
        _ => {
            return Err(Error::Domain(
                "the exponential-mean aggregate is defined for finite alpha only".into(),
            ))
        }
    };
    alpha.validate()?;
    let n = r.len() as f64;
    if a == 0.0 {
        return Ok(r.iter().sum::<f64>() / n);
    }
    Ok(r.iter().map(|&v| (a * v).exp() - 1.0).sum::<f64>() / (n * a))
}

/// N opinions over K answers, one simplex row per labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpinionProfile {
    rows: Vec<Vec<f64>>,
}

/// Tolerance on row sums accepted by [`OpinionProfile::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

impl OpinionProfile {
    /// Validate rows: nonnegative entries summing to 1 within 1e−9, at
    /// least one labeler, at least two answers, rectangular shape.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("opinion profile has no labelers".into()));
        }
        let k = rows[0].len();
        if k < 2 {
            return Err(Error::Input(format!(
                "opinion profile needs at least 2 answers, got {k}"
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape {
                    what: "opinion row",
                    expected: k,
                    got: row.len(),
                });
            }
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Validation(format!(
                    "opinion row {i} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Validation(format!(
                    "opinion row {i} sums to {s}, expected 1 within {SIMPLEX_TOL}"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_labelers(&self) -> usize {
        self.rows.len()
    }

    pub fn n_answers(&self) -> usize {
        self.rows[0].len()
    }

    /// A copy with row `i` replaced (used by truthfulness audits).
    pub fn with_row(&self, i: usize, row: Vec<f64>) -> Result<Self> {
        let mut rows = self.rows.clone();
        if i >= rows.len() {
            return Err(Error::Input(format!(
                "labeler index {i} out of range for {} labelers",
                rows.len()
            )));
        }
        rows[i] = row;
        Self::new(rows)
    }

    /// A copy with row `i` removed.
    pub fn without_row(&self, i: usize) -> Result<Self> {
        let mut rows = self.rows.clone();
        if i >= rows.len() {
            return Err(Error::Input(format!(
                "labeler index {i} out of range for {} labelers",
                rows.len()
            )));
        }
        rows.remove(i);
        Self::new(rows)
    }
}

/// Rows with zeros clamped to [`ZERO_OPINION_CLAMP`] for the α ≤ 0 pools.
fn clamped_rows(profile: &OpinionProfile) -> Vec<Vec<f64>> {
    let mut clamped = false;
    let rows = profile
        .rows()
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    if v < ZERO_OPINION_CLAMP {
                        clamped = true;
                        ZERO_OPINION_CLAMP
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    if clamped {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            log::warn!(
                "opinion profile has zero entries; clamped to {ZERO_OPINION_CLAMP} for pooling \
                 (warned once per process)"
            );
        });
    }
    rows
}

fn normalize(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let s: f64 = w.iter().sum();
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Numerical {
            what: format!("pooled mass sums to {s}"),
            iter: 0,
        });
    }
    for v in &mut w {
        *v /= s;
    }
    Ok(w)
}

/// Pool an opinion profile into a single simplex vector.
pub fn pool_opinions(alpha: Alpha, profile: &OpinionProfile) -> Result<Vec<f64>> {
    alpha.validate()?;
    let k = profile.n_answers();
    match alpha {
        Alpha::PosInf => {
            let w = (0..k)
                .map(|a| {
                    profile
                        .rows()
                        .iter()
                        .map(|r| r[a])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            normalize(w)
        }
        Alpha::NegInf => {
            let rows = clamped_rows(profile);
            let w = (0..k)
                .map(|a| rows.iter().map(|r| r[a]).fold(f64::INFINITY, f64::min))
                .collect();
            normalize(w)
        }
        Alpha::Finite(0.0) => {
            // Geometric pooling, in log space.
            let rows = clamped_rows(profile);
            let n = rows.len() as f64;
            let t: Vec<f64> = (0..k)
                .map(|j| rows.iter().map(|r| r[j].ln()).sum::<f64>() / n)
                .collect();
            let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            normalize(t.iter().map(|&v| (v - m).exp()).collect())
        }
        Alpha::Finite(a) => {
            // (Σᵢ Pᵢ(a)^α)^{1/α}, computed as exp(logsumexp(α·log Pᵢ(a))/α)
            // so large |α| cannot overflow.
            let rows = if a < 0.0 {
                clamped_rows(profile)
            } else {
                profile.rows().to_vec()
            };
            let n = rows.len();
            let t: Vec<f64> = (0..k)
                .map(|j| log_mean_exp(rows.iter().map(|r| a * r[j].ln()), n) / a)
                .collect();
            let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            normalize(t.iter().map(|&v| (v - m).exp()).collect())
        }
    }
}

/// Max-norm gap between pooling opinions and softmaxing aggregated rewards.
///
/// Each labeler's opinion is the Plackett-Luce distribution of their reward
/// row; the reward route re-derives per-answer rewards as R_i(a) = log P_i(a)
/// (fixing the shared additive constant to zero), aggregates them per answer,
/// and softmaxes the result. The two routes agree analytically for every α.
pub fn pl_equivalence_gap(alpha: Alpha, reward_table: &[Vec<f64>]) -> Result<f64> {
    if reward_table.is_empty() {
        return Err(Error::Input("reward table is empty".into()));
    }
    let opinions: Vec<Vec<f64>> = reward_table
        .iter()
        .map(|row| pl_probabilities(row))
        .collect::<Result<_>>()?;
    let k = opinions[0].len();
    let profile = OpinionProfile::new(opinions.clone())?;
    let pooled = pool_opinions(alpha, &profile)?;

    let aggregated: Vec<f64> = (0..k)
        .map(|a| {
            let logs: Vec<f64> = opinions.iter().map(|p| p[a].ln()).collect();
            agg_reward(alpha, &logs)
        })
        .collect::<Result<_>>()?;
    let via_rewards = pl_probabilities(&aggregated)?;

    Ok(pooled
        .iter()
        .zip(&via_rewards)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Draw an answer index from the pooled opinion distribution.
pub fn sample_pooled_answer<R: Rng>(
    alpha: Alpha,
    profile: &OpinionProfile,
    rng: &mut R,
) -> Result<usize> {
    let pooled = pool_opinions(alpha, profile)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in pooled.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(pooled.len() - 1)
}

/// Outcome of probing one axiom on random instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxiomProbe {
    pub probes: usize,
    pub violations: usize,
    /// Largest violation magnitude observed (0 when clean).
    pub worst: f64,
}

impl AxiomProbe {
    fn record(&mut self, violation: f64) {
        if violation > 0.0 {
            self.violations += 1;
            self.worst = self.worst.max(violation);
        }
    }

    pub fn clean(&self) -> bool {
        self.violations == 0
    }
}

/// Random-probe report for the aggregation axioms at a given α.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxiomReport {
    pub alpha: String,
    pub probes_per_axiom: usize,
    pub monotonicity: AxiomProbe,
    pub symmetry: AxiomProbe,
    pub translation_independence: AxiomProbe,
    /// Only probed for α < 0, where the transfer principle applies.
    pub pigou_dalton: Option<AxiomProbe>,
    pub continuity: AxiomProbe,
    /// Largest |ΔAgg|/‖u‖ seen by the continuity probe.
    pub empirical_lipschitz: f64,
    pub unconcerned_agents: AxiomProbe,
    /// Argmax agreement between the log-mean-exp and exponential-mean
    /// forms over random reward tables (finite α only).
    pub argmax_equivalence: Option<AxiomProbe>,
}

impl AxiomReport {
    pub fn all_clean(&self) -> bool {
        self.monotonicity.clean()
            && self.symmetry.clean()
            && self.translation_independence.clean()
            && self.pigou_dalton.as_ref().is_none_or(AxiomProbe::clean)
            && self.continuity.clean()
            && self.unconcerned_agents.clean()
            && self
                .argmax_equivalence
                .as_ref()
                .is_none_or(AxiomProbe::clean)
    }
}

fn fresh_probe(probes: usize) -> AxiomProbe {
    AxiomProbe {
        probes,
        violations: 0,
        worst: 0.0,
    }
}

/// Probe the six aggregation axioms plus the two-form argmax equivalence
/// on seeded random instances with `n` labelers.
pub fn axiom_report<R: Rng>(
    alpha: Alpha,
    n: usize,
    probes: usize,
    rng: &mut R,
) -> Result<AxiomReport> {
    let n = n.max(2);
    let rand_r =
        |rng: &mut R| -> Vec<f64> { (0..n).map(|_| rng.random_range(-3.0..3.0)).collect() };

    let mut monotonicity = fresh_probe(probes);
    let mut symmetry = fresh_probe(probes);
    let mut translation = fresh_probe(probes);
    let mut pigou = fresh_probe(probes);
    let mut continuity = fresh_probe(probes);
    let mut unconcerned = fresh_probe(probes);
    let mut argmax_eq = fresh_probe(probes);
    let mut lipschitz: f64 = 0.0;
    let finite = matches!(alpha, Alpha::Finite(_));
    let strict_monotone = finite;

    for _ in 0..probes {
        let r = rand_r(rng);

        // Monotonicity: bump one coordinate upward.
        {
            let j = rng.random_range(0..n);
            let mut r2 = r.clone();
            r2[j] += rng.random_range(0.1..1.0);
            let (a, b) = (agg_reward(alpha, &r)?, agg_reward(alpha, &r2)?);
            let viol = if strict_monotone {
                if b > a {
                    0.0
                } else {
                    (a - b).max(f64::MIN_POSITIVE)
                }
            } else {
                (a - b).max(0.0) // weak monotonicity at the limits
            };
            monotonicity.record(if viol > 1e-12 { viol } else { 0.0 });
        }

        // Symmetry under a random permutation.
        {
            let mut perm = r.clone();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let gap = (agg_reward(alpha, &r)? - agg_reward(alpha, &perm)?).abs();
            symmetry.record(if gap > 1e-12 { gap } else { 0.0 });
        }

        // Translation independence: Agg(r + c·1) = Agg(r) + c.
        {
            let c: f64 = rng.random_range(-5.0..5.0);
            let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
            let gap = (agg_reward(alpha, &shifted)? - (agg_reward(alpha, &r)? + c)).abs();
            translation.record(if gap > 1e-10 { gap } else { 0.0 });
        }

        // Pigou-Dalton transfer (α < 0): moving δ from the richer to the
        // poorer agent must not decrease the aggregate.
        if matches!(alpha, Alpha::Finite(a) if a < 0.0) {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| r[a].total_cmp(&r[b]));
            let (lo, hi) = (idx[0], idx[n - 1]);
            if r[hi] - r[lo] > 1e-9 {
                let delta = rng.random_range(0.0..(r[hi] - r[lo]) / 2.0);
                let mut r2 = r.clone();
                r2[lo] += delta;
                r2[hi] -= delta;
                let drop = agg_reward(alpha, &r)? - agg_reward(alpha, &r2)?;
                pigou.record(if drop > 1e-10 { drop } else { 0.0 });
            }
        }

        // Continuity: small perturbations move the aggregate by at most
        // ‖u‖ (the family is 1-Lipschitz in the sup norm).
        {
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1e-6..1e-6)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                let perturbed: Vec<f64> = r.iter().zip(&u).map(|(a, b)| a + b).collect();
                let diff = (agg_reward(alpha, &r)? - agg_reward(alpha, &perturbed)?).abs();
                let ratio = diff / norm;
                lipschitz = lipschitz.max(ratio);
                continuity.record(if ratio > 1.0 + 1e-9 { ratio - 1.0 } else { 0.0 });
            }
        }

        // Independence of unconcerned agents: varying a coordinate shared
        // by r and r' must not flip the comparison between them.
        {
            let j = rng.random_range(0..n);
            let mut r_b = rand_r(rng);
            r_b[j] = r[j];
            let sign_of = |x: f64| {
                if x.abs() <= 1e-12 {
                    0i8
                } else if x > 0.0 {
                    1
                } else {
                    -1
                }
            };
            let before = sign_of(agg_reward(alpha, &r)? - agg_reward(alpha, &r_b)?);
            let shared: f64 = rng.random_range(-3.0..3.0);
            let mut r2 = r.clone();
            let mut r2_b = r_b.clone();
            r2[j] = shared;
            r2_b[j] = shared;
            let after = sign_of(agg_reward(alpha, &r2)? - agg_reward(alpha, &r2_b)?);
            let flipped = before != 0 && after != 0 && before != after;
            unconcerned.record(if flipped { 1.0 } else { 0.0 });
        }

        // Argmax equivalence of the two aggregation forms over a random
        // trajectory catalog.
        if finite {
            let t = rng.random_range(3..8);
            let table: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let argmax = |vals: &[f64]| {
                vals.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
            };
            let via_log: Vec<f64> = table
                .iter()
                .map(|row| agg_reward(alpha, row))
                .collect::<Result<_>>()?;
            let via_exp: Vec<f64> = table
                .iter()
                .map(|row| agg_reward_prime(alpha, row))
                .collect::<Result<_>>()?;
            let agree = argmax(&via_log) == argmax(&via_exp);
            argmax_eq.record(if agree { 0.0 } else { 1.0 });
        }
    }

    Ok(AxiomReport {
        alpha: alpha.to_string(),
        probes_per_axiom: probes,
        monotonicity,
        symmetry,
        translation_independence: translation,
        pigou_dalton: matches!(alpha, Alpha::Finite(a) if a < 0.0).then_some(pigou),
        continuity,
        empirical_lipschitz: lipschitz,
        unconcerned_agents: unconcerned,
        argmax_equivalence: finite.then_some(argmax_eq),
    })
}
