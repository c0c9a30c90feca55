//! Truthful aggregation of probabilistic opinions.
//!
//! Labelers report simplex-valued opinions; the mechanism publishes the
//! aggregate minimizing the total distance to the reports and charges each
//! labeler the externality their report imposes on the others:
//!
//! ```text
//! agg(P)  = argmin_{p ∈ Δ} Σᵢ d(Pᵢ, p)
//! cᵢ(P)   = Σ_{j≠i} d(Pⱼ, agg(P)) − min_p Σ_{j≠i} d(Pⱼ, p)
//! uᵢ(P)   = −d(pᵢ, agg(P)) − cᵢ(P)
//! ```
//!
//! This is the Clarke pivot rule with bids parameterized by distance, so
//! truthful reporting is a dominant strategy and the aggregate maximizes
//! welfare −Σᵢ d(pᵢ, ·). [`dsic_audit`] brute-forces that claim on a
//! misreport grid.
//!
//! Two distance strategies are registered:
//!
//! - `renyi:<α>` (α ∉ {0, 1}) — d_α(p, q) = sgn(α)/(1−α)·(1 − Σⱼ pⱼ^α qⱼ^{1−α}),
//!   the form whose argmin is exactly the α-pool of the aggregation module
//!   and whose α → 1 limit is the KL divergence.
//! - `kl` — evaluated as KL(candidate ‖ opinion); this is the direction
//!   under which the argmin is geometric pooling (the α = 0 pool).

use serde::{Deserialize, Serialize};

use crate::aggregate::{pool_opinions, Alpha, OpinionProfile, ZERO_OPINION_CLAMP};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs or negative powers.
const DIST_CLAMP: f64 = ZERO_OPINION_CLAMP;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            what: "distribution pair",
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.len() < 2 {
        return Err(Error::Domain(
            "distributions need at least two outcomes".into(),
        ));
    }
    Ok(())
}

fn clamp_warned(v: f64, what: &str) -> f64 {
    if v < DIST_CLAMP {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            log::warn!(
                "{what} entry {v} clamped to {DIST_CLAMP} (warning emitted once per process)"
            );
        });
        DIST_CLAMP
    } else {
        v
    }
}

/// Kullback-Leibler divergence Σⱼ pⱼ log(pⱼ/qⱼ), with 0·log 0 = 0 and
/// zero entries of q clamped (warned).
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        let qi = clamp_warned(qi, "kl divergence q");
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// The α-power divergence d_α(p, q) = sgn(α)/(1−α)·(1 − Σⱼ pⱼ^α qⱼ^{1−α}),
/// defined for α ∉ {0, 1}; both arguments are clamped away from zero.
///
/// d_α(p, p) = 0, d_α ≥ 0, and d_α → KL(p‖q) as α → 1.
pub fn renyi_variant(alpha: f64, p: &[f64], q: &[f64]) -> Result<f64> {
    if alpha == 0.0 || alpha == 1.0 || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "the alpha-power divergence needs finite alpha outside {{0, 1}} \
             (got {alpha}); use kl_div for the alpha = 1 limit"
        )));
    }
    check_pair(p, q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let pi = clamp_warned(pi, "power divergence p");
        let qi = clamp_warned(qi, "power divergence q");
        // p^α q^{1−α} in log space to survive large |α|.
        sum += (alpha * pi.ln() + (1.0 - alpha) * qi.ln()).exp();
    }
    Ok(alpha.signum() / (1.0 - alpha) * (1.0 - sum))
}

/// A distance strategy on the simplex, as used by the mechanism's
/// objective Σᵢ d(Pᵢ, candidate).
pub trait Distance: Send + Sync {
    fn name(&self) -> String;

    /// d(opinion, candidate).
    fn eval(&self, opinion: &[f64], candidate: &[f64]) -> Result<f64>;

    /// The pooling parameter whose closed form minimizes
    /// Σᵢ d(Pᵢ, ·) over the simplex.
    fn pooling_alpha(&self) -> Alpha;
}

impl std::fmt::Debug for dyn Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Distance({})", self.name())
    }
}

/// KL distance in the mechanism direction: d(opinion, candidate) =
/// KL(candidate ‖ opinion), the unique direction whose minimizer is the
/// geometric pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct KlDistance;

impl Distance for KlDistance {
    fn name(&self) -> String {
        "kl".to_owned()
    }

    fn eval(&self, opinion: &[f64], candidate: &[f64]) -> Result<f64> {
        kl_div(candidate, opinion)
    }

    fn pooling_alpha(&self) -> Alpha {
        Alpha::Finite(0.0)
    }
}

/// The α-power divergence as a mechanism distance (α ∉ {0, 1}).
#[derive(Debug, Clone, Copy)]
pub struct RenyiDistance {
    alpha: f64,
}

impl RenyiDistance {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha == 0.0 || alpha == 1.0 || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "renyi distance needs finite alpha outside {{0, 1}}, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Distance for RenyiDistance {
    fn name(&self) -> String {
        format!("renyi:{}", self.alpha)
    }

    fn eval(&self, opinion: &[f64], candidate: &[f64]) -> Result<f64> {
        renyi_variant(self.alpha, opinion, candidate)
    }

    fn pooling_alpha(&self) -> Alpha {
        Alpha::Finite(self.alpha)
    }
}

/// One row of the distance registry.
pub struct DistanceSpec {
    pub name: &'static str,
    pub summary: &'static str,
}

pub fn registry() -> Vec<DistanceSpec> {
    vec![
        DistanceSpec {
            name: "kl",
            summary: "KL divergence (mechanism direction: KL(candidate || opinion))",
        },
        DistanceSpec {
            name: "renyi:<alpha>",
            summary: "alpha-power divergence, alpha outside {0, 1}",
        },
    ]
}

/// Resolve a distance strategy by name: `"kl"` or `"renyi:<alpha>"`.
pub fn from_spec(spec: &str) -> Result<Box<dyn Distance>> {
    match spec {
        "kl" => Ok(Box::new(KlDistance)),
        s if s.starts_with("renyi:") => {
            let raw = &s["renyi:".len()..];
            let alpha: f64 = raw.parse().map_err(|_| {
                Error::Domain(format!("renyi distance needs a float alpha, got {raw:?}"))
            })?;
            Ok(Box::new(RenyiDistance::new(alpha)?))
        }
        other => Err(Error::UnknownStrategy {
            name: other.to_owned(),
            available: registry()
                .iter()
                .map(|s| s.name)
                .collect::<Vec<_>>()
                .join(", "),
        }),
    }
}

/// The welfare-maximizing aggregate argmin_{p ∈ Δ} Σᵢ d(Pᵢ, p).
///
/// Both registered distances admit the closed form: the α-pool of the
/// reported profile (geometric pooling for KL).
pub fn mech_aggregate(dist: &dyn Distance, profile: &OpinionProfile) -> Result<Vec<f64>> {
    pool_opinions(dist.pooling_alpha(), profile)
}

/// Welfare of a candidate aggregate: −Σᵢ d(pᵢ, candidate).
pub fn welfare(
    true_profile: &OpinionProfile,
    candidate: &[f64],
    dist: &dyn Distance,
) -> Result<f64> {
    let mut total = 0.0;
    for row in true_profile.rows() {
        total += dist.eval(row, candidate)?;
    }
    Ok(-total)
}

/// Clarke pivot cost of labeler `i`: the externality of their report on
/// the other labelers' total distance. Nonnegative by construction.
pub fn vcg_cost(i: usize, dist: &dyn Distance, profile: &OpinionProfile) -> Result<f64> {
    let n = profile.n_labelers();
    if i >= n {
        return Err(Error::Input(format!(
            "labeler index {i} out of range for {n} labelers"
        )));
    }
    if n == 1 {
        return Ok(0.0); // both sums over j ≠ i are empty
    }
    let agg_full = mech_aggregate(dist, profile)?;
    let reduced = profile.without_row(i)?;
    let agg_reduced = mech_aggregate(dist, &reduced)?;
    let mut with_i = 0.0;
    let mut without_i = 0.0;
    for (j, row) in profile.rows().iter().enumerate() {
        if j == i {
            continue;
        }
        with_i += dist.eval(row, &agg_full)?;
        without_i += dist.eval(row, &agg_reduced)?;
    }
    Ok(with_i - without_i)
}

/// Quasi-linear utility of labeler `i` with true opinion `true_opinion`,
/// when the submitted reports are `profile`.
pub fn utility(
    i: usize,
    true_opinion: &[f64],
    dist: &dyn Distance,
    profile: &OpinionProfile,
) -> Result<f64> {
    let agg = mech_aggregate(dist, profile)?;
    Ok(-dist.eval(true_opinion, &agg)? - vcg_cost(i, dist, profile)?)
}

/// Aggregate, per-labeler costs and utilities, and the attained welfare,
/// for a truthfully reported profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MechanismOutcome {
    pub aggregate: Vec<f64>,
    pub costs: Vec<f64>,
    pub utilities: Vec<f64>,
    pub welfare: f64,
}

pub fn mechanism_outcome(
    dist: &dyn Distance,
    profile: &OpinionProfile,
) -> Result<MechanismOutcome> {
    let aggregate = mech_aggregate(dist, profile)?;
    let costs: Vec<f64> = (0..profile.n_labelers())
        .map(|i| vcg_cost(i, dist, profile))
        .collect::<Result<_>>()?;
    let utilities: Vec<f64> = profile
        .rows()
        .iter()
        .enumerate()
        .map(|(i, row)| Ok(-dist.eval(row, &aggregate)? - costs[i]))
        .collect::<Result<_>>()?;
    let welfare = welfare(profile, &aggregate, dist)?;
    Ok(MechanismOutcome {
        aggregate,
        costs,
        utilities,
        welfare,
    })
}

/// All points of the simplex lattice {x/m : x ∈ ℕᵏ, Σx = m}.
/// Resolution 0 yields no points.
pub fn simplex_lattice(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    if resolution == 0 || k == 0 {
        return Vec::new();
    }
    fn rec(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(k - 1, left - v, prefix, out);
            prefix.pop();
        }
    }
    let mut raw = Vec::new();
    rec(k, resolution, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|pt| {
            pt.into_iter()
                .map(|v| v as f64 / resolution as f64)
                .collect()
        })
        .collect()
}

/// Uniformly random simplex points (exponential spacings), seeded.
pub fn random_simplex_points<R: rand::Rng>(k: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let mut e: Vec<f64> = (0..k)
                .map(|_| -rng.random::<f64>().max(1e-300).ln())
                .collect();
            let s: f64 = e.iter().sum();
            for v in &mut e {
                *v /= s;
            }
            e
        })
        .collect()
}

/// Default misreport grid: a resolution-`lattice` simplex lattice plus
/// `random` seeded uniform draws.
pub fn default_misreport_grid(k: usize, lattice: usize, random: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    let mut grid = simplex_lattice(k, lattice);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    grid.extend(random_simplex_points(k, random, &mut rng));
    grid
}

/// Per-labeler result of a truthfulness audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelerAudit {
    pub cost: f64,
    pub utility_truthful: f64,
    /// Best utility gain over truthful reporting found on the grid
    /// (≤ tolerance when the mechanism is truthful).
    pub best_misreport_gain: f64,
}

/// Result of brute-forcing misreports over a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: usize,
    /// Largest utility gain over truthful reporting found anywhere.
    pub worst_gap: f64,
    /// The most profitable manipulation, when one exists.
    pub worst_case: Option<Manipulation>,
    pub per_labeler: Vec<LabelerAudit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manipulation {
    pub labeler: usize,
    pub misreport: Vec<f64>,
    pub gain: f64,
}

/// Check that no labeler can gain more than `tol` by swapping their
/// truthful report for any grid point. `ablate_costs` drops the pivot
/// charges, exposing the manipulation incentive the costs exist to kill.
pub fn dsic_audit(
    true_profile: &OpinionProfile,
    dist: &dyn Distance,
    misreport_grid: &[Vec<f64>],
    tol: f64,
    ablate_costs: bool,
) -> Result<AuditReport> {
    let n = true_profile.n_labelers();
    let k = true_profile.n_answers();
    let utility_of = |i: usize, reports: &OpinionProfile| -> Result<f64> {
        let truth = &true_profile.rows()[i];
        if ablate_costs {
            let agg = mech_aggregate(dist, reports)?;
            Ok(-dist.eval(truth, &agg)?)
        } else {
            utility(i, truth, dist, reports)
        }
    };

    let mut violations = 0usize;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_case = None;
    let mut per_labeler = Vec::with_capacity(n);

    for i in 0..n {
        let truthful_utility = utility_of(i, true_profile)?;
        let cost = vcg_cost(i, dist, true_profile)?;
        let mut best_gain = f64::NEG_INFINITY;
        for point in misreport_grid {
            if point.len() != k {
                return Err(Error::Shape {
                    what: "misreport grid point",
                    expected: k,
                    got: point.len(),
                });
            }
            let deviated = true_profile.with_row(i, point.clone())?;
            let gain = utility_of(i, &deviated)? - truthful_utility;
            best_gain = best_gain.max(gain);
            if gain > tol {
                violations += 1;
                if gain > worst_gap {
                    worst_case = Some(Manipulation {
                        labeler: i,
                        misreport: point.clone(),
                        gain,
                    });
                }
            }
            worst_gap = worst_gap.max(gain);
        }
        per_labeler.push(LabelerAudit {
            cost,
            utility_truthful: truthful_utility,
            best_misreport_gain: best_gain,
        });
    }

    Ok(AuditReport {
        violations,
        worst_gap,
        worst_case,
        per_labeler,
    })
}
