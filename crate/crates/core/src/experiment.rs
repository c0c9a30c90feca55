//! Seeded end-to-end experiment pipeline.
//!
//! One run executes, per seed: population generation over a finite
//! trajectory catalog, maximum-likelihood fits across an N_p sweep,
//! likelihood clustering, aggregation-identity diagnostics, mechanism
//! truthfulness audits, and pessimistic policy selection — then merges
//! per-seed metrics into a report with per-sweep medians.
//!
//! Reproducibility contract: every stage draws from ChaCha substreams
//! derived from (config, seed), seeds run on a bounded worker pool with
//! order-preserving collection, and the report is byte-identical across
//! reruns except for the `generated_unix` timestamp. The config hash
//! binds a report to the exact configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{pl_equivalence_gap, Alpha};
use crate::error::{Error, Result};
use crate::estimate::{
    cluster_fit, confidence_radius, link_constants, mle_fit, procrustes_align, FitConfig, FitDims,
};
use crate::io;
use crate::link;
use crate::mechanism::{default_misreport_grid, dsic_audit};
use crate::model::{
    generate_dataset, generate_population, pl_probabilities, reward_eval, sample_catalog_features,
    FeatureDistribution, Population, PopulationConfig,
};
use crate::policy::{
    aggregated_policy, pessimistic_policy, value, Policy, PolicySlate, TrajectoryCatalog,
};

/// Full pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    pub fit: FitConfig,
    /// Link strategy name (`sigmoid` or `table:<path>`).
    pub link: String,
    /// Aggregation parameters exercised by the aggregate/policy stages.
    pub alphas: Vec<String>,
    /// Distance strategy names audited by the mechanism stage.
    pub distances: Vec<String>,
    /// Per-user dataset sizes; the population's own n_pairs is ignored.
    pub n_p_sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Trajectory catalog size for the policy stage.
    pub catalog_size: usize,
    /// Cluster count for the clustering stage (None skips it).
    pub clusters: Option<usize>,
    /// Answers per question for the aggregation/mechanism stages.
    pub answers: usize,
    pub audit_lattice: usize,
    pub audit_random: usize,
    pub audit_tol: f64,
    /// Boundary samples per user for aggregated pessimism.
    pub policy_samples: usize,
    /// Output directory; overridable by the CLI / environment.
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.fit.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds list is empty".into()));
        }
        if self.n_p_sweep.is_empty() || self.n_p_sweep.contains(&0) {
            return Err(Error::Validation(
                "n_p_sweep must list positive dataset sizes".into(),
            ));
        }
        if self.answers < 2 {
            return Err(Error::Validation("answers must be at least 2".into()));
        }
        if self.catalog_size < self.answers {
            return Err(Error::Validation(
                "catalog must be at least as large as the answer set".into(),
            ));
        }
        for a in &self.alphas {
            a.parse::<Alpha>()?;
        }
        for d in &self.distances {
            crate::mechanism::from_spec(d)?;
        }
        // Referenced files must exist at load time.
        link::from_spec(&self.link)?;
        for mu in [&self.population.mu0, &self.population.mu1] {
            if let FeatureDistribution::Catalog { features, .. } = mu {
                if features.is_empty() {
                    return Err(Error::Validation("empty feature catalog".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One stage's result; failures carry the error and downstream stages
/// of the same seed are skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageOutcome<T> {
    Ok { metrics: T },
    Failed { error: String },
    Skipped { reason: String },
}

impl<T> StageOutcome<T> {
    pub fn metrics(&self) -> Option<&T> {
        match self {
            StageOutcome::Ok { metrics } => Some(metrics),
            _ => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, StageOutcome::Ok { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenMetrics {
    pub sigma_k_sq: f64,
    pub normalized_diversity: f64,
    pub attempts: usize,
    pub catalog_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMetrics {
    pub n_pairs: usize,
    /// Frobenius residual of Θ̂ against Θ⋆ after Procrustes alignment.
    pub aligned_error: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Covariance-concentration diagnostic: worst relative Frobenius
    /// deviation of a user's empirical design from the exact pair
    /// covariance of the projected catalog. Observed, never enforced.
    pub max_design_deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterMetrics {
    /// Assignment accuracy up to relabeling, when ground truth exists.
    pub accuracy: Option<f64>,
    pub objective: f64,
    pub monotone: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaGap {
    pub alpha: String,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub per_alpha: Vec<AlphaGap>,
    pub max_equivalence_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceAudit {
    pub distance: String,
    pub violations: usize,
    pub worst_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MechanismMetrics {
    pub per_distance: Vec<DistanceAudit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaSuboptimality {
    pub alpha: String,
    pub suboptimality: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub n_pairs: usize,
    pub zeta: f64,
    /// Median over users of J(π_tar; r⋆ᵢ) − J(π̂ᵢ; r⋆ᵢ).
    pub personalized_suboptimality: f64,
    pub aggregated: Vec<AlphaSuboptimality>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedStages {
    pub gen: StageOutcome<GenMetrics>,
    pub fit: StageOutcome<Vec<FitMetrics>>,
    pub cluster: StageOutcome<ClusterMetrics>,
    pub aggregate: StageOutcome<AggregateMetrics>,
    pub mechanism: StageOutcome<MechanismMetrics>,
    pub policy: StageOutcome<Vec<PolicyMetrics>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub stages: SeedStages,
}

/// Per-sweep-point medians across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_pairs: usize,
    pub median_aligned_error: Option<f64>,
    pub median_personalized_suboptimality: Option<f64>,
    pub median_aggregated_suboptimality: Vec<AlphaSuboptimality>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config_hash: String,
    /// Wall-clock stamp; the only field excluded from the determinism
    /// contract.
    pub generated_unix: u64,
    pub seeds: Vec<SeedReport>,
    pub sweep: Vec<SweepPoint>,
}

impl RunReport {
    /// The report body with the timestamp normalized away, for
    /// byte-identical comparisons.
    pub fn deterministic_body(&self) -> String {
        let mut clone = self.clone();
        clone.generated_unix = 0;
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }
}

/// Worst relative deviation ‖Σ̂ᵢ − Σ⁎‖_F/‖Σ⁎‖_F of the per-user
/// empirical designs from the exact pair covariance
/// Σ⁎ = E[(ψ(τ₀) − ψ(τ₁))(ψ(τ₀) − ψ(τ₁))ᵀ] = 2·Cov(ψ) over the catalog
/// (uniform independent draws).
fn design_deviation(
    catalog: &TrajectoryCatalog,
    omega_hat: &nalgebra::DMatrix<f64>,
    designs: &[nalgebra::DMatrix<f64>],
) -> Result<f64> {
    let projected = catalog.projected(omega_hat)?;
    let (t, k) = projected.shape();
    let mean = projected.row_mean();
    let mut exact = nalgebra::DMatrix::<f64>::zeros(k, k);
    for row in 0..t {
        let centered = (projected.row(row) - &mean).transpose();
        exact += &centered * centered.transpose();
    }
    exact *= 2.0 / t as f64;
    let scale = exact.norm().max(1e-12);
    Ok(designs
        .iter()
        .map(|d| (d - &exact).norm() / scale)
        .fold(0.0, f64::max))
}

/// splitmix64, for deriving stage seeds from (seed, tag).
fn subseed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(tag)
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Assignment accuracy up to cluster relabeling (exhaustive over label
/// permutations; cluster counts here are small).
pub fn cluster_accuracy(found: &[usize], truth: &[usize], n_clusters: usize) -> f64 {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for rest in permutations(n - 1) {
            for pos in 0..n {
                let mut p = rest.clone();
                p.insert(pos, n - 1);
                out.push(p);
            }
        }
        out
    }
    let n = found.len() as f64;
    permutations(n_clusters)
        .into_iter()
        .map(|perm| {
            found
                .iter()
                .zip(truth)
                .filter(|(&f, &t)| perm[f] == t)
                .count() as f64
                / n
        })
        .fold(0.0, f64::max)
}

struct SeedContext<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    out_dir: Option<PathBuf>,
}

fn skip<T>(reason: &str) -> StageOutcome<T> {
    StageOutcome::Skipped {
        reason: reason.to_string(),
    }
}

fn run_seed(ctx: &SeedContext) -> SeedReport {
    let cfg = ctx.cfg;
    let seed = ctx.seed;

    let link = match link::from_spec(&cfg.link) {
        Ok(l) => l,
        Err(e) => {
            return SeedReport {
                seed,
                stages: SeedStages {
                    gen: StageOutcome::Failed {
                        error: e.to_string(),
                    },
                    fit: skip("link failed to load"),
                    cluster: skip("link failed to load"),
                    aggregate: skip("link failed to load"),
                    mechanism: skip("link failed to load"),
                    policy: skip("link failed to load"),
                },
            };
        }
    };
    let link = link.as_ref();

    // ---- gen: population + catalog + datasets across the sweep ----
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 1));
    let population: Result<(Population, TrajectoryCatalog, PopulationConfig)> = (|| {
        let pop = generate_population(&cfg.population, &mut rng)?;
        let feats = sample_catalog_features(&cfg.population, cfg.catalog_size, &mut rng)?;
        let catalog = TrajectoryCatalog::new(feats)?;
        // The sweep datasets draw trajectories from the catalog so the
        // policy stage's expectations are exact.
        let catalog_rows: Vec<Vec<f64>> = catalog
            .features()
            .iter()
            .map(|f| f.as_slice().to_vec())
            .collect();
        let mu = FeatureDistribution::Catalog {
            features: catalog_rows,
            weights: None,
        };
        let mut pop_cfg = cfg.population.clone();
        pop_cfg.mu0 = mu.clone();
        pop_cfg.mu1 = mu;
        Ok((pop, catalog, pop_cfg))
    })();

    let (pop, catalog, pop_cfg, gen_outcome) = match population {
        Ok((pop, catalog, pop_cfg)) => {
            let metrics = GenMetrics {
                sigma_k_sq: pop.diversity.sigma_k_sq,
                normalized_diversity: pop.diversity.normalized,
                attempts: pop.diversity.attempts,
                catalog_size: catalog.len(),
            };
            (
                Some(pop),
                Some(catalog),
                Some(pop_cfg),
                StageOutcome::Ok { metrics },
            )
        }
        Err(e) => (
            None,
            None,
            None,
            StageOutcome::Failed {
                error: e.to_string(),
            },
        ),
    };

    let (Some(pop), Some(catalog), Some(pop_cfg)) = (pop, catalog, pop_cfg) else {
        return SeedReport {
            seed,
            stages: SeedStages {
                gen: gen_outcome,
                fit: skip("generation failed"),
                cluster: skip("generation failed"),
                aggregate: skip("generation failed"),
                mechanism: skip("generation failed"),
                policy: skip("generation failed"),
            },
        };
    };

    // ---- fit: MLE per sweep point ----
    let theta_star = pop.model.theta_matrix();
    let mut fits = Vec::new();
    let fit_outcome: StageOutcome<Vec<FitMetrics>> = (|| -> Result<Vec<FitMetrics>> {
        let mut metrics = Vec::new();
        for (i, &n_pairs) in cfg.n_p_sweep.iter().enumerate() {
            let mut gen_cfg = pop_cfg.clone();
            gen_cfg.n_pairs = n_pairs;
            let data = generate_dataset(&pop.model, &gen_cfg, link, subseed(seed, 100 + i as u64))?;
            let dims = FitDims {
                rep_dim: pop_cfg.rep_dim,
                feat_dim: pop_cfg.dim,
                n_users: pop_cfg.n_users,
                n_pairs,
                bound_b: pop_cfg.bound_b,
                r_max: pop_cfg.r_max,
            };
            let fit = mle_fit(&data, link, dims, &cfg.fit, subseed(seed, 200 + i as u64))?;
            let (_, aligned_error) = procrustes_align(&fit.estimate.theta_matrix(), &theta_star)?;
            let max_design_deviation =
                design_deviation(&catalog, &fit.estimate.omega_hat, &fit.estimate.designs)?;
            if let Some(dir) = &ctx.out_dir {
                io::save_dataset(
                    &data,
                    io::DatasetMeta {
                        rep_dim: pop_cfg.rep_dim,
                        bound_b: pop_cfg.bound_b,
                        r_max: pop_cfg.r_max,
                        seed,
                    },
                    dir.join(format!("dataset_np{n_pairs}.json")),
                )?;
                io::save_estimate(
                    &fit.estimate,
                    &io::EstimateMeta {
                        n_pairs,
                        r_max: pop_cfg.r_max,
                        lambda: cfg.fit.lambda,
                        link: cfg.link.clone(),
                    },
                    dir.join(format!("estimate_np{n_pairs}.json")),
                )?;
                io::save_fit_log(&fit.trace, dir.join(format!("fitlog_np{n_pairs}.csv")))?;
            }
            metrics.push(FitMetrics {
                n_pairs,
                aligned_error,
                log_likelihood: fit.estimate.log_likelihood,
                converged: fit.converged,
                grad_norm: fit.grad_norm,
                iterations: fit.iterations,
                max_design_deviation,
            });
            fits.push((n_pairs, data, fit));
        }
        Ok(metrics)
    })()
    .map_or_else(
        |e| StageOutcome::Failed {
            error: e.to_string(),
        },
        |metrics| StageOutcome::Ok { metrics },
    );

    // ---- cluster ----
    let cluster_outcome = match (cfg.clusters, fits.last()) {
        (None, _) => skip("clustering not configured"),
        (_, None) => skip("no fitted dataset available"),
        (Some(k), Some((_, data, fit))) => (|| -> Result<ClusterMetrics> {
            let clustering = cluster_fit(
                data,
                k,
                &fit.estimate.omega_hat,
                link,
                pop_cfg.bound_b,
                &cfg.fit,
                subseed(seed, 300),
            )?;
            let monotone = clustering
                .objective_trace
                .windows(2)
                .all(|w| w[1] >= w[0] - 1e-9);
            let accuracy = pop
                .cluster_labels
                .as_ref()
                .map(|truth| cluster_accuracy(&clustering.assignment, truth, k));
            Ok(ClusterMetrics {
                accuracy,
                objective: clustering.objective,
                monotone,
            })
        })()
        .map_or_else(
            |e| StageOutcome::Failed {
                error: e.to_string(),
            },
            |metrics| StageOutcome::Ok { metrics },
        ),
    };

    // ---- aggregate: Plackett-Luce equivalence diagnostics ----
    let answer_features: Vec<_> = catalog.features()[..cfg.answers].to_vec();
    let reward_table: Result<Vec<Vec<f64>>> = (0..pop_cfg.n_users)
        .map(|u| {
            answer_features
                .iter()
                .map(|f| reward_eval(&pop.model, u, f))
                .collect()
        })
        .collect();
    let aggregate_outcome = (|| -> Result<AggregateMetrics> {
        let table = reward_table?;
        let mut per_alpha = Vec::new();
        let mut max_gap: f64 = 0.0;
        for raw in &cfg.alphas {
            let alpha: Alpha = raw.parse()?;
            let gap = pl_equivalence_gap(alpha, &table)?;
            max_gap = max_gap.max(gap);
            per_alpha.push(AlphaGap {
                alpha: raw.clone(),
                gap,
            });
        }
        Ok(AggregateMetrics {
            per_alpha,
            max_equivalence_gap: max_gap,
        })
    })()
    .map_or_else(
        |e| StageOutcome::Failed {
            error: e.to_string(),
        },
        |metrics| StageOutcome::Ok { metrics },
    );

    // ---- mechanism: truthfulness audits on the PL opinion profile ----
    let mechanism_outcome = (|| -> Result<MechanismMetrics> {
        let rows: Vec<Vec<f64>> = (0..pop_cfg.n_users)
            .map(|u| {
                let rewards: Vec<f64> = answer_features
                    .iter()
                    .map(|f| reward_eval(&pop.model, u, f))
                    .collect::<Result<_>>()?;
                pl_probabilities(&rewards)
            })
            .collect::<Result<_>>()?;
        let profile = crate::aggregate::OpinionProfile::new(rows)?;
        let grid = default_misreport_grid(
            cfg.answers,
            cfg.audit_lattice,
            cfg.audit_random,
            subseed(seed, 400),
        );
        let mut per_distance = Vec::new();
        for spec in &cfg.distances {
            let dist = crate::mechanism::from_spec(spec)?;
            let report = dsic_audit(&profile, dist.as_ref(), &grid, cfg.audit_tol, false)?;
            if let Some(dir) = &ctx.out_dir {
                let path = dir.join(format!("audit_{}.json", spec.replace(':', "_")));
                fs::write(
                    path,
                    serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
                )?;
            }
            per_distance.push(DistanceAudit {
                distance: spec.clone(),
                violations: report.violations,
                worst_gap: report.worst_gap,
            });
        }
        Ok(MechanismMetrics { per_distance })
    })()
    .map_or_else(
        |e| StageOutcome::Failed {
            error: e.to_string(),
        },
        |metrics| StageOutcome::Ok { metrics },
    );

    // ---- policy: pessimistic selection across the sweep ----
    let policy_outcome = (|| -> Result<Vec<PolicyMetrics>> {
        if fits.is_empty() {
            return Err(Error::Input("no fits available".into()));
        }
        let consts = link_constants(link, pop_cfg.r_max)?;
        let slate = PolicySlate::default_for(catalog.len())?;
        let mu_ref = Policy::uniform(catalog.len())?;
        let mut out = Vec::new();
        for (n_pairs, _, fit) in &fits {
            let dims = FitDims {
                rep_dim: pop_cfg.rep_dim,
                feat_dim: pop_cfg.dim,
                n_users: pop_cfg.n_users,
                n_pairs: *n_pairs,
                bound_b: pop_cfg.bound_b,
                r_max: pop_cfg.r_max,
            };
            let zeta = confidence_radius(&cfg.fit, &consts, dims);
            let mut per_user = Vec::new();
            let mut ells = Vec::new();
            for u in 0..pop_cfg.n_users {
                let ell = fit.estimate.ellipsoid(u, cfg.fit.lambda, zeta)?;
                let star: Vec<f64> = catalog
                    .features()
                    .iter()
                    .map(|f| reward_eval(&pop.model, u, f))
                    .collect::<Result<_>>()?;
                let target = star.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let choice =
                    pessimistic_policy(&slate, &ell, &fit.estimate.omega_hat, &catalog, &mu_ref)?;
                let attained = value(&choice.chosen, &star)?;
                per_user.push(target - attained);
                ells.push(ell);
            }
            per_user.sort_by(|a, b| a.total_cmp(b));
            let personalized = per_user[per_user.len() / 2];

            let mut aggregated = Vec::new();
            for raw in &cfg.alphas {
                let alpha: Alpha = raw.parse()?;
                let choice = aggregated_policy(
                    &slate,
                    &ells,
                    &fit.estimate.omega_hat,
                    alpha,
                    &catalog,
                    &mu_ref,
                    cfg.policy_samples,
                    subseed(seed, 500),
                )?;
                // True aggregated reward of every trajectory.
                let agg_star: Vec<f64> = catalog
                    .features()
                    .iter()
                    .map(|f| {
                        let rewards: Vec<f64> = (0..pop_cfg.n_users)
                            .map(|u| reward_eval(&pop.model, u, f))
                            .collect::<Result<_>>()?;
                        crate::aggregate::agg_reward(alpha, &rewards)
                    })
                    .collect::<Result<_>>()?;
                let target = agg_star.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let attained = value(&choice.chosen, &agg_star)?;
                aggregated.push(AlphaSuboptimality {
                    alpha: raw.clone(),
                    suboptimality: target - attained,
                });
            }
            out.push(PolicyMetrics {
                n_pairs: *n_pairs,
                zeta,
                personalized_suboptimality: personalized,
                aggregated,
            });
        }
        Ok(out)
    })()
    .map_or_else(
        |e| StageOutcome::Failed {
            error: e.to_string(),
        },
        |metrics| StageOutcome::Ok { metrics },
    );

    SeedReport {
        seed,
        stages: SeedStages {
            gen: gen_outcome,
            fit: fit_outcome,
            cluster: cluster_outcome,
            aggregate: aggregate_outcome,
            mechanism: mechanism_outcome,
            policy: policy_outcome,
        },
    }
}

fn sweep_summary(cfg: &ExperimentConfig, seeds: &[SeedReport]) -> Vec<SweepPoint> {
    cfg.n_p_sweep
        .iter()
        .map(|&n_pairs| {
            let mut aligned = Vec::new();
            let mut personalized = Vec::new();
            let mut aggregated: Vec<Vec<f64>> = vec![Vec::new(); cfg.alphas.len()];
            for seed in seeds {
                if let Some(fit) = seed.stages.fit.metrics() {
                    if let Some(m) = fit.iter().find(|m| m.n_pairs == n_pairs) {
                        aligned.push(m.aligned_error);
                    }
                }
                if let Some(policy) = seed.stages.policy.metrics() {
                    if let Some(m) = policy.iter().find(|m| m.n_pairs == n_pairs) {
                        personalized.push(m.personalized_suboptimality);
                        for (slot, sub) in aggregated.iter_mut().zip(&m.aggregated) {
                            slot.push(sub.suboptimality);
                        }
                    }
                }
            }
            SweepPoint {
                n_pairs,
                median_aligned_error: median(&mut aligned),
                median_personalized_suboptimality: median(&mut personalized),
                median_aggregated_suboptimality: cfg
                    .alphas
                    .iter()
                    .zip(aggregated.iter_mut())
                    .filter_map(|(alpha, vals)| {
                        median(vals).map(|m| AlphaSuboptimality {
                            alpha: alpha.clone(),
                            suboptimality: m,
                        })
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Execute the full pipeline for every seed (bounded worker pool, one
/// worker per seed) and write `report.json` plus `sweep.csv` to the
/// output directory when one is set.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone());
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
    }

    let contexts: Vec<SeedContext> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let seed_dir = out_dir.as_ref().map(|d| d.join(format!("seed_{seed}")));
            if let Some(dir) = &seed_dir {
                let _ = fs::create_dir_all(dir);
            }
            SeedContext {
                cfg,
                seed,
                out_dir: seed_dir,
            }
        })
        .collect();

    // Order-preserving parallel map keeps the report deterministic.
    let seeds: Vec<SeedReport> = contexts.par_iter().map(run_seed).collect();
    let sweep = sweep_summary(cfg, &seeds);
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.content_hash(),
        generated_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seeds,
        sweep,
    };

    if let Some(dir) = &out_dir {
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
        let mut csv = String::from("n_pairs,median_aligned_error,median_personalized_subopt\n");
        for point in &report.sweep {
            csv.push_str(&format!(
                "{},{},{}\n",
                point.n_pairs,
                point
                    .median_aligned_error
                    .map_or_else(|| "".into(), |v| v.to_string()),
                point
                    .median_personalized_suboptimality
                    .map_or_else(|| "".into(), |v| v.to_string()),
            ));
        }
        fs::write(dir.join("sweep.csv"), csv)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_diversity_target, ThetaMode};

    pub(crate) fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            population: PopulationConfig {
                n_users: 2,
                dim: 6,
                rep_dim: 2,
                bound_b: 1.0,
                r_max: 1.0,
                n_pairs: 50,
                mu0: FeatureDistribution::Gaussian,
                mu1: FeatureDistribution::Gaussian,
                diversity_target: default_diversity_target(2, 2),
                theta_mode: ThetaMode::Sphere,
            },
            fit: FitConfig {
                max_iters: 40,
                restarts: 1,
                tol: 1e-4,
                ..FitConfig::default()
            },
            link: "sigmoid".into(),
            alphas: vec!["0".into(), "-1".into()],
            distances: vec!["renyi:0.5".into()],
            n_p_sweep: vec![50],
            seeds: vec![7],
            catalog_size: 8,
            clusters: Some(2),
            answers: 3,
            audit_lattice: 8,
            audit_random: 40,
            audit_tol: 1e-8,
            policy_samples: 32,
            output_dir: None,
        }
    }

    #[test]
    fn smoke_run_covers_all_stages() {
        let start = std::time::Instant::now();
        let report = run_experiment(&smoke_config(), None).unwrap();
        assert!(start.elapsed().as_secs() < 10, "smoke run too slow");
        assert_eq!(report.seeds.len(), 1);
        let stages = &report.seeds[0].stages;
        assert!(stages.gen.is_ok(), "{:?}", stages.gen);
        assert!(stages.fit.is_ok(), "{:?}", stages.fit);
        assert!(stages.cluster.is_ok(), "{:?}", stages.cluster);
        assert!(stages.aggregate.is_ok(), "{:?}", stages.aggregate);
        assert!(stages.mechanism.is_ok(), "{:?}", stages.mechanism);
        assert!(stages.policy.is_ok(), "{:?}", stages.policy);
        // The identity diagnostic is tight regardless of fit quality.
        let agg = stages.aggregate.metrics().unwrap();
        assert!(agg.max_equivalence_gap <= 1e-9);
        // Concentration is observed (reported), not enforced.
        let fit = stages.fit.metrics().unwrap();
        assert!(fit
            .iter()
            .all(|m| m.max_design_deviation.is_finite() && m.max_design_deviation > 0.0));
        // The truthful audit is clean.
        let mech = stages.mechanism.metrics().unwrap();
        assert!(mech.per_distance.iter().all(|d| d.violations == 0));
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = smoke_config();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.deterministic_body(), b.deterministic_body());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = smoke_config();
        let mut b = smoke_config();
        assert_eq!(a.content_hash(), b.content_hash());
        b.answers = 4;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = smoke_config();
        cfg.seeds.clear();
        assert!(run_experiment(&cfg, None).is_err());
    }

    #[test]
    fn stage_failure_is_isolated_and_prior_outputs_survive() {
        // More clusters than users fails the clustering stage at run
        // time; everything before and after it must still complete, and
        // the artifacts written by earlier stages must stay on disk.
        let mut cfg = smoke_config();
        cfg.clusters = Some(10);
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, Some(dir.path())).unwrap();
        let stages = &report.seeds[0].stages;
        assert!(stages.gen.is_ok());
        assert!(stages.fit.is_ok());
        match &stages.cluster {
            StageOutcome::Failed { error } => {
                assert!(error.contains("clusters"), "unexpected error: {error}")
            }
            other => panic!("expected a cluster failure, got {other:?}"),
        }
        assert!(stages.aggregate.is_ok());
        assert!(stages.mechanism.is_ok());
        assert!(stages.policy.is_ok());
        let seed_dir = dir.path().join("seed_7");
        assert!(seed_dir.join("dataset_np50.json").exists());
        assert!(seed_dir.join("estimate_np50.json").exists());
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn cluster_accuracy_handles_relabeling() {
        let truth = vec![0, 1, 0, 1];
        let flipped = vec![1, 0, 1, 0];
        assert_eq!(cluster_accuracy(&flipped, &truth, 2), 1.0);
        assert_eq!(cluster_accuracy(&truth, &truth, 2), 1.0);
        let half = vec![0, 0, 0, 1];
        assert_eq!(cluster_accuracy(&half, &truth, 2), 0.75);
    }
}
