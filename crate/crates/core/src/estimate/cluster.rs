//! Likelihood clustering of users under a frozen representation.
//!
//! Solves the max-max program
//!
//! ```text
//! max_{‖θ₍ₖ₎‖≤B} Σᵢ max_k Σⱼ log P_{ω̂,θ₍ₖ₎}(oᵢ⁽ʲ⁾ | τᵢ,₀⁽ʲ⁾, τᵢ,₁⁽ʲ⁾)
//! ```
//!
//! by an EM-style loop: assign each user to the cluster whose parameter
//! explains their data best (ties to the lowest index), then improve each
//! cluster's parameter by backtracked projected ascent on its members'
//! pooled data. Both phases are non-decreasing in the objective, so the
//! trace is monotone. An emptied cluster is re-seeded from the worst-fit
//! user (the user with the lowest best-cluster likelihood).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::Link;
use crate::model::Dataset;

use super::solver::FrozenBlocks;
use super::FitConfig;

/// A clustering of users into K shared parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clustering {
    pub cluster_thetas: Vec<DVector<f64>>,
    /// f : user → cluster.
    pub assignment: Vec<usize>,
    /// Attained value of the max-max objective (sum over users).
    pub objective: f64,
    /// Objective after each EM iteration; non-decreasing.
    pub objective_trace: Vec<f64>,
}

/// Steps used when (re)seeding a cluster parameter from one user's data.
const SEED_ASCENT_STEPS: usize = 30;

struct EmState<'a> {
    blocks: &'a FrozenBlocks,
    thetas: Vec<DVector<f64>>,
    link: &'a dyn Link,
}

impl EmState<'_> {
    /// Per-user best cluster (ties → lowest index) and its likelihood.
    fn assign(&self) -> (Vec<usize>, Vec<f64>) {
        let n = self.blocks.n_users();
        let mut assignment = vec![0usize; n];
        let mut best_ll = vec![f64::NEG_INFINITY; n];
        for i in 0..n {
            for (k, theta) in self.thetas.iter().enumerate() {
                let ll = self.blocks.user_log_likelihood(i, theta, self.link);
                if ll > best_ll[i] {
                    best_ll[i] = ll;
                    assignment[i] = k;
                }
            }
        }
        (assignment, best_ll)
    }

    fn objective(&self) -> f64 {
        self.assign().1.iter().sum()
    }
}

/// Fit K cluster parameters and the user→cluster map by EM-style
/// alternating maximization; returns the best of `cfg.restarts` seeded
/// initializations.
pub fn cluster_fit(
    dataset: &Dataset,
    n_clusters: usize,
    omega_hat: &DMatrix<f64>,
    link: &dyn Link,
    bound_b: f64,
    cfg: &FitConfig,
    seed: u64,
) -> Result<Clustering> {
    cfg.validate()?;
    if n_clusters == 0 {
        return Err(Error::Input("need at least one cluster".into()));
    }
    if n_clusters > dataset.n_users {
        return Err(Error::Input(format!(
            "cannot form {n_clusters} clusters from {} users",
            dataset.n_users
        )));
    }
    if bound_b <= 0.0 {
        return Err(Error::Validation(
            "parameter bound B must be positive".into(),
        ));
    }
    let blocks = FrozenBlocks::new(dataset, omega_hat, bound_b)?;
    let k = omega_hat.nrows();

    let mut best: Option<Clustering> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);

        // Seed each cluster from a distinct random user's individual fit.
        let mut order: Vec<usize> = (0..dataset.n_users).collect();
        order.shuffle(&mut rng);
        let mut state = EmState {
            blocks: &blocks,
            thetas: (0..n_clusters)
                .map(|c| {
                    let mut theta = DVector::zeros(k);
                    blocks.ascend_pooled(
                        &[order[c]],
                        &mut theta,
                        link,
                        cfg.step_size,
                        SEED_ASCENT_STEPS,
                    );
                    theta
                })
                .collect(),
            link,
        };

        let mut trace = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        let mut assignment = vec![0usize; dataset.n_users];
        for _iter in 0..cfg.max_iters {
            // Assignment phase, with empty-cluster re-seeding.
            let mut best_ll;
            for _ in 0..n_clusters {
                let (a, ll) = state.assign();
                assignment = a;
                best_ll = ll;
                let empty = (0..n_clusters).find(|c| !assignment.contains(c));
                match empty {
                    None => break,
                    Some(c) => {
                        // Re-seed from the worst-fit user; this adds a
                        // (weakly) better option for that user, so the
                        // objective cannot drop.
                        let worst = (0..dataset.n_users)
                            .min_by(|&a, &b| best_ll[a].total_cmp(&best_ll[b]))
                            .expect("non-empty population");
                        let mut theta = DVector::zeros(k);
                        blocks.ascend_pooled(
                            &[worst],
                            &mut theta,
                            link,
                            cfg.step_size,
                            SEED_ASCENT_STEPS,
                        );
                        state.thetas[c] = theta;
                    }
                }
            }

            // Update phase: ascend each cluster on its members' data.
            for c in 0..n_clusters {
                let members: Vec<usize> = (0..dataset.n_users)
                    .filter(|&i| assignment[i] == c)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut theta = state.thetas[c].clone();
                blocks.ascend_pooled(&members, &mut theta, link, cfg.step_size, cfg.inner_iters);
                state.thetas[c] = theta;
            }

            let objective = state.objective();
            trace.push(objective);
            if objective - prev <= 1e-10 * (1.0 + objective.abs())
                && !trace.is_empty()
                && trace.len() > 1
            {
                break;
            }
            prev = objective;
        }

        let (final_assignment, final_ll) = state.assign();
        let candidate = Clustering {
            cluster_thetas: state.thetas,
            assignment: final_assignment,
            objective: final_ll.iter().sum(),
            objective_trace: trace,
        };
        let better = match &best {
            None => true,
            Some(b) => candidate.objective > b.objective,
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("restarts >= 1"))
}
