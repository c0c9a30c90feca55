//! Command-line driver for the preference aggregation toolkit.
//!
//! Subcommands cover the full pipeline: synthetic data generation,
//! model fitting, transfer fits, clustering, reward aggregation,
//! opinion pooling, mechanism evaluation, truthfulness audits,
//! pessimistic policy evaluation, and the seeded end-to-end runner.
//!
//! Errors print a single `error: ...` line to stderr and exit nonzero.
//! `PREFAGG_OUT` sets the default output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use prefagg_core::aggregate::{agg_reward, axiom_report, pool_opinions, Alpha};
use prefagg_core::estimate::{
    cluster_fit, confidence_radius, link_constants, mle_fit, transfer_fit, FitConfig, FitDims,
};
use prefagg_core::experiment::{run_experiment, ExperimentConfig};
use prefagg_core::io;
use prefagg_core::mechanism::{default_misreport_grid, dsic_audit, mechanism_outcome};
use prefagg_core::model::{
    generate_dataset, generate_population, sample_catalog_features, PopulationConfig,
};
use prefagg_core::policy::{
    aggregated_policy, pessimistic_policy, value, Policy, PolicySlate, TrajectoryCatalog,
};
use prefagg_core::{link, mechanism};

#[derive(Parser)]
#[command(
    name = "prefagg",
    version,
    about = "Estimate, aggregate, and audit heterogeneous preference models"
)]
struct Cli {
    /// Master seed for anything stochastic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for artifacts (default: $PREFAGG_OUT or `.`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population and labeled comparison dataset.
    Gen(GenArgs),
    /// Fit the shared representation and per-user parameters by MLE.
    Fit(FitArgs),
    /// Fit a new user's parameter against a frozen representation.
    Transfer(TransferArgs),
    /// Cluster users by likelihood under shared cluster parameters.
    Cluster(ClusterArgs),
    /// Aggregate a reward table across users for each trajectory.
    Aggregate(AggregateArgs),
    /// Pool an opinion profile into a single distribution.
    Pool(PoolArgs),
    /// Evaluate the welfare-maximizing mechanism on an opinion profile.
    Mechanism(MechanismArgs),
    /// Brute-force a truthfulness audit over a misreport grid.
    Audit(AuditArgs),
    /// Pessimistic policy selection over a trajectory catalog.
    PolicyEval(PolicyEvalArgs),
    /// Run the full per-seed experiment pipeline from a config file.
    Run(RunArgs),
    /// List the registered link and distance strategies.
    Strategies,
}

#[derive(Args)]
struct GenArgs {
    /// Population config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Dataset output path.
    #[arg(long, default_value = "dataset.json")]
    out: PathBuf,
    /// Also write a feature catalog CSV of this size.
    #[arg(long)]
    catalog_size: Option<usize>,
    #[arg(long, default_value = "catalog.csv")]
    catalog_out: PathBuf,
    /// Link strategy used for labeling.
    #[arg(long, default_value = "sigmoid")]
    link: String,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset JSON produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Fit config JSON (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "estimate.json")]
    out: PathBuf,
    /// Per-iteration fit log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "sigmoid")]
    link: String,
}

#[derive(Args)]
struct TransferArgs {
    /// Dataset JSON holding the new user's comparisons.
    #[arg(long)]
    data: PathBuf,
    /// Which user index in the dataset is the new user.
    #[arg(long, default_value_t = 0)]
    user: usize,
    /// Estimate JSON providing the frozen representation.
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "transfer.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Estimate JSON providing the frozen representation.
    #[arg(long)]
    estimate: PathBuf,
    /// Number of clusters.
    #[arg(short = 'k', long)]
    clusters: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "clustering.json")]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    /// Reward CSV: one row per user, one column per trajectory.
    #[arg(long)]
    rewards: PathBuf,
    /// Aggregation parameter: `ninf`, `+inf`, or a float.
    #[arg(long, allow_hyphen_values = true)]
    alpha: String,
    /// Aggregated-reward CSV output.
    #[arg(long, default_value = "aggregate.csv")]
    out: PathBuf,
    /// Axiom-probe report JSON (default: `<out>.axioms.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Random probes per axiom.
    #[arg(long, default_value_t = 1000)]
    probes: usize,
}

#[derive(Args)]
struct PoolArgs {
    /// Opinion CSV: one simplex row per labeler.
    #[arg(long)]
    opinions: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    alpha: String,
    /// Pooled-distribution CSV output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MechanismArgs {
    #[arg(long)]
    opinions: PathBuf,
    /// Distance strategy: `kl` or `renyi:<alpha>`.
    #[arg(long, default_value = "renyi:0.5")]
    distance: String,
    #[arg(long, default_value = "mechanism.json")]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    opinions: PathBuf,
    #[arg(long, default_value = "renyi:0.5")]
    distance: String,
    /// Simplex lattice resolution of the misreport grid.
    #[arg(long, default_value_t = 20)]
    lattice: usize,
    /// Random misreports added to the grid.
    #[arg(long, default_value_t = 1000)]
    random: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Drop the pivot costs to expose manipulation incentives.
    #[arg(long)]
    ablate_costs: bool,
    #[arg(long, default_value = "audit.json")]
    out: PathBuf,
}

#[derive(Args)]
struct PolicyEvalArgs {
    /// Trajectory catalog CSV.
    #[arg(long)]
    catalog: PathBuf,
    /// Estimate JSON from `fit`.
    #[arg(long)]
    estimate: PathBuf,
    /// Aggregate across users with this parameter instead of selecting
    /// for `--user`.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    /// User index for personalized selection.
    #[arg(long, default_value_t = 0)]
    user: usize,
    /// Confidence radius override (default: the theoretical radius).
    #[arg(long)]
    zeta: Option<f64>,
    /// Reference policy: `uniform` or a trajectory index.
    #[arg(long, default_value = "uniform")]
    mu_ref: String,
    /// Ground-truth rewards CSV (users x trajectories) for
    /// suboptimality reporting.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Boundary samples per user for aggregated selection.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "policy.json")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    single_seed: Option<u64>,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} from {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} from {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os("PREFAGG_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

fn fit_config(path: &Option<PathBuf>) -> Result<FitConfig> {
    match path {
        None => Ok(FitConfig::default()),
        Some(p) => load_json(p, "fit config"),
    }
}

fn dims_from(meta: &io::DatasetMeta, dataset: &prefagg_core::model::Dataset) -> FitDims {
    let per_user = dataset.records.len() / dataset.n_users.max(1);
    FitDims {
        rep_dim: meta.rep_dim,
        feat_dim: dataset.dim,
        n_users: dataset.n_users,
        n_pairs: per_user.max(1),
        bound_b: meta.bound_b,
        r_max: meta.r_max,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = dispatch(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let dir = out_dir(cli);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).ok();
    }
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli, &dir, args),
        Command::Fit(args) => cmd_fit(&dir, args),
        Command::Transfer(args) => cmd_transfer(&dir, args),
        Command::Cluster(args) => cmd_cluster(cli, &dir, args),
        Command::Aggregate(args) => cmd_aggregate(cli, &dir, args),
        Command::Pool(args) => cmd_pool(&dir, args),
        Command::Mechanism(args) => cmd_mechanism(&dir, args),
        Command::Audit(args) => cmd_audit(cli, &dir, args),
        Command::PolicyEval(args) => cmd_policy_eval(cli, &dir, args),
        Command::Run(args) => cmd_run(cli, &dir, args),
        Command::Strategies => cmd_strategies(),
    }
}

fn cmd_gen(cli: &Cli, dir: &Path, args: &GenArgs) -> Result<()> {
    let cfg: PopulationConfig = load_json(&args.config, "population config")?;
    let link = link::from_spec(&args.link)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let population = generate_population(&cfg, &mut rng)?;
    let dataset = generate_dataset(&population.model, &cfg, link.as_ref(), cli.seed)?;
    io::save_dataset(
        &dataset,
        io::DatasetMeta {
            rep_dim: cfg.rep_dim,
            bound_b: cfg.bound_b,
            r_max: cfg.r_max,
            seed: cli.seed,
        },
        resolve(dir, &args.out),
    )?;
    println!("{}", resolve(dir, &args.out).display());
    if let Some(size) = args.catalog_size {
        let feats = sample_catalog_features(&cfg, size, &mut rng)?;
        let catalog = TrajectoryCatalog::new(feats)?;
        io::save_catalog(&catalog, resolve(dir, &args.catalog_out))?;
        println!("{}", resolve(dir, &args.catalog_out).display());
    }
    eprintln!(
        "diversity sigma_k^2 = {:.6} (normalized {:.6}, {} attempt(s))",
        population.diversity.sigma_k_sq,
        population.diversity.normalized,
        population.diversity.attempts
    );
    Ok(())
}

fn cmd_fit(dir: &Path, args: &FitArgs) -> Result<()> {
    let (dataset, meta) = io::load_dataset(&args.data)?;
    let cfg = fit_config(&args.config)?;
    let link = link::from_spec(&args.link)?;
    let dims = dims_from(&meta, &dataset);
    let fit = mle_fit(&dataset, link.as_ref(), dims, &cfg, meta.seed)?;
    io::save_estimate(
        &fit.estimate,
        &io::EstimateMeta {
            n_pairs: dims.n_pairs,
            r_max: meta.r_max,
            lambda: cfg.lambda,
            link: args.link.clone(),
        },
        resolve(dir, &args.out),
    )?;
    println!("{}", resolve(dir, &args.out).display());
    if let Some(log) = &args.log {
        io::save_fit_log(&fit.trace, resolve(dir, log))?;
        println!("{}", resolve(dir, log).display());
    }
    eprintln!(
        "log-likelihood {:.6}, converged {}, grad norm {:.3e} after {} iterations",
        fit.estimate.log_likelihood, fit.converged, fit.grad_norm, fit.iterations
    );
    Ok(())
}

fn cmd_transfer(dir: &Path, args: &TransferArgs) -> Result<()> {
    let (dataset, dmeta) = io::load_dataset(&args.data)?;
    let (estimate, emeta) = io::load_estimate(&args.estimate)?;
    let cfg = fit_config(&args.config)?;
    let link = link::from_spec(&emeta.link)?;
    let groups = dataset.by_user();
    let records = groups
        .get(args.user)
        .filter(|g| !g.is_empty())
        .ok_or_else(|| anyhow!("dataset has no records for user {}", args.user))?;
    let dims = FitDims {
        rep_dim: estimate.rep_dim(),
        feat_dim: dataset.dim,
        n_users: estimate.n_users(),
        n_pairs: records.len(),
        bound_b: estimate.bound_b,
        r_max: dmeta.r_max,
    };
    let out = transfer_fit(records, &estimate.omega_hat, link.as_ref(), dims, &cfg)?;
    let payload = json!({
        "theta": out.theta.as_slice(),
        "radius": out.ellipsoid.radius(),
        "log_likelihood": out.log_likelihood,
        "converged": out.converged,
    });
    write_json(&resolve(dir, &args.out), &payload)
}

fn cmd_cluster(cli: &Cli, dir: &Path, args: &ClusterArgs) -> Result<()> {
    let (dataset, _) = io::load_dataset(&args.data)?;
    let (estimate, emeta) = io::load_estimate(&args.estimate)?;
    let cfg = fit_config(&args.config)?;
    let link = link::from_spec(&emeta.link)?;
    let clustering = cluster_fit(
        &dataset,
        args.clusters,
        &estimate.omega_hat,
        link.as_ref(),
        estimate.bound_b,
        &cfg,
        cli.seed,
    )?;
    let payload = json!({
        "assignment": clustering.assignment,
        "cluster_thetas": clustering
            .cluster_thetas
            .iter()
            .map(|t| t.as_slice().to_vec())
            .collect::<Vec<_>>(),
        "objective": clustering.objective,
        "objective_trace": clustering.objective_trace,
    });
    write_json(&resolve(dir, &args.out), &payload)
}

fn cmd_aggregate(cli: &Cli, dir: &Path, args: &AggregateArgs) -> Result<()> {
    let alpha: Alpha = args.alpha.parse()?;
    let table = io::load_float_rows(&args.rewards)?;
    let n_cols = table[0].len();
    if table.iter().any(|r| r.len() != n_cols) {
        bail!("reward rows have inconsistent lengths");
    }
    let aggregated: Vec<f64> = (0..n_cols)
        .map(|c| {
            let column: Vec<f64> = table.iter().map(|r| r[c]).collect();
            agg_reward(alpha, &column).map_err(Into::into)
        })
        .collect::<Result<_>>()?;
    let out = resolve(dir, &args.out);
    io::save_float_rows(&[aggregated], &out)?;
    println!("{}", out.display());

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| out.with_extension("axioms.json"));
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let report = axiom_report(alpha, table.len(), args.probes, &mut rng)?;
    write_json(&resolve(dir, &report_path), &serde_json::to_value(&report)?)
}

fn cmd_pool(dir: &Path, args: &PoolArgs) -> Result<()> {
    let alpha: Alpha = args.alpha.parse()?;
    let profile = io::load_profile(&args.opinions)?;
    let pooled = pool_opinions(alpha, &profile)?;
    match &args.out {
        Some(path) => {
            let path = resolve(dir, path);
            io::save_float_rows(&[pooled], &path)?;
            println!("{}", path.display());
        }
        None => {
            let line: Vec<String> = pooled.iter().map(|v| v.to_string()).collect();
            println!("{}", line.join(","));
        }
    }
    Ok(())
}

fn cmd_mechanism(dir: &Path, args: &MechanismArgs) -> Result<()> {
    let profile = io::load_profile(&args.opinions)?;
    let dist = mechanism::from_spec(&args.distance)?;
    let outcome = mechanism_outcome(dist.as_ref(), &profile)?;
    write_json(&resolve(dir, &args.out), &serde_json::to_value(&outcome)?)
}

fn cmd_audit(cli: &Cli, dir: &Path, args: &AuditArgs) -> Result<()> {
    let profile = io::load_profile(&args.opinions)?;
    let dist = mechanism::from_spec(&args.distance)?;
    let grid = default_misreport_grid(profile.n_answers(), args.lattice, args.random, cli.seed);
    let report = dsic_audit(&profile, dist.as_ref(), &grid, args.tol, args.ablate_costs)?;
    eprintln!(
        "{} violation(s), worst gap {:.3e}, grid size {}",
        report.violations,
        report.worst_gap,
        grid.len()
    );
    write_json(&resolve(dir, &args.out), &serde_json::to_value(&report)?)
}

fn cmd_policy_eval(cli: &Cli, dir: &Path, args: &PolicyEvalArgs) -> Result<()> {
    let catalog = io::load_catalog(&args.catalog)?;
    let (estimate, emeta) = io::load_estimate(&args.estimate)?;
    let cfg = fit_config(&args.config)?;
    let link = link::from_spec(&emeta.link)?;
    let dims = FitDims {
        rep_dim: estimate.rep_dim(),
        feat_dim: catalog.dim(),
        n_users: estimate.n_users(),
        n_pairs: emeta.n_pairs,
        bound_b: estimate.bound_b,
        r_max: emeta.r_max,
    };
    let zeta = match args.zeta {
        Some(z) => z,
        None => {
            let consts = link_constants(link.as_ref(), emeta.r_max)?;
            confidence_radius(&cfg, &consts, dims)
        }
    };
    let mu_ref = match args.mu_ref.as_str() {
        "uniform" => Policy::uniform(catalog.len())?,
        idx => Policy::point_mass(
            idx.parse::<usize>()
                .map_err(|_| anyhow!("--mu-ref must be 'uniform' or a trajectory index"))?,
            catalog.len(),
        )?,
    };
    let slate = PolicySlate::default_for(catalog.len())?;

    let (choice, objective_name) = match &args.alpha {
        None => {
            let ell = estimate.ellipsoid(args.user, emeta.lambda, zeta)?;
            (
                pessimistic_policy(&slate, &ell, &estimate.omega_hat, &catalog, &mu_ref)?,
                format!("user {}", args.user),
            )
        }
        Some(raw) => {
            let alpha: Alpha = raw.parse()?;
            let ells = (0..estimate.n_users())
                .map(|u| estimate.ellipsoid(u, emeta.lambda, zeta))
                .collect::<prefagg_core::Result<Vec<_>>>()?;
            (
                aggregated_policy(
                    &slate,
                    &ells,
                    &estimate.omega_hat,
                    alpha,
                    &catalog,
                    &mu_ref,
                    args.samples,
                    cli.seed,
                )?,
                format!("aggregated alpha {raw}"),
            )
        }
    };

    let suboptimality = match &args.truth {
        None => None,
        Some(path) => {
            let truth = io::load_float_rows(path)?;
            if truth.iter().any(|r| r.len() != catalog.len()) {
                bail!("ground-truth rows must have one column per trajectory");
            }
            let objective: Vec<f64> = match &args.alpha {
                None => truth
                    .get(args.user)
                    .ok_or_else(|| anyhow!("ground truth has no row for user {}", args.user))?
                    .clone(),
                Some(raw) => {
                    let alpha: Alpha = raw.parse()?;
                    (0..catalog.len())
                        .map(|t| {
                            let col: Vec<f64> = truth.iter().map(|r| r[t]).collect();
                            agg_reward(alpha, &col).map_err(Into::into)
                        })
                        .collect::<Result<_>>()?
                }
            };
            let best = objective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(best - value(&choice.chosen, &objective)?)
        }
    };

    let payload = json!({
        "objective": objective_name,
        "zeta": zeta,
        "chosen_index": choice.index,
        "pessimistic_values": choice.scores,
        "suboptimality": suboptimality,
    });
    write_json(&resolve(dir, &args.out), &payload)
}

fn cmd_run(cli: &Cli, dir: &Path, args: &RunArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_json(&args.config, "experiment config")?;
    if let Some(seed) = args.single_seed {
        cfg.seeds = vec![seed];
    }
    let out = if cli.out_dir.is_some() || std::env::var_os("PREFAGG_OUT").is_some() {
        dir.to_path_buf()
    } else {
        cfg.output_dir.clone().unwrap_or_else(|| dir.to_path_buf())
    };
    let report = run_experiment(&cfg, Some(&out))?;
    println!("{}", out.join("report.json").display());
    let failed: Vec<String> = report
        .seeds
        .iter()
        .flat_map(|s| {
            let mut v = Vec::new();
            if !s.stages.gen.is_ok() {
                v.push(format!("seed {} gen", s.seed));
            }
            if !s.stages.fit.is_ok() {
                v.push(format!("seed {} fit", s.seed));
            }
            if !s.stages.policy.is_ok() {
                v.push(format!("seed {} policy", s.seed));
            }
            v
        })
        .collect();
    if !failed.is_empty() {
        eprintln!("stages not ok: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_strategies() -> Result<()> {
    println!("link strategies:");
    for spec in link::registry() {
        println!("  {:<14} {}", spec.name, spec.summary);
    }
    println!("distance strategies:");
    for spec in mechanism::registry() {
        println!("  {:<14} {}", spec.name, spec.summary);
    }
    Ok(())
}
