//! File formats: JSON for structured artifacts, CSV for tables.
//!
//! Formats are plain text so golden files stay diffable:
//!
//! - dataset JSON: header `{N, d, k, B, R_max, seed}` plus
//!   `records: [{user, feat0, feat1, o}]`
//! - estimate JSON: dims, solver metadata, and row-major matrices
//! - catalogs, opinion profiles, and reward tables: headerless CSV
//! - fit logs: CSV with an `iter,objective,grad_norm` header
//! - link tables: CSV of `x,phi` rows

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregate::OpinionProfile;
use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::link::TabulatedLink;
use crate::model::{ComparisonDatum, Dataset, FeatureVector};
use crate::policy::TrajectoryCatalog;

/// Generator metadata carried in a dataset header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rep_dim: usize,
    pub bound_b: f64,
    pub r_max: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    #[serde(rename = "N")]
    n_users: usize,
    d: usize,
    k: usize,
    #[serde(rename = "B")]
    bound_b: f64,
    #[serde(rename = "R_max")]
    r_max: f64,
    seed: u64,
    records: Vec<RecordJson>,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    user: usize,
    feat0: Vec<f64>,
    feat1: Vec<f64>,
    o: u8,
}

fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        location: "-".into(),
        msg: e.to_string(),
    })
}

/// Map a serde_json error to a parse error naming the byte offset.
fn json_error(path: &Path, text: &str, err: serde_json::Error) -> Error {
    let (line, column) = (err.line(), err.column());
    let offset: usize = text
        .lines()
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum::<usize>()
        + column.saturating_sub(1);
    Error::Parse {
        path: path.display().to_string(),
        location: format!("line {line}, column {column}, byte offset {offset}"),
        msg: err.to_string(),
    }
}

pub fn save_dataset(dataset: &Dataset, meta: DatasetMeta, path: impl AsRef<Path>) -> Result<()> {
    let file = DatasetFile {
        n_users: dataset.n_users,
        d: dataset.dim,
        k: meta.rep_dim,
        bound_b: meta.bound_b,
        r_max: meta.r_max,
        seed: meta.seed,
        records: dataset
            .records
            .iter()
            .map(|rec| RecordJson {
                user: rec.user,
                feat0: rec.feat0.as_slice().to_vec(),
                feat1: rec.feat1.as_slice().to_vec(),
                o: rec.outcome,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("dataset serializes");
    fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, DatasetMeta)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| json_error(path, &text, e))?;
    let records: Vec<ComparisonDatum> = file
        .records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            if rec.feat0.len() != file.d || rec.feat1.len() != file.d {
                return Err(Error::Validation(format!(
                    "record {i}: feature length differs from header d = {}",
                    file.d
                )));
            }
            Ok(ComparisonDatum {
                user: rec.user,
                feat0: FeatureVector::new(rec.feat0)?,
                feat1: FeatureVector::new(rec.feat1)?,
                outcome: rec.o,
            })
        })
        .collect::<Result<_>>()?;
    let dataset = Dataset::new(file.n_users, file.d, records)?;
    Ok((
        dataset,
        DatasetMeta {
            rep_dim: file.k,
            bound_b: file.bound_b,
            r_max: file.r_max,
            seed: file.seed,
        },
    ))
}

/// Solver metadata carried in an estimate header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub n_pairs: usize,
    pub r_max: f64,
    pub lambda: f64,
    pub link: String,
}

#[derive(Serialize, Deserialize)]
struct EstimateFile {
    k: usize,
    d: usize,
    #[serde(rename = "N")]
    n_users: usize,
    n_pairs: usize,
    #[serde(rename = "B")]
    bound_b: f64,
    #[serde(rename = "R_max")]
    r_max: f64,
    lambda: f64,
    link: String,
    log_likelihood: f64,
    /// k rows of d values.
    omega: Vec<Vec<f64>>,
    /// N rows of k values.
    thetas: Vec<Vec<f64>>,
    /// N matrices, each k rows of k values.
    designs: Vec<Vec<Vec<f64>>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn rows_matrix(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Validation(format!("{what} matrix is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Validation(format!("{what} matrix is ragged")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

pub fn save_estimate(
    estimate: &Estimate,
    meta: &EstimateMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = EstimateFile {
        k: estimate.rep_dim(),
        d: estimate.omega_hat.ncols(),
        n_users: estimate.n_users(),
        n_pairs: meta.n_pairs,
        bound_b: estimate.bound_b,
        r_max: meta.r_max,
        lambda: meta.lambda,
        link: meta.link.clone(),
        log_likelihood: estimate.log_likelihood,
        omega: matrix_rows(&estimate.omega_hat),
        thetas: estimate
            .thetas_hat
            .iter()
            .map(|t| t.as_slice().to_vec())
            .collect(),
        designs: estimate.designs.iter().map(matrix_rows).collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("estimate serializes");
    fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}

pub fn load_estimate(path: impl AsRef<Path>) -> Result<(Estimate, EstimateMeta)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let file: EstimateFile = serde_json::from_str(&text).map_err(|e| json_error(path, &text, e))?;
    let omega_hat = rows_matrix(&file.omega, "omega")?;
    if omega_hat.shape() != (file.k, file.d) {
        return Err(Error::Validation(format!(
            "omega has shape {:?}, header says ({}, {})",
            omega_hat.shape(),
            file.k,
            file.d
        )));
    }
    let thetas_hat: Vec<DVector<f64>> = file
        .thetas
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != file.k {
                return Err(Error::Validation(format!(
                    "theta {i} has length {}, expected {}",
                    row.len(),
                    file.k
                )));
            }
            Ok(DVector::from_vec(row.clone()))
        })
        .collect::<Result<_>>()?;
    let designs: Vec<DMatrix<f64>> = file
        .designs
        .iter()
        .map(|rows| rows_matrix(rows, "design"))
        .collect::<Result<_>>()?;
    if thetas_hat.len() != file.n_users || designs.len() != file.n_users {
        return Err(Error::Validation(
            "theta/design counts differ from header N".into(),
        ));
    }
    Ok((
        Estimate {
            omega_hat,
            thetas_hat,
            designs,
            log_likelihood: file.log_likelihood,
            bound_b: file.bound_b,
        },
        EstimateMeta {
            n_pairs: file.n_pairs,
            r_max: file.r_max,
            lambda: file.lambda,
            link: file.link,
        },
    ))
}

fn csv_parse_error(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        location: format!("line {line}"),
        msg: msg.to_string(),
    }
}

/// Load a headerless CSV of floats, one row per line.
pub fn load_float_rows(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| csv_parse_error(path, i + 1, format!("{e} in {tok:?}")))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(csv_parse_error(path, 1, "no rows"));
    }
    Ok(rows)
}

pub fn save_float_rows(rows: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Feature catalog CSV: one trajectory per row.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<TrajectoryCatalog> {
    let rows = load_float_rows(&path)?;
    let features: Vec<FeatureVector> = rows
        .into_iter()
        .map(FeatureVector::new)
        .collect::<Result<_>>()?;
    TrajectoryCatalog::new(features)
}

pub fn save_catalog(catalog: &TrajectoryCatalog, path: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<Vec<f64>> = catalog
        .features()
        .iter()
        .map(|f| f.as_slice().to_vec())
        .collect();
    save_float_rows(&rows, path)
}

/// Opinion-profile CSV: one simplex row per labeler.
pub fn load_profile(path: impl AsRef<Path>) -> Result<OpinionProfile> {
    OpinionProfile::new(load_float_rows(path)?)
}

/// Tabulated link CSV: `x,phi` rows.
pub fn load_link_table(path: impl AsRef<Path>) -> Result<TabulatedLink> {
    let path = path.as_ref();
    let rows = load_float_rows(path)?;
    let points: Vec<(f64, f64)> = rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != 2 {
                return Err(csv_parse_error(
                    path,
                    i + 1,
                    format!("expected 2 columns (x, phi), got {}", row.len()),
                ));
            }
            Ok((row[0], row[1]))
        })
        .collect::<Result<_>>()?;
    TabulatedLink::new(points)
}

/// Fit log CSV with an `iter,objective,grad_norm` header.
pub fn save_fit_log(rows: &[crate::estimate::FitLogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("iter,objective,grad_norm\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.iter, row.objective, row.grad_norm
        ));
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{Link, Sigmoid};
    use crate::model::{
        default_diversity_target, generate_dataset, generate_population, FeatureDistribution,
        PopulationConfig, ThetaMode,
    };
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn small_dataset(seed: u64) -> (Dataset, DatasetMeta) {
        let cfg = PopulationConfig {
            n_users: 3,
            dim: 4,
            rep_dim: 2,
            bound_b: 1.0,
            r_max: 1.5,
            n_pairs: 5,
            mu0: FeatureDistribution::Gaussian,
            mu1: FeatureDistribution::Gaussian,
            diversity_target: default_diversity_target(3, 2),
            theta_mode: ThetaMode::Sphere,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pop = generate_population(&cfg, &mut rng).unwrap();
        let data = generate_dataset(&pop.model, &cfg, &Sigmoid, seed).unwrap();
        (
            data,
            DatasetMeta {
                rep_dim: 2,
                bound_b: 1.0,
                r_max: 1.5,
                seed,
            },
        )
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.json");
        let (data, meta) = small_dataset(3);
        save_dataset(&data, meta, &path).unwrap();
        let (loaded, loaded_meta) = load_dataset(&path).unwrap();
        assert_eq!(loaded, data);
        assert_eq!(loaded_meta, meta);
    }

    #[test]
    fn truncated_dataset_names_byte_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.json");
        let (data, meta) = small_dataset(4);
        save_dataset(&data, meta, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        let err = load_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset"), "message was: {msg}");
    }

    #[test]
    fn invalid_outcome_cites_record_index() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.json");
        let (data, meta) = small_dataset(5);
        save_dataset(&data, meta, &path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"o\": 0", "\"o\": 2", 1)
            .replacen("\"o\": 1", "\"o\": 2", 1);
        fs::write(&path, text).unwrap();
        let err = load_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("record") && msg.contains("outcome"),
            "message was: {msg}"
        );
    }

    #[test]
    fn estimate_round_trip() {
        use crate::estimate::{mle_fit, FitConfig, FitDims};
        let (data, _) = small_dataset(6);
        let dims = FitDims {
            rep_dim: 2,
            feat_dim: 4,
            n_users: 3,
            n_pairs: 5,
            bound_b: 1.0,
            r_max: 1.5,
        };
        let cfg = FitConfig {
            max_iters: 10,
            restarts: 1,
            ..FitConfig::default()
        };
        let fit = mle_fit(&data, &Sigmoid, dims, &cfg, 1).unwrap();
        let meta = EstimateMeta {
            n_pairs: 5,
            r_max: 1.5,
            lambda: cfg.lambda,
            link: "sigmoid".into(),
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("estimate.json");
        save_estimate(&fit.estimate, &meta, &path).unwrap();
        let (loaded, loaded_meta) = load_estimate(&path).unwrap();
        assert_eq!(loaded, fit.estimate);
        assert_eq!(loaded_meta, meta);
    }

    #[test]
    fn link_table_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("link.csv");
        let rows: Vec<Vec<f64>> = (-400..=400)
            .map(|i| {
                let x = i as f64 * 0.01;
                vec![x, crate::link::sigmoid(x)]
            })
            .collect();
        save_float_rows(&rows, &path).unwrap();
        let link = load_link_table(&path).unwrap();
        assert!((link.phi(0.3) - crate::link::sigmoid(0.3)).abs() < 1e-4);
    }

    #[test]
    fn tabulated_link_loads_as_strategy() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("link.csv");
        let rows: Vec<Vec<f64>> = (-500..=500)
            .map(|i| {
                let x = i as f64 * 0.02;
                vec![x, crate::link::sigmoid(x)]
            })
            .collect();
        save_float_rows(&rows, &path).unwrap();
        let link = crate::link::from_spec(&format!("table:{}", path.display())).unwrap();
        assert!((link.phi(1.0) - crate::link::sigmoid(1.0)).abs() < 1e-4);
        // The loaded table passes the curvature validation used by the
        // confidence-set constants.
        let consts = crate::estimate::link_constants(link.as_ref(), 1.0).unwrap();
        let closed = crate::estimate::link_constants(&Sigmoid, 1.0).unwrap();
        assert!((consts.eta - closed.eta).abs() / closed.eta < 0.05);
    }

    #[test]
    fn malformed_csv_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        fs::write(&path, "1.0,2.0\n3.0,oops\n").unwrap();
        let err = load_float_rows(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "was: {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn float_rows_round_trip(
            rows in prop::collection::vec(
                prop::collection::vec(-1e6f64..1e6, 1..6),
                1..8,
            )
        ) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("t.csv");
            save_float_rows(&rows, &path).unwrap();
            let loaded = load_float_rows(&path).unwrap();
            prop_assert_eq!(loaded, rows);
        }
    }
}
