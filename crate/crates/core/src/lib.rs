//! Numerical machinery for learning and aggregating heterogeneous human
//! preferences.
//!
//! The crate is organized around five subsystems:
//!
//! - [`link`] — preference link functions Φ mapping reward gaps to choice
//!   probabilities, behind the [`link::Link`] strategy trait (selected by
//!   name at runtime).
//! - [`model`] — reward models with a shared linear representation,
//!   Plackett-Luce choice probabilities, and seeded synthetic population /
//!   comparison-dataset generators.
//! - [`estimate`] — joint maximum-likelihood fitting of the representation
//!   and per-user parameters, confidence-ellipsoid radii, transfer fitting,
//!   likelihood clustering, Procrustes evaluation, and label discrepancy.
//! - [`aggregate`] — the one-parameter reward-aggregation family
//!   interpolating min/mean/max, probabilistic opinion pooling on the
//!   simplex, and the numerical equivalence check between the two under
//!   the Plackett-Luce model.
//! - [`mechanism`] — distance functions on the simplex (behind the
//!   [`mechanism::Distance`] strategy trait), the welfare-maximizing
//!   aggregate, pivot-rule costs, utilities, and brute-force truthfulness
//!   audits.
//! - [`policy`] — finite trajectory catalogs, value functions, pessimistic
//!   policy selection against confidence ellipsoids, and concentrability
//!   diagnostics.
//!
//! [`experiment`] wires the subsystems into a seeded, reproducible
//! end-to-end pipeline, and [`io`] defines the JSON/CSV file formats.
//!
//! # Example
//!
//! Pooling two labelers' simplex-valued feedback:
//!
//! ```
//! use prefagg_core::aggregate::{pool_opinions, Alpha, OpinionProfile};
//!
//! let profile = OpinionProfile::new(vec![
//!     vec![0.2, 0.8],
//!     vec![0.6, 0.4],
//! ])?;
//! // Arithmetic pooling averages the rows...
//! let mean = pool_opinions(Alpha::Finite(1.0), &profile)?;
//! assert!((mean[0] - 0.4).abs() < 1e-12);
//! // ...while the egalitarian limit keeps the least-favored mass.
//! let min = pool_opinions(Alpha::NegInf, &profile)?;
//! assert!((min[0] - 1.0 / 3.0).abs() < 1e-9);
//! # Ok::<(), prefagg_core::Error>(())
//! ```

pub mod aggregate;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod io;
pub mod link;
pub mod mechanism;
pub mod model;
pub mod policy;
pub mod sobol;

pub use error::{Error, Result};
