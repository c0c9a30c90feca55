//! Preference link functions.
//!
//! A link function Φ maps a reward gap to the probability that the first
//! trajectory is preferred:
//!
//! ```text
//! P(o = 0 | τ₀, τ₁) = Φ(r(τ₀) − r(τ₁))
//! ```
//!
//! Every link must be monotonically increasing, satisfy Φ(x) + Φ(−x) = 1
//! (hence Φ(0) = ½), and be log-concave so the per-user likelihood stays
//! concave. Links are strategies selected by name at runtime: `"sigmoid"`
//! is the Bradley-Terry-Luce choice, `"table:<path>"` loads a tabulated Φ
//! from CSV and validates the contract on a probe grid.

use std::fmt;

use crate::error::{Error, Result};

/// A preference link function Φ with first and second derivatives.
///
/// Implementations must be monotone increasing with Φ(x) + Φ(−x) = 1.
pub trait Link: Send + Sync {
    fn name(&self) -> String;

    /// Φ(x), in (0, 1) for finite x.
    fn phi(&self, x: f64) -> f64;

    /// Φ′(x).
    fn dphi(&self, x: f64) -> f64;

    /// Φ″(x).
    fn d2phi(&self, x: f64) -> f64;

    /// log Φ(x); override when a numerically stable form exists.
    fn log_phi(&self, x: f64) -> f64 {
        self.phi(x).ln()
    }

    /// Φ′(x)/Φ(x); override when a stable closed form exists.
    fn ratio(&self, x: f64) -> f64 {
        self.dphi(x) / self.phi(x)
    }

    /// Closed-form (ξ, κ, η) over [−2R, 2R] when the link has one.
    ///
    /// ξ = max |Φ′/Φ|, κ = (min Φ′)⁻¹, η = min (Φ′² − Φ″Φ)/Φ².
    fn closed_form_constants(&self, _r_max: f64) -> Option<(f64, f64, f64)> {
        None
    }
}

impl fmt::Debug for dyn Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Link({})", self.name())
    }
}

/// Evaluate Φ(x) with the domain check of the public contract.
pub fn link_eval(link: &dyn Link, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!(
            "link argument must be finite, got {x}"
        )));
    }
    Ok(link.phi(x))
}

/// The sigmoid link σ(x) = 1/(1 + e^{−x}) (Bradley-Terry-Luce).
#[derive(Debug, Clone, Copy, Default)]
pub struct Sigmoid;

/// Numerically stable σ(x).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) = −log(1 + e^{−x}), stable for both tails.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Link for Sigmoid {
    fn name(&self) -> String {
        "sigmoid".to_owned()
    }

    fn phi(&self, x: f64) -> f64 {
        sigmoid(x)
    }

    fn dphi(&self, x: f64) -> f64 {
        let s = sigmoid(x);
        s * (1.0 - s)
    }

    fn d2phi(&self, x: f64) -> f64 {
        let s = sigmoid(x);
        s * (1.0 - s) * (1.0 - 2.0 * s)
    }

    fn log_phi(&self, x: f64) -> f64 {
        log_sigmoid(x)
    }

    fn ratio(&self, x: f64) -> f64 {
        // σ′/σ = 1 − σ(x) = σ(−x)
        sigmoid(-x)
    }

    fn closed_form_constants(&self, r_max: f64) -> Option<(f64, f64, f64)> {
        // On [−2R, 2R]: |Φ′/Φ| = σ(−x) peaks at the left end, σ′ bottoms
        // out at both ends, and (Φ′² − Φ″Φ)/Φ² collapses to σ′(x).
        let xi = sigmoid(2.0 * r_max);
        let min_dphi = sigmoid(2.0 * r_max) * sigmoid(-2.0 * r_max);
        Some((xi, 1.0 / min_dphi, min_dphi))
    }
}

/// A link tabulated on a strictly increasing grid, interpolated linearly.
///
/// Derivatives come from central differences of the knot values, so the
/// table must be fine enough for the constants computed from it to be
/// meaningful. Outside the tabulated span the endpoint values are held.
#[derive(Debug, Clone)]
pub struct TabulatedLink {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Φ′ at each knot (central differences; one-sided at the ends).
    dys: Vec<f64>,
    /// Φ″ at each knot.
    d2ys: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-6;

impl TabulatedLink {
    /// Build from (x, Φ(x)) pairs, validating the link contract:
    /// strictly increasing values in (0, 1), Φ(0) = ½, and
    /// Φ(x) + Φ(−x) = 1 on a probe grid over the tabulated span.
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Validation(format!(
                "tabulated link needs at least 4 points, got {}",
                points.len()
            )));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            if w[1].0 - w[0].0 <= 0.0 {
                return Err(Error::Validation(format!(
                    "tabulated link grid must be strictly increasing near x = {}",
                    w[0].0
                )));
            }
            if w[1].1 <= w[0].1 {
                return Err(Error::Validation(format!(
                    "tabulated link values must be strictly increasing near x = {}",
                    w[0].0
                )));
            }
        }
        if points
            .iter()
            .any(|&(x, y)| !x.is_finite() || !y.is_finite() || y <= 0.0 || y >= 1.0)
        {
            return Err(Error::Validation(
                "tabulated link values must be finite and strictly inside (0, 1)".into(),
            ));
        }

        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let n = xs.len();
        let mut dys = vec![0.0; n];
        let mut d2ys = vec![0.0; n];
        for (i, dy) in dys.iter_mut().enumerate() {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            *dy = (ys[hi] - ys[lo]) / (xs[hi] - xs[lo]);
        }
        for i in 1..n - 1 {
            let hl = xs[i] - xs[i - 1];
            let hr = xs[i + 1] - xs[i];
            // Three-point second difference on a possibly uneven grid.
            d2ys[i] =
                2.0 * (hl * ys[i + 1] - (hl + hr) * ys[i] + hr * ys[i - 1]) / (hl * hr * (hl + hr));
        }
        d2ys[0] = d2ys[1];
        d2ys[n - 1] = d2ys[n - 2];

        let link = Self { xs, ys, dys, d2ys };
        link.validate_contract()?;
        Ok(link)
    }

    fn validate_contract(&self) -> Result<()> {
        let half = self.phi(0.0);
        if (half - 0.5).abs() > SYMMETRY_TOL {
            return Err(Error::Validation(format!(
                "tabulated link has phi(0) = {half}, expected 0.5"
            )));
        }
        let span = self
            .xs
            .first()
            .unwrap()
            .abs()
            .min(self.xs.last().unwrap().abs());
        let probes = 512;
        for t in 0..=probes {
            let x = span * (t as f64 / probes as f64);
            let s = self.phi(x) + self.phi(-x);
            if (s - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::Validation(format!(
                    "tabulated link violates phi(x) + phi(-x) = 1 at x = {x} (sum {s})"
                )));
            }
        }
        Ok(())
    }

    fn segment(&self, x: f64) -> usize {
        match self.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.xs.len() - 2),
        }
    }

    fn interp(&self, table: &[f64], x: f64) -> f64 {
        if x <= self.xs[0] {
            return table[0];
        }
        if x >= *self.xs.last().unwrap() {
            return *table.last().unwrap();
        }
        let i = self.segment(x);
        let t = (x - self.xs[i]) / (self.xs[i + 1] - self.xs[i]);
        table[i] + t * (table[i + 1] - table[i])
    }
}

impl Link for TabulatedLink {
    fn name(&self) -> String {
        format!("table[{} pts]", self.xs.len())
    }

    fn phi(&self, x: f64) -> f64 {
        self.interp(&self.ys, x)
    }

    fn dphi(&self, x: f64) -> f64 {
        self.interp(&self.dys, x)
    }

    fn d2phi(&self, x: f64) -> f64 {
        self.interp(&self.d2ys, x)
    }
}

/// One row of the link registry.
pub struct LinkSpec {
    pub name: &'static str,
    pub summary: &'static str,
}

/// Names accepted by [`from_spec`].
pub fn registry() -> Vec<LinkSpec> {
    vec![
        LinkSpec {
            name: "sigmoid",
            summary: "Bradley-Terry-Luce link sigma(x) = 1/(1+exp(-x))",
        },
        LinkSpec {
            name: "table:<path>",
            summary: "tabulated link loaded from a CSV of x,phi rows",
        },
    ]
}

/// Resolve a link strategy by name: `"sigmoid"` or `"table:<path>"`.
pub fn from_spec(spec: &str) -> Result<Box<dyn Link>> {
    match spec {
        "sigmoid" => Ok(Box::new(Sigmoid)),
        s if s.starts_with("table:") => {
            let path = &s["table:".len()..];
            Ok(Box::new(crate::io::load_link_table(path)?))
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
