//! Low-discrepancy point sets for deterministic parameter grids.
//!
//! A Gray-code Sobol generator with Joe-Kuo direction numbers for up to
//! 16 dimensions, plus a map from the unit cube to the Euclidean ball
//! (inverse-normal direction, radial correction). Used to build the
//! default θ grids for label-discrepancy lower bounds.

use crate::error::{Error, Result};

const MAX_BITS: usize = 32;

/// (degree, polynomial coefficient a, initial direction numbers m) for
/// dimensions 2..=16; dimension 1 is the van der Corput sequence.
/// First rows of the Joe-Kuo "new" table.
const JOE_KUO: [(usize, u32, [u32; 6]); 15] = [
    (1, 0, [1, 0, 0, 0, 0, 0]),
    (2, 1, [1, 3, 0, 0, 0, 0]),
    (3, 1, [1, 3, 1, 0, 0, 0]),
    (3, 2, [1, 1, 1, 0, 0, 0]),
    (4, 1, [1, 1, 3, 3, 0, 0]),
    (4, 4, [1, 3, 5, 13, 0, 0]),
    (5, 2, [1, 1, 5, 5, 17, 0]),
    (5, 4, [1, 1, 5, 5, 5, 0]),
    (5, 7, [1, 1, 7, 11, 19, 0]),
    (5, 11, [1, 1, 5, 1, 1, 0]),
    (5, 13, [1, 1, 1, 3, 11, 0]),
    (5, 14, [1, 3, 5, 5, 31, 0]),
    (6, 1, [1, 3, 3, 9, 7, 49]),
    (6, 13, [1, 1, 1, 15, 21, 21]),
    (6, 16, [1, 3, 1, 13, 27, 49]),
];

/// Maximum dimension supported by the embedded direction numbers.
pub const MAX_DIM: usize = JOE_KUO.len() + 1;

fn direction_numbers(dim: usize) -> Vec<u32> {
    let mut v = vec![0u32; MAX_BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (31 - i);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    for i in 0..s {
        v[i] = m[i] << (31 - i);
    }
    for i in s..MAX_BITS {
        let mut val = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                val ^= v[i - k];
            }
        }
        v[i] = val;
    }
    v
}

/// The first `count` points of the `dim`-dimensional Sobol sequence
/// (skipping the all-zeros point), each in [0, 1)^dim.
pub fn sobol_points(dim: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::Domain(format!(
            "sobol dimension must be in 1..={MAX_DIM}, got {dim}"
        )));
    }
    let dirs: Vec<Vec<u32>> = (0..dim).map(direction_numbers).collect();
    let mut state = vec![0u32; dim];
    let mut out = Vec::with_capacity(count);
    for i in 0u64..count as u64 {
        // Gray-code update: flip by the direction number indexed by the
        // lowest zero bit of i.
        let c = (!i).trailing_zeros() as usize;
        for (j, s) in state.iter_mut().enumerate() {
            *s ^= dirs[j][c];
        }
        out.push(
            state
                .iter()
                .map(|&x| x as f64 / (1u64 << 32) as f64)
                .collect(),
        );
    }
    Ok(out)
}

/// Inverse standard-normal CDF (Acklam's rational approximation,
/// |relative error| < 1.2e−9 — ample for grid construction).
fn inv_normal(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inv_normal(1.0 - p)
    }
}

/// A deterministic low-discrepancy grid inside the radius-`b` ball of
/// R^k: Sobol points mapped through inverse-normal directions with a
/// u^{1/k} radial correction.
pub fn ball_grid(k: usize, b: f64, count: usize) -> Result<Vec<Vec<f64>>> {
    if b <= 0.0 {
        return Err(Error::Domain(format!(
            "ball radius must be positive, got {b}"
        )));
    }
    let raw = sobol_points(k + 1, count)?;
    Ok(raw
        .into_iter()
        .map(|pt| {
            let g: Vec<f64> = pt[..k].iter().map(|&u| inv_normal(u)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let radius = b * pt[k].powf(1.0 / k as f64);
            g.into_iter().map(|v| v * radius / norm).collect()
        })
        .collect())
}
