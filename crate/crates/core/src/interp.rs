//! Biharmonic spline interpolation of scattered samples.
//!
//! The surface is an affine trend plus a sum of biharmonic Green's
//! functions `g(r) = r²(ln r − 1)` centred on the data points:
//!
//! ```text
//! s(p) = a0 + a_lon·lon + a_lat·lat + Σ_j α_j g(|p − p_j|)
//! ```
//!
//! Distances are Euclidean in degree coordinates. The trend is fitted
//! first by least squares; the weights then solve `(G + λI)·α = r` on the
//! detrended residuals, so `λ = 0` interpolates every sample exactly.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{GridSpec, ScalarField};

/// Points closer than this (degrees) are merged before fitting.
pub const MERGE_TOLERANCE_DEG: f64 = 1e-9;

/// Largest condition number accepted for the Green's-function system.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("no points to interpolate")]
    Empty,
    #[error("{points} points but {values} values")]
    LengthMismatch { points: usize, values: usize },
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("regularization must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("spline system is ill-conditioned (condition estimate {condition:.3e}); use a positive regularization λ")]
    IllConditioned { condition: f64 },
}

/// Biharmonic Green's function evaluated from the squared distance.
#[inline]
pub fn green(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * (0.5 * r2.ln() - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTrend {
    pub a0: f64,
    pub a_lon: f64,
    pub a_lat: f64,
}

impl AffineTrend {
    #[inline]
    pub fn eval(&self, lon: f64, lat: f64) -> f64 {
        self.a0 + self.a_lon * lon + self.a_lat * lat
    }
}

/// A fitted spline. `centers` are `(lon_deg, lat_deg)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineModel {
    pub centers: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    pub trend: AffineTrend,
    pub regularization: f64,
}

/// Merges points within [`MERGE_TOLERANCE_DEG`] of an earlier point,
/// averaging their values.
fn merge_duplicates(points: &[(f64, f64)], values: &[f64]) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    let mut sums: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    let tol2 = MERGE_TOLERANCE_DEG * MERGE_TOLERANCE_DEG;
    for (p, v) in points.iter().zip(values) {
        let hit = centers.iter().position(|c| {
            let (dx, dy) = (c.0 - p.0, c.1 - p.1);
            dx * dx + dy * dy <= tol2
        });
        match hit {
            Some(k) => {
                sums[k].0 += v;
                sums[k].1 += 1;
            }
            None => {
                centers.push(*p);
                sums.push((*v, 1));
            }
        }
    }
    let merged = sums.into_iter().map(|(s, n)| s / n as f64).collect();
    (centers, merged)
}

/// Least-squares affine trend, minimum-norm when the points do not span
/// the plane (one point, or collinear points).
fn fit_trend(points: &[(f64, f64)], values: &[f64]) -> AffineTrend {
    let n = points.len();
    let mean_lon = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mean_lat = points.iter().map(|p| p.1).sum::<f64>() / n as f64;

    // Centered columns are orthogonal to the constant, so the intercept is
    // the mean and the slopes solve a 2x2 normal system.
    let mean_v = values.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy, mut syy, mut sxv, mut syv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, v) in points.iter().zip(values) {
        let (x, y, w) = (p.0 - mean_lon, p.1 - mean_lat, v - mean_v);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxv += x * w;
        syv += y * w;
    }
    let eig = Matrix2::new(sxx, sxy, sxy, syy).symmetric_eigen();
    let cutoff = 1e-12 * eig.eigenvalues.amax();
    let rhs = Vector2::new(sxv, syv);
    let mut slopes = Vector2::zeros();
    for k in 0..2 {
        let lambda = eig.eigenvalues[k];
        if lambda > cutoff {
            let v = eig.eigenvectors.column(k);
            slopes += v * (v.dot(&rhs) / lambda);
        }
    }
    let coef = [mean_v, slopes[0], slopes[1]];

    AffineTrend { a0: coef[0] - coef[1] * mean_lon - coef[2] * mean_lat, a_lon: coef[1], a_lat: coef[2] }
}

/// Assembles `G + λI` for the given centers.
pub fn green_matrix(centers: &[(f64, f64)], lambda: f64) -> DMatrix<f64> {
    let n = centers.len();
    DMatrix::from_fn(n, n, |i, j| {
        let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
        let g = green(dx * dx + dy * dy);
        if i == j {
            g + lambda
        } else {
            g
        }
    })
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fits a biharmonic spline through `(lon, lat) → value` samples.
pub fn fit_biharmonic_spline(points: &[(f64, f64)], values: &[f64], lambda: f64) -> Result<SplineModel, InterpError> {
    if points.len() != values.len() {
        return Err(InterpError::LengthMismatch { points: points.len(), values: values.len() });
    }
    if points.is_empty() {
        return Err(InterpError::Empty);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(InterpError::BadLambda(lambda));
    }
    if let Some(k) =
        (0..points.len()).find(|&k| !(points[k].0.is_finite() && points[k].1.is_finite() && values[k].is_finite()))
    {
        return Err(InterpError::NonFinite(k));
    }

    let (centers, merged) = merge_duplicates(points, values);
    let trend = fit_trend(&centers, &merged);
    let residuals: Vec<f64> = centers.iter().zip(&merged).map(|(c, v)| v - trend.eval(c.0, c.1)).collect();

    let weights = if centers.len() == 1 {
        vec![0.0]
    } else {
        let system = green_matrix(&centers, lambda);
        let condition = condition_estimate(&system);
        if !(condition <= MAX_CONDITION) {
            return Err(InterpError::IllConditioned { condition });
        }
        let rhs = DVector::from_vec(residuals);
        let sol = system.lu().solve(&rhs).ok_or(InterpError::IllConditioned { condition: f64::INFINITY })?;
        sol.iter().copied().collect()
    };

    Ok(SplineModel { centers, weights, trend, regularization: lambda })
}

/// Evaluates the spline surface at `(lon, lat)`.
pub fn evaluate_spline(model: &SplineModel, at: (f64, f64)) -> f64 {
    let (lon, lat) = at;
    let sum: f64 = model
        .centers
        .iter()
        .zip(&model.weights)
        .map(|(c, w)| {
            let (dx, dy) = (lon - c.0, lat - c.1);
            w * green(dx * dx + dy * dy)
        })
        .sum();
    model.trend.eval(lon, lat) + sum
}

/// Evaluates the spline at every node of `grid`. Rows are evaluated in
/// parallel; each node uses exactly [`evaluate_spline`].
pub fn evaluate_on_grid(model: &SplineModel, grid: &GridSpec) -> ScalarField {
    let (ny, nx) = grid.shape();
    let flat: Vec<f64> = (0..ny)
        .into_par_iter()
        .flat_map_iter(|i| {
            let lat = grid.lat_at(i);
            (0..nx).map(move |j| evaluate_spline(model, (grid.lon_at(j), lat)))
        })
        .collect();
    let values = Array2::from_shape_vec((ny, nx), flat).expect("row-major grid");
    ScalarField::from_fn(*grid, |i, j| values[(i, j)])
}
