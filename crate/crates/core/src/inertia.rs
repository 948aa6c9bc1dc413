//! From a TDOA surface to propagation speed and inertia.
//!
//! The TDOA gradient is taken per degree on the grid, scaled to s/km with
//! the local degree coefficients, and inverted into a speed. The continuum
//! relation `|v|² = ω V² sin θ / (2 |z| h)` then gives the inertia.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{GridSpec, ScalarField};
use crate::geo::degree_coefficients;

/// Gradients smaller than this (s/km) are masked in the speed field.
pub const DEFAULT_MIN_GRADIENT_S_PER_KM: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum InertiaError {
    #[error("gradient needs at least a 3x3 grid, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },
    #[error("invalid continuum parameter: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuumParams {
    pub omega_pu: f64,
    pub v_mag_pu: f64,
    pub theta_rad: f64,
    pub z_mag_pu: f64,
    pub distance_base_km: f64,
}

impl Default for ContinuumParams {
    fn default() -> Self {
        ContinuumParams {
            omega_pu: 1.0,
            v_mag_pu: 1.0,
            theta_rad: std::f64::consts::FRAC_PI_2,
            z_mag_pu: 0.5,
            distance_base_km: 500.0,
        }
    }
}

impl ContinuumParams {
    pub fn validate(&self) -> Result<(), InertiaError> {
        let named = [
            ("omega_pu", self.omega_pu),
            ("v_mag_pu", self.v_mag_pu),
            ("z_mag_pu", self.z_mag_pu),
            ("distance_base_km", self.distance_base_km),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(InertiaError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.theta_rad > 0.0 && self.theta_rad < std::f64::consts::PI) {
            return Err(InertiaError::Params(format!("theta_rad must lie in (0, π), got {}", self.theta_rad)));
        }
        Ok(())
    }

    /// `ω V² sin θ / (2 |z|)`, the product `h·v_pu²` of the continuum relation.
    pub fn stiffness(&self) -> f64 {
        self.omega_pu * self.v_mag_pu * self.v_mag_pu * self.theta_rad.sin() / (2.0 * self.z_mag_pu)
    }
}

/// TDOA gradient in seconds per degree along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    pub d_dlon: Array2<f64>,
    pub d_dlat: Array2<f64>,
}

/// Central differences inside the grid, first-order one-sided differences
/// on the boundary rows and columns. Masked nodes propagate as NaN.
pub fn gradient_field(tdoa: &ScalarField) -> Result<VectorField, InertiaError> {
    let g = tdoa.grid;
    if g.nx < 3 || g.ny < 3 {
        return Err(InertiaError::GridTooSmall { nx: g.nx, ny: g.ny });
    }
    let v = &tdoa.values;
    let (dlon, dlat) = (g.dlon(), g.dlat());

    let d_dlon = Array2::from_shape_fn(g.shape(), |(i, j)| {
        if j == 0 {
            (v[(i, 1)] - v[(i, 0)]) / dlon
        } else if j + 1 == g.nx {
            (v[(i, j)] - v[(i, j - 1)]) / dlon
        } else {
            (v[(i, j + 1)] - v[(i, j - 1)]) / (2.0 * dlon)
        }
    });
    let d_dlat = Array2::from_shape_fn(g.shape(), |(i, j)| {
        if i == 0 {
            (v[(1, j)] - v[(0, j)]) / dlat
        } else if i + 1 == g.ny {
            (v[(i, j)] - v[(i - 1, j)]) / dlat
        } else {
            (v[(i + 1, j)] - v[(i - 1, j)]) / (2.0 * dlat)
        }
    });
    Ok(VectorField { grid: g, d_dlon, d_dlat })
}

/// Magnitude of the physical TDOA gradient in s/km at node `(i, j)`.
pub fn slowness_at(grad: &VectorField, i: usize, j: usize) -> f64 {
    let c = degree_coefficients(grad.grid.node(i, j));
    let gx = grad.d_dlon[(i, j)] / c.c_lon_km_per_deg;
    let gy = grad.d_dlat[(i, j)] / c.c_lat_km_per_deg;
    (gx * gx + gy * gy).sqrt()
}

/// Propagation speed in km/s. Nodes whose gradient magnitude is below
/// `min_gradient_s_per_km` (the source and extrema of the surface) are
/// masked.
pub fn speed_field(grad: &VectorField, min_gradient_s_per_km: f64) -> ScalarField {
    ScalarField::from_fn(grad.grid, |i, j| {
        let s = slowness_at(grad, i, j);
        if s.is_finite() && s >= min_gradient_s_per_km {
            1.0 / s
        } else {
            f64::NAN
        }
    })
}

/// Inverse of the continuum relation for a single speed in km/s.
pub fn inertia_for_speed(speed_km_s: f64, params: &ContinuumParams) -> f64 {
    let v_pu = speed_km_s / params.distance_base_km;
    params.stiffness() / (v_pu * v_pu)
}

/// Per-node inertia in relative units; masked nodes stay masked.
pub fn inertia_from_speed(speed: &ScalarField, params: &ContinuumParams) -> Result<ScalarField, InertiaError> {
    params.validate()?;
    Ok(ScalarField::from_fn(speed.grid, |i, j| match speed.get(i, j) {
        Some(v) if v > 0.0 => inertia_for_speed(v, params),
        _ => f64::NAN,
    }))
}

/// Metadata block written next to speed and inertia fields.
pub fn field_metadata(field: &ScalarField, units: &str, params: &ContinuumParams) -> serde_json::Value {
    let g = field.grid;
    let edge_nodes = 2 * g.nx + 2 * g.ny - 4;
    serde_json::json!({
        "units": units,
        "params": params,
        "mask_count": field.masked_count(),
        "node_count": g.nx * g.ny,
        "edge_confidence": {
            "one_sided_differences": true,
            "lower_confidence_nodes": "first and last rows and columns",
            "edge_node_count": edge_nodes,
        },
    })
}
