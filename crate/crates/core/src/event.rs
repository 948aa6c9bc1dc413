//! TDOA validation: locate the event on the interpolated surface, regress
//! measured delays on distance to the event, reject residual outliers with
//! Tukey fences and re-interpolate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{GridSpec, ScalarField};
use crate::geo::{haversine_distance_km, GeoPoint};
use crate::interp::{evaluate_on_grid, fit_biharmonic_spline, InterpError};
use crate::tdoa::{StationTdoa, TdoaStatus, MIN_DETECTED};

/// Fence multiplier applied to the inter-quartile range.
pub const IQR_FENCE: f64 = 1.5;

pub const DEFAULT_MAX_ROUNDS: usize = 3;

/// Residual slack beyond the fences, seconds. Keeps rounding noise on
/// exact data from registering as spread.
pub const FENCE_SLACK_S: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("field has no valid cells")]
    EmptyField,
    #[error("regression needs at least 3 ok stations, got {0}")]
    TooFewStations(usize),
    #[error("degenerate regression: all stations are equidistant from the event")]
    Degenerate,
    #[error("too many outliers: {kept} stations left after rejection, need at least {MIN_DETECTED}")]
    TooManyOutliers { kept: usize, outlier_ids: Vec<String> },
    #[error("need at least {MIN_DETECTED} ok stations, got {0}")]
    InsufficientStations(usize),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationResidual {
    pub station_id: String,
    pub distance_km: f64,
    pub tdoa_s: f64,
    pub reference_tdoa_s: f64,
    pub residual_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub location: GeoPoint,
    /// Seconds per km; the reciprocal of the average propagation speed.
    pub slope_s_per_km: f64,
    pub intercept_s: f64,
    pub residuals: Vec<StationResidual>,
    pub outlier_ids: Vec<String>,
    /// Rejection rounds that removed at least one station.
    pub rounds: usize,
    /// False when the round cap stopped the loop while stations were still
    /// being removed.
    pub converged: bool,
}

impl EventEstimate {
    pub fn average_speed_km_s(&self) -> f64 {
        1.0 / self.slope_s_per_km
    }
}

/// Grid node holding the smallest valid value. Ties resolve to the lowest
/// latitude index, then the lowest longitude index.
pub fn locate_event(field: &ScalarField) -> Result<GeoPoint, EventError> {
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..field.grid.ny {
        for j in 0..field.grid.nx {
            if let Some(v) = field.get(i, j) {
                if best.map_or(true, |(_, _, b)| v < b) {
                    best = Some((i, j, v));
                }
            }
        }
    }
    best.map(|(i, j, _)| field.grid.node(i, j)).ok_or(EventError::EmptyField)
}

/// Ordinary least squares of `tdoa_s` on great-circle distance to `event`,
/// over the ok stations.
pub fn regress_tdoa_distance(tdoas: &[StationTdoa], event: GeoPoint) -> Result<EventEstimate, EventError> {
    let ok: Vec<&StationTdoa> = tdoas.iter().filter(|t| t.is_ok()).collect();
    if ok.len() < 3 {
        return Err(EventError::TooFewStations(ok.len()));
    }
    let d: Vec<f64> = ok.iter().map(|t| haversine_distance_km(event, t.station.location())).collect();
    let y: Vec<f64> = ok.iter().map(|t| t.tdoa_s).collect();
    let n = d.len() as f64;
    let mean_d = d.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let sxx: f64 = d.iter().map(|x| (x - mean_d).powi(2)).sum();
    let sxy: f64 = d.iter().zip(&y).map(|(x, v)| (x - mean_d) * (v - mean_y)).sum();
    if sxx <= 1e-12 * (1.0 + mean_d * mean_d) * n {
        return Err(EventError::Degenerate);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_d;

    let residuals = ok
        .iter()
        .zip(d.iter().zip(&y))
        .map(|(t, (dist, tdoa))| {
            let reference = slope * dist + intercept;
            StationResidual {
                station_id: t.station.station_id.clone(),
                distance_km: *dist,
                tdoa_s: *tdoa,
                reference_tdoa_s: reference,
                residual_s: tdoa - reference,
            }
        })
        .collect();

    Ok(EventEstimate {
        location: event,
        slope_s_per_km: slope,
        intercept_s: intercept,
        residuals,
        outlier_ids: Vec::new(),
        rounds: 0,
        converged: true,
    })
}

/// Quantile by linear interpolation between order statistics at zero-based
/// position `p·(n−1)` of the sorted sample.
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Lower and upper Tukey fences of `values`, or `None` for fewer than four
/// values.
pub fn tukey_fences(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < 4 {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&sorted, 0.25);
    let q3 = quantile_linear(&sorted, 0.75);
    let iqr = q3 - q1;
    Some((q1 - IQR_FENCE * iqr - FENCE_SLACK_S, q3 + IQR_FENCE * iqr + FENCE_SLACK_S))
}

/// Splits the ok stations of `tdoas` into kept and removed by fencing
/// their regression residuals. Removed stations carry status `Outlier`.
/// Stations that are not ok, or have no residual, pass through as kept.
pub fn reject_outliers(estimate: &EventEstimate, tdoas: &[StationTdoa]) -> (Vec<StationTdoa>, Vec<StationTdoa>) {
    let values: Vec<f64> = estimate.residuals.iter().map(|r| r.residual_s).collect();
    let Some((lo, hi)) = tukey_fences(&values) else {
        return (tdoas.to_vec(), Vec::new());
    };
    let mut kept = Vec::with_capacity(tdoas.len());
    let mut removed = Vec::new();
    for t in tdoas {
        let flagged = t.is_ok()
            && estimate
                .residuals
                .iter()
                .find(|r| r.station_id == t.station.station_id)
                .is_some_and(|r| r.residual_s < lo || r.residual_s > hi);
        if flagged {
            let mut t = t.clone();
            t.status = TdoaStatus::Outlier;
            removed.push(t);
        } else {
            kept.push(t.clone());
        }
    }
    (kept, removed)
}

fn interpolate(ok: &[&StationTdoa], grid: &GridSpec, lambda: f64) -> Result<ScalarField, EventError> {
    let points: Vec<(f64, f64)> = ok.iter().map(|t| (t.station.lon_deg, t.station.lat_deg)).collect();
    let values: Vec<f64> = ok.iter().map(|t| t.tdoa_s).collect();
    let model = fit_biharmonic_spline(&points, &values, lambda)?;
    Ok(evaluate_on_grid(&model, grid))
}

/// Result of the validate-and-interpolate loop.
#[derive(Debug, Clone)]
pub struct ValidatedField {
    pub field: ScalarField,
    pub estimate: EventEstimate,
    /// Input stations with outliers re-labelled.
    pub tdoas: Vec<StationTdoa>,
}

/// Fits, locates, regresses and rejects until no station is removed or
/// `max_rounds` removal rounds have run, re-interpolating after each
/// removal.
pub fn validate_and_interpolate(
    tdoas: &[StationTdoa],
    grid: &GridSpec,
    lambda: f64,
    max_rounds: usize,
) -> Result<ValidatedField, EventError> {
    let mut current = tdoas.to_vec();
    let ok_count = current.iter().filter(|t| t.is_ok()).count();
    if ok_count < MIN_DETECTED {
        return Err(EventError::InsufficientStations(ok_count));
    }

    let mut outlier_ids = Vec::new();
    let mut rounds = 0;
    loop {
        let ok: Vec<&StationTdoa> = current.iter().filter(|t| t.is_ok()).collect();
        let field = interpolate(&ok, grid, lambda)?;
        let location = locate_event(&field)?;
        let mut estimate = regress_tdoa_distance(&current, location)?;

        let (kept, removed) = reject_outliers(&estimate, &current);
        if removed.is_empty() || rounds == max_rounds {
            estimate.outlier_ids = outlier_ids;
            estimate.rounds = rounds;
            estimate.converged = removed.is_empty();
            return Ok(ValidatedField { field, estimate, tdoas: current });
        }

        outlier_ids.extend(removed.iter().map(|t| t.station.station_id.clone()));
        let left = kept.iter().filter(|t| t.is_ok()).count();
        if left < MIN_DETECTED {
            return Err(EventError::TooManyOutliers { kept: left, outlier_ids });
        }
        // Keep input order, with flagged stations re-labelled.
        current = current
            .into_iter()
            .map(|mut t| {
                if removed.iter().any(|r| r.station.station_id == t.station.station_id) {
                    t.status = TdoaStatus::Outlier;
                }
                t
            })
            .collect();
        rounds += 1;
    }
}
