//! Spherical-earth geodesy: great-circle distances and the local
//! km-per-degree coefficients used to turn lon/lat gradients into
//! physical gradients.

use serde::{Deserialize, Serialize};

/// Mean earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Length of one degree of arc on the sphere, in km.
pub const KM_PER_DEGREE: f64 = std::f64::consts::PI * EARTH_RADIUS_KM / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Self {
        GeoPoint { lat_deg, lon_deg }
    }

    /// True when both coordinates are finite and inside their ranges.
    pub fn is_valid(&self) -> bool {
        self.lat_deg.is_finite()
            && self.lon_deg.is_finite()
            && (-90.0..=90.0).contains(&self.lat_deg)
            && (-180.0..=180.0).contains(&self.lon_deg)
    }
}

/// Distance covered by one degree of longitude and one degree of latitude
/// at a particular location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeCoefficients {
    pub c_lon_km_per_deg: f64,
    pub c_lat_km_per_deg: f64,
}

/// Great-circle distance between two points using the haversine formula.
pub fn haversine_distance_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat_deg.to_radians();
    let lat2 = b.lat_deg.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();

    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    // Rounding can push h a hair past 1 for antipodal points.
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

/// Per-degree distance coefficients at `p`. Longitude degrees shrink with
/// the cosine of latitude; latitude degrees are constant on a sphere.
pub fn degree_coefficients(p: GeoPoint) -> DegreeCoefficients {
    let c_lon = KM_PER_DEGREE * p.lat_deg.to_radians().cos();
    DegreeCoefficients {
        // cos(90°) evaluates to ~6e-17, not zero.
        c_lon_km_per_deg: if c_lon.abs() < 1e-12 { 0.0 } else { c_lon.max(0.0) },
        c_lat_km_per_deg: KM_PER_DEGREE,
    }
}
