//! Regular lon/lat lattices and the scalar fields defined on them.
//!
//! Values are stored as an `ny × nx` array with row `i` at latitude
//! `lat_min + i·Δlat` and column `j` at longitude `lon_min + j·Δlon`.
//! NaN marks an invalid (masked) node; infinities are never stored.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("field shape {found:?} does not match grid {expected:?}")]
    Shape { expected: (usize, usize), found: (usize, usize) },
    #[error("field contains an infinite value at node ({0}, {1})")]
    Infinite(usize, usize),
    #[error("malformed field file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(
        lon_min: f64,
        lon_max: f64,
        lat_min: f64,
        lat_max: f64,
        nx: usize,
        ny: usize,
    ) -> Result<Self, FieldError> {
        let g = GridSpec { lon_min, lon_max, lat_min, lat_max, nx, ny };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let finite = [self.lon_min, self.lon_max, self.lat_min, self.lat_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(FieldError::Grid("bounds must be finite".into()));
        }
        if self.lon_min >= self.lon_max {
            return Err(FieldError::Grid("lon_min must be below lon_max".into()));
        }
        if self.lat_min >= self.lat_max {
            return Err(FieldError::Grid("lat_min must be below lat_max".into()));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(FieldError::Grid("nx and ny must be at least 2".into()));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 || self.lon_min < -180.0 || self.lon_max > 180.0 {
            return Err(FieldError::Grid("bounds outside valid lon/lat range".into()));
        }
        Ok(())
    }

    pub fn dlon(&self) -> f64 {
        (self.lon_max - self.lon_min) / (self.nx - 1) as f64
    }

    pub fn dlat(&self) -> f64 {
        (self.lat_max - self.lat_min) / (self.ny - 1) as f64
    }

    pub fn lon_at(&self, j: usize) -> f64 {
        self.lon_min + j as f64 * self.dlon()
    }

    pub fn lat_at(&self, i: usize) -> f64 {
        self.lat_min + i as f64 * self.dlat()
    }

    pub fn node(&self, i: usize, j: usize) -> GeoPoint {
        GeoPoint::new(self.lat_at(i), self.lon_at(j))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon_deg) && (self.lat_min..=self.lat_max).contains(&p.lat_deg)
    }

    /// Row/column of the node nearest to `p` (clamped to the grid).
    pub fn nearest_node(&self, p: GeoPoint) -> (usize, usize) {
        let fi = ((p.lat_deg - self.lat_min) / self.dlat()).round();
        let fj = ((p.lon_deg - self.lon_min) / self.dlon()).round();
        let i = fi.clamp(0.0, (self.ny - 1) as f64) as usize;
        let j = fj.clamp(0.0, (self.nx - 1) as f64) as usize;
        (i, j)
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.ny || j + 1 == self.nx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Array2<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, values: Array2<f64>) -> Result<Self, FieldError> {
        if values.dim() != grid.shape() {
            return Err(FieldError::Shape { expected: grid.shape(), found: values.dim() });
        }
        if let Some(((i, j), _)) = values.indexed_iter().find(|(_, v)| v.is_infinite()) {
            return Err(FieldError::Infinite(i, j));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = Array2::from_shape_fn(grid.shape(), |(i, j)| {
            let v = f(i, j);
            if v.is_finite() {
                v
            } else {
                f64::NAN
            }
        });
        ScalarField { grid, values }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.values[(i, j)];
        v.is_finite().then_some(v)
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)].is_finite()
    }

    pub fn masked_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_finite()).count()
    }

    /// Valid values at nodes for which `keep` returns true.
    pub fn valid_where(&self, keep: impl Fn(usize, usize) -> bool) -> Vec<f64> {
        self.values.indexed_iter().filter(|((i, j), v)| v.is_finite() && keep(*i, *j)).map(|(_, v)| *v).collect()
    }

    /// CSV with a header row of longitudes and a leading latitude column.
    /// Invalid cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lat_deg\\lon_deg");
        for j in 0..self.grid.nx {
            let _ = write!(out, ",{}", self.grid.lon_at(j));
        }
        out.push('\n');
        for i in 0..self.grid.ny {
            let _ = write!(out, "{}", self.grid.lat_at(i));
            for j in 0..self.grid.nx {
                match self.get(i, j) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV form written by [`ScalarField::to_csv`]. Grid bounds
    /// are taken from the first and last header/row coordinates.
    pub fn from_csv(text: &str) -> Result<Self, FieldError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FieldError::Parse("empty file".into()))?;
        let lons: Vec<f64> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|_| FieldError::Parse(format!("bad longitude `{s}`"))))
            .collect::<Result<_, _>>()?;
        let mut lats = Vec::new();
        let mut cells = Vec::new();
        for line in lines {
            let mut parts = line.split(',');
            let lat = parts.next().unwrap_or_default();
            lats.push(lat.trim().parse::<f64>().map_err(|_| FieldError::Parse(format!("bad latitude `{lat}`")))?);
            let row: Vec<f64> = parts
                .map(|s| {
                    let s = s.trim();
                    if s.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        s.parse::<f64>().map_err(|_| FieldError::Parse(format!("bad value `{s}`")))
                    }
                })
                .collect::<Result<_, _>>()?;
            if row.len() != lons.len() {
                return Err(FieldError::Parse(format!("row has {} cells, header has {}", row.len(), lons.len())));
            }
            cells.extend(row);
        }
        if lons.len() < 2 || lats.len() < 2 {
            return Err(FieldError::Parse("need at least 2 rows and 2 columns".into()));
        }
        let grid = GridSpec::new(lons[0], lons[lons.len() - 1], lats[0], lats[lats.len() - 1], lons.len(), lats.len())?;
        let values = Array2::from_shape_vec(grid.shape(), cells).map_err(|e| FieldError::Parse(e.to_string()))?;
        ScalarField::new(grid, values)
    }

    pub fn to_json_value(&self, metadata: Option<serde_json::Value>) -> serde_json::Value {
        let values: Vec<Option<f64>> = self.values.iter().map(|v| v.is_finite().then_some(*v)).collect();
        let mut obj = serde_json::json!({
            "grid": self.grid,
            "values": values,
        });
        if let Some(meta) = metadata {
            obj["metadata"] = meta;
        }
        obj
    }

    pub fn from_json_value(value: &serde_json::Value) -> Result<Self, FieldError> {
        #[derive(Deserialize)]
        struct Repr {
            grid: GridSpec,
            values: Vec<Option<f64>>,
        }
        let repr: Repr = serde_json::from_value(value.clone()).map_err(|e| FieldError::Parse(e.to_string()))?;
        repr.grid.validate()?;
        let flat: Vec<f64> = repr.values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let values = Array2::from_shape_vec(repr.grid.shape(), flat).map_err(|e| FieldError::Parse(e.to_string()))?;
        ScalarField::new(repr.grid, values)
    }
}

/// Median of a slice of finite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    Some(crate::tdoa::median_in_place(&mut v))
}
