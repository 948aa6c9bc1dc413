//! Station metadata and frequency trace CSV parsing.
//!
//! Two file shapes are accepted, both UTF-8 with `.` as the decimal point:
//!
//! ```text
//! station_id,lat_deg,lon_deg        t_s,freq_hz
//! A,35.0,-85.0                      0.0,60.0
//! B,36.2,-84.1                      0.1,59.998
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;
use crate::tdoa::{StationTdoa, TdoaStatus};

pub const STATION_HEADER: [&str; 3] = ["station_id", "lat_deg", "lon_deg"];
pub const TRACE_HEADER: [&str; 2] = ["t_s", "freq_hz"];
pub const TDOA_HEADER: [&str; 6] = ["station_id", "lat_deg", "lon_deg", "crossing_time_s", "tdoa_s", "status"];

/// Relative tolerance on sample spacing uniformity.
pub const SPACING_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("expected header `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("{message}, line {line}")]
    Row { line: u64, message: String },
    #[error("trace too short: {rows} row(s), need at least 2")]
    TooShort { rows: usize },
    #[error("non-uniform sample spacing at line {line}: step {step} differs from {dt}")]
    NonUniform { line: u64, step: f64, dt: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl StationMeta {
    pub fn new(station_id: impl Into<String>, lat_deg: f64, lon_deg: f64) -> Self {
        StationMeta { station_id: station_id.into(), lat_deg, lon_deg }
    }

    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.lat_deg, self.lon_deg)
    }
}

/// One station's uniformly sampled frequency record. All traces of a
/// dataset share the same time epoch, so `t0_s` values are comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct PmuTrace {
    pub station: StationMeta,
    pub t0_s: f64,
    pub dt_s: f64,
    pub freq_hz: Vec<f64>,
}

impl PmuTrace {
    pub fn time_at(&self, k: usize) -> f64 {
        self.t0_s + k as f64 * self.dt_s
    }

    /// Time between the first and last sample.
    pub fn span_s(&self) -> f64 {
        self.freq_hz.len().saturating_sub(1) as f64 * self.dt_s
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), IngestError> {
    let ok = found.len() == expected.len() && found.iter().zip(expected).all(|(a, b)| a.trim() == *b);
    if ok {
        Ok(())
    } else {
        Err(IngestError::Header { expected: expected.join(","), found: found.iter().collect::<Vec<_>>().join(",") })
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(input)
}

fn parse_field(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64, IngestError> {
    let raw = &record[idx];
    raw.parse::<f64>().map_err(|_| IngestError::Row { line, message: format!("non-numeric {name} `{raw}`") })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Parses a station metadata table. Row order is preserved.
pub fn parse_station_metadata<R: Read>(input: R) -> Result<Vec<StationMeta>, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &STATION_HEADER)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 3 {
            return Err(IngestError::Row { line, message: format!("expected 3 columns, found {}", record.len()) });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(IngestError::Row { line, message: "empty station_id".into() });
        }
        let lat = parse_field(&record, 1, "latitude", line)?;
        let lon = parse_field(&record, 2, "longitude", line)?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(IngestError::Row { line, message: "latitude out of range".into() });
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(IngestError::Row { line, message: "longitude out of range".into() });
        }
        if !seen.insert(id.clone()) {
            return Err(IngestError::Row { line, message: format!("duplicate station_id `{id}`") });
        }
        out.push(StationMeta::new(id, lat, lon));
    }
    Ok(out)
}

/// Parses a `t_s,freq_hz` trace for `station`. The sample interval is
/// taken from the first and last timestamps and every step must match it
/// within [`SPACING_TOLERANCE`] relative.
pub fn parse_trace_csv<R: Read>(input: R, station: StationMeta) -> Result<PmuTrace, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &TRACE_HEADER)?;

    let mut times = Vec::new();
    let mut lines = Vec::new();
    let mut freq = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 2 {
            return Err(IngestError::Row { line, message: format!("expected 2 columns, found {}", record.len()) });
        }
        let t = parse_field(&record, 0, "timestamp", line)?;
        let f = parse_field(&record, 1, "frequency", line)?;
        if !t.is_finite() {
            return Err(IngestError::Row { line, message: "non-finite timestamp".into() });
        }
        if !f.is_finite() {
            return Err(IngestError::Row { line, message: "non-finite frequency".into() });
        }
        times.push(t);
        lines.push(line);
        freq.push(f);
    }

    if times.len() < 2 {
        return Err(IngestError::TooShort { rows: times.len() });
    }
    let n = times.len();
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if dt <= 0.0 {
        return Err(IngestError::Row { line: lines[1], message: "timestamps are not strictly increasing".into() });
    }
    for k in 1..n {
        let step = times[k] - times[k - 1];
        if step <= 0.0 {
            return Err(IngestError::Row { line: lines[k], message: "timestamps are not strictly increasing".into() });
        }
        if (step - dt).abs() > SPACING_TOLERANCE * dt {
            return Err(IngestError::NonUniform { line: lines[k], step, dt });
        }
    }

    Ok(PmuTrace { station, t0_s: times[0], dt_s: dt, freq_hz: freq })
}

/// Renders a station table in the format read by [`parse_station_metadata`].
pub fn stations_to_csv(stations: &[StationMeta]) -> String {
    let mut out = STATION_HEADER.join(",");
    out.push('\n');
    for s in stations {
        let _ = writeln!(out, "{},{},{}", s.station_id, s.lat_deg, s.lon_deg);
    }
    out
}

/// Renders a trace in the format read by [`parse_trace_csv`]. Values use
/// the shortest representation that round-trips the `f64` exactly.
pub fn trace_to_csv(trace: &PmuTrace) -> String {
    let mut out = TRACE_HEADER.join(",");
    out.push('\n');
    for (k, f) in trace.freq_hz.iter().enumerate() {
        let _ = writeln!(out, "{},{}", trace.time_at(k), f);
    }
    out
}

/// Renders a per-station TDOA table. Missing times are empty cells.
pub fn tdoa_table_to_csv(tdoas: &[StationTdoa]) -> String {
    let cell = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    let mut out = TDOA_HEADER.join(",");
    out.push('\n');
    for t in tdoas {
        let s = &t.station;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.station_id,
            s.lat_deg,
            s.lon_deg,
            cell(t.crossing_time_s),
            cell(t.tdoa_s),
            t.status.as_str()
        );
    }
    out
}

/// Parses the table written by [`tdoa_table_to_csv`].
pub fn parse_tdoa_table<R: Read>(input: R) -> Result<Vec<StationTdoa>, IngestError> {
    let mut rdr = reader(input);
    check_header(rdr.headers()?, &TDOA_HEADER)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != TDOA_HEADER.len() {
            return Err(IngestError::Row {
                line,
                message: format!("expected {} columns, found {}", TDOA_HEADER.len(), record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(IngestError::Row { line, message: format!("empty or duplicate station_id `{id}`") });
        }
        let lat = parse_field(&record, 1, "latitude", line)?;
        let lon = parse_field(&record, 2, "longitude", line)?;
        let station = StationMeta::new(id, lat, lon);
        if !station.location().is_valid() {
            return Err(IngestError::Row { line, message: "coordinate out of range".into() });
        }
        let optional = |idx: usize, name: &str| -> Result<f64, IngestError> {
            if record[idx].is_empty() {
                Ok(f64::NAN)
            } else {
                parse_field(&record, idx, name, line)
            }
        };
        let crossing_time_s = optional(3, "crossing_time_s")?;
        let tdoa_s = optional(4, "tdoa_s")?;
        let status: TdoaStatus = record[5].parse().map_err(|message| IngestError::Row { line, message })?;
        if status == TdoaStatus::Ok && !tdoa_s.is_finite() {
            return Err(IngestError::Row { line, message: "ok row without a finite tdoa_s".into() });
        }
        out.push(StationTdoa { station, tdoa_s, crossing_time_s, status });
    }
    Ok(out)
}
