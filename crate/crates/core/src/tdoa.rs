//! Disturbance arrival detection by threshold crossing of the frequency
//! deviation, and conversion of arrival times into relative delays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{PmuTrace, StationMeta};

/// Minimum number of detected arrivals needed to build a TDOA surface.
pub const MIN_DETECTED: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum TdoaError {
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("station {station}: trace spans {span_s} s, shorter than the {window_s} s baseline window")]
    TraceTooShort { station: String, span_s: f64, window_s: f64 },
    #[error("insufficient detected crossings: {detected} of {total} stations, need at least {MIN_DETECTED}")]
    InsufficientData { detected: usize, total: usize, tdoas: Vec<StationTdoa> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Below,
    Above,
    Either,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "below" => Ok(Direction::Below),
            "above" => Ok(Direction::Above),
            "either" => Ok(Direction::Either),
            other => Err(format!("unknown direction `{other}` (expected below|above|either)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub threshold_mhz: f64,
    pub baseline_window_s: f64,
    pub direction: Direction,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { threshold_mhz: 20.0, baseline_window_s: 2.0, direction: Direction::Below }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), TdoaError> {
        if !(self.threshold_mhz > 0.0 && self.threshold_mhz.is_finite()) {
            return Err(TdoaError::Config("threshold_mhz must be positive".into()));
        }
        if !(self.baseline_window_s > 0.0 && self.baseline_window_s.is_finite()) {
            return Err(TdoaError::Config("baseline_window_s must be positive".into()));
        }
        Ok(())
    }

    fn threshold_hz(&self) -> f64 {
        self.threshold_mhz * 1e-3
    }

    /// Signed excursion of `deviation` in the configured direction.
    fn excursion(&self, deviation: f64) -> f64 {
        match self.direction {
            Direction::Below => -deviation,
            Direction::Above => deviation,
            Direction::Either => deviation.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdoaStatus {
    Ok,
    NoCrossing,
    Outlier,
}

impl TdoaStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TdoaStatus::Ok => "ok",
            TdoaStatus::NoCrossing => "no_crossing",
            TdoaStatus::Outlier => "outlier",
        }
    }
}

impl std::str::FromStr for TdoaStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ok" => Ok(TdoaStatus::Ok),
            "no_crossing" => Ok(TdoaStatus::NoCrossing),
            "outlier" => Ok(TdoaStatus::Outlier),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// Arrival of the disturbance at one station. `tdoa_s` and
/// `crossing_time_s` are NaN when no crossing was detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationTdoa {
    pub station: StationMeta,
    pub tdoa_s: f64,
    pub crossing_time_s: f64,
    pub status: TdoaStatus,
}

impl StationTdoa {
    pub fn is_ok(&self) -> bool {
        self.status == TdoaStatus::Ok
    }
}

/// Median of the samples in the first `baseline_window_s` of the trace
/// (window end inclusive).
pub fn estimate_baseline(trace: &PmuTrace, cfg: &DetectionConfig) -> Result<f64, TdoaError> {
    cfg.validate()?;
    let span = trace.span_s();
    let slack = 1e-9 * trace.dt_s;
    if span + slack < cfg.baseline_window_s {
        return Err(TdoaError::TraceTooShort {
            station: trace.station.station_id.clone(),
            span_s: span,
            window_s: cfg.baseline_window_s,
        });
    }
    let end = trace.t0_s + cfg.baseline_window_s + slack;
    let mut window: Vec<f64> =
        trace.freq_hz.iter().enumerate().take_while(|(k, _)| trace.time_at(*k) <= end).map(|(_, f)| *f).collect();
    Ok(median_in_place(&mut window))
}

pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Earliest time the deviation from `baseline` reaches the threshold, or
/// `None` when it never does. The crossing is refined by linear
/// interpolation between the last sample inside and the first sample
/// outside the threshold.
pub fn detect_crossing(trace: &PmuTrace, baseline: f64, cfg: &DetectionConfig) -> Option<f64> {
    let thr = cfg.threshold_hz();
    let mut prev: Option<f64> = None;
    for (k, f) in trace.freq_hz.iter().enumerate() {
        let m = cfg.excursion(f - baseline);
        if m >= thr {
            return Some(match prev {
                None => trace.t0_s,
                Some(m_prev) => {
                    let frac = (thr - m_prev) / (m - m_prev);
                    trace.time_at(k - 1) + frac * trace.dt_s
                }
            });
        }
        prev = Some(m);
    }
    None
}

/// Detects arrivals on every trace and references them to the earliest
/// arrival. Output order follows input order.
pub fn compute_tdoas(traces: &[PmuTrace], cfg: &DetectionConfig) -> Result<Vec<StationTdoa>, TdoaError> {
    cfg.validate()?;
    let mut crossings = Vec::with_capacity(traces.len());
    for trace in traces {
        let baseline = estimate_baseline(trace, cfg)?;
        crossings.push(detect_crossing(trace, baseline, cfg));
    }

    let tdoas = reference_to_earliest(traces.iter().zip(crossings).map(|(t, c)| (t.station.clone(), c)).collect());
    let detected = tdoas.iter().filter(|t| t.is_ok()).count();
    if detected < MIN_DETECTED {
        return Err(TdoaError::InsufficientData { detected, total: traces.len(), tdoas });
    }
    Ok(tdoas)
}

/// Builds TDOAs from raw crossing times; `None` means no crossing.
pub fn reference_to_earliest(crossings: Vec<(StationMeta, Option<f64>)>) -> Vec<StationTdoa> {
    let reference = earliest(crossings.iter().filter_map(|(s, c)| c.map(|c| (s, c))));
    crossings
        .into_iter()
        .map(|(station, crossing)| match (crossing, reference) {
            (Some(c), Some(r)) => StationTdoa { station, tdoa_s: c - r, crossing_time_s: c, status: TdoaStatus::Ok },
            _ => StationTdoa { station, tdoa_s: f64::NAN, crossing_time_s: f64::NAN, status: TdoaStatus::NoCrossing },
        })
        .collect()
}

/// Re-references the ok stations of `tdoas` so the earliest has zero delay.
pub fn rereference(tdoas: &mut [StationTdoa]) {
    let reference = earliest(tdoas.iter().filter(|t| t.is_ok()).map(|t| (&t.station, t.crossing_time_s)));
    if let Some(r) = reference {
        for t in tdoas.iter_mut().filter(|t| t.is_ok()) {
            t.tdoa_s = t.crossing_time_s - r;
        }
    }
}

/// Minimum crossing time; ties go to the lexicographically first id.
fn earliest<'a>(it: impl Iterator<Item = (&'a StationMeta, f64)>) -> Option<f64> {
    it.min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.station_id.cmp(&b.0.station_id))).map(|(_, c)| c)
}
