//! Continuum-model wave simulator.
//!
//! Integrates `∂²δ/∂t² = c(x, y)² ∇²δ` on a lon/lat lattice with a
//! 5-point Laplacian (physical spacings per row), reflecting boundaries
//! and staggered leapfrog stepping. The disturbance is a Gaussian pulse of
//! `∂δ/∂t` in space and time. Virtual PMUs report
//! `f0 + (1/2π)·∂δ/∂t` at their nearest lattice node.

use std::collections::{BTreeMap, HashSet};
use std::io;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, GridSpec, ScalarField};
use crate::geo::{degree_coefficients, GeoPoint, KM_PER_DEGREE};
use crate::inertia::{ContinuumParams, InertiaError};
use crate::ingest::{stations_to_csv, trace_to_csv, PmuTrace, StationMeta};

/// Nominal system frequency of the synthetic traces.
pub const NOMINAL_HZ: f64 = 60.0;

/// Fraction of the CFL-limited step actually used.
pub const CFL_SAFETY: f64 = 0.5;

/// Any |δ| beyond this is treated as numerical blow-up.
pub const INSTABILITY_LIMIT: f64 = 1e6;

/// The temporal pulse is centred this many widths after onset.
const PULSE_DELAY_WIDTHS: f64 = 5.0;

/// The spatial pulse is truncated at this many radii.
const PULSE_CUTOFF_RADII: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("numerical instability at step {step} (t = {time_s:.4} s): |δ| exceeded {INSTABILITY_LIMIT:e}")]
    Unstable { step: usize, time_s: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn invalid(field: &str, message: impl Into<String>) -> SimError {
    SimError::Invalid { field: field.into(), message: message.into() }
}

/// Propagation speed in km/s for inertia `h` under the continuum relation.
pub fn local_speed(h: f64, params: &ContinuumParams) -> Result<f64, SimError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("h", format!("h must be positive, got {h}")));
    }
    let c2 = params.omega_pu * params.v_mag_pu.powi(2) * params.theta_rad.sin() / (2.0 * params.z_mag_pu * h);
    Ok(c2.sqrt() * params.distance_base_km)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSource {
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// Time integral of the injected `∂δ/∂t` at the pulse centre, rad.
    pub amplitude_rad: f64,
    /// Temporal standard deviation σ_s, seconds.
    pub width_s: f64,
    /// Spatial standard deviation σ_deg, degrees of arc.
    pub radius_deg: f64,
    /// Time at which injection starts.
    #[serde(default)]
    pub onset_s: f64,
}

impl PulseSource {
    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.lat_deg, self.lon_deg)
    }

    pub fn center_time_s(&self) -> f64 {
        self.onset_s + PULSE_DELAY_WIDTHS * self.width_s
    }

    /// Time after which the pulse has injected all but a negligible tail.
    pub fn injection_end_s(&self) -> f64 {
        self.onset_s + 2.0 * PULSE_DELAY_WIDTHS * self.width_s
    }

    /// Cumulative temporal profile: injected `∂δ/∂t` at the centre.
    fn profile(&self, t: f64) -> f64 {
        if t < self.onset_s {
            return 0.0;
        }
        let z = (t - self.center_time_s()) / self.width_s;
        self.amplitude_rad / (self.width_s * (2.0 * std::f64::consts::PI).sqrt()) * (-0.5 * z * z).exp()
    }
}

/// Rectangle of constant inertia.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(default)]
    pub name: Option<String>,
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub h: f64,
}

impl Region {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon_deg) && (self.lat_min..=self.lat_max).contains(&p.lat_deg)
    }
}

/// Inertia map as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InertiaSpec {
    Nested(Vec<Vec<f64>>),
    Uniform {
        uniform: f64,
    },
    Regions {
        regions: Vec<Region>,
        #[serde(default)]
        background: Option<f64>,
    },
}

fn default_threshold_mhz() -> f64 {
    20.0
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub grid: GridSpec,
    pub h_field: InertiaSpec,
    #[serde(default)]
    pub params: ContinuumParams,
    pub source: PulseSource,
    #[serde(default)]
    pub probes: Vec<StationMeta>,
    pub duration_s: f64,
    pub sample_dt_s: f64,
    /// Threshold for the ground-truth wavefront surface.
    #[serde(default = "default_threshold_mhz")]
    pub wavefront_threshold_mhz: f64,
}

/// A named sub-area of known inertia, used to score recovered maps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRegion {
    pub name: String,
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub h_true: f64,
}

impl ReportRegion {
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon_deg) && (self.lat_min..=self.lat_max).contains(&p.lat_deg)
    }
}

/// A validated scenario with the inertia map materialised on the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub grid: GridSpec,
    pub h_field: Array2<f64>,
    pub params: ContinuumParams,
    pub source: PulseSource,
    pub probes: Vec<StationMeta>,
    pub duration_s: f64,
    pub sample_dt_s: f64,
    pub wavefront_threshold_mhz: f64,
    pub regions: Vec<ReportRegion>,
}

impl SimScenario {
    pub fn from_file(file: &ScenarioFile) -> Result<Self, SimError> {
        file.grid.validate().map_err(|e| invalid("grid", e.to_string()))?;
        let g = file.grid;
        let whole = |h: f64| ReportRegion {
            name: "domain".into(),
            lon_min: g.lon_min,
            lon_max: g.lon_max,
            lat_min: g.lat_min,
            lat_max: g.lat_max,
            h_true: h,
        };

        let (h_field, regions) = match &file.h_field {
            InertiaSpec::Uniform { uniform } => (Array2::from_elem(g.shape(), *uniform), vec![whole(*uniform)]),
            InertiaSpec::Nested(rows) => {
                if rows.len() != g.ny || rows.iter().any(|r| r.len() != g.nx) {
                    return Err(invalid(
                        "h_field",
                        format!("nested array must be {}x{} (rows = latitude)", g.ny, g.nx),
                    ));
                }
                let h = Array2::from_shape_fn(g.shape(), |(i, j)| rows[i][j]);
                let mut flat: Vec<f64> = h.iter().copied().filter(|v| v.is_finite()).collect();
                let med = if flat.is_empty() { f64::NAN } else { crate::tdoa::median_in_place(&mut flat) };
                (h, vec![whole(med)])
            }
            InertiaSpec::Regions { regions, background } => {
                let mut h = Array2::from_elem(g.shape(), background.unwrap_or(f64::NAN));
                for (i, j) in (0..g.ny).flat_map(|i| (0..g.nx).map(move |j| (i, j))) {
                    let p = g.node(i, j);
                    if let Some(r) = regions.iter().rev().find(|r| r.contains(p)) {
                        h[(i, j)] = r.h;
                    }
                }
                if h.iter().any(|v| v.is_nan()) {
                    return Err(invalid("h_field", "regions leave nodes uncovered; add a background value"));
                }
                let report = regions
                    .iter()
                    .enumerate()
                    .map(|(k, r)| ReportRegion {
                        name: r.name.clone().unwrap_or_else(|| format!("region{k}")),
                        lon_min: r.lon_min,
                        lon_max: r.lon_max,
                        lat_min: r.lat_min,
                        lat_max: r.lat_max,
                        h_true: r.h,
                    })
                    .collect();
                (h, report)
            }
        };

        let scenario = SimScenario {
            grid: g,
            h_field,
            params: file.params,
            source: file.source,
            probes: file.probes.clone(),
            duration_s: file.duration_s,
            sample_dt_s: file.sample_dt_s,
            wavefront_threshold_mhz: file.wavefront_threshold_mhz,
            regions,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let g = self.grid;
        g.validate().map_err(|e| invalid("grid", e.to_string()))?;
        if g.nx < 3 || g.ny < 3 {
            return Err(invalid("grid", "simulation lattice needs at least 3x3 nodes"));
        }
        if g.lat_min <= -89.0 || g.lat_max >= 89.0 {
            return Err(invalid("grid", "lattice must stay clear of the poles"));
        }
        if self.h_field.dim() != g.shape() {
            return Err(invalid("h_field", "shape does not match grid"));
        }
        if let Some(h) = self.h_field.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(invalid("h_field", format!("h must be positive, got {h}")));
        }
        self.params.validate().map_err(|e: InertiaError| invalid("params", e.to_string()))?;
        let s = &self.source;
        if !g.contains(s.location()) {
            return Err(invalid("source", "source lies outside the grid"));
        }
        if !(s.width_s > 0.0 && s.width_s.is_finite()) {
            return Err(invalid("source.width_s", "must be positive"));
        }
        if !(s.radius_deg > 0.0 && s.radius_deg.is_finite()) {
            return Err(invalid("source.radius_deg", "must be positive"));
        }
        if !s.amplitude_rad.is_finite() || !s.onset_s.is_finite() || s.onset_s < 0.0 {
            return Err(invalid("source", "amplitude and onset must be finite, onset non-negative"));
        }
        let mut ids = HashSet::new();
        for p in &self.probes {
            if p.station_id.is_empty() {
                return Err(invalid("probes", "empty station_id"));
            }
            if !ids.insert(p.station_id.as_str()) {
                return Err(invalid("probes", format!("duplicate station_id `{}`", p.station_id)));
            }
            if !g.contains(p.location()) {
                return Err(invalid("probes", format!("probe `{}` lies outside the grid", p.station_id)));
            }
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(invalid("duration_s", "must be positive"));
        }
        if !(self.sample_dt_s > 0.0 && self.sample_dt_s.is_finite()) {
            return Err(invalid("sample_dt_s", "must be positive"));
        }
        if !(self.wavefront_threshold_mhz > 0.0) {
            return Err(invalid("wavefront_threshold_mhz", "must be positive"));
        }
        Ok(())
    }

    /// Ground-truth propagation speed at every lattice node.
    pub fn speed_field(&self) -> Result<Array2<f64>, SimError> {
        let mut c = Array2::zeros(self.grid.shape());
        for ((i, j), h) in self.h_field.indexed_iter() {
            c[(i, j)] = local_speed(*h, &self.params)?;
        }
        Ok(c)
    }

    pub fn h_scalar_field(&self) -> ScalarField {
        ScalarField::from_fn(self.grid, |i, j| self.h_field[(i, j)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub traces: Vec<PmuTrace>,
    /// First time `|f − f0|` reached the wavefront threshold at each node;
    /// NaN where it never did.
    pub wavefront_times: ScalarField,
    pub cfl_dt_s: f64,
    pub steps: usize,
    /// Set when the run is long enough for boundary reflections to matter.
    pub reflection_warning: bool,
    /// `(t, E)` at every output sample, with
    /// `E = Σ (∂δ/∂t)²/c² + Σ_edges (Δδ/Δ)²`.
    pub energy: Vec<(f64, f64)>,
    pub injection_end_s: f64,
}

/// Runs the scenario.
pub fn simulate(scenario: &SimScenario) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let g = scenario.grid;
    let (ny, nx) = g.shape();
    let speed = scenario.speed_field()?;
    let c2 = speed.mapv(|c| c * c);
    let c_max = speed.iter().copied().fold(0.0, f64::max);

    // Physical spacings: dx varies by row with latitude, dy is constant.
    let dy = KM_PER_DEGREE * g.dlat();
    let dx: Vec<f64> = (0..ny).map(|i| degree_coefficients(g.node(i, 0)).c_lon_km_per_deg * g.dlon()).collect();
    let min_spacing = dx.iter().copied().fold(dy, f64::min);
    let dt_cfl = CFL_SAFETY * min_spacing / (c_max * std::f64::consts::SQRT_2);
    let per_sample = (scenario.sample_dt_s / dt_cfl).ceil().max(1.0) as usize;
    let dt = scenario.sample_dt_s / per_sample as f64;
    let n_samples = (scenario.duration_s / scenario.sample_dt_s + 1e-9).floor() as usize + 1;
    let steps = (n_samples - 1) * per_sample;

    let wx: Vec<f64> = dx.iter().map(|d| 1.0 / (d * d)).collect();
    let wy = 1.0 / (dy * dy);

    // Spatial pulse shape, isotropic in km around the source.
    let src = scenario.source;
    let src_c = degree_coefficients(src.location());
    let sigma_km = src.radius_deg * KM_PER_DEGREE;
    let cutoff_km = PULSE_CUTOFF_RADII * sigma_km;
    let shape = Array2::from_shape_fn((ny, nx), |(i, j)| {
        let p = g.node(i, j);
        let ex = (p.lon_deg - src.lon_deg) * src_c.c_lon_km_per_deg;
        let ey = (p.lat_deg - src.lat_deg) * src_c.c_lat_km_per_deg;
        let r = ex.hypot(ey);
        if r > cutoff_km {
            0.0
        } else {
            (-0.5 * (r / sigma_km).powi(2)).exp()
        }
    });
    let shape = shape.into_raw_vec_and_offset().0;

    let probe_nodes: Vec<usize> = scenario
        .probes
        .iter()
        .map(|p| {
            let (i, j) = g.nearest_node(p.location());
            i * nx + j
        })
        .collect();

    let n = nx * ny;
    let c2 = c2.into_raw_vec_and_offset().0;
    let mut delta = vec![0.0; n];
    // ∂δ/∂t at the half step before the current time.
    let mut vel = vec![0.0; n];
    // Holds the Laplacian, then the centred velocity at the current time.
    let mut work = vec![0.0; n];
    let mut prev_dev = vec![0.0; n];
    let mut crossed = vec![f64::NAN; n];
    let threshold = scenario.wavefront_threshold_mhz * 1e-3 * 2.0 * std::f64::consts::PI;

    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); probe_nodes.len()];
    let mut energy = Vec::with_capacity(n_samples);

    for step in 0..=steps {
        let t = step as f64 * dt;
        let record = step % per_sample == 0;

        laplacian(&delta, &mut work, nx, ny, &wx, wy);
        let inject = src.profile(t + 0.5 * dt) - src.profile(t - 0.5 * dt);

        let mut kinetic = 0.0;
        for k in 0..n {
            let old = vel[k];
            let new = old + dt * c2[k] * work[k] + shape[k] * inject;
            let now = 0.5 * (old + new);

            let dev = now.abs();
            if crossed[k].is_nan() && dev >= threshold {
                crossed[k] = if step == 0 { t } else { t - dt + dt * (threshold - prev_dev[k]) / (dev - prev_dev[k]) };
            }
            prev_dev[k] = dev;
            if record {
                kinetic += now * now / c2[k];
            }
            vel[k] = new;
            work[k] = now;
        }

        if record {
            energy.push((t, kinetic + potential_energy(&delta, nx, ny, &wx, wy)));
            for (trace, &k) in samples.iter_mut().zip(&probe_nodes) {
                trace.push(NOMINAL_HZ + work[k] / (2.0 * std::f64::consts::PI));
            }
        }

        let mut peak: f64 = 0.0;
        for k in 0..n {
            delta[k] += dt * vel[k];
            peak = peak.max(delta[k].abs());
        }
        if !(peak <= INSTABILITY_LIMIT) {
            return Err(SimError::Unstable { step, time_s: t });
        }
    }

    let traces = scenario
        .probes
        .iter()
        .zip(samples)
        .map(|(p, freq_hz)| PmuTrace { station: p.clone(), t0_s: 0.0, dt_s: scenario.sample_dt_s, freq_hz })
        .collect();
    let wavefront_times = ScalarField::new(g, Array2::from_shape_vec((ny, nx), crossed).expect("lattice shape"))?;

    Ok(SimResult {
        traces,
        wavefront_times,
        cfl_dt_s: dt,
        steps,
        reflection_warning: reflection_risk(scenario, c_max, &dx, dy),
        energy,
        injection_end_s: src.injection_end_s(),
    })
}

/// True when the run outlasts 80% of the time a wavefront needs to cross
/// the narrower domain extent and come back, counted from the pulse centre.
fn reflection_risk(scenario: &SimScenario, c_max: f64, dx: &[f64], dy: f64) -> bool {
    let g = scenario.grid;
    let width_km = dx[g.ny / 2] * (g.nx - 1) as f64;
    let height_km = dy * (g.ny - 1) as f64;
    let round_trip_s = 2.0 * width_km.min(height_km) / c_max;
    scenario.duration_s - scenario.source.center_time_s() > 0.8 * round_trip_s
}

fn potential_energy(delta: &[f64], nx: usize, ny: usize, wx: &[f64], wy: f64) -> f64 {
    let mut e = 0.0;
    for i in 0..ny {
        let row = i * nx;
        for j in 0..nx {
            let k = row + j;
            if j + 1 < nx {
                let d = delta[k + 1] - delta[k];
                e += wx[i] * d * d;
            }
            if i + 1 < ny {
                let d = delta[k + nx] - delta[k];
                e += wy * d * d;
            }
        }
    }
    e
}

/// Graph Laplacian with reflecting boundaries: each node sums the weighted
/// differences to the neighbours it has.
fn laplacian(delta: &[f64], out: &mut [f64], nx: usize, ny: usize, wx: &[f64], wy: f64) {
    for i in 0..ny {
        let row = i * nx;
        for j in 0..nx {
            let k = row + j;
            let centre = delta[k];
            let mut acc = 0.0;
            if j > 0 {
                acc += wx[i] * (delta[k - 1] - centre);
            }
            if j + 1 < nx {
                acc += wx[i] * (delta[k + 1] - centre);
            }
            if i > 0 {
                acc += wy * (delta[k - nx] - centre);
            }
            if i + 1 < ny {
                acc += wy * (delta[k + nx] - centre);
            }
            out[k] = acc;
        }
    }
}

/// Destination for exported scenario files.
pub trait TraceSink {
    fn write_file(&mut self, name: &str, contents: &str) -> io::Result<()>;
}

/// Writes files under a directory, creating subdirectories as needed.
#[derive(Debug, Clone)]
pub struct DirSink {
    pub root: PathBuf,
}

impl TraceSink for DirSink {
    fn write_file(&mut self, name: &str, contents: &str) -> io::Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, contents)
    }
}

/// Collects files in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub files: BTreeMap<String, String>,
}

impl TraceSink for MemorySink {
    fn write_file(&mut self, name: &str, contents: &str) -> io::Result<()> {
        self.files.insert(name.to_string(), contents.to_string());
        Ok(())
    }
}

pub const STATIONS_FILE: &str = "stations.csv";
pub const TRACES_DIR: &str = "traces";

/// Relative path of a station's trace file inside a dataset.
pub fn trace_file_name(station_id: &str) -> String {
    format!("{TRACES_DIR}/{station_id}.csv")
}

/// Writes `stations.csv` and one `traces/<id>.csv` per probe. Returns the
/// names written, metadata first.
pub fn export_scenario_traces(result: &SimResult, sink: &mut dyn TraceSink) -> io::Result<Vec<String>> {
    let stations: Vec<StationMeta> = result.traces.iter().map(|t| t.station.clone()).collect();
    sink.write_file(STATIONS_FILE, &stations_to_csv(&stations))?;
    let mut names = vec![STATIONS_FILE.to_string()];
    for trace in &result.traces {
        let name = trace_file_name(&trace.station.station_id);
        sink.write_file(&name, &trace_to_csv(trace))?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_distance_km;
    use crate::inertia::{gradient_field, inertia_for_speed, speed_field};
    use crate::ingest::parse_trace_csv;
    use std::f64::consts::FRAC_PI_2;

    fn unit_params() -> ContinuumParams {
        ContinuumParams { omega_pu: 1.0, v_mag_pu: 1.0, theta_rad: FRAC_PI_2, z_mag_pu: 0.5, distance_base_km: 1.0 }
    }

    /// 61×61 lattice over 6°×6° with the source on the centre node.
    fn scenario(h: f64, probes: Vec<StationMeta>) -> SimScenario {
        let file = ScenarioFile {
            grid: GridSpec::new(-88.0, -82.0, 32.0, 38.0, 61, 61).unwrap(),
            h_field: InertiaSpec::Uniform { uniform: h },
            params: ContinuumParams::default(),
            source: PulseSource {
                lat_deg: 35.0,
                lon_deg: -85.0,
                amplitude_rad: -200.0,
                width_s: 0.08,
                radius_deg: 0.1,
                onset_s: 0.5,
            },
            probes,
            duration_s: 2.0,
            sample_dt_s: 0.01,
            wavefront_threshold_mhz: 20.0,
        };
        SimScenario::from_file(&file).unwrap()
    }

    fn ring_probes() -> Vec<StationMeta> {
        vec![
            StationMeta::new("E", 35.0, -84.0),
            StationMeta::new("W", 35.0, -86.0),
            StationMeta::new("N", 37.0, -85.0),
            StationMeta::new("S", 33.5, -85.0),
            StationMeta::new("NE", 36.5, -83.5),
        ]
    }

    /// Arrival at a node measured from the arrival at the source node.
    fn arrival(res: &SimResult, sc: &SimScenario, p: GeoPoint) -> f64 {
        let (si, sj) = sc.grid.nearest_node(sc.source.location());
        let (i, j) = sc.grid.nearest_node(p);
        res.wavefront_times.values[(i, j)] - res.wavefront_times.values[(si, sj)]
    }

    #[test]
    fn local_speed_examples() {
        let p = unit_params();
        assert!((local_speed(1.0, &p).unwrap() - 1.0).abs() < 1e-15);
        assert!((local_speed(4.0, &p).unwrap() - 0.5).abs() < 1e-15);
        for h in [0.1, 1.0, 10.0] {
            let back = inertia_for_speed(local_speed(h, &p).unwrap(), &p);
            assert!((back - h).abs() <= 1e-12 * h);
        }
        let err = local_speed(0.0, &p).unwrap_err().to_string();
        assert!(err.contains("h must be positive"), "{err}");
        assert!(local_speed(-1.0, &p).is_err());
    }

    #[test]
    fn uniform_arrivals_match_distance_over_speed() {
        let sc = scenario(1.0, ring_probes());
        let res = simulate(&sc).unwrap();
        let c = local_speed(1.0, &sc.params).unwrap();
        for p in &sc.probes {
            let d = haversine_distance_km(sc.source.location(), p.location());
            assert!(d >= 5.0 * KM_PER_DEGREE * sc.grid.dlat());
            let t = arrival(&res, &sc, p.location());
            assert!((t / (d / c) - 1.0).abs() < 0.1, "{}: arrival {t} vs {}", p.station_id, d / c);
        }
    }

    #[test]
    fn mirrored_probes_see_identical_traces() {
        let sc = scenario(1.0, ring_probes());
        let res = simulate(&sc).unwrap();
        let (e, w) = (&res.traces[0], &res.traces[1]);
        let worst = e.freq_hz.iter().zip(&w.freq_hz).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "east/west traces differ by {worst}");
        assert!(e.freq_hz.iter().any(|f| (f - NOMINAL_HZ).abs() > 0.1));
    }

    #[test]
    fn doubling_inertia_slows_arrivals_by_sqrt2() {
        // Far enough out that the finite source extent is a small offset.
        let probes = vec![
            StationMeta::new("E", 35.0, -82.2),
            StationMeta::new("N", 37.8, -85.0),
            StationMeta::new("SW", 33.0, -87.5),
        ];
        let (a, b) = (scenario(1.0, probes.clone()), scenario(2.0, probes));
        let (ra, rb) = (simulate(&a).unwrap(), simulate(&b).unwrap());
        for p in &a.probes {
            let ratio = arrival(&rb, &b, p.location()) / arrival(&ra, &a, p.location());
            assert!((ratio / std::f64::consts::SQRT_2 - 1.0).abs() < 0.05, "{}: ratio {ratio}", p.station_id);
        }
    }

    #[test]
    fn energy_is_conserved_after_injection() {
        let res = simulate(&scenario(1.0, vec![])).unwrap();
        let after: Vec<f64> = res.energy.iter().filter(|(t, _)| *t >= res.injection_end_s).map(|(_, e)| *e).collect();
        assert!(after.len() > 50);
        let e0 = after[0];
        assert!(e0 > 0.0);
        let drift = after.iter().map(|e| (e / e0 - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift <= 0.05, "energy drift {drift}");
    }

    #[test]
    fn no_signal_before_causal_arrival() {
        // The explicit stencil leaks an exponentially small precursor ahead
        // of the front, proportional to the amplitude. On a 0.05° lattice
        // with a compact unit pulse it stays below the absolute bound.
        let mut sc = scenario(1.0, ring_probes());
        sc.source.amplitude_rad = -1.0;
        sc.source.radius_deg = 0.05;
        sc.grid.nx = 121;
        sc.grid.ny = 121;
        sc.h_field = Array2::from_elem(sc.grid.shape(), 1.0);
        let res = simulate(&sc).unwrap();
        let c = local_speed(1.0, &sc.params).unwrap();
        for trace in &res.traces {
            let d = haversine_distance_km(sc.source.location(), trace.station.location());
            let limit = sc.source.onset_s + d / c - 2.0 * sc.source.width_s;
            for (k, f) in trace.freq_hz.iter().enumerate() {
                if trace.time_at(k) < limit {
                    assert!(
                        (f - NOMINAL_HZ).abs() <= 1e-12,
                        "{} at t = {}: {f}",
                        trace.station.station_id,
                        trace.time_at(k)
                    );
                }
            }
        }
    }

    #[test]
    fn wavefront_surface_recovers_true_speed() {
        let sc = scenario(1.0, vec![]);
        let res = simulate(&sc).unwrap();
        let c = local_speed(1.0, &sc.params).unwrap();
        let speed = speed_field(&gradient_field(&res.wavefront_times).unwrap(), 1e-9);
        let g = sc.grid;
        let (si, sj) = g.nearest_node(sc.source.location());
        let mut checked = 0;
        for i in 5..g.ny - 5 {
            for j in 5..g.nx - 5 {
                if si.abs_diff(i).max(sj.abs_diff(j)) < 5 {
                    continue;
                }
                let v = speed.get(i, j).expect("interior node valid");
                assert!((v / c - 1.0).abs() < 0.1, "node ({i}, {j}): {v} vs {c}");
                checked += 1;
            }
        }
        assert!(checked > 2000);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let sc = scenario(1.5, ring_probes());
        assert_eq!(simulate(&sc).unwrap(), simulate(&sc).unwrap());
    }

    #[test]
    fn step_divides_sample_interval() {
        let sc = scenario(1.0, vec![]);
        let res = simulate(&sc).unwrap();
        let per = sc.sample_dt_s / res.cfl_dt_s;
        assert!((per - per.round()).abs() < 1e-9);
        assert_eq!(res.steps, 200 * per.round() as usize);
        assert_eq!(res.energy.len(), 201);
        assert!(!res.reflection_warning);
    }

    #[test]
    fn long_runs_flag_reflections() {
        let mut sc = scenario(1.0, vec![]);
        sc.duration_s = 4.0;
        assert!(simulate(&sc).unwrap().reflection_warning);
    }

    #[test]
    fn blow_up_is_reported() {
        let mut sc = scenario(1.0, vec![]);
        sc.source.amplitude_rad = 1e9;
        assert!(matches!(simulate(&sc), Err(SimError::Unstable { .. })));
    }

    fn file_with(h_field: InertiaSpec) -> ScenarioFile {
        let sc = scenario(1.0, vec![]);
        ScenarioFile {
            grid: sc.grid,
            h_field,
            params: sc.params,
            source: sc.source,
            probes: vec![],
            duration_s: 1.0,
            sample_dt_s: 0.01,
            wavefront_threshold_mhz: 20.0,
        }
    }

    #[test]
    fn zero_inertia_region_rejected() {
        let bad = file_with(InertiaSpec::Regions {
            regions: vec![Region { name: None, lon_min: -86.0, lon_max: -84.0, lat_min: 34.0, lat_max: 36.0, h: 0.0 }],
            background: Some(1.0),
        });
        let err = SimScenario::from_file(&bad).unwrap_err().to_string();
        assert!(err.contains("h must be positive"), "{err}");
    }

    #[test]
    fn source_outside_grid_rejected() {
        let mut f = file_with(InertiaSpec::Uniform { uniform: 1.0 });
        f.source.lon_deg = -70.0;
        match SimScenario::from_file(&f) {
            Err(SimError::Invalid { field, .. }) => assert_eq!(field, "source"),
            other => panic!("expected source error, got {other:?}"),
        }
    }

    #[test]
    fn regions_last_wins_and_uncovered_rejected() {
        let r = |h, lon_min| Region { name: None, lon_min, lon_max: -82.0, lat_min: 32.0, lat_max: 38.0, h };
        let sc = SimScenario::from_file(&file_with(InertiaSpec::Regions {
            regions: vec![r(1.0, -88.0), r(3.0, -85.0)],
            background: None,
        }))
        .unwrap();
        assert_eq!(sc.h_field[(30, 0)], 1.0);
        assert_eq!(sc.h_field[(30, 30)], 3.0);
        assert_eq!(sc.regions.len(), 2);
        let gap = file_with(InertiaSpec::Regions { regions: vec![r(3.0, -85.0)], background: None });
        assert!(SimScenario::from_file(&gap).is_err());
    }

    #[test]
    fn scenario_json_forms() {
        let text = r#"{
            "grid": {"lon_min": -88, "lon_max": -82, "lat_min": 32, "lat_max": 38, "nx": 3, "ny": 3},
            "h_field": [[1, 1, 1], [1, 2, 1], [1, 1, 1]],
            "source": {"lat_deg": 35, "lon_deg": -85, "amplitude_rad": -1, "width_s": 0.1, "radius_deg": 0.5},
            "duration_s": 1, "sample_dt_s": 0.01
        }"#;
        let f: ScenarioFile = serde_json::from_str(text).unwrap();
        let sc = SimScenario::from_file(&f).unwrap();
        assert_eq!(sc.h_field[(1, 1)], 2.0);
        assert_eq!(sc.params, ContinuumParams::default());
        let uni: InertiaSpec = serde_json::from_str(r#"{"uniform": 2.5}"#).unwrap();
        assert_eq!(uni, InertiaSpec::Uniform { uniform: 2.5 });
    }

    #[test]
    fn export_writes_metadata_and_traces() {
        let sc = scenario(1.0, ring_probes()[..3].to_vec());
        let mut sc_short = sc.clone();
        sc_short.duration_s = 0.5;
        let res = simulate(&sc_short).unwrap();
        let mut sink = MemorySink::default();
        let names = export_scenario_traces(&res, &mut sink).unwrap();
        assert_eq!(names.len(), 4);
        assert_eq!(sink.files.len(), 4);
        assert!(sink.files.contains_key("traces/E.csv"));

        for trace in &res.traces {
            let text = &sink.files[&trace_file_name(&trace.station.station_id)];
            let back = parse_trace_csv(text.as_bytes(), trace.station.clone()).unwrap();
            assert!((back.dt_s - trace.dt_s).abs() <= 1e-9 * trace.dt_s);
            assert_eq!(back.freq_hz.len(), trace.freq_hz.len());
            for (a, b) in back.freq_hz.iter().zip(&trace.freq_hz) {
                assert_eq!(format!("{a:.8e}"), format!("{b:.8e}"));
            }
        }
    }

    #[test]
    fn export_without_probes_writes_header_only() {
        let mut sc = scenario(1.0, vec![]);
        sc.duration_s = 0.1;
        let res = simulate(&sc).unwrap();
        let mut sink = MemorySink::default();
        export_scenario_traces(&res, &mut sink).unwrap();
        assert_eq!(sink.files.len(), 1);
        assert_eq!(sink.files[STATIONS_FILE].trim_end(), "station_id,lat_deg,lon_deg");
    }
    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Small fine lattice with a compact unit pulse whose temporal width
        /// spans about 40 km of travel at the local speed.
        fn small(h: f64, src: (f64, f64), probes: Vec<(f64, f64)>) -> SimScenario {
            let width_s = 40.0 / local_speed(h, &ContinuumParams::default()).unwrap();
            let file = ScenarioFile {
                grid: GridSpec::new(-86.0, -84.0, 34.0, 36.0, 41, 41).unwrap(),
                h_field: InertiaSpec::Uniform { uniform: h },
                params: ContinuumParams::default(),
                source: PulseSource {
                    lat_deg: src.1,
                    lon_deg: src.0,
                    amplitude_rad: -1.0,
                    width_s,
                    radius_deg: 0.05,
                    onset_s: 0.1,
                },
                probes: probes
                    .into_iter()
                    .enumerate()
                    .map(|(k, (lon, lat))| StationMeta::new(format!("P{k}"), lat, lon))
                    .collect(),
                duration_s: 1.8,
                sample_dt_s: 0.01,
                wavefront_threshold_mhz: 0.1,
            };
            SimScenario::from_file(&file).unwrap()
        }

        fn case() -> impl Strategy<Value = SimScenario> {
            (
                0.5f64..4.0,
                (-85.5f64..-84.5, 34.5f64..35.5),
                proptest::collection::vec((-86.0f64..-84.0, 34.0f64..36.0), 1..5),
            )
                .prop_map(|(h, src, probes)| small(h, src, probes))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn energy_bounded_after_injection(sc in case()) {
                let res = simulate(&sc).unwrap();
                let after: Vec<f64> = res.energy.iter().filter(|(t, _)| *t >= res.injection_end_s).map(|(_, e)| *e).collect();
                prop_assert!(after.len() > 10);
                let drift = after.iter().map(|e| (e / after[0] - 1.0).abs()).fold(0.0, f64::max);
                prop_assert!(drift <= 0.05, "drift {}", drift);
            }

            #[test]
            fn probes_quiet_before_causal_arrival(sc in case()) {
                let res = simulate(&sc).unwrap();
                let c = local_speed(sc.h_field[(0, 0)], &sc.params).unwrap();
                for trace in &res.traces {
                    let d = haversine_distance_km(sc.source.location(), trace.station.location());
                    let limit = sc.source.onset_s + d / c - 2.0 * sc.source.width_s;
                    for (k, f) in trace.freq_hz.iter().enumerate() {
                        if trace.time_at(k) < limit {
                            prop_assert!((f - NOMINAL_HZ).abs() <= 1e-12, "t = {}: {}", trace.time_at(k), f);
                        }
                    }
                }
            }

            #[test]
            fn identical_scenarios_identical_results(sc in case()) {
                prop_assert_eq!(simulate(&sc).unwrap(), simulate(&sc.clone()).unwrap());
            }
        }
    }
}
