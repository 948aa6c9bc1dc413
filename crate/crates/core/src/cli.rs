//! Command-line front end: `simulate`, `tdoa`, `map` and `pipeline`.
//!
//! Every run resolves a [`RunConfig`] from an optional JSON file plus flag
//! overrides (flags win) and writes it back as `resolved_config.json` next
//! to its outputs. Existing outputs are only replaced with `--overwrite`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::event::{validate_and_interpolate, EventError, ValidatedField, DEFAULT_MAX_ROUNDS};
use crate::field::{median, GridSpec, ScalarField};
use crate::geo::{haversine_distance_km, GeoPoint, KM_PER_DEGREE};
use crate::inertia::{
    field_metadata, gradient_field, inertia_from_speed, speed_field, ContinuumParams, InertiaError,
    DEFAULT_MIN_GRADIENT_S_PER_KM,
};
use crate::ingest::{
    parse_station_metadata, parse_tdoa_table, parse_trace_csv, tdoa_table_to_csv, PmuTrace, StationMeta,
};
use crate::interp::InterpError;
use crate::simulator::{
    export_scenario_traces, local_speed, simulate, ReportRegion, ScenarioFile, SimError, SimResult, SimScenario,
    STATIONS_FILE, TRACES_DIR,
};
use crate::tdoa::{compute_tdoas, rereference, DetectionConfig, Direction, StationTdoa, TdoaError};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const TDOA_FILE: &str = "tdoa.csv";
pub const EVENT_FILE: &str = "event.json";
pub const SIM_REPORT_FILE: &str = "sim_report.json";
pub const COMPARISON_FILE: &str = "comparison.json";

/// Fraction of the station extent added on each side of an `auto` grid.
pub const AUTO_GRID_PAD: f64 = 0.1;

const DEFAULT_GRID_NODES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub stage: Option<&'static str>,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Usage, stage: None, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Data, stage: None, message: message.into() }
    }

    fn in_stage(mut self, stage: &'static str) -> Self {
        self.stage.get_or_insert(stage);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(stage) => write!(f, "{stage} stage: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl From<TdoaError> for CliError {
    fn from(e: TdoaError) -> Self {
        let kind = if matches!(e, TdoaError::Config(_)) { ExitKind::Usage } else { ExitKind::Data };
        CliError { kind, stage: None, message: e.to_string() }
    }
}

impl From<EventError> for CliError {
    fn from(e: EventError) -> Self {
        let kind = match &e {
            EventError::Degenerate | EventError::Interp(InterpError::IllConditioned { .. }) => ExitKind::Numerical,
            _ => ExitKind::Data,
        };
        let message = match &e {
            EventError::TooManyOutliers { outlier_ids, .. } => format!("{e} (flagged: {})", outlier_ids.join(", ")),
            _ => e.to_string(),
        };
        CliError { kind, stage: None, message }
    }
}

impl From<InertiaError> for CliError {
    fn from(e: InertiaError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let kind = if matches!(e, SimError::Unstable { .. }) { ExitKind::Numerical } else { ExitKind::Data };
        CliError { kind, stage: None, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKeyword {
    /// Station bounding box padded by [`AUTO_GRID_PAD`] on each side.
    Auto,
    /// The simulation lattice (pipeline only).
    Scenario,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridChoice {
    Keyword(GridKeyword),
    Bounds(GridBounds),
}

impl FromStr for GridChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "auto" => return Ok(GridChoice::Keyword(GridKeyword::Auto)),
            "scenario" => return Ok(GridChoice::Keyword(GridKeyword::Scenario)),
            _ => {}
        }
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected auto, scenario or lon_min,lon_max,lat_min,lat_max, got `{s}`"))?;
        match parts[..] {
            [lon_min, lon_max, lat_min, lat_max] => {
                Ok(GridChoice::Bounds(GridBounds { lon_min, lon_max, lat_min, lat_max }))
            }
            _ => Err(format!("grid bounds need 4 numbers, got {}", parts.len())),
        }
    }
}

/// Fully resolved run parameters. Unset fields take their defaults when
/// read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub tdoa: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub detection: DetectionConfig,
    pub grid: Option<GridChoice>,
    pub grid_nx: Option<usize>,
    pub grid_ny: Option<usize>,
    pub lambda: f64,
    pub max_rounds: usize,
    pub min_gradient_s_per_km: f64,
    pub params: ContinuumParams,
    /// Score only nodes at least this many cells from the map edge, the
    /// source and region borders.
    pub interior_margin_cells: usize,
    pub corrupt_station: Option<String>,
    pub corrupt_offset_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: None,
            stations: None,
            traces: None,
            tdoa: None,
            out: None,
            format: Format::Csv,
            detection: DetectionConfig::default(),
            grid: None,
            grid_nx: None,
            grid_ny: None,
            lambda: 0.0,
            max_rounds: DEFAULT_MAX_ROUNDS,
            min_gradient_s_per_km: DEFAULT_MIN_GRADIENT_S_PER_KM,
            params: ContinuumParams::default(),
            interior_margin_cells: 5,
            corrupt_station: None,
            corrupt_offset_s: 1.0,
        }
    }
}

impl RunConfig {
    /// Reads a config file. A `resolved_config.json` written by an earlier
    /// run is accepted too; its `config` block is used.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::usage(format!("{}: {e}", path.display()));
        let text = fs::read_to_string(path).map_err(|e| bad(&e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        if value.get("command").is_some() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        serde_json::from_value(value).map_err(|e| bad(&e))
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::usage("no output directory: pass --out or set `out` in the config"))
    }

    fn validate(&self) -> Result<(), CliError> {
        self.detection.validate()?;
        self.params.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CliError::usage("lambda must be non-negative"));
        }
        if !(self.min_gradient_s_per_km >= 0.0) {
            return Err(CliError::usage("min_gradient_s_per_km must be non-negative"));
        }
        if !self.corrupt_offset_s.is_finite() {
            return Err(CliError::usage("corrupt_offset_s must be finite"));
        }
        for n in [self.grid_nx, self.grid_ny].into_iter().flatten() {
            if n < 3 {
                return Err(CliError::usage("grid_nx and grid_ny must be at least 3"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "inertia-map", version, about = "Map grid inertia from electromechanical wave arrival times")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the wave simulator and export synthetic station data.
    Simulate(SimulateArgs),
    /// Detect arrivals in station traces and write the TDOA table.
    Tdoa(TdoaArgs),
    /// Interpolate TDOAs and write TDOA, speed and inertia fields.
    Map(MapArgs),
    /// Simulate, detect and map in one run, then score against ground truth.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct DetectionArgs {
    #[arg(long)]
    pub threshold_mhz: Option<f64>,
    #[arg(long)]
    pub baseline_window_s: Option<f64>,
    #[arg(long, value_parser = Direction::from_str)]
    pub direction: Option<Direction>,
}

#[derive(Debug, Args)]
pub struct StationArgs {
    /// Station metadata CSV.
    #[arg(long)]
    pub stations: Option<PathBuf>,
    /// Directory holding `<station_id>.csv` traces (default: `traces/`
    /// next to the metadata file).
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Add an offset to this station's detected arrival.
    #[arg(long)]
    pub corrupt_station: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub corrupt_offset_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MapFlags {
    /// `auto`, `scenario` or `lon_min,lon_max,lat_min,lat_max`.
    #[arg(long, allow_hyphen_values = true, value_parser = GridChoice::from_str)]
    pub grid: Option<GridChoice>,
    #[arg(long)]
    pub grid_nx: Option<usize>,
    #[arg(long)]
    pub grid_ny: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub min_gradient_s_per_km: Option<f64>,
    #[arg(long)]
    pub omega_pu: Option<f64>,
    #[arg(long)]
    pub v_pu: Option<f64>,
    #[arg(long)]
    pub theta_rad: Option<f64>,
    #[arg(long)]
    pub z_pu: Option<f64>,
    #[arg(long)]
    pub distance_base_km: Option<f64>,
    #[arg(long)]
    pub interior_margin_cells: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct TdoaArgs {
    #[command(flatten)]
    pub input: StationArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub detection: DetectionArgs,
    #[command(flatten)]
    pub corrupt: CorruptArgs,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// TDOA table; alternatively pass --stations to detect from traces.
    #[arg(long)]
    pub tdoa: Option<PathBuf>,
    #[command(flatten)]
    pub input: StationArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub detection: DetectionArgs,
    #[command(flatten)]
    pub map: MapFlags,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub detection: DetectionArgs,
    #[command(flatten)]
    pub map: MapFlags,
    #[command(flatten)]
    pub corrupt: CorruptArgs,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.out, common.out.clone());
    set(&mut cfg.format, common.format);
    Ok(cfg)
}

fn apply_detection(cfg: &mut RunConfig, a: &DetectionArgs) {
    set(&mut cfg.detection.threshold_mhz, a.threshold_mhz);
    set(&mut cfg.detection.baseline_window_s, a.baseline_window_s);
    set(&mut cfg.detection.direction, a.direction);
}

fn apply_stations(cfg: &mut RunConfig, a: &StationArgs) {
    set_opt(&mut cfg.stations, a.stations.clone());
    set_opt(&mut cfg.traces, a.traces.clone());
}

fn apply_corrupt(cfg: &mut RunConfig, a: &CorruptArgs) {
    set_opt(&mut cfg.corrupt_station, a.corrupt_station.clone());
    set(&mut cfg.corrupt_offset_s, a.corrupt_offset_s);
}

fn apply_map(cfg: &mut RunConfig, a: &MapFlags) {
    set_opt(&mut cfg.grid, a.grid);
    set_opt(&mut cfg.grid_nx, a.grid_nx);
    set_opt(&mut cfg.grid_ny, a.grid_ny);
    set(&mut cfg.lambda, a.lambda);
    set(&mut cfg.max_rounds, a.max_rounds);
    set(&mut cfg.min_gradient_s_per_km, a.min_gradient_s_per_km);
    set(&mut cfg.params.omega_pu, a.omega_pu);
    set(&mut cfg.params.v_mag_pu, a.v_pu);
    set(&mut cfg.params.theta_rad, a.theta_rad);
    set(&mut cfg.params.z_mag_pu, a.z_pu);
    set(&mut cfg.params.distance_base_km, a.distance_base_km);
    set(&mut cfg.interior_margin_cells, a.interior_margin_cells);
}

/// Parses arguments and runs the selected command. Returns the process
/// exit code; messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(&mut cfg.scenario, a.scenario.clone());
            cmd_simulate(&cfg, a.common.overwrite)
        }
        Command::Tdoa(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_stations(&mut cfg, &a.input);
            apply_detection(&mut cfg, &a.detection);
            apply_corrupt(&mut cfg, &a.corrupt);
            cmd_tdoa(&cfg, a.common.overwrite)
        }
        Command::Map(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(&mut cfg.tdoa, a.tdoa.clone());
            apply_stations(&mut cfg, &a.input);
            apply_detection(&mut cfg, &a.detection);
            apply_map(&mut cfg, &a.map);
            cmd_map(&cfg, a.common.overwrite)
        }
        Command::Pipeline(a) => {
            let mut cfg = base_config(&a.common)?;
            set_opt(&mut cfg.scenario, a.scenario.clone());
            apply_detection(&mut cfg, &a.detection);
            apply_map(&mut cfg, &a.map);
            apply_corrupt(&mut cfg, &a.corrupt);
            cmd_pipeline(&cfg, a.common.overwrite)
        }
    }
}

/// Files to be written by one command, checked before anything is written.
struct Outputs {
    root: PathBuf,
    files: Vec<(PathBuf, String)>,
}

impl Outputs {
    fn new(root: &Path) -> Self {
        Outputs { root: root.to_path_buf(), files: Vec::new() }
    }

    fn add(&mut self, name: impl AsRef<Path>, contents: String) {
        self.files.push((self.root.join(name), contents));
    }

    fn add_json(&mut self, name: &str, value: &serde_json::Value) {
        let mut text = serde_json::to_string_pretty(value).expect("json values serialise");
        text.push('\n');
        self.add(name, text);
    }

    fn write(self, overwrite: bool) -> Result<(), CliError> {
        check_fresh(self.files.iter().map(|(p, _)| p.as_path()), overwrite)?;
        for (path, contents) in &self.files {
            write_file(path, contents)?;
        }
        Ok(())
    }
}

fn check_fresh<'a>(paths: impl IntoIterator<Item = &'a Path>, overwrite: bool) -> Result<(), CliError> {
    if overwrite {
        return Ok(());
    }
    match paths.into_iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::usage(format!("{} already exists; pass --overwrite to replace it", p.display()))),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn add_field(out: &mut Outputs, format: Format, name: &str, field: &ScalarField, metadata: serde_json::Value) {
    let file = format!("{name}.{}", format.extension());
    match format {
        Format::Csv => {
            out.add(file, field.to_csv());
            out.add_json(&format!("{name}.meta.json"), &metadata);
        }
        Format::Json => out.add_json(&file, &field.to_json_value(Some(metadata))),
    }
}

fn resolved_json(cfg: &RunConfig, command: &str, extra: Option<(&str, serde_json::Value)>) -> serde_json::Value {
    let mut v = json!({ "command": command, "config": cfg });
    if let Some((key, value)) = extra {
        v[key] = value;
    }
    v
}

fn load_scenario(cfg: &RunConfig) -> Result<(ScenarioFile, SimScenario), CliError> {
    let path = cfg.scenario.as_deref().ok_or_else(|| CliError::usage("no scenario: pass --scenario"))?;
    let text = read_file(path)?;
    let file: ScenarioFile =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let scenario = SimScenario::from_file(&file).map_err(|e| CliError::from(e).prefixed(path))?;
    Ok((file, scenario))
}

impl CliError {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

/// Largest relative departure of the energy from its value at the end of
/// injection.
pub fn energy_drift(result: &SimResult) -> Option<f64> {
    let mut after = result.energy.iter().filter(|(t, _)| *t >= result.injection_end_s).map(|(_, e)| *e);
    let e0 = after.next()?;
    if e0 <= 0.0 {
        return None;
    }
    Some(after.map(|e| (e / e0 - 1.0).abs()).fold(0.0, f64::max))
}

fn sim_report(scenario: &SimScenario, result: &SimResult) -> Result<serde_json::Value, CliError> {
    let speeds = scenario.speed_field()?;
    let c_max = speeds.iter().copied().fold(0.0, f64::max);
    let c_min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(json!({
        "cfl_dt_s": result.cfl_dt_s,
        "steps": result.steps,
        "reflection_warning": result.reflection_warning,
        "injection_end_s": result.injection_end_s,
        "energy_drift_after_injection": energy_drift(result),
        "speed_km_s": { "min": c_min, "max": c_max },
        "probe_count": result.traces.len(),
        "wavefront_masked_nodes": result.wavefront_times.masked_count(),
        "regions": scenario.regions,
    }))
}

fn simulation_outputs(
    cfg: &RunConfig,
    root: &Path,
    scenario: &SimScenario,
    result: &SimResult,
) -> Result<Outputs, CliError> {
    let mut out = Outputs::new(root);
    let mut sink = MemoryCollector::default();
    export_scenario_traces(result, &mut sink).map_err(|e| CliError::data(e.to_string()))?;
    for (name, contents) in sink.files {
        out.add(name, contents);
    }
    add_field(&mut out, cfg.format, "wavefront_times", &result.wavefront_times, json!({ "units": "s" }));
    add_field(&mut out, cfg.format, "h_true", &scenario.h_scalar_field(), json!({ "units": "relative" }));
    out.add_json(SIM_REPORT_FILE, &sim_report(scenario, result)?);
    Ok(out)
}

/// Keeps export order while collecting into [`Outputs`].
#[derive(Default)]
struct MemoryCollector {
    files: Vec<(String, String)>,
}

impl crate::simulator::TraceSink for MemoryCollector {
    fn write_file(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        self.files.push((name.to_string(), contents.to_string()));
        Ok(())
    }
}

pub fn cmd_simulate(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    let root = cfg.out_dir()?;
    let (file, scenario) = load_scenario(cfg)?;
    let result = simulate(&scenario)?;
    if result.reflection_warning {
        eprintln!("warning: run is long enough for boundary reflections to reach the probes");
    }
    let mut out = simulation_outputs(cfg, root, &scenario, &result)?;
    out.add_json(RESOLVED_CONFIG_FILE, &resolved_json(cfg, "simulate", Some(("scenario", json!(file)))));
    out.write(overwrite)
}

/// Reads a station table and the matching trace files.
pub fn load_traces(stations_path: &Path, traces_dir: Option<&Path>) -> Result<Vec<PmuTrace>, CliError> {
    let text = read_file(stations_path)?;
    let stations = parse_station_metadata(text.as_bytes())
        .map_err(|e| CliError::data(format!("{}: {e}", stations_path.display())))?;
    let dir = match traces_dir {
        Some(d) => d.to_path_buf(),
        None => stations_path.parent().unwrap_or(Path::new(".")).join(TRACES_DIR),
    };
    stations
        .into_iter()
        .map(|s| {
            let path = dir.join(format!("{}.csv", s.station_id));
            let text = read_file(&path)?;
            let id = s.station_id.clone();
            parse_trace_csv(text.as_bytes(), s)
                .map_err(|e| CliError::data(format!("{} (station {id}): {e}", path.display())))
        })
        .collect()
}

/// Adds `offset_s` to one station's arrival and re-references the table.
pub fn corrupt_tdoa(tdoas: &mut [StationTdoa], station_id: &str, offset_s: f64) -> Result<(), CliError> {
    let target = tdoas
        .iter_mut()
        .find(|t| t.station.station_id == station_id)
        .ok_or_else(|| CliError::usage(format!("corrupt_station `{station_id}` is not in the dataset")))?;
    if !target.is_ok() {
        return Err(CliError::data(format!("corrupt_station `{station_id}` has no detected arrival")));
    }
    target.crossing_time_s += offset_s;
    rereference(tdoas);
    Ok(())
}

fn detect(cfg: &RunConfig, stations_path: &Path) -> Result<Vec<StationTdoa>, CliError> {
    let traces = load_traces(stations_path, cfg.traces.as_deref())?;
    let mut tdoas = compute_tdoas(&traces, &cfg.detection)?;
    if let Some(id) = &cfg.corrupt_station {
        corrupt_tdoa(&mut tdoas, id, cfg.corrupt_offset_s)?;
    }
    Ok(tdoas)
}

pub fn cmd_tdoa(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let root = cfg.out_dir()?;
    let stations = cfg.stations.as_deref().ok_or_else(|| CliError::usage("no station metadata: pass --stations"))?;
    let tdoas = detect(cfg, stations)?;
    let mut out = Outputs::new(root);
    out.add(TDOA_FILE, tdoa_table_to_csv(&tdoas));
    out.add_json(RESOLVED_CONFIG_FILE, &resolved_json(cfg, "tdoa", None));
    out.write(overwrite)
}

/// Bounding box of the stations padded by 10% of its extent on each side.
/// A zero extent along an axis is padded by half a degree instead.
pub fn auto_grid(stations: &[StationMeta], nx: usize, ny: usize) -> Result<GridSpec, CliError> {
    if stations.is_empty() {
        return Err(CliError::data("auto grid needs at least one station"));
    }
    let (mut lon_min, mut lon_max, mut lat_min, mut lat_max) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in stations {
        lon_min = lon_min.min(s.lon_deg);
        lon_max = lon_max.max(s.lon_deg);
        lat_min = lat_min.min(s.lat_deg);
        lat_max = lat_max.max(s.lat_deg);
    }
    let pad = |lo: f64, hi: f64| if hi > lo { AUTO_GRID_PAD * (hi - lo) } else { 0.5 };
    let (px, py) = (pad(lon_min, lon_max), pad(lat_min, lat_max));
    GridSpec::new(
        (lon_min - px).max(-180.0),
        (lon_max + px).min(180.0),
        (lat_min - py).max(-90.0),
        (lat_max + py).min(90.0),
        nx,
        ny,
    )
    .map_err(|e| CliError::usage(e.to_string()))
}

fn resolve_grid(cfg: &RunConfig, tdoas: &[StationTdoa], scenario: Option<&GridSpec>) -> Result<GridSpec, CliError> {
    let default_choice = if scenario.is_some() { GridKeyword::Scenario } else { GridKeyword::Auto };
    let choice = cfg.grid.unwrap_or(GridChoice::Keyword(default_choice));
    let nx = cfg.grid_nx.or(scenario.map(|g| g.nx)).unwrap_or(DEFAULT_GRID_NODES);
    let ny = cfg.grid_ny.or(scenario.map(|g| g.ny)).unwrap_or(DEFAULT_GRID_NODES);
    match choice {
        GridChoice::Keyword(GridKeyword::Auto) => {
            let ok: Vec<StationMeta> = tdoas.iter().filter(|t| t.is_ok()).map(|t| t.station.clone()).collect();
            auto_grid(&ok, nx, ny)
        }
        GridChoice::Keyword(GridKeyword::Scenario) => {
            let g = scenario.ok_or_else(|| CliError::usage("grid `scenario` is only available in the pipeline"))?;
            GridSpec::new(g.lon_min, g.lon_max, g.lat_min, g.lat_max, nx, ny)
                .map_err(|e| CliError::usage(e.to_string()))
        }
        GridChoice::Bounds(b) => GridSpec::new(b.lon_min, b.lon_max, b.lat_min, b.lat_max, nx, ny)
            .map_err(|e| CliError::usage(e.to_string())),
    }
}

/// Everything produced by the mapping stage.
#[derive(Debug, Clone)]
pub struct MapProducts {
    pub validated: ValidatedField,
    pub speed: ScalarField,
    pub inertia: ScalarField,
}

/// validate_and_interpolate → gradient → speed → inertia.
pub fn map_tdoas(tdoas: &[StationTdoa], grid: &GridSpec, cfg: &RunConfig) -> Result<MapProducts, CliError> {
    let validated = validate_and_interpolate(tdoas, grid, cfg.lambda, cfg.max_rounds)?;
    let grad = gradient_field(&validated.field)?;
    let speed = speed_field(&grad, cfg.min_gradient_s_per_km);
    let inertia = inertia_from_speed(&speed, &cfg.params)?;
    Ok(MapProducts { validated, speed, inertia })
}

fn map_outputs(cfg: &RunConfig, root: &Path, products: &MapProducts) -> Outputs {
    let mut out = Outputs::new(root);
    let v = &products.validated;
    let ok = v.tdoas.iter().filter(|t| t.is_ok()).count();
    add_field(
        &mut out,
        cfg.format,
        "tdoa_field",
        &v.field,
        json!({ "units": "s", "lambda": cfg.lambda, "stations_used": ok }),
    );
    let mut speed_meta = field_metadata(&products.speed, "km/s", &cfg.params);
    speed_meta["min_gradient_s_per_km"] = json!(cfg.min_gradient_s_per_km);
    add_field(&mut out, cfg.format, "speed", &products.speed, speed_meta);
    add_field(
        &mut out,
        cfg.format,
        "inertia",
        &products.inertia,
        field_metadata(&products.inertia, "relative", &cfg.params),
    );
    let mut event = serde_json::to_value(&v.estimate).expect("estimate serialises");
    event["average_speed_km_s"] = json!(v.estimate.average_speed_km_s());
    out.add_json(EVENT_FILE, &event);
    out.add("tdoa_validated.csv", tdoa_table_to_csv(&v.tdoas));
    out
}

pub fn cmd_map(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let root = cfg.out_dir()?;
    let tdoas = match (&cfg.tdoa, &cfg.stations) {
        (Some(path), _) => {
            let text = read_file(path)?;
            parse_tdoa_table(text.as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        }
        (None, Some(stations)) => detect(cfg, stations)?,
        (None, None) => return Err(CliError::usage("no input: pass --tdoa or --stations")),
    };
    let grid = resolve_grid(cfg, &tdoas, None)?;
    let products = map_tdoas(&tdoas, &grid, cfg)?;

    let mut resolved = cfg.clone();
    resolve_grid_fields(&mut resolved, &grid);
    let mut out = map_outputs(&resolved, root, &products);
    out.add_json(RESOLVED_CONFIG_FILE, &resolved_json(&resolved, "map", None));
    out.write(overwrite)
}

fn resolve_grid_fields(cfg: &mut RunConfig, grid: &GridSpec) {
    cfg.grid = Some(GridChoice::Bounds(GridBounds {
        lon_min: grid.lon_min,
        lon_max: grid.lon_max,
        lat_min: grid.lat_min,
        lat_max: grid.lat_max,
    }));
    cfg.grid_nx = Some(grid.nx);
    cfg.grid_ny = Some(grid.ny);
}

/// Median recovered values inside one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub name: String,
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub h_true: f64,
    pub speed_true_km_s: f64,
    pub node_count: usize,
    pub median_h: Option<f64>,
    pub median_speed_km_s: Option<f64>,
    /// `median_h / h_true`.
    pub h_ratio: Option<f64>,
    /// `median_speed / speed_true`.
    pub speed_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPair {
    pub lower_h: String,
    pub higher_h: String,
    pub true_h_ratio: f64,
    pub recovered_h_ratio: Option<f64>,
    /// The lower-inertia region shows the strictly higher median speed.
    pub speed_order_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub interior_margin_cells: usize,
    pub domain: RegionScore,
    pub regions: Vec<RegionScore>,
    pub region_pairs: Vec<RegionPair>,
    pub expected_outliers: Vec<String>,
    pub detected_outliers: Vec<String>,
    pub expected_outliers_detected: bool,
    pub source: GeoPoint,
    pub estimated_event: GeoPoint,
    pub event_error_km: f64,
    pub average_speed_km_s: f64,
}

/// Scores recovered speed and inertia against the scenario's ground truth.
/// Only nodes inside the simulation lattice and at least `margin` map
/// cells away from the map edge and the source are used; region scores
/// additionally keep `margin` cells clear of the region's borders.
pub fn compare(
    scenario: &SimScenario,
    products: &MapProducts,
    margin: usize,
    expected_outliers: Vec<String>,
) -> Result<Comparison, CliError> {
    let grid = products.speed.grid;
    let m = margin as f64;
    let src = scenario.source.location();
    let clearance_km = m * KM_PER_DEGREE * grid.dlat();
    let interior = |i: usize, j: usize| {
        let p = grid.node(i, j);
        i >= margin
            && j >= margin
            && i + margin < grid.ny
            && j + margin < grid.nx
            && scenario.grid.contains(p)
            && haversine_distance_km(p, src) >= clearance_km
    };

    let score = |r: &ReportRegion| -> Result<RegionScore, CliError> {
        let (sx, sy) = (m * grid.dlon(), m * grid.dlat());
        let keep = |i: usize, j: usize| {
            let p = grid.node(i, j);
            interior(i, j)
                && p.lon_deg >= r.lon_min + sx
                && p.lon_deg <= r.lon_max - sx
                && p.lat_deg >= r.lat_min + sy
                && p.lat_deg <= r.lat_max - sy
        };
        let h = products.inertia.valid_where(keep);
        let v = products.speed.valid_where(keep);
        let speed_true = local_speed(r.h_true, &scenario.params)?;
        let median_h = median(&h);
        let median_speed = median(&v);
        Ok(RegionScore {
            name: r.name.clone(),
            lon_min: r.lon_min,
            lon_max: r.lon_max,
            lat_min: r.lat_min,
            lat_max: r.lat_max,
            h_true: r.h_true,
            speed_true_km_s: speed_true,
            node_count: h.len(),
            median_h,
            median_speed_km_s: median_speed,
            h_ratio: median_h.map(|x| x / r.h_true),
            speed_ratio: median_speed.map(|x| x / speed_true),
        })
    };

    let g = scenario.grid;
    let mut all_h: Vec<f64> = scenario.h_field.iter().copied().collect();
    all_h.sort_by(f64::total_cmp);
    let domain = score(&ReportRegion {
        name: "domain".into(),
        lon_min: g.lon_min,
        lon_max: g.lon_max,
        lat_min: g.lat_min,
        lat_max: g.lat_max,
        h_true: median(&all_h).unwrap_or(f64::NAN),
    })?;
    let regions = scenario.regions.iter().map(&score).collect::<Result<Vec<_>, _>>()?;

    let mut region_pairs = Vec::new();
    for a in &regions {
        for b in &regions {
            if a.h_true < b.h_true {
                region_pairs.push(RegionPair {
                    lower_h: a.name.clone(),
                    higher_h: b.name.clone(),
                    true_h_ratio: b.h_true / a.h_true,
                    recovered_h_ratio: a.median_h.zip(b.median_h).map(|(x, y)| y / x),
                    speed_order_correct: matches!(
                        (a.median_speed_km_s, b.median_speed_km_s),
                        (Some(x), Some(y)) if x > y
                    ),
                });
            }
        }
    }

    let est = &products.validated.estimate;
    let detected = est.outlier_ids.clone();
    Ok(Comparison {
        interior_margin_cells: margin,
        domain,
        regions,
        region_pairs,
        expected_outliers_detected: expected_outliers.iter().all(|id| detected.contains(id)),
        expected_outliers,
        detected_outliers: detected,
        source: src,
        estimated_event: est.location,
        event_error_km: haversine_distance_km(src, est.location),
        average_speed_km_s: est.average_speed_km_s(),
    })
}

pub fn cmd_pipeline(cfg: &RunConfig, overwrite: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let root = cfg.out_dir()?.to_path_buf();
    let (sim_dir, map_dir) = (root.join("sim"), root.join("map"));
    let top = [
        sim_dir.clone(),
        map_dir.clone(),
        root.join(TDOA_FILE),
        root.join(COMPARISON_FILE),
        root.join(RESOLVED_CONFIG_FILE),
    ];
    check_fresh(top.iter().map(|p| p.as_path()), overwrite)?;

    let (file, scenario) = load_scenario(cfg).map_err(|e| e.in_stage("simulate"))?;
    let result = simulate(&scenario).map_err(|e| CliError::from(e).in_stage("simulate"))?;
    if result.reflection_warning {
        eprintln!("warning: run is long enough for boundary reflections to reach the probes");
    }
    simulation_outputs(cfg, &sim_dir, &scenario, &result)
        .and_then(|o| o.write(true))
        .map_err(|e| e.in_stage("simulate"))?;

    let stage = |e: CliError| e.in_stage("tdoa");
    let stations_path = sim_dir.join(STATIONS_FILE);
    let traces = load_traces(&stations_path, Some(&sim_dir.join(TRACES_DIR))).map_err(stage)?;
    let mut tdoas = compute_tdoas(&traces, &cfg.detection).map_err(|e| stage(e.into()))?;
    if let Some(id) = &cfg.corrupt_station {
        corrupt_tdoa(&mut tdoas, id, cfg.corrupt_offset_s).map_err(stage)?;
    }
    let tdoa_path = root.join(TDOA_FILE);
    write_file(&tdoa_path, &tdoa_table_to_csv(&tdoas)).map_err(stage)?;

    let stage = |e: CliError| e.in_stage("map");
    let text = read_file(&tdoa_path).map_err(stage)?;
    let tdoas = parse_tdoa_table(text.as_bytes()).map_err(|e| stage(CliError::data(e.to_string())))?;
    let grid = resolve_grid(cfg, &tdoas, Some(&scenario.grid)).map_err(stage)?;
    let products = map_tdoas(&tdoas, &grid, cfg).map_err(stage)?;
    let mut resolved = cfg.clone();
    resolve_grid_fields(&mut resolved, &grid);
    resolved.stations = Some(stations_path);
    resolved.traces = Some(sim_dir.join(TRACES_DIR));
    resolved.tdoa = Some(tdoa_path);
    map_outputs(&resolved, &map_dir, &products).write(true).map_err(stage)?;

    let expected: Vec<String> = cfg.corrupt_station.iter().cloned().collect();
    let comparison =
        compare(&scenario, &products, cfg.interior_margin_cells, expected).map_err(|e| e.in_stage("compare"))?;
    let mut out = Outputs::new(&root);
    out.add_json(COMPARISON_FILE, &serde_json::to_value(&comparison).expect("comparison serialises"));
    out.add_json(RESOLVED_CONFIG_FILE, &resolved_json(&resolved, "pipeline", Some(("scenario", json!(file)))));
    out.write(true)?;

    eprintln!(
        "pipeline: {} probes, outliers [{}], domain median speed {} km/s, median h {}",
        traces.len(),
        comparison.detected_outliers.join(", "),
        fmt_opt(comparison.domain.median_speed_km_s),
        fmt_opt(comparison.domain.median_h),
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_grid_pads_ten_percent() {
        let stations = vec![StationMeta::new("A", 30.0, -90.0), StationMeta::new("B", 40.0, -80.0)];
        let g = auto_grid(&stations, 11, 11).unwrap();
        assert!((g.lon_min + 91.0).abs() < 1e-12 && (g.lon_max + 79.0).abs() < 1e-12);
        assert!((g.lat_min - 29.0).abs() < 1e-12 && (g.lat_max - 41.0).abs() < 1e-12);
    }

    #[test]
    fn grid_choice_parsing() {
        assert_eq!("auto".parse::<GridChoice>().unwrap(), GridChoice::Keyword(GridKeyword::Auto));
        assert_eq!(
            "-90,-80,30,40".parse::<GridChoice>().unwrap(),
            GridChoice::Bounds(GridBounds { lon_min: -90.0, lon_max: -80.0, lat_min: 30.0, lat_max: 40.0 })
        );
        assert!("1,2,3".parse::<GridChoice>().is_err());
        let v: GridChoice = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(v, GridChoice::Keyword(GridKeyword::Auto));
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg: RunConfig = serde_json::from_str("{\"lambda\": 0.5}").unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.max_rounds, DEFAULT_MAX_ROUNDS);
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>("{\"lamda\": 0.5}").is_err());
    }

    #[test]
    fn corruption_rereferences() {
        let mk = |id: &str, c: f64| StationTdoa {
            station: StationMeta::new(id, 35.0, -85.0),
            tdoa_s: 0.0,
            crossing_time_s: c,
            status: crate::tdoa::TdoaStatus::Ok,
        };
        let mut t = vec![mk("A", 1.0), mk("B", 1.2), mk("C", 1.5)];
        rereference(&mut t);
        corrupt_tdoa(&mut t, "A", 1.0).unwrap();
        assert_eq!(t[1].tdoa_s, 0.0);
        assert!((t[0].tdoa_s - 0.8).abs() < 1e-12);
        assert_eq!(corrupt_tdoa(&mut t, "Z", 1.0).unwrap_err().kind, ExitKind::Usage);
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(["inertia-map", "--help"]), 0);
        assert_eq!(run(["inertia-map", "map", "--grid-nx", "many"]), 1);
        assert_eq!(run(["inertia-map", "frobnicate"]), 1);
    }
}
