use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inertia_map::ingest::{parse_tdoa_table, stations_to_csv, trace_to_csv, PmuTrace, StationMeta};
use inertia_map::tdoa::TdoaStatus;
use inertia_map::ScalarField;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inertia-map"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name).display().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes stations plus ramp traces that start falling at the given onsets.
fn ramp_dataset(dir: &Path, onsets: &[f64], constant: bool) -> PathBuf {
    let stations: Vec<StationMeta> = onsets
        .iter()
        .enumerate()
        .map(|(k, _)| StationMeta::new(format!("S{k}"), 34.0 + k as f64, -86.0 + 0.5 * k as f64))
        .collect();
    fs::create_dir_all(dir.join("traces")).unwrap();
    for (s, onset) in stations.iter().zip(onsets) {
        let freq_hz = (0..800)
            .map(|k| {
                let t = k as f64 * 0.01;
                if constant || t <= *onset {
                    60.0
                } else {
                    60.0 - 0.1 * (t - onset)
                }
            })
            .collect();
        let trace = PmuTrace { station: s.clone(), t0_s: 0.0, dt_s: 0.01, freq_hz };
        fs::write(dir.join(format!("traces/{}.csv", s.station_id)), trace_to_csv(&trace)).unwrap();
    }
    let path = dir.join("stations.csv");
    fs::write(&path, stations_to_csv(&stations)).unwrap();
    path
}

#[test]
fn tdoa_from_staggered_ramps() {
    let tmp = TempDir::new().unwrap();
    let stations = ramp_dataset(&tmp.path().join("data"), &[3.0, 3.2, 3.5, 4.0], false);
    let out = tmp.path().join("out");
    let o = run(&["tdoa", "--stations", p(&stations), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_tdoa_table(fs::read(out.join("tdoa.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(rows.len(), 4);
    let min = rows.iter().map(|r| r.tdoa_s).fold(f64::INFINITY, f64::min);
    assert_eq!(min, 0.0);
    for (r, expect) in rows.iter().zip([0.0, 0.2, 0.5, 1.0]) {
        assert!((r.tdoa_s - expect).abs() < 1e-6, "{}: {}", r.station.station_id, r.tdoa_s);
    }
    assert!(out.join("resolved_config.json").exists());
}

#[test]
fn missing_trace_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let stations = ramp_dataset(&data, &[3.0, 3.2, 3.5, 4.0], false);
    fs::remove_file(data.join("traces/S2.csv")).unwrap();
    let o = run(&["tdoa", "--stations", p(&stations), "--out", p(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("S2.csv"), "{}", stderr(&o));
}

#[test]
fn flat_traces_are_insufficient() {
    let tmp = TempDir::new().unwrap();
    let stations = ramp_dataset(&tmp.path().join("data"), &[3.0, 3.2, 3.5, 4.0], true);
    let o = run(&["tdoa", "--stations", p(&stations), "--out", p(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("insufficient detected crossings"), "{}", stderr(&o));
}

#[test]
fn staged_run_recovers_uniform_inertia() {
    let tmp = TempDir::new().unwrap();
    let (sim, tdoa, map) = (tmp.path().join("sim"), tmp.path().join("tdoa"), tmp.path().join("map"));
    let o = run(&["simulate", "--scenario", &scenario("uniform.json"), "--out", p(&sim)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["tdoa", "--stations", p(&sim.join("stations.csv")), "--out", p(&tdoa)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["map", "--tdoa", p(&tdoa.join("tdoa.csv")), "--grid", "-90,-80,30,40", "--out", p(&map)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let h = ScalarField::from_csv(&fs::read_to_string(map.join("inertia.csv")).unwrap()).unwrap();
    let g = h.grid;
    let mut values = h.valid_where(|i, j| i >= 10 && j >= 10 && i + 10 < g.ny && j + 10 < g.nx);
    values.sort_by(f64::total_cmp);
    let median = values[values.len() / 2];
    assert!((median - 1.0).abs() <= 0.2, "median h {median}");
    let meta = read_json(&map.join("inertia.meta.json"));
    assert_eq!(meta["units"], "relative");
    assert!(map.join("event.json").exists() && map.join("speed.csv").exists());
}

#[test]
fn edited_tdoa_is_listed_as_outlier() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    assert!(run(&["simulate", "--scenario", &scenario("uniform_20.json"), "--out", p(&sim)]).status.success());
    let tdoa_dir = tmp.path().join("tdoa");
    assert!(run(&["tdoa", "--stations", p(&sim.join("stations.csv")), "--out", p(&tdoa_dir)]).status.success());

    let text = fs::read_to_string(tdoa_dir.join("tdoa.csv")).unwrap();
    let mut rows = parse_tdoa_table(text.as_bytes()).unwrap();
    let victim = rows.iter().position(|r| r.station.station_id == "P17").unwrap();
    rows[victim].crossing_time_s += 1.0;
    rows[victim].tdoa_s += 1.0;
    let edited = tmp.path().join("edited.csv");
    fs::write(&edited, inertia_map::ingest::tdoa_table_to_csv(&rows)).unwrap();

    let map = tmp.path().join("map");
    let o = run(&["map", "--tdoa", p(&edited), "--grid", "-90,-80,30,40", "--out", p(&map)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let event = read_json(&map.join("event.json"));
    let ids: Vec<&str> = event["outlier_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(ids.contains(&"P17"), "{ids:?}");
    let validated = parse_tdoa_table(fs::read(map.join("tdoa_validated.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(validated.iter().find(|r| r.station.station_id == "P17").unwrap().status, TdoaStatus::Outlier);
}

#[test]
fn auto_grid_pads_station_extent() {
    let tmp = TempDir::new().unwrap();
    let rows = "station_id,lat_deg,lon_deg,crossing_time_s,tdoa_s,status\n\
                A,30,-90,10.0,0.0,ok\n\
                B,40,-80,10.9,0.9,ok\n\
                C,30,-80,10.5,0.5,ok\n\
                D,40,-90,10.6,0.6,ok\n\
                E,35,-85,10.3,0.3,ok\n";
    let tdoa = tmp.path().join("tdoa.csv");
    fs::write(&tdoa, rows).unwrap();
    let out = tmp.path().join("map");
    let o = run(&[
        "map",
        "--tdoa",
        p(&tdoa),
        "--grid",
        "auto",
        "--grid-nx",
        "25",
        "--grid-ny",
        "25",
        "--max-rounds",
        "0",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = &read_json(&out.join("resolved_config.json"))["config"]["grid"];
    for (key, expect) in [("lon_min", -91.0), ("lon_max", -79.0), ("lat_min", 29.0), ("lat_max", 41.0)] {
        assert!((grid[key].as_f64().unwrap() - expect).abs() < 1e-9, "{key}: {}", grid[key]);
    }
}

#[test]
fn simulate_writes_dataset() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    let o = run(&["simulate", "--scenario", &scenario("uniform.json"), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("traces")).unwrap().count(), 30);
    for f in ["stations.csv", "wavefront_times.csv", "h_true.csv", "sim_report.json", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = read_json(&out.join("sim_report.json"));
    assert!(report["energy_drift_after_injection"].as_f64().unwrap() <= 0.05);
    assert_eq!(report["reflection_warning"], false);
}

fn edited_scenario(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(scenario("uniform.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join("edited.json");
    fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn invalid_scenarios_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let zero = edited_scenario(tmp.path(), |v| v["h_field"] = serde_json::json!({ "uniform": 0.0 }));
    let o = run(&["simulate", "--scenario", p(&zero), "--out", p(&tmp.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("h must be positive"), "{}", stderr(&o));

    let outside = edited_scenario(tmp.path(), |v| v["source"]["lat_deg"] = 45.0.into());
    let o = run(&["simulate", "--scenario", p(&outside), "--out", p(&tmp.path().join("b"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("source"), "{}", stderr(&o));
    assert!(!tmp.path().join("b").exists());
}

#[test]
fn unstable_run_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let hot = edited_scenario(tmp.path(), |v| v["source"]["amplitude_rad"] = 1e9.into());
    let o = run(&["simulate", "--scenario", p(&hot), "--out", p(&tmp.path().join("sim"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn two_region_report_has_both_medians() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["pipeline", "--scenario", &scenario("two_region.json"), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = read_json(&out.join("comparison.json"));
    let regions = c["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 2);
    for r in regions {
        assert!(r["median_h"].as_f64().unwrap() > 0.0, "{r}");
    }
    assert_eq!(c["region_pairs"][0]["speed_order_correct"], true);
}

#[test]
fn pipeline_reports_injected_outlier() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o =
        run(&["pipeline", "--scenario", &scenario("uniform_20.json"), "--corrupt-station", "P17", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = read_json(&out.join("comparison.json"));
    assert_eq!(c["expected_outliers"][0], "P17");
    assert_eq!(c["expected_outliers_detected"], true);
}

#[test]
fn unknown_corrupt_station_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(&[
        "pipeline",
        "--scenario",
        &scenario("uniform_20.json"),
        "--corrupt-station",
        "nope",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tdoa stage"), "{}", stderr(&o));
}

#[test]
fn outputs_are_not_overwritten_silently() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    let args = ["simulate", "--scenario", &scenario("uniform_20.json"), "--out", p(&out)];
    assert!(run(&args).status.success());
    let before = fs::read(out.join("stations.csv")).unwrap();
    let o = run(&args);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("--overwrite"), "{}", stderr(&o));
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert!(run(&again).status.success());
    assert_eq!(fs::read(out.join("stations.csv")).unwrap(), before);
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

/// Drops the absolute paths that differ between two output roots.
fn strip_roots(files: Vec<(PathBuf, Vec<u8>)>, root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let needle = root.display().to_string();
    files
        .into_iter()
        .map(|(name, bytes)| {
            let text = String::from_utf8(bytes).unwrap().replace(&needle, "<root>");
            (name, text.into_bytes())
        })
        .collect()
}

#[test]
fn pipeline_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["pipeline", "--scenario", &scenario("uniform_20.json"), "--format", "json", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (strip_roots(tree(&a), &a), strip_roots(tree(&b), &b));
    assert!(ta.len() > 20);
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{} differs", na.display());
    }
    assert!(a.join("map/inertia.json").exists());
}

#[test]
fn resolved_config_reproduces_run() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let o = run(&["pipeline", "--scenario", &scenario("uniform_20.json"), "--lambda", "0.001", "--out", p(&first)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = read_json(&first.join("resolved_config.json"));
    assert_eq!(resolved["command"], "pipeline");
    assert_eq!(resolved["config"]["lambda"], 0.001);
    assert_eq!(resolved["config"]["max_rounds"], 3);

    let second = tmp.path().join("second");
    let o = run(&["pipeline", "--config", p(&first.join("resolved_config.json")), "--out", p(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["map/inertia.csv", "map/event.json", "tdoa.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["map", "--grid-nx", "many"]).status.code(), Some(1));
    let o = run(&["tdoa", "--out", "/nonexistent-dir-for-test"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--stations"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
