use std::path::Path;
use std::process::{Command, Output};

use icmppt_core::pv_model::{mpp_oracle, Environment, PvModuleParams, DEFAULT_V_TOL};

fn icmppt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icmppt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn summary_field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .parse()
        .unwrap()
}

#[test]
fn curve_emits_the_requested_rows() {
    let o = icmppt(&["curve", "--temp", "25", "--irradiance", "1000", "--points", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "v,i,p");
    assert_eq!(lines.len(), 3);
}

#[test]
fn curve_rejects_darkness() {
    let o = icmppt(&["curve", "--irradiance", "0"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("irradiance must be > 0"), "{}", stderr(&o));
}

#[test]
fn curve_open_circuit_voltage_falls_with_temperature() {
    let mut last = f64::INFINITY;
    for t in (0..=50).step_by(10) {
        let o = icmppt(&["curve", "--temp", &t.to_string(), "--points", "5"]);
        let text = stdout(&o);
        let voc: f64 = text.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
        assert!(voc < last, "t={t}: {voc} after {last}");
        last = voc;
    }
}

#[test]
fn mpp_prints_one_json_line() {
    for (t, expected) in [("50", 193.489), ("0", 241.675)] {
        let o = icmppt(&["mpp", "--temp", t, "--irradiance", "1000"]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        assert_eq!(text.lines().count(), 1);
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        let obj = doc.as_object().unwrap();
        assert_eq!(obj.len(), 3);
        for key in ["v_mp", "i_mp", "p_max"] {
            assert!(obj[key].is_f64(), "{key}");
        }
        let p = obj["p_max"].as_f64().unwrap();
        assert!((p - expected).abs() <= 0.02 * expected, "{t}: {p}");
    }
}

#[test]
fn run_reports_iteration_counts() {
    let fixed = icmppt(&["run", "--t0", "50", "--t1", "0", "--g0", "1000", "--g1", "1000", "--controller", "fixed", "--step", "0.01"]);
    assert_eq!(fixed.status.code(), Some(0));
    let n = summary_field(&stdout(&fixed), "iterations");
    assert!((540.0..=660.0).contains(&n), "{n}");

    let adaptive = icmppt(&["run", "--t0", "50", "--t1", "0", "--controller", "adaptive", "--m", "0.09"]);
    assert_eq!(adaptive.status.code(), Some(0));
    assert!(summary_field(&stdout(&adaptive), "iterations") <= 30.0);
}

#[test]
fn run_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = icmppt(&["run", "--t0", "25", "--t1", "10", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let n = summary_field(&stdout(&o), "iterations") as usize;
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next(), Some("iteration,v_volts,i_amps,p_watts,step_volts,direction"));
    assert_eq!(text.lines().count(), n + 1);
}

#[test]
fn run_rejects_a_zero_step() {
    let o = icmppt(&["run", "--t0", "50", "--t1", "0", "--controller", "fixed", "--step", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn malformed_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(
        &path,
        r#"{"env_initial": {"t_celsius": 25, "g": 1000}, "env_final": {"t_celsius": 0, "g": "bright"},
            "config": {"policy": {"kind": "fixed", "step": 0.01}}}"#,
    )
    .unwrap();
    let o = icmppt(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("env_final.g"), "{}", stderr(&o));
}

#[test]
fn scenario_file_matches_inline_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(
        &path,
        r#"{"env_initial": {"t_celsius": 50, "g": 1000}, "env_final": {"t_celsius": 0, "g": 1000},
            "config": {"policy": {"kind": "adaptive", "m": 0.09}}}"#,
    )
    .unwrap();
    let from_file = icmppt(&["run", "--scenario", path.to_str().unwrap()]);
    let inline = icmppt(&["run", "--t0", "50", "--t1", "0"]);
    assert_eq!(from_file.status.code(), Some(0));
    assert_eq!(from_file.stdout, inline.stdout);
}

#[test]
fn iteration_cap_exits_with_non_convergence() {
    let o = icmppt(&["run", "--t0", "50", "--t1", "0", "--controller", "fixed", "--max-iterations", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).starts_with("converged=false iterations=5 "));
}

fn read_tables(dir: &Path) -> Vec<Vec<u8>> {
    ["table1.csv", "table2.csv", "table3.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn tables_are_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(icmppt(&["tables", "--out", a.path().to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(
        icmppt(&["tables", "--out", b.path().to_str().unwrap(), "--sequential"]).status.code(),
        Some(0)
    );
    let first = read_tables(a.path());
    assert_eq!(first, read_tables(b.path()));
    for bytes in &first {
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let headers = rdr.headers().unwrap().clone();
        let fixed = headers.iter().position(|h| h == "fixed_iterations").unwrap();
        let adaptive = headers.iter().position(|h| h == "adaptive_iterations").unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        for r in rows {
            let f: u64 = r[fixed].parse().unwrap();
            let a: u64 = r[adaptive].parse().unwrap();
            assert!(a < f);
        }
    }
}

#[test]
fn tables_on_stdout_match_the_files() {
    let dir = tempfile::tempdir().unwrap();
    icmppt(&["tables", "--out", dir.path().to_str().unwrap()]);
    let joined = read_tables(dir.path()).join(&b"\n"[..]);
    assert_eq!(icmppt(&["tables"]).stdout, joined);
}

#[test]
fn calibrate_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let o = icmppt(&["calibrate", "--target-pmax", "217.54", "--temp", "25", "--irradiance", "1000", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fitted = PvModuleParams::from_json_file(&out).unwrap();
    fitted.validate().unwrap();
    let p = mpp_oracle(&fitted, Environment::nominal(), DEFAULT_V_TOL).unwrap().p_max;
    assert!((p - 217.54).abs() <= 1e-3 * 217.54, "{p}");

    let o = icmppt(&["mpp", "--params", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn calibrate_rejects_a_zero_target() {
    assert_eq!(icmppt(&["calibrate", "--target-pmax", "0"]).status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(icmppt(&["curve", "--bogus"]).status.code(), Some(1));
    assert_eq!(icmppt(&[]).status.code(), Some(1));
    assert_eq!(icmppt(&["run", "--t0", "50"]).status.code(), Some(1));
    let help = icmppt(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("tables"));
}

#[test]
fn missing_params_file_is_invalid_input() {
    let o = icmppt(&["mpp", "--params", "/nonexistent/params.json"]);
    assert_eq!(o.status.code(), Some(3));
}
