//! Step-change scenarios.
//!
//! A scenario starts exactly at the MPP of `env_initial`, switches the array
//! to `env_final` in one step and lets a controller walk to the new MPP. Only
//! the updates after the switch are counted.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::mppt::{
    is_converged, next_reference, ControllerState, Direction, IcConfig, Measurement, StepPolicy,
};
use crate::par::{self, Execution};
use crate::pv_model::{
    current_at_voltage, mpp_oracle, open_circuit_voltage, Environment, MppResult, PvModuleParams,
    DEFAULT_V_TOL,
};

pub const DEFAULT_MAX_ITERATIONS: u64 = 20_000;

/// Step of the fixed-policy column of the built-in tables (V).
pub const TABLE_FIXED_STEP: f64 = 0.01;

/// Gain of the adaptive column of the built-in tables (V^2/W).
pub const TABLE_ADAPTIVE_M: f64 = 0.09;

/// Header of trace CSV files.
pub const TRACE_CSV_HEADER: &str = "iteration,v_volts,i_amps,p_watts,step_volts,direction";

/// One step-change experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub params: PvModuleParams,
    pub env_initial: Environment,
    pub env_final: Environment,
    pub config: IcConfig,
    pub max_iterations: u64,
    /// Golden-section tolerance of the MPP oracle (V).
    pub oracle_v_tol: f64,
}

impl ScenarioSpec {
    pub fn new(params: PvModuleParams, env_initial: Environment, env_final: Environment, config: IcConfig) -> Self {
        Self {
            params,
            env_initial,
            env_final,
            config,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            oracle_v_tol: DEFAULT_V_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.env_initial
            .validate_lit()
            .map_err(|e| domain(format!("env_initial: {e}")))?;
        self.env_final
            .validate_lit()
            .map_err(|e| domain(format!("env_final: {e}")))?;
        self.config.validate()?;
        if self.max_iterations < 1 {
            return Err(domain("max_iterations must be at least 1"));
        }
        if !(self.oracle_v_tol > 0.0 && self.oracle_v_tol.is_finite()) {
            return Err(domain(format!("oracle_v_tol must be > 0 (got {})", self.oracle_v_tol)));
        }
        Ok(())
    }

    /// Parses a scenario document.
    ///
    /// `params` defaults to the bundled fixture, `max_iterations` and
    /// `oracle_v_tol` to their usual defaults, and every `config` field other
    /// than `policy` to the preset of that policy.
    pub fn from_json_str(json: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(json);
        let doc: ScenarioDoc = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Load(format!("scenario: {}", e.inner()))
            } else {
                Error::Load(format!("scenario field `{path}`: {}", e.inner()))
            }
        })?;
        let spec = doc.into_spec();
        spec.validate().map_err(|e| Error::Load(format!("scenario: {e}")))?;
        Ok(spec)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(default)]
    params: Option<PvModuleParams>,
    env_initial: Environment,
    env_final: Environment,
    config: ConfigDoc,
    #[serde(default)]
    max_iterations: Option<u64>,
    #[serde(default)]
    oracle_v_tol: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    policy: StepPolicy,
    step_min: Option<f64>,
    step_max: Option<f64>,
    step_init: Option<f64>,
    eps_rel: Option<f64>,
    eps_hold_rel: Option<f64>,
    eps_dv: Option<f64>,
    streak_required: Option<u32>,
}

impl ScenarioDoc {
    fn into_spec(self) -> ScenarioSpec {
        let c = self.config;
        let preset = IcConfig::for_policy(c.policy);
        let config = IcConfig {
            policy: c.policy,
            step_min: c.step_min.unwrap_or(preset.step_min),
            step_max: c.step_max.unwrap_or(preset.step_max),
            step_init: c.step_init.unwrap_or(preset.step_init),
            eps_rel: c.eps_rel.unwrap_or(preset.eps_rel),
            eps_hold_rel: c.eps_hold_rel.unwrap_or(preset.eps_hold_rel),
            eps_dv: c.eps_dv.unwrap_or(preset.eps_dv),
            streak_required: c.streak_required.unwrap_or(preset.streak_required),
        };
        ScenarioSpec {
            params: self.params.unwrap_or_else(PvModuleParams::kc200gt),
            env_initial: self.env_initial,
            env_final: self.env_final,
            config,
            max_iterations: self.max_iterations.unwrap_or(DEFAULT_MAX_ITERATIONS),
            oracle_v_tol: self.oracle_v_tol.unwrap_or(DEFAULT_V_TOL),
        }
    }
}

/// One controller update as seen from outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// 1-based update index.
    pub iteration: u64,
    /// Measured voltage (V).
    pub v: f64,
    /// Measured current (A).
    pub i: f64,
    /// Step magnitude computed by the policy (V).
    pub step: f64,
    pub direction: Direction,
}

impl TraceRecord {
    pub fn p(&self) -> f64 {
        self.v * self.i
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    /// Updates until convergence, or `max_iterations` when it never converged.
    pub iterations_to_converge: u64,
    pub converged: bool,
    /// Power of the last measured sample (W).
    pub p_final: f64,
    /// Oracle MPP power of the final environment (W).
    pub p_oracle: f64,
    pub error_pct: f64,
    pub trace: Vec<TraceRecord>,
    pub mpp_initial: MppResult,
    pub mpp_final: MppResult,
}

/// Upper voltage bound of phase 2.
///
/// The open-circuit voltage of the final environment, or the starting MPP
/// voltage if that is higher (a temperature rise can push the old MPP past
/// the new open-circuit point).
pub fn voltage_ceiling(spec: &ScenarioSpec, mpp_initial: &MppResult) -> Result<f64> {
    Ok(open_circuit_voltage(&spec.params, spec.env_final)?.max(mpp_initial.v_mp))
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioResult> {
    spec.validate()?;
    let mpp_initial = mpp_oracle(&spec.params, spec.env_initial, spec.oracle_v_tol)?;
    let mpp_final = mpp_oracle(&spec.params, spec.env_final, spec.oracle_v_tol)?;
    let v_hi = voltage_ceiling(spec, &mpp_initial)?;

    let mut state = ControllerState::new(Measurement::new(mpp_initial.v_mp, mpp_initial.i_mp));
    let mut v_ref = mpp_initial.v_mp;
    let mut trace = Vec::new();
    let mut converged = false;

    while state.iterations < spec.max_iterations {
        let i = current_at_voltage(&spec.params, spec.env_final, v_ref)?;
        let up = next_reference(&state, Measurement::new(v_ref, i), &spec.config)?;
        trace.push(TraceRecord {
            iteration: up.state.iterations,
            v: v_ref,
            i,
            step: up.step,
            direction: up.direction,
        });
        state = up.state;
        v_ref = up.v_ref.clamp(0.0, v_hi);
        if is_converged(&state, &spec.config) {
            converged = true;
            break;
        }
    }

    let p_final = trace.last().map_or(0.0, TraceRecord::p);
    let p_oracle = mpp_final.p_max;
    Ok(ScenarioResult {
        iterations_to_converge: if converged { state.iterations } else { spec.max_iterations },
        converged,
        p_final,
        p_oracle,
        error_pct: accuracy_pct(p_final, p_oracle)?,
        trace,
        mpp_initial,
        mpp_final,
    })
}

/// Runs independent scenarios, results in input order.
pub fn run_batch_with(specs: &[ScenarioSpec], exec: Execution) -> Vec<Result<ScenarioResult>> {
    par::map(exec, specs, run_scenario)
}

/// Relative power shortfall in percent.
pub fn accuracy_pct(p_final: f64, p_oracle: f64) -> Result<f64> {
    if !(p_oracle > 0.0) {
        return Err(domain(format!("oracle power must be > 0 W (got {p_oracle})")));
    }
    Ok((p_oracle - p_final).abs() / p_oracle * 100.0)
}

/// One row of the built-in tables, with its fixed and adaptive scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    /// Table number, 1 to 3.
    pub table: u8,
    pub label: String,
    pub fixed: ScenarioSpec,
    pub adaptive: ScenarioSpec,
}

/// (temperature C, irradiance W/m^2).
type EnvPair = (f64, f64);

/// (table, initial env, final env) of every built-in row.
const TABLE_ROWS: [(u8, EnvPair, EnvPair); 12] = [
    (1, (25.0, 1000.0), (0.0, 1000.0)),
    (1, (50.0, 1000.0), (15.0, 1000.0)),
    (1, (12.0, 1000.0), (30.0, 1000.0)),
    (1, (5.0, 1000.0), (60.0, 1000.0)),
    (2, (0.0, 600.0), (0.0, 900.0)),
    (2, (0.0, 1050.0), (0.0, 170.0)),
    (2, (0.0, 330.0), (0.0, 970.0)),
    (2, (0.0, 725.0), (0.0, 575.0)),
    (3, (45.0, 200.0), (0.0, 900.0)),
    (3, (-5.0, 525.0), (20.0, 725.0)),
    (3, (-12.0, 1000.0), (7.0, 250.0)),
    (3, (0.0, 980.0), (50.0, 50.0)),
];

/// The twelve table rows: temperature steps, irradiance steps, then both.
pub fn builtin_table_scenarios(params: &PvModuleParams) -> Vec<TableRow> {
    let mut index = [0u8; 3];
    TABLE_ROWS
        .iter()
        .map(|&(table, (t0, g0), (t1, g1))| {
            index[usize::from(table - 1)] += 1;
            let (from, to) = (Environment::new(t0, g0), Environment::new(t1, g1));
            TableRow {
                table,
                label: format!("{table}.{}", index[usize::from(table - 1)]),
                fixed: ScenarioSpec::new(*params, from, to, IcConfig::fixed(TABLE_FIXED_STEP)),
                adaptive: ScenarioSpec::new(*params, from, to, IcConfig::adaptive(TABLE_ADAPTIVE_M)),
            }
        })
        .collect()
}

/// A finished scenario tagged with the row it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledResult {
    pub table: u8,
    pub label: String,
    pub spec: ScenarioSpec,
    pub result: ScenarioResult,
}

/// Fixed-versus-adaptive comparison of one row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub table: u8,
    pub label: String,
    pub t_initial_c: f64,
    pub g_initial: f64,
    pub t_final_c: f64,
    pub g_final: f64,
    pub v_mp_initial: f64,
    pub p_max_initial: f64,
    pub v_mp_final: f64,
    pub p_max_final: f64,
    pub fixed_error_pct: f64,
    pub adaptive_error_pct: f64,
    pub fixed_iterations: u64,
    pub adaptive_iterations: u64,
    pub fixed_converged: bool,
    pub adaptive_converged: bool,
    /// Adaptive over fixed iterations.
    pub iteration_ratio: f64,
}

/// Pairs fixed and adaptive results by label, in order of first appearance.
pub fn compare_report(results: &[LabeledResult]) -> Result<Vec<ComparisonRow>> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.label.as_str()) {
            order.push(&r.label);
        }
    }
    order
        .into_iter()
        .map(|label| {
            let group: Vec<&LabeledResult> = results.iter().filter(|r| r.label == label).collect();
            let pick = |adaptive: bool| -> Result<&LabeledResult> {
                let mut it = group.iter().filter(|r| r.spec.config.is_adaptive() == adaptive);
                match (it.next(), it.next()) {
                    (Some(r), None) => Ok(r),
                    _ => Err(domain(format!(
                        "row {label} needs exactly one fixed and one adaptive result"
                    ))),
                }
            };
            if group.len() != 2 {
                return Err(domain(format!(
                    "row {label} has {} results, expected a fixed/adaptive pair",
                    group.len()
                )));
            }
            let (fixed, adaptive) = (pick(false)?, pick(true)?);
            if fixed.spec.env_initial != adaptive.spec.env_initial
                || fixed.spec.env_final != adaptive.spec.env_final
            {
                return Err(domain(format!("row {label} pairs different environments")));
            }
            let (f, a) = (&fixed.result, &adaptive.result);
            Ok(ComparisonRow {
                table: fixed.table,
                label: label.to_string(),
                t_initial_c: fixed.spec.env_initial.t_celsius,
                g_initial: fixed.spec.env_initial.g,
                t_final_c: fixed.spec.env_final.t_celsius,
                g_final: fixed.spec.env_final.g,
                v_mp_initial: f.mpp_initial.v_mp,
                p_max_initial: f.mpp_initial.p_max,
                v_mp_final: f.mpp_final.v_mp,
                p_max_final: f.mpp_final.p_max,
                fixed_error_pct: f.error_pct,
                adaptive_error_pct: a.error_pct,
                fixed_iterations: f.iterations_to_converge,
                adaptive_iterations: a.iterations_to_converge,
                fixed_converged: f.converged,
                adaptive_converged: a.converged,
                iteration_ratio: a.iterations_to_converge as f64 / f.iterations_to_converge as f64,
            })
        })
        .collect()
}

/// Runs all 24 built-in scenarios and pairs them up.
pub fn run_tables(params: &PvModuleParams, exec: Execution) -> Result<Vec<ComparisonRow>> {
    let rows = builtin_table_scenarios(params);
    let specs: Vec<(u8, &str, ScenarioSpec)> = rows
        .iter()
        .flat_map(|r| [(r.table, r.label.as_str(), r.fixed), (r.table, r.label.as_str(), r.adaptive)])
        .collect();
    let results = par::map(exec, &specs, |(_, _, spec)| run_scenario(spec));
    let labeled = specs
        .iter()
        .zip(results)
        .map(|(&(table, label, spec), result)| {
            Ok(LabeledResult {
                table,
                label: label.to_string(),
                spec,
                result: result?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    compare_report(&labeled)
}

#[derive(Serialize)]
struct TraceRow {
    iteration: u64,
    v_volts: f64,
    i_amps: f64,
    p_watts: f64,
    step_volts: f64,
    direction: &'static str,
}

fn csv_error(e: csv::Error) -> Error {
    Error::Load(format!("csv output: {e}"))
}

pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    if trace.is_empty() {
        w.write_record(TRACE_CSV_HEADER.split(',')).map_err(csv_error)?;
    }
    for r in trace {
        w.serialize(TraceRow {
            iteration: r.iteration,
            v_volts: r.v,
            i_amps: r.i,
            p_watts: r.p(),
            step_volts: r.step,
            direction: r.direction.as_str(),
        })
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Load(format!("csv output: {e}")))
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Load(format!("csv output: {e}")))
}

/// Writes `table1.csv`, `table2.csv` and `table3.csv` into `dir`.
pub fn write_tables(dir: impl AsRef<Path>, rows: &[ComparisonRow]) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::Load(format!("{}: {e}", dir.display())))?;
    (1..=3u8)
        .map(|table| {
            let path = dir.join(format!("table{table}.csv"));
            let subset: Vec<ComparisonRow> = rows.iter().filter(|r| r.table == table).cloned().collect();
            let mut buf = Vec::new();
            write_comparison_csv(&mut buf, &subset)?;
            std::fs::write(&path, buf).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}
