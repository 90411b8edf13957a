//! `icmppt` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 non-convergence, 3 invalid input.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use icmppt_core::harness::{
    run_scenario, run_tables, write_comparison_csv, write_tables, write_trace_csv, ScenarioSpec,
    DEFAULT_MAX_ITERATIONS, TABLE_ADAPTIVE_M, TABLE_FIXED_STEP,
};
use icmppt_core::mppt::IcConfig;
use icmppt_core::pv_model::{
    calibrate_rs_rp_with, iv_curve, mpp_oracle, Environment, PvModuleParams, DEFAULT_V_TOL,
};
use icmppt_core::{Error, Execution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "icmppt", version, about = "Single-diode PV model and incremental-conductance MPPT laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the I-V curve on [0, Voc] as CSV (v,i,p).
    Curve(CurveArgs),
    /// Print the oracle MPP as one line of JSON.
    Mpp(MppArgs),
    /// Run one step-change scenario.
    Run(RunArgs),
    /// Reproduce the three fixed-versus-adaptive comparison tables.
    Tables(TablesArgs),
    /// Fit rs/rp so the model's MPP hits a target power.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    /// Cell temperature (C).
    #[arg(long, default_value_t = 25.0, allow_negative_numbers = true)]
    pub temp: f64,
    /// Irradiance (W/m^2).
    #[arg(long, default_value_t = 1000.0)]
    pub irradiance: f64,
}

impl EnvArgs {
    fn env(&self) -> Environment {
        Environment::new(self.temp, self.irradiance)
    }
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Parameter JSON (defaults to the bundled KC200GT fixture).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output file (defaults to standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MppArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerKind {
    Fixed,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario JSON; replaces the inline environment and controller flags.
    #[arg(long, conflicts_with_all = ["t0", "t1", "g0", "g1", "controller", "step", "m", "max_iterations", "params"])]
    pub scenario: Option<PathBuf>,
    /// Initial temperature (C).
    #[arg(long, required_unless_present = "scenario", allow_negative_numbers = true)]
    pub t0: Option<f64>,
    /// Final temperature (C).
    #[arg(long, required_unless_present = "scenario", allow_negative_numbers = true)]
    pub t1: Option<f64>,
    /// Initial irradiance (W/m^2).
    #[arg(long, default_value_t = 1000.0)]
    pub g0: f64,
    /// Final irradiance (W/m^2).
    #[arg(long, default_value_t = 1000.0)]
    pub g1: f64,
    #[arg(long, value_enum, default_value_t = ControllerKind::Adaptive)]
    pub controller: ControllerKind,
    /// Fixed step (V).
    #[arg(long, default_value_t = TABLE_FIXED_STEP, allow_negative_numbers = true)]
    pub step: f64,
    /// Adaptive gain (V^2/W).
    #[arg(long, default_value_t = TABLE_ADAPTIVE_M, allow_negative_numbers = true)]
    pub m: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: u64,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Write the phase-2 trace as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    /// Directory for table1.csv, table2.csv and table3.csv (defaults to standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Run the scenarios on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Target MPP power (W).
    #[arg(long, allow_negative_numbers = true)]
    pub target_pmax: f64,
    #[command(flatten)]
    pub env: EnvArgs,
    /// Starting parameters (defaults to the uncalibrated fixture seed).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output file (defaults to standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence { .. } => EXIT_NOT_CONVERGED,
            _ => EXIT_INVALID,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: format!("{}: {e}", path.display()),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Curve(a) => cmd_curve(&a, stdout),
        Command::Mpp(a) => cmd_mpp(&a, stdout),
        Command::Run(a) => cmd_run(&a, stdout),
        Command::Tables(a) => cmd_tables(&a, stdout),
        Command::Calibrate(a) => cmd_calibrate(&a, stdout),
    }
}

fn load_params(path: Option<&Path>, fallback: fn() -> PvModuleParams) -> Result<PvModuleParams, Failure> {
    Ok(match path {
        Some(p) => PvModuleParams::from_json_file(p)?,
        None => fallback(),
    })
}

fn emit(bytes: &[u8], out: Option<&Path>, stdout: &mut dyn Write) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| io_failure(path, e)),
        None => stdout
            .write_all(bytes)
            .map_err(|e| io_failure(Path::new("<stdout>"), e)),
    }
}

#[derive(Serialize)]
struct CurveRow {
    v: f64,
    i: f64,
    p: f64,
}

pub fn cmd_curve(a: &CurveArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let params = load_params(a.params.as_deref(), PvModuleParams::kc200gt)?;
    let curve = iv_curve(&params, a.env.env(), a.points)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for pt in &curve {
        w.serialize(CurveRow { v: pt.v, i: pt.i, p: pt.p() })
            .map_err(|e| Failure { code: EXIT_INVALID, message: e.to_string() })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Failure { code: EXIT_INVALID, message: e.to_string() })?;
    emit(&bytes, a.out.as_deref(), stdout)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct MppLine {
    v_mp: f64,
    i_mp: f64,
    p_max: f64,
}

pub fn cmd_mpp(a: &MppArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let params = load_params(a.params.as_deref(), PvModuleParams::kc200gt)?;
    let m = mpp_oracle(&params, a.env.env(), DEFAULT_V_TOL)?;
    let mut line = serde_json::to_string(&MppLine { v_mp: m.v_mp, i_mp: m.i_mp, p_max: m.p_max })
        .expect("plain struct serializes");
    line.push('\n');
    emit(line.as_bytes(), None, stdout)?;
    Ok(EXIT_OK)
}

fn run_spec(a: &RunArgs) -> Result<ScenarioSpec, Failure> {
    if let Some(path) = &a.scenario {
        return Ok(ScenarioSpec::from_json_file(path)?);
    }
    let params = load_params(a.params.as_deref(), PvModuleParams::kc200gt)?;
    let config = match a.controller {
        ControllerKind::Fixed => IcConfig::fixed(a.step),
        ControllerKind::Adaptive => IcConfig::adaptive(a.m),
    };
    let (t0, t1) = (a.t0.expect("required by clap"), a.t1.expect("required by clap"));
    let mut spec = ScenarioSpec::new(params, Environment::new(t0, a.g0), Environment::new(t1, a.g1), config);
    spec.max_iterations = a.max_iterations;
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_run(a: &RunArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let spec = run_spec(a)?;
    let result = run_scenario(&spec)?;
    if let Some(path) = &a.trace {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &result.trace)?;
        std::fs::write(path, buf).map_err(|e| io_failure(path, e))?;
    }
    let v_final = result.trace.last().map_or(f64::NAN, |r| r.v);
    let line = format!(
        "converged={} iterations={} v_final={} p_final={} v_oracle={} p_oracle={} error_pct={}\n",
        result.converged,
        result.iterations_to_converge,
        v_final,
        result.p_final,
        result.mpp_final.v_mp,
        result.p_oracle,
        result.error_pct,
    );
    emit(line.as_bytes(), None, stdout)?;
    Ok(if result.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_tables(a: &TablesArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let params = load_params(a.params.as_deref(), PvModuleParams::kc200gt)?;
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let rows = run_tables(&params, exec)?;
    match &a.out {
        Some(dir) => {
            write_tables(dir, &rows)?;
        }
        None => {
            let mut buf = Vec::new();
            for table in 1..=3u8 {
                if table > 1 {
                    buf.push(b'\n');
                }
                let subset: Vec<_> = rows.iter().filter(|r| r.table == table).cloned().collect();
                write_comparison_csv(&mut buf, &subset)?;
            }
            emit(&buf, None, stdout)?;
        }
    }
    let unconverged = rows.iter().any(|r| !(r.fixed_converged && r.adaptive_converged));
    Ok(if unconverged { EXIT_NOT_CONVERGED } else { EXIT_OK })
}

pub fn cmd_calibrate(a: &CalibrateArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let params = load_params(a.params.as_deref(), PvModuleParams::seed)?;
    let fitted = calibrate_rs_rp_with(&params, a.target_pmax, a.env.env(), Execution::Parallel)?;
    emit(fitted.to_json_pretty().as_bytes(), a.out.as_deref(), stdout)?;
    Ok(EXIT_OK)
}
