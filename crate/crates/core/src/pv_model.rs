//! Single-diode PV array model.
//!
//! The terminal current solves the implicit equation
//!
//! ```text
//! I = ipv - i0 * (exp((V + rs*I) / (a*vt)) - 1) - (V + rs*I) / rp
//! ```
//!
//! with `vt = ns*kB*T/q`. The residual is strictly decreasing and concave in
//! `I`, so damped Newton started at `ipv` contracts monotonically; bisection
//! backs it up when the exponential overflows.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::par::{self, Execution};

/// Boltzmann constant in J/K.
pub const K_BOLTZMANN: f64 = 1.380_649e-23;

/// Elementary charge in C.
pub const Q_ELECTRON: f64 = 1.602_176_634e-19;

/// Offset between the Celsius and Kelvin scales.
pub const CELSIUS_TO_KELVIN: f64 = 273.15;

/// Default golden-section bracket tolerance in volts.
pub const DEFAULT_V_TOL: f64 = 1e-6;

/// Largest implicit-equation residual accepted from the current solver, in amps.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Series-resistance increment of the calibration sweep, in ohms.
pub const CALIBRATION_RS_STEP: f64 = 1e-4;

const NEWTON_MAX_ITERS: usize = 50;
const SOLVER_MAX_ITERS: usize = 200;
const MAX_HALVINGS: usize = 60;
const GOLDEN_MAX_ITERS: usize = 500;
const CALIBRATION_MAX_STEPS: usize = 1_000_000;

const FIXTURE_JSON: &str = include_str!("../fixtures/kc200gt.json");

/// Nameplate and diode-model constants of a PV array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvModuleParams {
    /// Short-circuit current at nominal conditions (A).
    pub isc_n: f64,
    /// Open-circuit voltage at nominal conditions (V).
    pub voc_n: f64,
    /// MPP current at nominal conditions (A).
    pub imp_n: f64,
    /// MPP voltage at nominal conditions (V).
    pub vmp_n: f64,
    /// Current temperature coefficient (A/K).
    pub ki: f64,
    /// Voltage temperature coefficient (V/K).
    pub kv: f64,
    /// Cells in series.
    pub ns: u32,
    /// Diode ideality factor.
    pub a: f64,
    /// Series resistance (ohm).
    pub rs: f64,
    /// Parallel resistance (ohm).
    pub rp: f64,
    /// Nominal irradiance (W/m^2).
    pub g_n: f64,
    /// Nominal temperature (K).
    pub t_n: f64,
}

impl PvModuleParams {
    /// Uncalibrated seed of the bundled KC200GT fixture.
    ///
    /// Short-circuit, open-circuit and temperature data follow the datasheet.
    /// The nameplate MPP is moved to 28.1 V / 7.742 A with `a = 1.0` so the
    /// model can reach 217.54 W at 25 C; the datasheet point caps it near
    /// 214.7 W (see [`PvModuleParams::kc200gt_datasheet`]).
    pub fn seed() -> Self {
        Self {
            isc_n: 8.21,
            voc_n: 32.9,
            imp_n: 7.742,
            vmp_n: 28.1,
            ki: 3.18e-3,
            kv: -0.123,
            ns: 54,
            a: 1.0,
            rs: 0.0,
            rp: 1000.0,
            g_n: 1000.0,
            t_n: 298.15,
        }
    }

    /// Raw KC200GT datasheet values, before any resistance fit.
    pub fn kc200gt_datasheet() -> Self {
        Self {
            imp_n: 7.61,
            vmp_n: 26.3,
            a: 1.3,
            ..Self::seed()
        }
    }

    /// The bundled fixture: [`PvModuleParams::seed`] calibrated to 217.54 W
    /// at 25 C and 1000 W/m^2.
    pub fn kc200gt() -> Self {
        static FIXTURE: OnceLock<PvModuleParams> = OnceLock::new();
        *FIXTURE.get_or_init(|| {
            Self::from_json_str(FIXTURE_JSON).expect("bundled fixture is valid")
        })
    }

    /// Checks the documented parameter invariants.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("isc_n", self.isc_n),
            ("voc_n", self.voc_n),
            ("imp_n", self.imp_n),
            ("vmp_n", self.vmp_n),
            ("ki", self.ki),
            ("kv", self.kv),
            ("a", self.a),
            ("rs", self.rs),
            ("rp", self.rp),
            ("g_n", self.g_n),
            ("t_n", self.t_n),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(domain(format!("parameter {name} must be finite (got {value})")));
            }
        }
        if !(self.imp_n > 0.0 && self.imp_n < self.isc_n) {
            return Err(domain(format!(
                "parameters require 0 < imp_n < isc_n (got imp_n {}, isc_n {})",
                self.imp_n, self.isc_n
            )));
        }
        if !(self.vmp_n > 0.0 && self.vmp_n < self.voc_n) {
            return Err(domain(format!(
                "parameters require 0 < vmp_n < voc_n (got vmp_n {}, voc_n {})",
                self.vmp_n, self.voc_n
            )));
        }
        if self.ns < 1 {
            return Err(domain("parameter ns must be at least 1"));
        }
        if self.rs < 0.0 {
            return Err(domain(format!("parameter rs must be >= 0 (got {})", self.rs)));
        }
        if self.rp <= self.rs {
            return Err(domain(format!(
                "parameter rp must exceed rs (got rp {}, rs {})",
                self.rp, self.rs
            )));
        }
        if !(1.0..=2.0).contains(&self.a) {
            return Err(domain(format!("parameter a must lie in [1, 2] (got {})", self.a)));
        }
        if self.g_n <= 0.0 {
            return Err(domain(format!("parameter g_n must be > 0 (got {})", self.g_n)));
        }
        if self.t_n <= 0.0 {
            return Err(domain(format!("parameter t_n must be > 0 (got {})", self.t_n)));
        }
        Ok(())
    }

    /// Parses and validates a JSON parameter document.
    pub fn from_json_str(json: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(json);
        let params: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Load(format!("parameters: {}", e.inner()))
            } else {
                Error::Load(format!("parameters field `{path}`: {}", e.inner()))
            }
        })?;
        params
            .validate()
            .map_err(|e| Error::Load(format!("parameters: {e}")))?;
        Ok(params)
    }

    /// Reads a JSON parameter file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Pretty JSON with round-trip float formatting and a trailing newline.
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }
}

/// Cell temperature and irradiance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    /// Cell temperature (C).
    pub t_celsius: f64,
    /// Irradiance (W/m^2).
    pub g: f64,
}

impl Environment {
    pub const MIN_CELSIUS: f64 = -40.0;
    pub const MAX_CELSIUS: f64 = 90.0;

    pub const fn new(t_celsius: f64, g: f64) -> Self {
        Self { t_celsius, g }
    }

    /// 25 C, 1000 W/m^2.
    pub const fn nominal() -> Self {
        Self::new(25.0, 1000.0)
    }

    pub fn kelvin(&self) -> f64 {
        self.t_celsius + CELSIUS_TO_KELVIN
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g.is_finite() && self.g >= 0.0) {
            return Err(domain(format!("irradiance must be >= 0 W/m^2 (got {})", self.g)));
        }
        if !(Self::MIN_CELSIUS..=Self::MAX_CELSIUS).contains(&self.t_celsius) {
            return Err(domain(format!(
                "temperature must lie in [{}, {}] C (got {})",
                Self::MIN_CELSIUS,
                Self::MAX_CELSIUS,
                self.t_celsius
            )));
        }
        Ok(())
    }

    /// Like [`Environment::validate`] but also rejects zero irradiance.
    pub fn validate_lit(&self) -> Result<()> {
        self.validate()?;
        if self.g <= 0.0 {
            return Err(domain(format!(
                "irradiance must be > 0 W/m^2 for an MPP or open-circuit point (got {})",
                self.g
            )));
        }
        Ok(())
    }
}

/// A voltage/current sample on the array curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub v: f64,
    pub i: f64,
}

impl OperatingPoint {
    pub fn p(&self) -> f64 {
        self.v * self.i
    }
}

/// Maximum power point of one environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MppResult {
    pub v_mp: f64,
    pub i_mp: f64,
    pub p_max: f64,
    /// Width of the final golden-section bracket (V).
    pub bracket_width: f64,
}

/// Environment-dependent constants of the diode equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveConstants {
    /// Light-generated current (A).
    pub ipv: f64,
    /// Diode saturation current (A).
    pub i0: f64,
    /// Array thermal voltage `ns*kB*T/q` (V).
    pub vt: f64,
}

pub fn effective_constants(params: &PvModuleParams, env: Environment) -> Result<EffectiveConstants> {
    params.validate()?;
    env.validate()?;
    Ok(constants_unchecked(params, env))
}

fn constants_unchecked(params: &PvModuleParams, env: Environment) -> EffectiveConstants {
    let t = env.kelvin();
    let dt = t - params.t_n;
    let vt = f64::from(params.ns) * K_BOLTZMANN * t / Q_ELECTRON;
    let ipv_n = params.isc_n * (params.rp + params.rs) / params.rp;
    let ipv = (ipv_n + params.ki * dt) * env.g / params.g_n;
    let i0 = (params.isc_n + params.ki * dt) / ((params.voc_n + params.kv * dt) / (params.a * vt)).exp_m1();
    EffectiveConstants { ipv, i0, vt }
}

/// The implicit equation at one environment, ready to solve.
#[derive(Debug, Clone, Copy)]
struct Diode {
    ipv: f64,
    i0: f64,
    avt: f64,
    rs: f64,
    rp: f64,
    isc_n: f64,
}

impl Diode {
    fn new(params: &PvModuleParams, env: Environment) -> Self {
        let k = constants_unchecked(params, env);
        Self {
            ipv: k.ipv,
            i0: k.i0,
            avt: params.a * k.vt,
            rs: params.rs,
            rp: params.rp,
            isc_n: params.isc_n,
        }
    }

    fn residual(&self, v: f64, i: f64) -> f64 {
        let vd = v + self.rs * i;
        self.ipv - self.i0 * (vd / self.avt).exp_m1() - vd / self.rp - i
    }

    fn slope(&self, v: f64, i: f64) -> f64 {
        let vd = v + self.rs * i;
        -self.i0 * self.rs / self.avt * (vd / self.avt).exp() - self.rs / self.rp - 1.0
    }

    fn solve(&self, v: f64) -> Result<f64> {
        let mut i = self.ipv;
        let mut f = self.residual(v, i);
        let mut iters = 0;
        let mut newton_ok = false;

        while iters < NEWTON_MAX_ITERS && f.is_finite() {
            if f == 0.0 {
                newton_ok = true;
                break;
            }
            iters += 1;
            let mut step = -f / self.slope(v, i);
            if !step.is_finite() {
                break;
            }
            let mut next = i + step;
            let mut f_next = self.residual(v, next);
            let mut halvings = 0;
            while !(f_next.abs() <= f.abs()) && halvings < MAX_HALVINGS {
                step *= 0.5;
                next = i + step;
                f_next = self.residual(v, next);
                halvings += 1;
            }
            if !(f_next.abs() <= f.abs()) {
                break;
            }
            let settled = step.abs() <= 4.0 * f64::EPSILON * i.abs().max(1.0);
            i = next;
            f = f_next;
            if settled {
                newton_ok = true;
                break;
            }
        }

        if !(newton_ok && f.abs() <= RESIDUAL_TOL) {
            (i, f) = self.bisect(v, &mut iters)?;
        }
        if f.abs() > RESIDUAL_TOL {
            return Err(Error::NonConvergence {
                solver: "current solver",
                iterations: iters,
                residual: f,
            });
        }
        Ok(i)
    }

    fn bisect(&self, v: f64, iters: &mut usize) -> Result<(f64, f64)> {
        let mut hi = self.ipv + 1.0;
        let mut lo = -self.isc_n;
        while self.residual(v, lo) <= 0.0 {
            *iters += 1;
            if *iters >= SOLVER_MAX_ITERS {
                return Err(Error::NonConvergence {
                    solver: "current solver",
                    iterations: *iters,
                    residual: self.residual(v, lo),
                });
            }
            hi = lo;
            lo = 2.0 * lo - 1.0;
        }
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                let (f_lo, f_hi) = (self.residual(v, lo), self.residual(v, hi));
                return Ok(if f_lo.abs() <= f_hi.abs() { (lo, f_lo) } else { (hi, f_hi) });
            }
            *iters += 1;
            if *iters >= SOLVER_MAX_ITERS {
                return Err(Error::NonConvergence {
                    solver: "current solver",
                    iterations: *iters,
                    residual: self.residual(v, mid),
                });
            }
            let f_mid = self.residual(v, mid);
            if f_mid == 0.0 {
                return Ok((mid, f_mid));
            }
            if f_mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    /// Residual of the implicit equation at `I = 0`, as a function of voltage.
    fn open_circuit_residual(&self, v: f64) -> f64 {
        self.ipv - self.i0 * (v / self.avt).exp_m1() - v / self.rp
    }
}

/// Upper end of the voltage domain accepted by [`current_at_voltage`].
pub fn max_voltage(params: &PvModuleParams) -> f64 {
    2.0 * params.voc_n
}

/// Terminal current at voltage `v`, for `0 <= v <= 2*voc_n`.
///
/// Voltages past the open-circuit point give negative (reverse) currents.
pub fn current_at_voltage(params: &PvModuleParams, env: Environment, v: f64) -> Result<f64> {
    params.validate()?;
    env.validate()?;
    check_voltage(params, v)?;
    Diode::new(params, env).solve(v)
}

fn check_voltage(params: &PvModuleParams, v: f64) -> Result<()> {
    let v_max = max_voltage(params);
    if !(v >= 0.0 && v <= v_max) {
        return Err(domain(format!("voltage must lie in [0, {v_max}] V (got {v})")));
    }
    Ok(())
}

pub fn power_at_voltage(params: &PvModuleParams, env: Environment, v: f64) -> Result<f64> {
    Ok(v * current_at_voltage(params, env, v)?)
}

/// Open-circuit voltage by bisection on `[0, 2*voc_n]`.
pub fn open_circuit_voltage(params: &PvModuleParams, env: Environment) -> Result<f64> {
    params.validate()?;
    env.validate_lit()?;
    voc_unchecked(&Diode::new(params, env), max_voltage(params))
}

fn voc_unchecked(diode: &Diode, v_max: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, v_max);
    if diode.open_circuit_residual(hi) >= 0.0 {
        return Err(domain(format!("no open-circuit point below {v_max} V")));
    }
    for _ in 0..SOLVER_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            let (h_lo, h_hi) = (diode.open_circuit_residual(lo), diode.open_circuit_residual(hi));
            return Ok(if h_lo.abs() <= h_hi.abs() { lo } else { hi });
        }
        let h = diode.open_circuit_residual(mid);
        if h == 0.0 {
            return Ok(mid);
        }
        if h > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NonConvergence {
        solver: "open-circuit bisection",
        iterations: SOLVER_MAX_ITERS,
        residual: diode.open_circuit_residual(0.5 * (lo + hi)),
    })
}

/// `n_points` samples uniformly spaced on `[0, Voc]`.
pub fn iv_curve(params: &PvModuleParams, env: Environment, n_points: usize) -> Result<Vec<OperatingPoint>> {
    iv_curve_with(params, env, n_points, Execution::default())
}

pub fn iv_curve_with(
    params: &PvModuleParams,
    env: Environment,
    n_points: usize,
    exec: Execution,
) -> Result<Vec<OperatingPoint>> {
    if n_points < 2 {
        return Err(domain(format!("a curve needs at least 2 points (got {n_points})")));
    }
    let voc = open_circuit_voltage(params, env)?;
    let diode = Diode::new(params, env);
    let last = (n_points - 1) as f64;
    let voltages: Vec<f64> = (0..n_points)
        .map(|k| if k + 1 == n_points { voc } else { voc * k as f64 / last })
        .collect();
    par::map(exec, &voltages, |&v| diode.solve(v).map(|i| OperatingPoint { v, i }))
        .into_iter()
        .collect()
}

/// Golden-section search for the maximum of `p(v)` on `[0, Voc]`.
pub fn mpp_oracle(params: &PvModuleParams, env: Environment, v_tol: f64) -> Result<MppResult> {
    params.validate()?;
    env.validate_lit()?;
    if !(v_tol > 0.0 && v_tol.is_finite()) {
        return Err(domain(format!("v_tol must be > 0 (got {v_tol})")));
    }
    let diode = Diode::new(params, env);
    let voc = voc_unchecked(&diode, max_voltage(params))?;
    golden_section(&diode, voc, v_tol)
}

fn golden_section(diode: &Diode, voc: f64, v_tol: f64) -> Result<MppResult> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let power = |v: f64| diode.solve(v).map(|i| (i, v * i));

    let (mut a, mut b) = (0.0, voc);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut i1, mut p1) = power(x1)?;
    let (mut i2, mut p2) = power(x2)?;

    let mut iters = 0;
    while b - a > v_tol {
        iters += 1;
        if iters > GOLDEN_MAX_ITERS {
            return Err(Error::NonConvergence {
                solver: "golden-section search",
                iterations: iters,
                residual: b - a,
            });
        }
        if p1 < p2 {
            a = x1;
            (x1, i1, p1) = (x2, i2, p2);
            x2 = a + inv_phi * (b - a);
            (i2, p2) = power(x2)?;
        } else {
            b = x2;
            (x2, i2, p2) = (x1, i1, p1);
            x1 = b - inv_phi * (b - a);
            (i1, p1) = power(x1)?;
        }
    }

    let (ia, pa) = power(a)?;
    let (ib, pb) = power(b)?;
    let mut best = (x1, i1, p1);
    for cand in [(x2, i2, p2), (a, ia, pa), (b, ib, pb)] {
        if cand.2 > best.2 {
            best = cand;
        }
    }
    Ok(MppResult {
        v_mp: best.0,
        i_mp: best.1,
        p_max: best.0 * best.1,
        bracket_width: b - a,
    })
}

/// Fits `rs`/`rp` so the model's MPP at nominal conditions hits `target_pmax`.
pub fn calibrate_rs_rp(params: &PvModuleParams, target_pmax: f64) -> Result<PvModuleParams> {
    calibrate_rs_rp_with(params, target_pmax, Environment::nominal(), Execution::default())
}

/// Sweeps `rs` upward from 0 in [`CALIBRATION_RS_STEP`] increments.
///
/// Each candidate's `rp` forces the curve through the nameplate point
/// `(vmp_n, imp_n)` at nominal conditions. The candidate whose MPP power at
/// `env` is closest to `target_pmax` wins; ties go to the smaller `rs`.
pub fn calibrate_rs_rp_with(
    params: &PvModuleParams,
    target_pmax: f64,
    env: Environment,
    exec: Execution,
) -> Result<PvModuleParams> {
    if !(target_pmax > 0.0 && target_pmax.is_finite()) {
        return Err(domain(format!("target_pmax must be > 0 W (got {target_pmax})")));
    }
    env.validate_lit()?;
    let candidates = rs_rp_candidates(params)?;
    if candidates.is_empty() {
        return Err(Error::Calibration(
            "no series resistance in the sweep gives rp > rs".into(),
        ));
    }

    let scores = par::map(exec, &candidates, |cand| {
        mpp_oracle(cand, env, DEFAULT_V_TOL).map(|m| (m.p_max - target_pmax).abs())
    });
    let mut best: Option<(usize, f64)> = None;
    for (k, score) in scores.into_iter().enumerate() {
        let score = score?;
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((k, score));
        }
    }
    let (k, _) = best.expect("candidates is non-empty");
    Ok(candidates[k])
}

fn rs_rp_candidates(params: &PvModuleParams) -> Result<Vec<PvModuleParams>> {
    let mut base = *params;
    // Any valid pair works here; the sweep overwrites both.
    base.rs = 0.0;
    base.rp = 1.0;
    base.validate()?;

    let k = constants_unchecked(&base, Environment::nominal());
    let avt = base.a * k.vt;
    let mut out = Vec::new();
    for step in 0..CALIBRATION_MAX_STEPS {
        let rs = step as f64 * CALIBRATION_RS_STEP;
        let diode_current = k.i0 * ((base.vmp_n + rs * base.imp_n) / avt).exp_m1();
        let num = base.vmp_n + rs * (base.imp_n - base.isc_n);
        let den = base.isc_n - base.imp_n - diode_current;
        if num <= 0.0 || den <= 0.0 {
            break;
        }
        let rp = num / den;
        if rp > rs {
            out.push(PvModuleParams { rs, rp, ..base });
        }
    }
    Ok(out)
}
