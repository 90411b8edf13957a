//! Incremental-conductance MPPT controller.
//!
//! At the MPP `dP/dV = I + V*dI/dV = 0`, i.e. `dI/dV = -I/V`. Left of it the
//! incremental conductance exceeds `-I/V` and the voltage must rise; right of
//! it the voltage must fall.
//!
//! Two step policies share that rule:
//!
//! - [`StepPolicy::Fixed`] moves by a constant `step`.
//! - [`StepPolicy::Adaptive`] moves by `m * |dP/dV|`, clamped to
//!   `[step_min, step_max]`. `dP/dV` at the present voltage comes from the
//!   last three secants: each is a slope sample at its midpoint, and the
//!   quadratic through them is evaluated at `V`. With fewer secants the
//!   model drops to a line or to the plain secant. The same estimate,
//!   `dI/dV = (dP/dV - I)/V`, feeds the conductance test.
//!
//! On a parabola the estimate is exact, so near the MPP the distance shrinks
//! by `1 - 2*m*c` per update and the steps decay geometrically.
//!
//! The controller is a plain value; every update returns a new state.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub const DEFAULT_STEP_MIN: f64 = 1e-6;
pub const DEFAULT_STEP_MAX: f64 = 2.0;
pub const DEFAULT_STEP_INIT: f64 = 0.01;
pub const DEFAULT_EPS_DV: f64 = 1e-12;
pub const DEFAULT_EPS_HOLD_REL: f64 = 1e-6;
pub const DEFAULT_STREAK_REQUIRED: u32 = 2;

/// Conductance-match tolerance of the fixed policy.
pub const FIXED_EPS_REL: f64 = 1e-6;

/// Conductance-match tolerance of the adaptive policy.
///
/// `|dI/dV + I/V| <= eps*I/V` is equivalent to `|dP/dV| <= eps*I`, so this
/// stops within a few millivolts of the MPP at any irradiance.
pub const ADAPTIVE_EPS_REL: f64 = 2e-2;

/// Relative tolerance of the limit-cycle test of the fixed policy.
const REVISIT_REL_TOL: f64 = 1e-9;

/// A sensed operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub v: f64,
    pub i: f64,
}

impl Measurement {
    pub const fn new(v: f64, i: f64) -> Self {
        Self { v, i }
    }

    pub fn p(&self) -> f64 {
        self.v * self.i
    }
}

/// Which way the operating point must move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    LeftOfMpp,
    RightOfMpp,
    AtMpp,
    Hold,
}

impl Direction {
    /// Sign applied to the step: +1 raises the voltage, -1 lowers it.
    pub fn sign(self) -> f64 {
        match self {
            Direction::LeftOfMpp => 1.0,
            Direction::RightOfMpp => -1.0,
            Direction::AtMpp | Direction::Hold => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::LeftOfMpp => "left",
            Direction::RightOfMpp => "right",
            Direction::AtMpp => "at_mpp",
            Direction::Hold => "hold",
        }
    }

    fn is_settled(self) -> bool {
        matches!(self, Direction::AtMpp | Direction::Hold)
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StepPolicy {
    /// Constant voltage step (V).
    Fixed { step: f64 },
    /// Step `m * |dP/dV|`, with `m` in V^2/W.
    Adaptive { m: f64 },
}

/// Controller tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcConfig {
    pub policy: StepPolicy,
    /// Lower clamp of adaptive steps (V).
    pub step_min: f64,
    /// Upper clamp of adaptive steps (V).
    pub step_max: f64,
    /// Adaptive step used before any slope is known (V).
    pub step_init: f64,
    /// Relative tolerance of the `dI/dV = -I/V` match.
    pub eps_rel: f64,
    /// Relative tolerance for "current unchanged" when the voltage is unchanged.
    pub eps_hold_rel: f64,
    /// Voltage changes at or below this count as zero (V).
    pub eps_dv: f64,
    /// Consecutive settled updates needed to declare convergence.
    pub streak_required: u32,
}

impl IcConfig {
    pub fn fixed(step: f64) -> Self {
        Self {
            policy: StepPolicy::Fixed { step },
            step_min: DEFAULT_STEP_MIN,
            step_max: DEFAULT_STEP_MAX,
            step_init: DEFAULT_STEP_INIT,
            eps_rel: FIXED_EPS_REL,
            eps_hold_rel: DEFAULT_EPS_HOLD_REL,
            eps_dv: DEFAULT_EPS_DV,
            streak_required: DEFAULT_STREAK_REQUIRED,
        }
    }

    pub fn adaptive(m: f64) -> Self {
        Self {
            policy: StepPolicy::Adaptive { m },
            eps_rel: ADAPTIVE_EPS_REL,
            ..Self::fixed(DEFAULT_STEP_INIT)
        }
    }

    /// Preset tolerances for `policy`.
    pub fn for_policy(policy: StepPolicy) -> Self {
        match policy {
            StepPolicy::Fixed { step } => Self::fixed(step),
            StepPolicy::Adaptive { m } => Self::adaptive(m),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.policy, StepPolicy::Adaptive { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self.policy {
            StepPolicy::Fixed { step } if !(step > 0.0 && step.is_finite()) => {
                return Err(domain(format!("fixed step must be > 0 V (got {step})")));
            }
            StepPolicy::Adaptive { m } if !(m > 0.0 && m.is_finite()) => {
                return Err(domain(format!("adaptive gain m must be > 0 (got {m})")));
            }
            _ => {}
        }
        if !(self.step_min > 0.0 && self.step_min <= self.step_init && self.step_init <= self.step_max)
            || !self.step_max.is_finite()
        {
            return Err(domain(format!(
                "steps require 0 < step_min <= step_init <= step_max (got {}, {}, {})",
                self.step_min, self.step_init, self.step_max
            )));
        }
        if !(self.eps_rel > 0.0 && self.eps_rel.is_finite()) {
            return Err(domain(format!("eps_rel must be > 0 (got {})", self.eps_rel)));
        }
        if !(self.eps_hold_rel >= 0.0 && self.eps_hold_rel.is_finite()) {
            return Err(domain(format!("eps_hold_rel must be >= 0 (got {})", self.eps_hold_rel)));
        }
        if !(self.eps_dv >= 0.0 && self.eps_dv.is_finite()) {
            return Err(domain(format!("eps_dv must be >= 0 (got {})", self.eps_dv)));
        }
        if self.streak_required < 1 {
            return Err(domain("streak_required must be at least 1"));
        }
        Ok(())
    }
}

/// A secant slope and the voltage it is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlopeSample {
    /// `dP/dV` between two samples (W/V).
    pub slope: f64,
    /// Midpoint of the two sample voltages (V).
    pub v_mid: f64,
}

/// The last few secants of the adaptive policy, oldest first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlopeHistory {
    samples: [SlopeSample; SlopeHistory::CAPACITY],
    len: usize,
}

impl SlopeHistory {
    pub const CAPACITY: usize = 3;

    pub fn as_slice(&self) -> &[SlopeSample] {
        &self.samples[..self.len]
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `sample`, dropping the oldest one when full.
    pub fn push(&mut self, sample: SlopeSample) {
        if self.len == Self::CAPACITY {
            self.samples.copy_within(1.., 0);
            self.len -= 1;
        }
        self.samples[self.len] = sample;
        self.len += 1;
    }

    /// Slope at `v` from the polynomial through the stored samples.
    ///
    /// Falls back to the newest secant when two midpoints are within
    /// `min_gap`. `None` when empty.
    pub fn estimate(&self, v: f64, min_gap: f64) -> Option<f64> {
        let pts = self.as_slice();
        let newest = pts.last()?.slope;
        let mut coef = [0.0; Self::CAPACITY];
        for (c, s) in coef.iter_mut().zip(pts) {
            *c = s.slope;
        }
        let n = pts.len();
        for j in 1..n {
            for k in (j..n).rev() {
                let gap = pts[k].v_mid - pts[k - j].v_mid;
                if gap.abs() <= min_gap {
                    return Some(newest);
                }
                coef[k] = (coef[k] - coef[k - 1]) / gap;
            }
        }
        let mut r = coef[n - 1];
        for k in (0..n - 1).rev() {
            r = r * (v - pts[k].v_mid) + coef[k];
        }
        Some(r)
    }
}

/// Controller memory between updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    pub v_prev: f64,
    pub i_prev: f64,
    pub p_prev: f64,
    /// Magnitude of the last emitted step (V).
    pub last_step: f64,
    /// Consecutive AtMpp or Hold classifications.
    pub at_mpp_streak: u32,
    /// Updates since reset.
    pub iterations: u64,
    /// Voltage sampled two updates ago.
    pub v_prev2: Option<f64>,
    /// Recent secants of the adaptive policy; cleared when the voltage stalls.
    pub slopes: SlopeHistory,
    /// Consecutive adaptive steps at or below `step_min`.
    pub small_step_streak: u32,
    /// Fixed policy only: the last sample revisited the voltage of two updates ago.
    pub cycle_detected: bool,
}

impl ControllerState {
    /// Resets the controller at a known operating point.
    pub fn new(meas: Measurement) -> Self {
        Self {
            v_prev: meas.v,
            i_prev: meas.i,
            p_prev: meas.p(),
            last_step: 0.0,
            at_mpp_streak: 0,
            iterations: 0,
            v_prev2: None,
            slopes: SlopeHistory::default(),
            small_step_streak: 0,
            cycle_detected: false,
        }
    }
}

/// Result of one controller update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    /// Next voltage reference (V).
    pub v_ref: f64,
    /// Step magnitude computed by the policy (V).
    pub step: f64,
    pub direction: Direction,
    pub state: ControllerState,
}

pub fn classify(state: &ControllerState, meas: Measurement, cfg: &IcConfig) -> Result<Direction> {
    if !(meas.v > 0.0 && meas.v.is_finite()) {
        return Err(domain(format!(
            "measured voltage must be > 0 V for a conductance (got {})",
            meas.v
        )));
    }
    if !meas.i.is_finite() {
        return Err(domain(format!("measured current must be finite (got {})", meas.i)));
    }
    let dv = meas.v - state.v_prev;
    let di = meas.i - state.i_prev;

    if dv.abs() <= cfg.eps_dv {
        return Ok(if di.abs() <= cfg.eps_hold_rel * meas.i.abs() {
            Direction::Hold
        } else if di > 0.0 {
            Direction::LeftOfMpp
        } else {
            Direction::RightOfMpp
        });
    }

    let g_inc = if cfg.is_adaptive() {
        let (_, slope) = power_slope(state, meas, cfg);
        (slope - meas.i) / meas.v
    } else {
        di / dv
    };
    let g_inst = meas.i / meas.v;
    Ok(if (g_inc + g_inst).abs() <= cfg.eps_rel * g_inst.abs() {
        Direction::AtMpp
    } else if g_inc > -g_inst {
        Direction::LeftOfMpp
    } else {
        Direction::RightOfMpp
    })
}

pub fn next_reference_fixed(state: &ControllerState, meas: Measurement, cfg: &IcConfig) -> Result<Update> {
    let StepPolicy::Fixed { step } = cfg.policy else {
        return Err(domain("next_reference_fixed needs a fixed-step policy"));
    };
    let direction = classify(state, meas, cfg)?;
    let revisit = direction.sign() != 0.0
        && state
            .v_prev2
            .is_some_and(|v2| (meas.v - v2).abs() <= REVISIT_REL_TOL * meas.v.abs().max(1.0));
    let mut next = advance(state, meas, direction, step, SlopeHistory::default(), false);
    next.state.cycle_detected = revisit;
    Ok(next)
}

pub fn next_reference_adaptive(state: &ControllerState, meas: Measurement, cfg: &IcConfig) -> Result<Update> {
    let StepPolicy::Adaptive { m } = cfg.policy else {
        return Err(domain("next_reference_adaptive needs an adaptive policy"));
    };
    let direction = classify(state, meas, cfg)?;
    let dv = meas.v - state.v_prev;

    let (step, slopes) = if dv.abs() <= cfg.eps_dv {
        let step = if state.iterations == 0 {
            cfg.step_init
        } else {
            state.last_step.clamp(cfg.step_min, cfg.step_max)
        };
        (step, SlopeHistory::default())
    } else {
        let (slopes, slope) = power_slope(state, meas, cfg);
        ((m * slope.abs()).clamp(cfg.step_min, cfg.step_max), slopes)
    };

    let small = step <= cfg.step_min;
    Ok(advance(state, meas, direction, step, slopes, small))
}

/// History extended by the newest secant, and the slope it predicts at `meas.v`.
///
/// Only meaningful when the voltage changed by more than `eps_dv`.
fn power_slope(state: &ControllerState, meas: Measurement, cfg: &IcConfig) -> (SlopeHistory, f64) {
    let mut slopes = state.slopes;
    slopes.push(SlopeSample {
        slope: (meas.p() - state.p_prev) / (meas.v - state.v_prev),
        v_mid: 0.5 * (meas.v + state.v_prev),
    });
    let slope = slopes.estimate(meas.v, cfg.eps_dv).unwrap_or_default();
    (slopes, slope)
}

/// Dispatches on the configured policy.
pub fn next_reference(state: &ControllerState, meas: Measurement, cfg: &IcConfig) -> Result<Update> {
    match cfg.policy {
        StepPolicy::Fixed { .. } => next_reference_fixed(state, meas, cfg),
        StepPolicy::Adaptive { .. } => next_reference_adaptive(state, meas, cfg),
    }
}

fn advance(
    state: &ControllerState,
    meas: Measurement,
    direction: Direction,
    step: f64,
    slopes: SlopeHistory,
    small_step: bool,
) -> Update {
    let next = ControllerState {
        v_prev: meas.v,
        i_prev: meas.i,
        p_prev: meas.p(),
        last_step: step,
        at_mpp_streak: if direction.is_settled() { state.at_mpp_streak + 1 } else { 0 },
        iterations: state.iterations + 1,
        v_prev2: Some(state.v_prev),
        slopes,
        small_step_streak: if small_step { state.small_step_streak + 1 } else { 0 },
        cycle_detected: false,
    };
    Update {
        v_ref: meas.v + direction.sign() * step,
        step,
        direction,
        state: next,
    }
}

/// True once the controller has settled.
///
/// Both policies stop after `streak_required` consecutive AtMpp/Hold
/// classifications. The adaptive policy also stops after as many steps at
/// `step_min`; the fixed policy also stops when it starts cycling around the
/// MPP.
pub fn is_converged(state: &ControllerState, cfg: &IcConfig) -> bool {
    if state.at_mpp_streak >= cfg.streak_required {
        return true;
    }
    match cfg.policy {
        StepPolicy::Adaptive { .. } => state.small_step_streak >= cfg.streak_required,
        StepPolicy::Fixed { .. } => state.cycle_detected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(v: f64) -> Measurement {
        // p = 240 - (v - 30)^2
        Measurement::new(v, (240.0 - (v - 30.0).powi(2)) / v)
    }

    #[test]
    fn exact_conductance_match_is_at_mpp() {
        // dI/dV = -1 and I/V = 1.
        let state = ControllerState::new(Measurement::new(9.0, 11.0));
        let d = classify(&state, Measurement::new(10.0, 10.0), &IcConfig::fixed(0.01)).unwrap();
        assert_eq!(d, Direction::AtMpp);
    }

    #[test]
    fn unchanged_sample_holds() {
        let m = Measurement::new(20.0, 7.0);
        let state = ControllerState::new(m);
        assert_eq!(classify(&state, m, &IcConfig::fixed(0.01)).unwrap(), Direction::Hold);
        let up = Measurement::new(20.0, 7.5);
        assert_eq!(classify(&state, up, &IcConfig::fixed(0.01)).unwrap(), Direction::LeftOfMpp);
        let down = Measurement::new(20.0, 6.5);
        assert_eq!(classify(&state, down, &IcConfig::fixed(0.01)).unwrap(), Direction::RightOfMpp);
    }

    #[test]
    fn zero_voltage_is_rejected() {
        let state = ControllerState::new(Measurement::new(1.0, 1.0));
        assert!(classify(&state, Measurement::new(0.0, 8.0), &IcConfig::fixed(0.01)).is_err());
    }

    #[test]
    fn fixed_step_moves_by_step() {
        let cfg = IcConfig::fixed(0.01);
        let state = ControllerState::new(quad(24.99));
        let up = next_reference_fixed(&state, quad(25.0), &cfg).unwrap();
        assert_eq!(up.direction, Direction::LeftOfMpp);
        assert_eq!(up.v_ref, 25.01);
        assert_eq!(up.state.iterations, 1);
        assert_eq!(up.state.at_mpp_streak, 0);
    }

    #[test]
    fn fixed_at_mpp_keeps_voltage() {
        let cfg = IcConfig::fixed(0.01);
        let state = ControllerState::new(Measurement::new(9.0, 11.0));
        let up = next_reference_fixed(&state, Measurement::new(10.0, 10.0), &cfg).unwrap();
        assert_eq!(up.direction, Direction::AtMpp);
        assert_eq!(up.v_ref, 10.0);
        assert_eq!(up.state.at_mpp_streak, 1);
    }

    #[test]
    fn adaptive_quadratic_example() {
        let cfg = IcConfig::adaptive(0.09);
        let state = ControllerState::new(Measurement::new(27.9, 235.59 / 27.9));
        let up = next_reference_adaptive(&state, Measurement::new(28.0, 236.0 / 28.0), &cfg).unwrap();
        assert!((up.step - 0.369).abs() < 1e-9, "{}", up.step);
        assert_eq!(up.direction, Direction::LeftOfMpp);
        assert!((up.v_ref - 28.369).abs() < 1e-9);
    }

    #[test]
    fn adaptive_flat_power_uses_step_min_and_holds() {
        let cfg = IcConfig::adaptive(0.09);
        let state = ControllerState::new(Measurement::new(10.0, 2.0));
        let up = next_reference_adaptive(&state, Measurement::new(10.01, 20.0 / 10.01), &cfg).unwrap();
        assert_eq!(up.step, cfg.step_min);
        assert_eq!(up.direction, Direction::AtMpp);
        assert_eq!(up.v_ref, 10.01);
    }

    #[test]
    fn adaptive_bootstraps_with_step_init() {
        let cfg = IcConfig::adaptive(0.09);
        let state = ControllerState::new(Measurement::new(30.0, 7.0));
        let up = next_reference_adaptive(&state, Measurement::new(30.0, 7.5), &cfg).unwrap();
        assert_eq!(up.step, cfg.step_init);
        assert_eq!(up.v_ref, 30.0 + cfg.step_init);
        let again = next_reference_adaptive(&up.state, Measurement::new(30.01, 7.5), &cfg).unwrap();
        assert_eq!(again.state.iterations, 2);
    }

    #[test]
    fn slope_history_is_exact_on_a_quadratic_slope() {
        let f = |v: f64| 3.0 - 0.5 * v + 0.25 * v * v;
        let mut h = SlopeHistory::default();
        assert_eq!(h.estimate(1.0, 1e-12), None);
        for x in [1.0, 2.0, 4.0, 7.0] {
            h.push(SlopeSample { slope: f(x), v_mid: x });
        }
        assert_eq!(h.as_slice().len(), 3);
        assert_eq!(h.as_slice()[0].v_mid, 2.0);
        assert!((h.estimate(5.5, 1e-12).unwrap() - f(5.5)).abs() < 1e-12);
    }

    #[test]
    fn coincident_midpoints_fall_back_to_the_newest_secant() {
        let mut h = SlopeHistory::default();
        h.push(SlopeSample { slope: 1.0, v_mid: 2.0 });
        h.push(SlopeSample { slope: 5.0, v_mid: 2.0 });
        assert_eq!(h.estimate(3.0, 1e-12), Some(5.0));
    }

    #[test]
    fn adaptive_history_is_cleared_when_the_voltage_stalls() {
        let cfg = IcConfig::adaptive(0.09);
        let a = next_reference_adaptive(&ControllerState::new(quad(25.0)), quad(25.5), &cfg).unwrap();
        assert!(!a.state.slopes.is_empty());
        let b = next_reference_adaptive(&a.state, quad(25.5), &cfg).unwrap();
        assert!(b.state.slopes.is_empty());
    }

    #[test]
    fn wrong_policy_is_rejected() {
        let state = ControllerState::new(quad(25.0));
        assert!(next_reference_fixed(&state, quad(25.1), &IcConfig::adaptive(0.09)).is_err());
        assert!(next_reference_adaptive(&state, quad(25.1), &IcConfig::fixed(0.01)).is_err());
    }

    #[test]
    fn convergence_needs_a_streak() {
        let cfg = IcConfig::fixed(0.01);
        let fresh = ControllerState::new(quad(25.0));
        assert!(!is_converged(&fresh, &cfg));

        let a = next_reference_fixed(&ControllerState::new(Measurement::new(9.0, 11.0)), Measurement::new(10.0, 10.0), &cfg)
            .unwrap();
        assert!(!is_converged(&a.state, &cfg));
        let b = next_reference_fixed(&a.state, Measurement::new(10.0, 10.0), &cfg).unwrap();
        assert_eq!(b.direction, Direction::Hold);
        assert!(is_converged(&b.state, &cfg));
    }

    #[test]
    fn fixed_policy_detects_a_limit_cycle() {
        let cfg = IcConfig::fixed(0.5);
        let mut state = ControllerState::new(quad(29.5));
        let mut v = 29.75;
        let mut stopped = None;
        for k in 0..10 {
            let up = next_reference_fixed(&state, quad(v), &cfg).unwrap();
            state = up.state;
            v = up.v_ref;
            if is_converged(&state, &cfg) {
                stopped = Some(k);
                break;
            }
        }
        assert!(stopped.is_some());
        assert!((state.v_prev - 30.0).abs() <= 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(IcConfig::fixed(0.01).validate().is_ok());
        assert!(IcConfig::adaptive(0.09).validate().is_ok());
        assert!(IcConfig::fixed(0.0).validate().is_err());
        assert!(IcConfig::adaptive(-1.0).validate().is_err());
        let mut c = IcConfig::adaptive(0.09);
        c.step_init = 5.0;
        assert!(c.validate().is_err());
        c = IcConfig::fixed(0.01);
        c.streak_required = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn policy_json_shape() {
        let cfg = IcConfig::adaptive(0.09);
        let json = serde_json::to_string(&cfg.policy).unwrap();
        assert_eq!(json, r#"{"kind":"adaptive","m":0.09}"#);
        let back: StepPolicy = serde_json::from_str(r#"{"kind":"fixed","step":0.1}"#).unwrap();
        assert_eq!(back, StepPolicy::Fixed { step: 0.1 });
    }
}
