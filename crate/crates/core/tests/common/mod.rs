//! Independent re-derivations used as oracles by the integration tests.
#![allow(dead_code)]

use icmppt_core::pv_model::{Environment, PvModuleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KB: f64 = 1.380649e-23;
pub const Q: f64 = 1.602176634e-19;

/// Diode-equation constants written out from scratch: (ipv, i0, a*vt).
pub fn constants(p: &PvModuleParams, env: Environment) -> (f64, f64, f64) {
    let t = env.t_celsius + 273.15;
    let dt = t - p.t_n;
    let vt = p.ns as f64 * KB * t / Q;
    let ipv = (p.isc_n * (p.rp + p.rs) / p.rp + p.ki * dt) * env.g / p.g_n;
    let i0 = (p.isc_n + p.ki * dt) / (((p.voc_n + p.kv * dt) / (p.a * vt)).exp() - 1.0);
    (ipv, i0, p.a * vt)
}

pub fn residual(p: &PvModuleParams, env: Environment, v: f64, i: f64) -> f64 {
    let (ipv, i0, avt) = constants(p, env);
    let vd = v + p.rs * i;
    ipv - i0 * ((vd / avt).exp() - 1.0) - vd / p.rp - i
}

/// Plain bisection on a wide bracket, run until the bracket stops shrinking.
pub fn bisection_current(p: &PvModuleParams, env: Environment, v: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0e4, 1.0e4);
    assert!(residual(p, env, v, lo) > 0.0 && residual(p, env, v, hi) < 0.0);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        if residual(p, env, v, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Environments spanning the whole valid temperature range and 50..1200 W/m^2.
pub fn random_env(rng: &mut ChaCha8Rng) -> Environment {
    Environment::new(rng.random_range(-40.0..=90.0), rng.random_range(50.0..=1200.0))
}
