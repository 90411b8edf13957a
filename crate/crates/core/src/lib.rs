//! Incremental-conductance MPPT laboratory.
//!
//! - [`pv_model`]: single-diode array model, implicit I-V solver, open-circuit
//!   voltage, golden-section MPP oracle and Rs/Rp calibration.
//! - [`mppt`]: incremental-conductance classification with fixed and adaptive
//!   step policies as a pure state machine.
//! - [`harness`]: environment step-change scenarios, the built-in table
//!   reproductions and CSV/JSON plumbing.
//!
//! ```
//! use icmppt_core::pv_model::{mpp_oracle, Environment, PvModuleParams, DEFAULT_V_TOL};
//!
//! let params = PvModuleParams::kc200gt();
//! let mpp = mpp_oracle(&params, Environment::new(25.0, 1000.0), DEFAULT_V_TOL).unwrap();
//! assert!((mpp.p_max - 217.54).abs() < 0.2);
//! ```

pub mod error;
pub mod harness;
pub mod mppt;
pub mod par;
pub mod pv_model;

pub use error::{Error, Result};
pub use par::Execution;
