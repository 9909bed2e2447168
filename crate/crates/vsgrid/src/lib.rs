//! Multi-inverter VSG microgrid analysis and simulation.
//!
//! The crate models parallel virtual-synchronous-generator units behind
//! inductive feeders sharing a point of common coupling, in stand-alone or
//! grid-connected operation. It provides:
//!
//! - [`model`]: configuration loading, network/communication-graph types;
//! - [`tf`]: small-signal transfer functions, Bode data, poles, resonance;
//! - [`equiv`]: the RLC equivalent-circuit view and the design calculator;
//! - [`engine`]: nonlinear time-domain simulation with a quasi-static
//!   phasor network solve;
//! - [`ctrl`]: controller strategies (DVI consensus, adaptive inertia and
//!   damping, DSC baseline);
//! - [`metrics`]: step-response figures of merit from recorded runs.

pub mod ctrl;
pub mod engine;
pub mod equiv;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tf;

pub use error::{Error, Result};
