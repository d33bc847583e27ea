//! Deterministic discrete-event simulation of a dual-radio wireless multimedia
//! sensor network.
//!
//! Each node pairs a low-power MCU driving a short-range control radio with a
//! multimedia board whose WiFi radio moves bulk image data. A nano-controller
//! switches both on and off. The simulator tracks the joint core state of every
//! node, charges its battery from a per-state current table, runs a
//! distance-vector routing protocol over the mesh and activates the multimedia
//! board only when a sensing trigger asks for an image.
//!
//! The energy math is generic over [`num::Scalar`], so it can run on `f64` or
//! exactly on rationals. The event engine itself works in `f64` seconds.

pub mod engine;
pub mod model;
pub mod num;
pub mod power;
pub mod radio;
pub mod report;
pub mod rng;
pub mod routing;
pub mod scenario;
pub mod sensing;
pub mod wire;

pub use engine::{run, EngineError, Metrics, RunOptions, Simulation};
pub use model::{CoreState, McuState, NodeId, RadioKind, SocState};
pub use scenario::{parse_scenario, ParseOptions, Scenario};

/// Exact rational scalar for the energy math.
pub type Rational = num_rational::Rational64;

pub type EnergyModel64 = power::EnergyModel<f64>;
pub type ExactEnergyModel = power::EnergyModel<Rational>;
pub type Battery64 = power::Battery<f64>;
pub type ExactBattery = power::Battery<Rational>;
