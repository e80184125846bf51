//! Simulation and analysis toolkit for islanded DC microgrids under primary
//! voltage control and consensus-based secondary control.
//!
//! The crate models a network of Buck-converter DGUs with RLC filters, RL
//! power lines, and ZIE loads (parallel constant-impedance, constant-current,
//! and exponential components). A per-DGU multivariable PI layer tracks
//! voltage references; a distributed consensus layer exchanges weighted
//! filter currents over a communication graph to reach proportional current
//! sharing and rating-weighted voltage balancing.
//!
//! What you can do with it:
//!
//! - build the closed-loop state-space and evaluate its vector field
//!   ([`dynamics`]);
//! - compute steady states: a contraction fixed point with an existence and
//!   uniqueness certificate for constant-power loads, and a damped-Newton
//!   fallback for general exponents ([`equilibrium`]);
//! - certify stability from gain membership, load damping, and the Lyapunov
//!   matrices ([`stability`]);
//! - run scripted time-domain scenarios with plug-and-play events and export
//!   deterministic CSV traces ([`simulator`]).

pub mod config;
pub mod control;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod loads;
pub mod network;
pub mod presets;
pub mod simulator;
pub mod stability;

pub use config::MicrogridConfig;
pub use control::{DguGains, GainSet};
pub use dynamics::{AssembledSystem, ControlMode, SystemState};
pub use equilibrium::{EquilibriumSolution, ExistenceCertificate, SetMembership};
pub use error::{Error, Result};
pub use loads::ZieLoad;
pub use network::MicrogridTopology;
pub use simulator::{
    EventKind, IntegrateOptions, ScenarioEvent, SimulationTrace, Termination,
};
pub use stability::{StabilityReport, Verdict};
