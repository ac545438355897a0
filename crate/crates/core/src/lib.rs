//! Placement planning and network simulation for Mixture-of-Experts layers on
//! 2D-mesh near-memory accelerators.
//!
//! The crate is organised as a pipeline:
//!
//! * [`trace`] produces or loads per-token expert routing traces and
//!   [`stats`] condenses them into per-layer frequencies and co-activation
//!   groups.
//! * [`perfmodel`] prices a [`Placement`] analytically (compute, node traffic,
//!   ring all-reduce) and [`netsim`] replays its traffic on the mesh with a
//!   discrete-event simulator.
//! * [`planner`] builds baseline placements, solves the node-balance program
//!   and searches logical-to-physical mappings.
//! * [`dynamic`] replays a trace with pre-broadcast and load-aware dispatch.
//! * [`pipeline`] ties the stages together for calibration and comparisons.

pub mod activations;
pub mod dynamic;
pub mod error;
pub mod model;
pub mod netsim;
pub mod perfmodel;
pub mod pipeline;
pub mod placement;
pub mod planner;
pub mod stats;
pub mod trace;

pub use activations::{ActivationTrace, Iteration, LayerActivations};
pub use error::{Error, Result};
pub use model::{HardwareProfile, MeshSpec, ModelSpec};
pub use placement::{
    validate_placement, LayerPlacement, NodeMapping, Placement, Strategy, EPS_PLACE,
};
pub use stats::{derive_pooled_stats, derive_stats, ExpertGroup, LayerStats, TraceStats};
