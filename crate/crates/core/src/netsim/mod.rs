//! Discrete-event simulation of irregular traffic on a 2D mesh.
//!
//! Messages are cut into chunks that move hop by hop along their XY route
//! (store-and-forward at chunk granularity). Each directed link serves one
//! chunk at a time in earliest-ready-first order, ties broken by
//! `(task id, chunk index)`. Node injection and ejection ports are not
//! modelled as bottlenecks.

mod engine;
mod ring;
mod routing;
mod tasks;

use serde::{Deserialize, Serialize};

pub(crate) use engine::simulate_with_router;
pub use engine::{simulate, simulate_detailed, LinkSchedule};
pub use ring::{ring_order, simulate_ring_allreduce, simulate_ring_allreduce_with, RingDirection};
pub use routing::{xy_path, Direction, LinkId, Router};
pub use tasks::{
    build_logical_tasks, build_tasks, remap_tasks, tasks_from_sources, ProportionalDispatch,
};

/// Simulation chunk size used when the caller has no preference.
pub const DEFAULT_CHUNK_BYTES: u64 = 4096;

/// A point-to-point transfer between two physical nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommTask {
    pub id: usize,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub release_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan_s: f64,
    /// Busy seconds per directed link, indexed by [`LinkId::index`].
    pub per_link_busy_s: Vec<f64>,
    pub per_node_sent_bytes: Vec<u64>,
    pub per_node_received_bytes: Vec<u64>,
    /// Arrival time of each task's last chunk, indexed like the input.
    pub task_completion_s: Vec<f64>,
}

impl SimReport {
    pub fn total_link_busy_s(&self) -> f64 {
        self.per_link_busy_s.iter().sum()
    }

    pub fn max_link_busy_s(&self) -> f64 {
        self.per_link_busy_s.iter().copied().fold(0.0, f64::max)
    }
}
