use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::routing::Router;
use super::{CommTask, SimReport};
use crate::model::MeshSpec;

/// Busy intervals `[start, end)` of every directed link, in start order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSchedule {
    pub intervals: Vec<Vec<(f64, f64)>>,
}

/// A chunk waiting for hop `hop` of its route.
#[derive(Debug, Clone, Copy)]
struct Ready {
    time: f64,
    task: usize,
    chunk: u64,
    hop: u32,
}

impl PartialEq for Ready {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ready {}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ready {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.task.cmp(&self.task))
            .then_with(|| other.chunk.cmp(&self.chunk))
    }
}

/// Simulates `tasks` and returns the aggregate report.
pub fn simulate(tasks: &[CommTask], mesh: &MeshSpec, chunk_bytes: u64) -> SimReport {
    run(tasks, mesh, &Router::new(mesh), chunk_bytes, false).0
}

/// Like [`simulate`], also returning every link's busy intervals.
pub fn simulate_detailed(
    tasks: &[CommTask],
    mesh: &MeshSpec,
    chunk_bytes: u64,
) -> (SimReport, LinkSchedule) {
    let (report, schedule) = run(tasks, mesh, &Router::new(mesh), chunk_bytes, true);
    (report, schedule.expect("schedule requested"))
}

pub(crate) fn simulate_with_router(
    tasks: &[CommTask],
    mesh: &MeshSpec,
    router: &Router,
    chunk_bytes: u64,
) -> SimReport {
    run(tasks, mesh, router, chunk_bytes, false).0
}

fn run(
    tasks: &[CommTask],
    mesh: &MeshSpec,
    router: &Router,
    chunk_bytes: u64,
    record: bool,
) -> (SimReport, Option<LinkSchedule>) {
    let chunk_bytes = chunk_bytes.max(1);
    let d = mesh.num_nodes();
    let bw = mesh.link_bandwidth_bps;
    let alpha = mesh.per_hop_latency_s;

    let mut link_free = vec![0.0f64; d * 4];
    let mut busy = vec![0.0f64; d * 4];
    let mut intervals: Vec<Vec<(f64, f64)>> = if record {
        vec![Vec::new(); d * 4]
    } else {
        Vec::new()
    };
    let mut sent = vec![0u64; d];
    let mut received = vec![0u64; d];
    let mut completion: Vec<f64> = tasks.iter().map(|t| t.release_time_s).collect();

    let mut heap = BinaryHeap::new();
    for (k, t) in tasks.iter().enumerate() {
        if t.bytes == 0 || t.src == t.dst {
            continue;
        }
        sent[t.src] += t.bytes;
        received[t.dst] += t.bytes;
        let chunks = t.bytes.div_ceil(chunk_bytes);
        for chunk in 0..chunks {
            heap.push(Ready {
                time: t.release_time_s,
                task: k,
                chunk,
                hop: 0,
            });
        }
    }

    while let Some(ev) = heap.pop() {
        let t = &tasks[ev.task];
        let path = router.path(t.src, t.dst);
        let chunks = t.bytes.div_ceil(chunk_bytes);
        let size = if ev.chunk + 1 == chunks {
            t.bytes - (chunks - 1) * chunk_bytes
        } else {
            chunk_bytes
        };
        let link = path[ev.hop as usize].index();
        let start = ev.time.max(link_free[link]);
        let occupancy = size as f64 / bw + alpha;
        let end = start + occupancy;
        link_free[link] = end;
        busy[link] += occupancy;
        if record {
            intervals[link].push((start, end));
        }
        if (ev.hop as usize) + 1 < path.len() {
            heap.push(Ready {
                time: end,
                task: ev.task,
                chunk: ev.chunk,
                hop: ev.hop + 1,
            });
        } else if end > completion[ev.task] {
            completion[ev.task] = end;
        }
    }

    let makespan_s = completion.iter().copied().fold(0.0, f64::max);
    let report = SimReport {
        makespan_s,
        per_link_busy_s: busy,
        per_node_sent_bytes: sent,
        per_node_received_bytes: received,
        task_completion_s: completion,
    };
    (report, record.then_some(LinkSchedule { intervals }))
}
