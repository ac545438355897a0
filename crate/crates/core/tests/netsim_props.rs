use meshmoe::netsim::{simulate, CommTask, Router};
use meshmoe::{HardwareProfile, MeshSpec};
use proptest::prelude::*;

fn mesh(rows: usize, cols: usize, bw: f64, alpha: f64) -> MeshSpec {
    MeshSpec::new(rows, cols, HardwareProfile::new(1e12, bw, alpha))
}

fn tasks(nodes: usize) -> impl Strategy<Value = Vec<CommTask>> {
    prop::collection::vec(
        (
            0..nodes,
            0..nodes,
            1u64..20_000,
            prop_oneof![Just(0.0), 0.0f64..1e-4],
        ),
        1..40,
    )
    .prop_map(|v| {
        v.into_iter()
            .enumerate()
            .filter(|(_, (s, d, _, _))| s != d)
            .map(|(id, (src, dst, bytes, release_time_s))| CommTask {
                id,
                src,
                dst,
                bytes,
                release_time_s,
            })
            .collect()
    })
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5).prop_filter("at least two nodes", |(r, c)| r * c >= 2)
}

proptest! {
    #[test]
    fn link_busy_time_is_conserved(((rows, cols), ts) in shape().prop_flat_map(|s| (Just(s), tasks(s.0 * s.1))), chunk in 1u64..8192) {
        let m = mesh(rows, cols, 1e9, 0.0);
        let router = Router::new(&m);
        let report = simulate(&ts, &m, chunk);
        let demand: f64 = ts.iter().map(|t| t.bytes as f64 * router.path(t.src, t.dst).len() as f64 / 1e9).sum();
        prop_assert!((report.total_link_busy_s() - demand).abs() <= 1e-9 * demand.max(1e-12));
        prop_assert_eq!(report.per_node_sent_bytes.iter().sum::<u64>(), report.per_node_received_bytes.iter().sum::<u64>());
    }

    #[test]
    fn makespan_respects_lower_bounds(((rows, cols), ts) in shape().prop_flat_map(|s| (Just(s), tasks(s.0 * s.1))), alpha in 0.0f64..1e-6) {
        let m = mesh(rows, cols, 1e9, alpha);
        let router = Router::new(&m);
        let report = simulate(&ts, &m, 1 << 20);
        let tol = 1e-9 * report.makespan_s.max(1e-12);
        prop_assert!(report.makespan_s + tol >= report.max_link_busy_s());
        for t in &ts {
            let hops = router.path(t.src, t.dst).len() as f64;
            prop_assert!(report.makespan_s + tol >= t.release_time_s + t.bytes as f64 / 1e9 + hops * alpha);
        }
        let latest = report.task_completion_s.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(report.makespan_s, latest);
    }

    #[test]
    fn doubling_bandwidth_halves_makespan(((rows, cols), ts) in shape().prop_flat_map(|s| (Just(s), tasks(s.0 * s.1))), chunk in 1u64..8192) {
        let ts: Vec<CommTask> = ts.into_iter().map(|t| CommTask { release_time_s: 0.0, ..t }).collect();
        let slow = simulate(&ts, &mesh(rows, cols, 1e9, 0.0), chunk).makespan_s;
        let fast = simulate(&ts, &mesh(rows, cols, 2e9, 0.0), chunk).makespan_s;
        prop_assert!((slow - 2.0 * fast).abs() <= 1e-12 * slow);
    }

    #[test]
    fn simulation_is_deterministic(((rows, cols), ts) in shape().prop_flat_map(|s| (Just(s), tasks(s.0 * s.1))), chunk in 1u64..8192) {
        let m = mesh(rows, cols, 1e9, 1e-8);
        prop_assert_eq!(simulate(&ts, &m, chunk), simulate(&ts, &m, chunk));
    }
}
