use meshmoe::dynamic::{
    dispatch, dynamic_simulate, layer_latency, optimal_chunk, pre_broadcast_time, DispatchMode,
    DynamicOptions, DynamicPolicy,
};
use meshmoe::netsim::ProportionalDispatch;
use meshmoe::pipeline::{plan, PlanConfig};
use meshmoe::stats::DEFAULT_GROUP_CAP;
use meshmoe::trace::{generate_trace, TraceGenConfig};
use meshmoe::{
    derive_stats, ActivationTrace, HardwareProfile, MeshSpec, ModelSpec, Placement,
    Strategy as PlacementStrategy,
};
use proptest::prelude::*;

fn model() -> ModelSpec {
    ModelSpec {
        num_experts: 12,
        experts_per_token: 3,
        hidden_size: 128,
        intermediate_size: 256,
        num_layers: 3,
        bytes_per_activation: 4,
    }
}

fn mesh() -> MeshSpec {
    MeshSpec::new(2, 2, HardwareProfile::new(1e12, 50e9, 0.0))
}

fn case(seed: u64, skew: f64, strategy: PlacementStrategy) -> (ActivationTrace, Placement) {
    let mut cfg = TraceGenConfig::new(model(), 40, 2, seed);
    cfg.skew = skew;
    cfg.drift = 1.0;
    let trace = generate_trace(&cfg).unwrap();
    let stats = derive_stats(&trace, DEFAULT_GROUP_CAP).unwrap();
    let placement = plan(
        &stats,
        40,
        &model(),
        &mesh(),
        &PlanConfig::new(strategy, 1.0, seed),
    )
    .unwrap()
    .placement;
    (trace, placement)
}

fn strategy() -> impl Strategy<Value = PlacementStrategy> {
    prop_oneof![
        Just(PlacementStrategy::Ep),
        Just(PlacementStrategy::HybridCb),
        Just(PlacementStrategy::NodeBalance)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimal_chunk_attains_the_bound(alpha in 1e-10f64..1e-5, beta in 1e-13f64..1e-8, k in 1usize..100, d in 1usize..1024, v in 1e3f64..1e10) {
        let plan = optimal_chunk(alpha, beta, k, d, v).unwrap();
        let sd = (d as f64).sqrt();
        let bound = v * beta * k as f64 + 2.0 * alpha * sd + 2.0 * (2.0 * sd * beta * k as f64 * alpha * v).sqrt();
        prop_assert!((plan.t_pre_b_s - bound).abs() <= 1e-9 * bound);
        for c in [plan.c_star * 0.5, plan.c_star * 2.0] {
            prop_assert!(pre_broadcast_time(alpha, beta, k, d, v, c) >= plan.t_pre_b_s);
        }
    }

    #[test]
    fn comm_free_dispatch_adds_no_traffic(seed in any::<u64>(), skew in 0.0f64..2.5, s in strategy(), extra in prop::collection::vec(0usize..12, 0..4)) {
        let (trace, placement) = case(seed, skew, s);
        let d = mesh().num_nodes();
        for (l, tokens) in trace.iterations[0].layers.iter().enumerate() {
            let layer = &placement.layers[l];
            let mut prop = ProportionalDispatch::new(layer).unwrap();
            let reference: Vec<Vec<usize>> = tokens.tokens().map(|t| t.iter().map(|&i| prop.pick(i as usize)).collect()).collect();
            let mut replicas: Vec<Vec<usize>> = (0..12).map(|i| layer.holders(i).collect()).collect();
            extra.iter().for_each(|&i| replicas[i] = (0..d).collect());
            let assign = dispatch(tokens, &replicas, &mut vec![0.0; d], 1.0, DispatchMode::CommFree, Some(&reference)).unwrap();
            let before = layer_latency(&reference, d, &model(), &mesh(), 1.0).sent_bytes;
            let after = layer_latency(&assign, d, &model(), &mesh(), 1.0).sent_bytes;
            prop_assert!(after <= before);
        }
    }

    #[test]
    fn perfect_prediction_never_raises_peak_load(seed in any::<u64>(), skew in 0.0f64..2.5, s in strategy()) {
        let (trace, placement) = case(seed, skew, s);
        let mut policy = DynamicPolicy::from_hardware(&mesh(), &model(), 1.0);
        policy.beta_s_per_byte = 1e-30;
        let mapping = meshmoe::NodeMapping::identity(4);
        let r = dynamic_simulate(&trace, &placement, &mapping, &policy, &model(), &mesh(), 1.0, &DynamicOptions::default()).unwrap();
        for step in &r.steps {
            prop_assert!(step.dynamic_latency.max_units <= step.static_latency.max_units, "{:?}", step);
        }
    }

    #[test]
    fn dynamic_simulation_is_deterministic(seed in any::<u64>(), accuracy in 0.0f64..=1.0) {
        let (trace, placement) = case(seed, 1.0, PlacementStrategy::NodeBalance);
        let mesh = MeshSpec::new(2, 2, HardwareProfile::new(1e12, 50e9, 1e-8));
        let policy = DynamicPolicy::from_hardware(&mesh, &model(), accuracy);
        let mapping = meshmoe::NodeMapping::identity(4);
        let options = DynamicOptions { simulate_traffic: true, seed };
        let a = dynamic_simulate(&trace, &placement, &mapping, &policy, &model(), &mesh, 1.0, &options).unwrap();
        let b = dynamic_simulate(&trace, &placement, &mapping, &policy, &model(), &mesh, 1.0, &options).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
