use meshmoe::pipeline::{plan, PlanConfig};
use meshmoe::planner::{
    baseline_objectives, plan_baseline, search_mapping, solve_node_balance, MappingEvaluator,
    NodeBalanceProblem,
};
use meshmoe::stats::DEFAULT_GROUP_CAP;
use meshmoe::trace::{generate_trace, TraceGenConfig};
use meshmoe::{
    derive_stats, validate_placement, HardwareProfile, MeshSpec, ModelSpec, NodeMapping,
    Strategy as PlacementStrategy,
};
use proptest::prelude::*;

fn small_model(experts: usize, per_token: usize) -> ModelSpec {
    ModelSpec {
        num_experts: experts,
        experts_per_token: per_token,
        hidden_size: 256,
        intermediate_size: 512,
        num_layers: 2,
        bytes_per_activation: 4,
    }
}

fn profile() -> impl Strategy<Value = HardwareProfile> {
    (0usize..3).prop_map(|k| HardwareProfile::PRESETS[k])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_strategy_emits_valid_placements(seed in any::<u64>(), skew in 0.0f64..2.0, hw in profile()) {
        let model = small_model(8, 2);
        let mesh = MeshSpec::new(2, 2, hw);
        let mut cfg = TraceGenConfig::new(model, 32, 2, seed);
        cfg.skew = skew;
        let trace = generate_trace(&cfg).unwrap();
        let stats = derive_stats(&trace, DEFAULT_GROUP_CAP).unwrap();
        for s in [PlacementStrategy::Tp, PlacementStrategy::Ep, PlacementStrategy::HybridCb, PlacementStrategy::NodeBalance, PlacementStrategy::NodeLinkBalance] {
            let mut config = PlanConfig::new(s, 1.0, seed);
            config.mapping_budget = 30;
            let out = plan(&stats, 32, &model, &mesh, &config).unwrap();
            prop_assert!(validate_placement(&out.placement, &model, &mesh).unwrap().is_empty(), "{:?}", s);
            prop_assert_eq!(out.mapping.len(), mesh.num_nodes());
        }
    }

    #[test]
    fn node_balance_dominates_admissible_baselines(seed in any::<u64>(), skew in 0.0f64..2.5, hw in profile(), gamma in 0.3f64..2.0) {
        let model = small_model(8, 2);
        let mesh = MeshSpec::new(2, 2, hw);
        let mut cfg = TraceGenConfig::new(model, 48, 1, seed);
        cfg.skew = skew;
        cfg.affinity_strength = 0.4;
        let stats = derive_stats(&generate_trace(&cfg).unwrap(), DEFAULT_GROUP_CAP).unwrap();
        let problem = NodeBalanceProblem { stats: stats.layers[0].clone(), batch: 48, model, mesh, gamma };
        let nb = solve_node_balance(&problem).unwrap().objective_value_s;
        for b in baseline_objectives(&problem).unwrap().into_iter().filter(|b| b.within_cap) {
            prop_assert!(nb <= b.objective_s * (1.0 + 1e-6), "{:?}: {} > {}", b.strategy, nb, b.objective_s);
        }
    }

    #[test]
    fn mapping_search_never_loses_to_identity(seed in any::<u64>(), budget in 1usize..40) {
        let model = small_model(16, 3);
        let mesh = MeshSpec::new(3, 3, HardwareProfile::PRESETS[1]);
        let mut cfg = TraceGenConfig::new(model, 32, 1, seed);
        cfg.skew = 1.0;
        let trace = generate_trace(&cfg).unwrap();
        let stats = derive_stats(&trace, DEFAULT_GROUP_CAP).unwrap();
        let placement = plan_baseline(PlacementStrategy::Ep, &stats, &mesh, None).unwrap().0;
        let tokens = vec![trace.iterations[0].layers[0].clone(), trace.iterations[0].layers[1].clone()];
        let eval = MappingEvaluator::from_tokens(&placement, &tokens, &mesh, &model, 2, seed).unwrap();
        let r = search_mapping(&eval, budget, seed).unwrap();
        prop_assert!(r.mean_makespan_s <= r.identity_makespan_s);
        prop_assert_eq!(r.identity_makespan_s, eval.evaluate(&NodeMapping::identity(9)));
        prop_assert_eq!(r.mean_makespan_s, eval.evaluate(&r.mapping));
    }
}
