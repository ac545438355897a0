use meshmoe::stats::DEFAULT_GROUP_CAP;
use meshmoe::trace::{generate_trace, TraceGenConfig};
use meshmoe::{derive_stats, LayerActivations, LayerStats, ModelSpec};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn token_sets(num_experts: usize, per_token: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(
        subsequence((0..num_experts).collect::<Vec<_>>(), per_token).prop_shuffle(),
        1..60,
    )
}

fn stats_of(num_experts: usize, per_token: usize, sets: &[Vec<usize>], cap: usize) -> LayerStats {
    let layer = LayerActivations::from_sets(per_token, sets);
    LayerStats::from_tokens(num_experts, per_token, layer.tokens(), cap).unwrap()
}

proptest! {
    #[test]
    fn token_order_does_not_matter((sets, perm) in token_sets(8, 3).prop_flat_map(|s| {
        let n = s.len();
        (Just(s), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })) {
        let shuffled: Vec<Vec<usize>> = perm.iter().map(|&i| sets[i].clone()).collect();
        prop_assert_eq!(stats_of(8, 3, &sets, DEFAULT_GROUP_CAP), stats_of(8, 3, &shuffled, DEFAULT_GROUP_CAP));
    }

    #[test]
    fn frequencies_straddle_the_mean(sets in token_sets(10, 4)) {
        let s = stats_of(10, 4, &sets, DEFAULT_GROUP_CAP);
        let mean = 4.0 / 10.0;
        prop_assert!((s.freq.iter().sum::<f64>() - 4.0).abs() < 1e-9);
        prop_assert!(s.freq.iter().copied().fold(0.0, f64::max) >= mean - 1e-12);
        prop_assert!(s.freq.iter().copied().fold(f64::INFINITY, f64::min) <= mean + 1e-12);
    }

    #[test]
    fn truncated_groups_are_renormalized(sets in token_sets(12, 2), cap in 1usize..6) {
        let s = stats_of(12, 2, &sets, cap);
        prop_assert!(s.groups.len() <= cap);
        prop_assert!((s.groups.iter().map(|g| g.freq).sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.group_coverage <= 1.0 + 1e-12);
    }

    #[test]
    fn generated_traces_yield_valid_stats(seed in any::<u64>(), skew in 0.0f64..3.0, locality in 0.0f64..1.0) {
        let model = ModelSpec { num_layers: 3, ..ModelSpec::MIXTRAL };
        let mut cfg = TraceGenConfig::new(model, 32, 2, seed);
        cfg.skew = skew;
        cfg.layer_locality = locality;
        let trace = generate_trace(&cfg).unwrap();
        let stats = derive_stats(&trace, DEFAULT_GROUP_CAP).unwrap();
        for layer in &stats.layers {
            prop_assert!((layer.freq.iter().sum::<f64>() - 2.0).abs() < 1e-9);
            prop_assert!((layer.groups.iter().map(|g| g.freq).sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(layer.freq.iter().all(|&f| (0.0..=1.0).contains(&f)));
        }
        prop_assert_eq!(stats.layer_overlap.len(), 2);
    }
}
