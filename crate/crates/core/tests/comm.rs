mod common;

use moechip::comm::{dispatch_counts, CommError};
use moechip::placement::{baseline_layout, ExpertLayout};
use moechip::{
    account_all_to_all, verify_bound, HardwareSpec, ModelSpec, ReplicaPolicy, TokenSource,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn shapes() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    // (experts, k, chiplets, groups)
    prop_oneof![
        Just((16, 2, 8, 2)),
        Just((16, 4, 4, 2)),
        Just((32, 6, 16, 4)),
        Just((64, 8, 16, 4)),
        Just((12, 3, 12, 3)),
        Just((8, 8, 4, 1)),
    ]
}

/// Merges chiplets pairwise (2i, 2i+1) into one.
fn coarsen(layout: &ExpertLayout) -> ExpertLayout {
    let n = layout.n_clusters();
    let mut clusters = vec![Vec::new(); n / 2];
    for (x, members) in layout.clusters.iter().enumerate() {
        clusters[layout.chiplet_of_cluster[x] / 2].extend(members);
    }
    let groups = layout.n_groups().min(n / 2).max(1);
    let per = (n / 2) / groups;
    ExpertLayout {
        layer: layout.layer,
        clusters,
        chiplet_of_cluster: (0..n / 2).collect(),
        load_priority: (0..groups)
            .map(|g| (g * per..(g + 1) * per).collect())
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn bound_chain_and_oracle((n_e, k, nc, ng) in shapes(), seed in any::<u64>(), tokens in 1usize..120) {
        let mut rng = common::rng(seed);
        let t = common::random_trace(&mut rng, n_e, k, 1, tokens);
        let layout = common::random_layout(&mut rng, 0, n_e, nc, ng);
        let (total, n) = common::oracle_c_t(&t, &layout, 0);
        for source in [TokenSource::AttentionChiplet, TokenSource::RoundRobin] {
            for policy in [ReplicaPolicy::PerExpert, ReplicaPolicy::CoLocated] {
                let a = account_all_to_all(&t, &layout, 0, source, policy, 4).unwrap();
                let cert = verify_bound(&a, k);
                prop_assert!(cert.holds, "{:?}", cert);
                prop_assert!(a.min_replicas >= 1 && a.max_replicas <= k);
                prop_assert_eq!(a.inter_chiplet_tokens + a.intra_chiplet_tokens, a.total_replicas);
                prop_assert_eq!(a.bytes_dispatched, 4 * a.inter_chiplet_tokens);
                prop_assert!(a.bytes_combined <= a.bytes_dispatched || policy == ReplicaPolicy::CoLocated);
                match policy {
                    ReplicaPolicy::PerExpert => prop_assert_eq!(a.total_replicas, (k * tokens) as u64),
                    ReplicaPolicy::CoLocated => {
                        prop_assert_eq!(a.total_replicas, total);
                        prop_assert_eq!(a.c_t, total as f64 / n as f64);
                    }
                }
                if source == TokenSource::AttentionChiplet {
                    prop_assert_eq!(a.intra_chiplet_tokens, 0);
                }
            }
        }
    }

    #[test]
    fn c_t_ignores_chiplet_labels_and_token_order((n_e, k, nc, ng) in shapes(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let t = common::random_trace(&mut rng, n_e, k, 1, 64);
        let layout = common::random_layout(&mut rng, 0, n_e, nc, ng);
        let base = account_all_to_all(&t, &layout, 0, TokenSource::AttentionChiplet, ReplicaPolicy::CoLocated, 1).unwrap();

        let mut relabeled = layout.clone();
        relabeled.chiplet_of_cluster.shuffle(&mut rng);
        let per = nc / ng;
        let mut by_chiplet = vec![0; nc];
        for (x, &c) in relabeled.chiplet_of_cluster.iter().enumerate() {
            by_chiplet[c] = x;
        }
        relabeled.load_priority = (0..ng).map(|g| by_chiplet[g * per..(g + 1) * per].to_vec()).collect();
        let b = account_all_to_all(&t, &relabeled, 0, TokenSource::AttentionChiplet, ReplicaPolicy::CoLocated, 1).unwrap();
        prop_assert_eq!(a_ct(&base), a_ct(&b));

        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut rng);
        let mut experts = Vec::new();
        let mut gates = Vec::new();
        for &tok in &order {
            experts.extend_from_slice(t.selection(0, tok));
            gates.extend_from_slice(t.gates(0, tok));
        }
        let shuffled = moechip::RoutingTrace::from_parts(n_e, k, 1, 64, experts, gates).unwrap();
        let c = account_all_to_all(&shuffled, &layout, 0, TokenSource::AttentionChiplet, ReplicaPolicy::CoLocated, 1).unwrap();
        prop_assert_eq!(a_ct(&base), a_ct(&c));
    }

    #[test]
    fn merging_chiplets_never_adds_replicas(seed in any::<u64>(), tokens in 1usize..100) {
        let mut rng = common::rng(seed);
        let t = common::random_trace(&mut rng, 32, 6, 1, tokens);
        let fine = common::random_layout(&mut rng, 0, 32, 16, 4);
        let coarse = coarsen(&fine);
        let f = account_all_to_all(&t, &fine, 0, TokenSource::AttentionChiplet, ReplicaPolicy::CoLocated, 1).unwrap();
        let c = account_all_to_all(&t, &coarse, 0, TokenSource::AttentionChiplet, ReplicaPolicy::CoLocated, 1).unwrap();
        prop_assert!(c.total_replicas <= f.total_replicas);
    }

    #[test]
    fn windows_sum_to_whole(seed in any::<u64>(), cut in 0usize..=80) {
        let mut rng = common::rng(seed);
        let t = common::random_trace(&mut rng, 16, 4, 1, 80);
        let layout = common::random_layout(&mut rng, 0, 16, 8, 2);
        for policy in [ReplicaPolicy::PerExpert, ReplicaPolicy::CoLocated] {
            let whole = dispatch_counts(&t, &layout, 0, 0, 80, policy).unwrap();
            let a = dispatch_counts(&t, &layout, 0, 0, cut, policy).unwrap();
            let b = dispatch_counts(&t, &layout, 0, cut, 80, policy).unwrap();
            prop_assert_eq!(a.total_replicas() + b.total_replicas(), whole.total_replicas());
            for g in 0..2 {
                prop_assert_eq!(a.group_combine[g] + b.group_combine[g], whole.group_combine[g]);
                prop_assert!(whole.group_combine[g] <= whole.group_dispatch[g]);
            }
        }
    }
}

fn a_ct(a: &moechip::A2AAccount) -> u64 {
    a.total_replicas
}

#[test]
fn one_expert_per_chiplet_gives_k() {
    let mut model = ModelSpec::preset("qwen3-30b-a3b").unwrap();
    model.n_layers = 1;
    let mut hw = HardwareSpec::preset("qwen3-30b-a3b").unwrap();
    hw.n_moe_chiplets = model.n_routed_experts;
    let layout = baseline_layout(0, &model, &hw).unwrap();
    let mut rng = common::rng(9);
    let t = common::random_trace(&mut rng, 128, 8, 1, 500);
    for policy in [ReplicaPolicy::PerExpert, ReplicaPolicy::CoLocated] {
        let a =
            account_all_to_all(&t, &layout, 0, TokenSource::AttentionChiplet, policy, 1).unwrap();
        assert_eq!(a.c_t, 8.0);
    }
}

#[test]
fn uncovered_expert_and_bad_range() {
    let mut rng = common::rng(2);
    let t = common::random_trace(&mut rng, 8, 2, 1, 10);
    let mut layout = common::random_layout(&mut rng, 0, 8, 4, 2);
    assert!(matches!(
        dispatch_counts(&t, &layout, 0, 5, 11, ReplicaPolicy::CoLocated),
        Err(CommError::TokenRange { .. })
    ));
    layout.clusters[0].pop();
    assert!(matches!(
        account_all_to_all(
            &t,
            &layout,
            0,
            TokenSource::AttentionChiplet,
            ReplicaPolicy::CoLocated,
            1
        ),
        Err(CommError::UncoveredExpert { .. })
    ));
}
