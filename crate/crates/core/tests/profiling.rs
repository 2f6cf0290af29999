mod common;

use moechip::profiling::{profile_layer, profile_layer_chunked, LayerCounts};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn profile_invariants(seed in any::<u64>(), n_e in 2usize..33, k in 1usize..5, tokens in 1usize..200) {
        let k = k.min(n_e);
        let mut rng = common::rng(seed);
        let t = common::random_trace(&mut rng, n_e, k, 1, tokens);
        let p = profile_layer(&t, 0).unwrap();
        // Every token contributes k activations and k(k-1)/2 pairs.
        prop_assert_eq!(p.activations.iter().sum::<u64>(), (tokens * k) as u64);
        let pairs: u64 = (0..n_e).flat_map(|i| (i + 1..n_e).map(move |j| (i, j))).map(|(i, j)| p.c[i][j]).sum();
        prop_assert_eq!(pairs, (tokens * k * (k - 1) / 2) as u64);
        let vsum: f64 = p.v.iter().sum();
        prop_assert!((vsum - 1.0).abs() < 1e-9);
        for i in 0..n_e {
            prop_assert_eq!(p.c[i][i], 0);
            for j in 0..n_e {
                prop_assert_eq!(p.c[i][j], p.c[j][i]);
                prop_assert!(p.c[i][j] <= p.activations[i].min(p.activations[j]));
                prop_assert!((0.0..=1.0).contains(&p.p[i][j]));
            }
        }
        if k >= 2 {
            let max = p.p.iter().flatten().cloned().fold(0.0, f64::max);
            prop_assert_eq!(max, 1.0);
        } else {
            prop_assert!(p.is_degenerate());
        }
    }

    #[test]
    fn merge_matches_single_pass(seed in any::<u64>(), split in 0usize..100, chunk in 1usize..64) {
        let mut rng = common::rng(seed);
        let t = common::random_trace(&mut rng, 16, 4, 1, 100);
        let whole = profile_layer(&t, 0).unwrap();
        let sels = t.layer_selections(0);
        let mut a = LayerCounts::new(16);
        let mut b = LayerCounts::new(16);
        a.accumulate(&sels[..split * 4], 4);
        b.accumulate(&sels[split * 4..], 4);
        a.merge(&b).unwrap();
        prop_assert_eq!(a.finish(0).unwrap(), whole.clone());
        prop_assert_eq!(profile_layer_chunked(&t, 0, chunk).unwrap(), whole);
    }
}

#[test]
fn merge_rejects_shape_mismatch() {
    let mut a = LayerCounts::new(4);
    assert!(a.merge(&LayerCounts::new(5)).is_err());
}

#[test]
fn hand_counts() {
    let t = moechip::RoutingTrace::from_parts(4, 2, 1, 3, vec![0, 1, 0, 1, 2, 3], vec![0.5; 6])
        .unwrap();
    let p = profile_layer(&t, 0).unwrap();
    assert_eq!(p.activations, vec![2, 2, 1, 1]);
    assert_eq!(p.v, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]);
    assert_eq!(p.c[0][1], 2);
    assert_eq!(p.c[2][3], 1);
    assert_eq!(p.p[2][3], 0.5);
}
