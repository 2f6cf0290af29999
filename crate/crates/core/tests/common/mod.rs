#![allow(dead_code, clippy::needless_range_loop)]

use moechip::placement::ExpertLayout;
use moechip::{HardwareSpec, ModelSpec, RoutingTrace};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random top-k trace with arbitrary normalized gates.
pub fn random_trace(
    rng: &mut impl Rng,
    n_experts: usize,
    k: usize,
    n_layers: usize,
    n_tokens: usize,
) -> RoutingTrace {
    let mut experts = Vec::with_capacity(n_layers * n_tokens * k);
    let mut gates = Vec::with_capacity(n_layers * n_tokens * k);
    let pool: Vec<u16> = (0..n_experts as u16).collect();
    for _ in 0..n_layers * n_tokens {
        let pick: Vec<u16> = pool.choose_multiple(rng, k).copied().collect();
        let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.05f32..1.0)).collect();
        let sum: f32 = raw.iter().sum();
        experts.extend(pick);
        gates.extend(raw.iter().map(|g| g / sum));
    }
    RoutingTrace::from_parts(n_experts, k, n_layers, n_tokens, experts, gates).unwrap()
}

/// Random partition of experts into equal clusters, randomly mapped onto
/// chiplets, with priority order following chiplet index.
pub fn random_layout(
    rng: &mut impl Rng,
    layer: usize,
    n_experts: usize,
    n_chiplets: usize,
    n_groups: usize,
) -> ExpertLayout {
    let size = n_experts / n_chiplets;
    let mut experts: Vec<usize> = (0..n_experts).collect();
    experts.shuffle(rng);
    let clusters: Vec<Vec<usize>> = experts.chunks(size).map(|c| c.to_vec()).collect();
    let mut chiplet_of_cluster: Vec<usize> = (0..n_chiplets).collect();
    chiplet_of_cluster.shuffle(rng);
    let per_group = n_chiplets / n_groups;
    let mut by_chiplet = vec![0; n_chiplets];
    for (x, &c) in chiplet_of_cluster.iter().enumerate() {
        by_chiplet[c] = x;
    }
    let load_priority = (0..n_groups)
        .map(|g| by_chiplet[g * per_group..(g + 1) * per_group].to_vec())
        .collect();
    let layout = ExpertLayout {
        layer,
        clusters,
        chiplet_of_cluster,
        load_priority,
    };
    layout.validate(n_experts, n_chiplets, n_groups).unwrap();
    layout
}

/// Two-layer OLMoE-shaped model on its own preset system.
pub fn small_system() -> (ModelSpec, HardwareSpec) {
    let mut model = ModelSpec::preset("olmoe-1b-7b").unwrap();
    model.n_layers = 2;
    (model, HardwareSpec::preset("olmoe-1b-7b").unwrap())
}

/// Independent C_T: mean number of distinct chiplets touched per token.
pub fn oracle_c_t(trace: &RoutingTrace, layout: &ExpertLayout, layer: usize) -> (u64, u64) {
    let mut chiplet_of = vec![usize::MAX; trace.n_experts()];
    for (x, members) in layout.clusters.iter().enumerate() {
        for &e in members {
            chiplet_of[e] = layout.chiplet_of_cluster[x];
        }
    }
    let mut total = 0u64;
    for t in 0..trace.n_tokens() {
        let mut cs: Vec<usize> = trace
            .selection(layer, t)
            .iter()
            .map(|&e| chiplet_of[e as usize])
            .collect();
        cs.sort_unstable();
        cs.dedup();
        total += cs.len() as u64;
    }
    (total, trace.n_tokens() as u64)
}

/// Straight transcription of the clustering pseudocode using mean
/// co-activation over explicit candidate sets. Kept independent of the
/// library's integer-sum formulation.
pub fn oracle_cluster(c: &[Vec<u64>], n_clusters: usize) -> Vec<Vec<usize>> {
    use std::collections::BTreeSet;
    let n = c.len();
    let size = n / n_clusters;
    let mean = |e: usize, set: &[usize]| -> f64 {
        set.iter().map(|&s| c[e][s] as f64).sum::<f64>() / set.len() as f64
    };
    let mut remaining: BTreeSet<usize> = (0..n).collect();
    let mut selected: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for ci in 0..n_clusters {
        let mut cluster = Vec::new();
        if ci == 0 {
            let mut best: Option<(u64, usize, usize)> = None;
            for i in 0..n {
                for j in i + 1..n {
                    if best.is_none_or(|(v, _, _)| c[i][j] > v) {
                        best = Some((c[i][j], i, j));
                    }
                }
            }
            let (_, i, j) = best.unwrap_or((0, 0, 0));
            cluster.push(i);
            if size >= 2 {
                cluster.push(j);
            }
        } else {
            let mut best = f64::INFINITY;
            let mut pick = usize::MAX;
            for &e in &remaining {
                let m = mean(e, &selected);
                if m < best {
                    best = m;
                    pick = e;
                }
            }
            cluster.push(pick);
        }
        for e in &cluster {
            remaining.remove(e);
        }
        while cluster.len() < size {
            let mut best = f64::NEG_INFINITY;
            let mut pick = usize::MAX;
            for &e in &remaining {
                let m = mean(e, &cluster);
                if m > best {
                    best = m;
                    pick = e;
                }
            }
            remaining.remove(&pick);
            cluster.push(pick);
        }
        selected.extend(&cluster);
        out.push(cluster);
    }
    out
}

/// Minimum of sum_g |N_g * load_g - total| over every assignment that puts
/// exactly `n / n_groups` clusters in each group.
pub fn exhaustive_allocation(loads: &[u64], n_groups: usize) -> u128 {
    fn go(
        i: usize,
        loads: &[u64],
        cap: usize,
        count: &mut [usize],
        sum: &mut [u128],
        best: &mut u128,
    ) {
        if i == loads.len() {
            let total: u128 = sum.iter().sum();
            let g = sum.len() as u128;
            let obj = sum.iter().map(|&s| (s * g).abs_diff(total)).sum();
            *best = (*best).min(obj);
            return;
        }
        for g in 0..count.len() {
            if count[g] < cap {
                count[g] += 1;
                sum[g] += loads[i] as u128;
                go(i + 1, loads, cap, count, sum, best);
                count[g] -= 1;
                sum[g] -= loads[i] as u128;
            }
        }
    }
    let mut best = u128::MAX;
    go(
        0,
        loads,
        loads.len() / n_groups,
        &mut vec![0; n_groups],
        &mut vec![0; n_groups],
        &mut best,
    );
    best
}

/// Random symmetric co-activation counts with a small value range, so ties
/// are frequent.
pub fn random_coactivation(rng: &mut impl Rng, n: usize, max: u64) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0..=max);
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    c
}
