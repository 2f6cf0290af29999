//! Balanced assignment of expert clusters to chiplet groups.
//!
//! Every group receives exactly `n_clusters / n_groups` clusters and the
//! objective is the L1 distance between the per-group workload and the
//! uniform target `1 / n_groups`. Workloads are handled as integer
//! activation counts scaled by `n_groups`, so the objective is exact:
//! `units = sum_g |n_groups * load_g - total|` and the fractional L1 value is
//! `units / (n_groups * total)`.

use serde::{Deserialize, Serialize};

use super::PlacementError;

pub const EXACT_MAX_CLUSTERS: usize = 16;
pub const EXACT_MAX_GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMode {
    Exact,
    Greedy,
}

/// Cluster-to-group assignment (the binary matrix M, stored by column).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub n_groups: usize,
    pub group_of_cluster: Vec<usize>,
    /// Objective in scaled integer units.
    pub objective_units: u128,
    /// Sum of all cluster workloads in activation counts.
    pub total_load: u64,
}

impl Assignment {
    /// L1 imbalance in workload fractions.
    pub fn objective(&self) -> f64 {
        if self.total_load == 0 {
            return 0.0;
        }
        self.objective_units as f64 / (self.n_groups as f64 * self.total_load as f64)
    }

    /// `M[g][c] = 1` iff cluster `c` is in group `g`.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let mut m = vec![vec![0u8; self.group_of_cluster.len()]; self.n_groups];
        for (c, &g) in self.group_of_cluster.iter().enumerate() {
            m[g][c] = 1;
        }
        m
    }

    pub fn clusters_in(&self, group: usize) -> Vec<usize> {
        self.group_of_cluster
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Scaled L1 objective of a complete assignment.
pub fn objective_units(loads: &[u64], group_of_cluster: &[usize], n_groups: usize) -> u128 {
    let total: u64 = loads.iter().sum();
    let mut per_group = vec![0u128; n_groups];
    for (c, &g) in group_of_cluster.iter().enumerate() {
        per_group[g] += loads[c] as u128;
    }
    per_group
        .iter()
        .map(|&l| (l * n_groups as u128).abs_diff(total as u128))
        .sum()
}

fn check_shape(n_clusters: usize, n_groups: usize) -> Result<usize, PlacementError> {
    if n_groups == 0 || n_clusters == 0 || !n_clusters.is_multiple_of(n_groups) {
        return Err(PlacementError::GroupsNotDivisible {
            n_clusters,
            n_groups,
        });
    }
    Ok(n_clusters / n_groups)
}

/// Relabels groups in order of first appearance by cluster index.
fn canonical(group_of_cluster: &[usize], n_groups: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; n_groups];
    let mut next = 0;
    group_of_cluster
        .iter()
        .map(|&g| {
            if map[g] == usize::MAX {
                map[g] = next;
                next += 1;
            }
            map[g]
        })
        .collect()
}

/// Descending load, ties by ascending cluster index.
fn heavy_first(loads: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| loads[b].cmp(&loads[a]).then(a.cmp(&b)));
    order
}

/// Longest-processing-time rule under the per-group capacity.
pub fn allocate_greedy(loads: &[u64], n_groups: usize) -> Result<Assignment, PlacementError> {
    let cap = check_shape(loads.len(), n_groups)?;
    let mut group_load = vec![0u64; n_groups];
    let mut group_count = vec![0usize; n_groups];
    let mut group_of_cluster = vec![0; loads.len()];
    for c in heavy_first(loads) {
        let g = (0..n_groups)
            .filter(|&g| group_count[g] < cap)
            .min_by(|&a, &b| group_load[a].cmp(&group_load[b]).then(a.cmp(&b)))
            .expect("capacity remains");
        group_load[g] += loads[c];
        group_count[g] += 1;
        group_of_cluster[c] = g;
    }
    Ok(Assignment {
        n_groups,
        objective_units: objective_units(loads, &group_of_cluster, n_groups),
        group_of_cluster,
        total_load: loads.iter().sum(),
    })
}

struct Search<'a> {
    loads: &'a [u64],
    order: Vec<usize>,
    /// prefix[i] = scaled sum of the first i loads in `order`.
    prefix: Vec<u128>,
    n_groups: usize,
    cap: usize,
    total: u128,
    group_load: Vec<u128>,
    group_count: Vec<usize>,
    current: Vec<usize>,
    best_units: u128,
    best: Vec<usize>,
}

impl Search<'_> {
    fn scaled_range(&self, from: usize, to: usize) -> u128 {
        self.prefix[to] - self.prefix[from]
    }

    /// Lower bound on the final objective given clusters `order[pos..]` are
    /// still unassigned. Each group must take exactly its remaining slots,
    /// which bounds its final load between the smallest and the largest
    /// possible fills.
    fn bound(&self, pos: usize) -> u128 {
        let n = self.order.len();
        let mut lb = 0u128;
        for g in 0..self.n_groups {
            let slots = self.cap - self.group_count[g];
            let lo = self.group_load[g] + self.scaled_range(n - slots, n);
            let hi = self.group_load[g] + self.scaled_range(pos, pos + slots);
            if lo > self.total {
                lb += lo - self.total;
            } else if hi < self.total {
                lb += self.total - hi;
            }
        }
        lb
    }

    fn descend(&mut self, pos: usize) {
        if pos == self.order.len() {
            let units: u128 = self
                .group_load
                .iter()
                .map(|&l| l.abs_diff(self.total))
                .sum();
            if units < self.best_units {
                self.best_units = units;
                self.best = self.current.clone();
            }
            return;
        }
        if self.bound(pos) >= self.best_units {
            return;
        }
        let c = self.order[pos];
        let scaled = self.loads[c] as u128 * self.n_groups as u128;
        let mut tried_empty = false;
        for g in 0..self.n_groups {
            if self.group_count[g] == self.cap {
                continue;
            }
            // Empty groups are interchangeable.
            if self.group_count[g] == 0 {
                if tried_empty {
                    continue;
                }
                tried_empty = true;
            }
            self.group_load[g] += scaled;
            self.group_count[g] += 1;
            self.current[c] = g;
            self.descend(pos + 1);
            self.group_load[g] -= scaled;
            self.group_count[g] -= 1;
        }
    }
}

/// Global minimizer of the balanced L1 objective by depth-first branch and
/// bound, seeded with the greedy solution. Among equal objectives the
/// greedy solution, then the first found in search order, is kept.
pub fn allocate_exact(loads: &[u64], n_groups: usize) -> Result<Assignment, PlacementError> {
    let n_clusters = loads.len();
    let cap = check_shape(n_clusters, n_groups)?;
    if n_clusters > EXACT_MAX_CLUSTERS || n_groups > EXACT_MAX_GROUPS {
        return Err(PlacementError::ExactTooLarge {
            n_clusters,
            n_groups,
        });
    }
    let greedy = allocate_greedy(loads, n_groups)?;
    let order = heavy_first(loads);
    let mut prefix = vec![0u128; n_clusters + 1];
    for (i, &c) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + loads[c] as u128 * n_groups as u128;
    }
    let mut search = Search {
        loads,
        order,
        prefix,
        n_groups,
        cap,
        total: loads.iter().map(|&l| l as u128).sum(),
        group_load: vec![0; n_groups],
        group_count: vec![0; n_groups],
        current: vec![0; n_clusters],
        best_units: greedy.objective_units,
        best: greedy.group_of_cluster.clone(),
    };
    search.descend(0);
    let group_of_cluster = canonical(&search.best, n_groups);
    Ok(Assignment {
        n_groups,
        objective_units: search.best_units,
        group_of_cluster,
        total_load: greedy.total_load,
    })
}

pub fn allocate(
    loads: &[u64],
    n_groups: usize,
    mode: AllocationMode,
) -> Result<Assignment, PlacementError> {
    match mode {
        AllocationMode::Exact => allocate_exact(loads, n_groups),
        AllocationMode::Greedy => allocate_greedy(loads, n_groups),
    }
}
