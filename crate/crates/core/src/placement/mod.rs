//! Per-layer expert layouts: clustering, group allocation and cluster
//! loading priority.

mod allocate;
mod cluster;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use allocate::{
    allocate, allocate_exact, allocate_greedy, objective_units, AllocationMode, Assignment,
    EXACT_MAX_CLUSTERS, EXACT_MAX_GROUPS,
};
pub use cluster::cluster_experts;

use crate::hwmodel::HardwareSpec;
use crate::model::ModelSpec;
use crate::profiling::ExpertProfile;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("number of clusters must be >= 1")]
    ZeroClusters,
    #[error("{n_experts} experts cannot be split into {n_clusters} equal clusters; choose a chiplet count that divides the expert count")]
    NotDivisible { n_experts: usize, n_clusters: usize },
    #[error("{n_clusters} clusters cannot be split evenly into {n_groups} groups")]
    GroupsNotDivisible { n_clusters: usize, n_groups: usize },
    #[error("exact allocation supports at most {EXACT_MAX_CLUSTERS} clusters and {EXACT_MAX_GROUPS} groups (got {n_clusters}/{n_groups}); use greedy mode")]
    ExactTooLarge { n_clusters: usize, n_groups: usize },
    #[error("invalid layout for layer {layer}: {reason}")]
    InvalidLayout { layer: usize, reason: String },
    #[error("profile covers {profile} experts, expected {expected}")]
    ProfileShape { profile: usize, expected: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Mapping of one layer's experts onto chiplets and groups.
///
/// Cluster `x` lives on chiplet `chiplet_of_cluster[x]`; chiplet `c` belongs
/// to group `c / (n_chiplets / n_groups)`. `load_priority[g]` lists the
/// clusters of group `g` in DRAM loading order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLayout {
    pub layer: usize,
    pub clusters: Vec<Vec<usize>>,
    pub chiplet_of_cluster: Vec<usize>,
    pub load_priority: Vec<Vec<usize>>,
}

impl ExpertLayout {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_groups(&self) -> usize {
        self.load_priority.len()
    }

    pub fn chiplets_per_group(&self) -> usize {
        self.n_clusters() / self.n_groups().max(1)
    }

    pub fn group_of_chiplet(&self, chiplet: usize) -> usize {
        chiplet / self.chiplets_per_group()
    }

    pub fn group_of_cluster(&self, cluster: usize) -> usize {
        self.group_of_chiplet(self.chiplet_of_cluster[cluster])
    }

    /// Chiplet index of every expert.
    pub fn chiplet_of_expert(&self) -> Vec<usize> {
        let n: usize = self.clusters.iter().map(Vec::len).sum();
        let mut out = vec![usize::MAX; n];
        for (x, members) in self.clusters.iter().enumerate() {
            for &e in members {
                if e < n {
                    out[e] = self.chiplet_of_cluster[x];
                }
            }
        }
        out
    }

    /// Cluster hosted by every chiplet.
    pub fn cluster_on_chiplet(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_clusters()];
        for (x, &c) in self.chiplet_of_cluster.iter().enumerate() {
            out[c] = x;
        }
        out
    }

    /// Checks the partition, permutation and per-group ordering invariants.
    pub fn validate(
        &self,
        n_experts: usize,
        n_chiplets: usize,
        n_groups: usize,
    ) -> Result<(), PlacementError> {
        let bad = |reason: String| PlacementError::InvalidLayout {
            layer: self.layer,
            reason,
        };
        if self.clusters.len() != n_chiplets {
            return Err(bad(format!(
                "{} clusters for {n_chiplets} chiplets",
                self.clusters.len()
            )));
        }
        if n_groups == 0 || !n_chiplets.is_multiple_of(n_groups) {
            return Err(bad(format!("{n_chiplets} chiplets in {n_groups} groups")));
        }
        if !n_experts.is_multiple_of(n_chiplets) {
            return Err(bad(format!(
                "{n_experts} experts over {n_chiplets} clusters"
            )));
        }
        let size = n_experts / n_chiplets;
        let mut seen = vec![false; n_experts];
        for (x, members) in self.clusters.iter().enumerate() {
            if members.len() != size {
                return Err(bad(format!(
                    "cluster {x} has {} experts, expected {size}",
                    members.len()
                )));
            }
            for &e in members {
                if e >= n_experts {
                    return Err(bad(format!("expert {e} out of range")));
                }
                if seen[e] {
                    return Err(bad(format!("expert {e} appears twice")));
                }
                seen[e] = true;
            }
        }
        if self.chiplet_of_cluster.len() != n_chiplets {
            return Err(bad("chiplet_of_cluster has wrong length".into()));
        }
        let mut used = vec![false; n_chiplets];
        for &c in &self.chiplet_of_cluster {
            if c >= n_chiplets || used[c] {
                return Err(bad(format!("chiplet {c} reused or out of range")));
            }
            used[c] = true;
        }
        if self.load_priority.len() != n_groups {
            return Err(bad(format!(
                "load_priority lists {} groups, expected {n_groups}",
                self.load_priority.len()
            )));
        }
        let per_group = n_chiplets / n_groups;
        let mut listed = vec![false; n_chiplets];
        for (g, order) in self.load_priority.iter().enumerate() {
            if order.len() != per_group {
                return Err(bad(format!(
                    "group {g} orders {} clusters, expected {per_group}",
                    order.len()
                )));
            }
            for &x in order {
                if x >= n_chiplets || listed[x] {
                    return Err(bad(format!("cluster {x} listed twice or out of range")));
                }
                listed[x] = true;
                if self.chiplet_of_cluster[x] / per_group != g {
                    return Err(bad(format!(
                        "cluster {x} ordered in group {g} but hosted elsewhere"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Contiguous placement ignoring any profile: expert `i` on chiplet
/// `i / (n_experts / n_chiplets)`, clusters loaded in index order.
pub fn baseline_layout(
    layer: usize,
    model: &ModelSpec,
    hw: &HardwareSpec,
) -> Result<ExpertLayout, PlacementError> {
    let n = model.n_routed_experts;
    let nc = hw.n_moe_chiplets;
    if nc == 0 {
        return Err(PlacementError::ZeroClusters);
    }
    if !n.is_multiple_of(nc) {
        return Err(PlacementError::NotDivisible {
            n_experts: n,
            n_clusters: nc,
        });
    }
    if hw.n_groups == 0 || !nc.is_multiple_of(hw.n_groups) {
        return Err(PlacementError::GroupsNotDivisible {
            n_clusters: nc,
            n_groups: hw.n_groups,
        });
    }
    let size = n / nc;
    let per_group = nc / hw.n_groups;
    Ok(ExpertLayout {
        layer,
        clusters: (0..nc)
            .map(|x| (x * size..(x + 1) * size).collect())
            .collect(),
        chiplet_of_cluster: (0..nc).collect(),
        load_priority: (0..hw.n_groups)
            .map(|g| (g * per_group..(g + 1) * per_group).collect())
            .collect(),
    })
}

fn cluster_loads(clusters: &[Vec<usize>], profile: &ExpertProfile) -> Vec<u64> {
    clusters
        .iter()
        .map(|m| m.iter().map(|&e| profile.activations[e]).sum())
        .collect()
}

pub fn allocate_clusters(
    clusters: &[Vec<usize>],
    profile: &ExpertProfile,
    n_groups: usize,
    mode: AllocationMode,
) -> Result<Assignment, PlacementError> {
    allocate(&cluster_loads(clusters, profile), n_groups, mode)
}

/// Per group, clusters by descending aggregated workload; ties by the
/// lowest member index.
pub fn rank_loading_priority(
    clusters: &[Vec<usize>],
    assignment: &Assignment,
    profile: &ExpertProfile,
) -> Vec<Vec<usize>> {
    let loads = cluster_loads(clusters, profile);
    let min_member = |x: usize| clusters[x].iter().copied().min().unwrap_or(usize::MAX);
    (0..assignment.n_groups)
        .map(|g| {
            let mut members = assignment.clusters_in(g);
            members.sort_by(|&a, &b| {
                loads[b]
                    .cmp(&loads[a])
                    .then(min_member(a).cmp(&min_member(b)))
            });
            members
        })
        .collect()
}

/// Quality figures of a layout against a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementObjective {
    pub layer: usize,
    /// Mean co-activation count over within-cluster pairs.
    pub intra_collab: f64,
    /// Mean co-activation count over cross-cluster pairs.
    pub inter_collab: f64,
    /// L1 distance of group workloads from the uniform split.
    pub group_imbalance: f64,
}

pub fn intra_collab(clusters: &[Vec<usize>], c: &[Vec<u64>]) -> f64 {
    let (mut sum, mut pairs) = (0u128, 0u64);
    for m in clusters {
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                sum += c[i][j] as u128;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum as f64 / pairs as f64
    }
}

pub fn evaluate_layout(layout: &ExpertLayout, profile: &ExpertProfile) -> PlacementObjective {
    let n = profile.n_experts();
    let mut cluster_of = vec![0; n];
    for (x, m) in layout.clusters.iter().enumerate() {
        for &e in m {
            cluster_of[e] = x;
        }
    }
    let (mut cross, mut cross_pairs) = (0u128, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            if cluster_of[i] != cluster_of[j] {
                cross += profile.c[i][j] as u128;
                cross_pairs += 1;
            }
        }
    }
    let groups = layout.n_groups();
    let group_of_cluster: Vec<usize> = (0..layout.n_clusters())
        .map(|x| layout.group_of_cluster(x))
        .collect();
    let loads = cluster_loads(&layout.clusters, profile);
    let total: u64 = loads.iter().sum();
    let units = objective_units(&loads, &group_of_cluster, groups);
    PlacementObjective {
        layer: layout.layer,
        intra_collab: intra_collab(&layout.clusters, &profile.c),
        inter_collab: if cross_pairs == 0 {
            0.0
        } else {
            cross as f64 / cross_pairs as f64
        },
        group_imbalance: if total == 0 {
            0.0
        } else {
            units as f64 / (groups as f64 * total as f64)
        },
    }
}

/// Full two-stage placement of one layer: cluster by collaboration, balance
/// clusters over groups, then order each group's clusters heavy-first onto
/// ascending chiplet indices.
pub fn place_layer(
    profile: &ExpertProfile,
    hw: &HardwareSpec,
    mode: AllocationMode,
) -> Result<(ExpertLayout, PlacementObjective), PlacementError> {
    let clusters = cluster_experts(&profile.c, hw.n_moe_chiplets)?;
    let assignment = allocate_clusters(&clusters, profile, hw.n_groups, mode)?;
    let load_priority = rank_loading_priority(&clusters, &assignment, profile);
    let per_group = hw.chiplets_per_group();
    let mut chiplet_of_cluster = vec![0; clusters.len()];
    for (g, order) in load_priority.iter().enumerate() {
        for (rank, &x) in order.iter().enumerate() {
            chiplet_of_cluster[x] = g * per_group + rank;
        }
    }
    let layout = ExpertLayout {
        layer: profile.layer,
        clusters,
        chiplet_of_cluster,
        load_priority,
    };
    layout.validate(profile.n_experts(), hw.n_moe_chiplets, hw.n_groups)?;
    let objective = evaluate_layout(&layout, profile);
    Ok((layout, objective))
}

pub fn write_layouts(layouts: &[ExpertLayout], dir: &Path) -> Result<(), PlacementError> {
    let io = |path: &Path, e: std::io::Error| PlacementError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for l in layouts {
        let p = dir.join(layout_file_name(l.layer));
        fs::write(&p, l.to_json()).map_err(|e| io(&p, e))?;
    }
    Ok(())
}

pub fn layout_file_name(layer: usize) -> String {
    format!("layer_{layer:03}.json")
}

/// Reads `layer_NNN.json` for every layer of the model from `dir`.
pub fn read_layouts(dir: &Path, n_layers: usize) -> Result<Vec<ExpertLayout>, PlacementError> {
    (0..n_layers)
        .map(|layer| {
            let p = dir.join(layout_file_name(layer));
            let text = fs::read_to_string(&p).map_err(|e| PlacementError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            let l = ExpertLayout::from_json(&text).map_err(|e| PlacementError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            if l.layer != layer {
                return Err(PlacementError::InvalidLayout {
                    layer,
                    reason: format!("{} declares layer {}", p.display(), l.layer),
                });
            }
            Ok(l)
        })
        .collect()
}
