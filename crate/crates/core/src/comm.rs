//! All-to-all dispatch/combine accounting under an expert layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::placement::ExpertLayout;
use crate::trace::{RoutingTrace, TraceError};

#[derive(Debug, Error)]
pub enum CommError {
    #[error("expert {expert} of layer {layer} is not placed by the layout")]
    UncoveredExpert { layer: usize, expert: usize },
    #[error("layout is for layer {layout_layer}, accounting requested layer {layer}")]
    LayerMismatch { layer: usize, layout_layer: usize },
    #[error("token range {start}..{end} exceeds the trace's {n_tokens} tokens")]
    TokenRange {
        start: usize,
        end: usize,
        n_tokens: usize,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Where a token's hidden state lives before dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    /// Every token starts on the attention chiplet, so every replica crosses
    /// the package network.
    AttentionChiplet,
    /// Token `t` starts on MoE chiplet `t % n_chiplets`; replicas for experts
    /// on that chiplet stay local.
    RoundRobin,
}

/// How many replicas a token needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaPolicy {
    /// One replica per selected expert, regardless of co-location.
    PerExpert,
    /// One replica per distinct chiplet hosting a selected expert; combine
    /// results are merged at each group's switch.
    CoLocated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2AAccount {
    pub layer: usize,
    pub n_tokens: u64,
    pub top_k: usize,
    pub policy: ReplicaPolicy,
    /// Mean replicas per token.
    pub c_t: f64,
    pub min_replicas: usize,
    pub max_replicas: usize,
    pub total_replicas: u64,
    pub inter_chiplet_tokens: u64,
    pub intra_chiplet_tokens: u64,
    /// Dispatch leg only.
    pub bytes_dispatched: u64,
    /// Combine leg after switch aggregation (if any).
    pub bytes_combined: u64,
}

impl A2AAccount {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_dispatched + self.bytes_combined
    }
}

/// Per-chiplet and per-group traffic of a contiguous token range.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DispatchCounts {
    pub n_tokens: u64,
    /// Tokens routed to each expert.
    pub expert_tokens: Vec<u64>,
    /// Token-expert pairs hosted on each chiplet.
    pub chiplet_pairs: Vec<u64>,
    /// Replicas delivered to each chiplet under the policy.
    pub chiplet_replicas: Vec<u64>,
    /// Replicas entering each group's switch from the root, counted per
    /// token independently of `chiplet_replicas`.
    pub group_dispatch: Vec<u64>,
    /// Results leaving each group's switch towards the root.
    pub group_combine: Vec<u64>,
    /// Replica count histogram input: replicas of each token.
    pub replicas_per_token: Vec<u32>,
}

impl DispatchCounts {
    pub fn total_replicas(&self) -> u64 {
        self.replicas_per_token.iter().map(|&r| r as u64).sum()
    }
}

fn expert_maps(
    layout: &ExpertLayout,
    n_experts: usize,
) -> Result<(Vec<usize>, Vec<usize>), CommError> {
    let chiplet = layout.chiplet_of_expert();
    let mut chiplet_of = vec![usize::MAX; n_experts];
    for (e, slot) in chiplet_of.iter_mut().enumerate() {
        match chiplet.get(e) {
            Some(&c) if c != usize::MAX => *slot = c,
            _ => {
                return Err(CommError::UncoveredExpert {
                    layer: layout.layer,
                    expert: e,
                })
            }
        }
    }
    let group_of = chiplet_of
        .iter()
        .map(|&c| layout.group_of_chiplet(c))
        .collect();
    Ok((chiplet_of, group_of))
}

/// Counts dispatch and combine traffic of tokens `start..end` of `layer`.
pub fn dispatch_counts(
    trace: &RoutingTrace,
    layout: &ExpertLayout,
    layer: usize,
    start: usize,
    end: usize,
    policy: ReplicaPolicy,
) -> Result<DispatchCounts, CommError> {
    trace.check_layer(layer)?;
    if start > end || end > trace.n_tokens() {
        return Err(CommError::TokenRange {
            start,
            end,
            n_tokens: trace.n_tokens(),
        });
    }
    let n_experts = trace.n_experts();
    let (chiplet_of, group_of) = expert_maps(layout, n_experts)?;
    let n_chiplets = layout.n_clusters();
    let n_groups = layout.n_groups();
    let k = trace.top_k();
    let mut out = DispatchCounts {
        n_tokens: (end - start) as u64,
        expert_tokens: vec![0; n_experts],
        chiplet_pairs: vec![0; n_chiplets],
        chiplet_replicas: vec![0; n_chiplets],
        group_dispatch: vec![0; n_groups],
        group_combine: vec![0; n_groups],
        replicas_per_token: Vec::with_capacity(end - start),
    };
    let sels = &trace.layer_selections(layer)[start * k..end * k];
    let mut chiplet_seen = vec![false; n_chiplets];
    let mut group_seen = vec![false; n_groups];
    for sel in sels.chunks_exact(k) {
        let mut replicas = 0u32;
        for &e in sel {
            let e = e as usize;
            let (c, g) = (chiplet_of[e], group_of[e]);
            out.expert_tokens[e] += 1;
            out.chiplet_pairs[c] += 1;
            match policy {
                ReplicaPolicy::PerExpert => {
                    replicas += 1;
                    out.chiplet_replicas[c] += 1;
                    out.group_dispatch[g] += 1;
                    out.group_combine[g] += 1;
                }
                ReplicaPolicy::CoLocated => {
                    if !chiplet_seen[c] {
                        chiplet_seen[c] = true;
                        replicas += 1;
                        out.chiplet_replicas[c] += 1;
                        out.group_dispatch[g] += 1;
                    }
                    if !group_seen[g] {
                        group_seen[g] = true;
                        out.group_combine[g] += 1;
                    }
                }
            }
        }
        for &e in sel {
            chiplet_seen[chiplet_of[e as usize]] = false;
            group_seen[group_of[e as usize]] = false;
        }
        out.replicas_per_token.push(replicas);
    }
    Ok(out)
}

/// Whole-layer account. `token_bytes` is the size of one hidden state.
pub fn account_all_to_all(
    trace: &RoutingTrace,
    layout: &ExpertLayout,
    layer: usize,
    source: TokenSource,
    policy: ReplicaPolicy,
    token_bytes: u64,
) -> Result<A2AAccount, CommError> {
    if layout.layer != layer {
        return Err(CommError::LayerMismatch {
            layer,
            layout_layer: layout.layer,
        });
    }
    let counts = dispatch_counts(trace, layout, layer, 0, trace.n_tokens(), policy)?;
    let total = counts.total_replicas();
    let intra = match source {
        TokenSource::AttentionChiplet => 0,
        TokenSource::RoundRobin => {
            let (chiplet_of, _) = expert_maps(layout, trace.n_experts())?;
            let n_chiplets = layout.n_clusters();
            let mut local = 0u64;
            for t in 0..trace.n_tokens() {
                let home = t % n_chiplets;
                let on_home = trace
                    .selection(layer, t)
                    .iter()
                    .filter(|&&e| chiplet_of[e as usize] == home)
                    .count() as u64;
                local += match policy {
                    ReplicaPolicy::PerExpert => on_home,
                    ReplicaPolicy::CoLocated => on_home.min(1),
                };
            }
            local
        }
    };
    let inter = total - intra;
    let n = counts.n_tokens;
    let combine_units: u64 = match (policy, source) {
        (ReplicaPolicy::PerExpert, _) => inter,
        (ReplicaPolicy::CoLocated, TokenSource::AttentionChiplet) => {
            counts.group_combine.iter().sum()
        }
        // Results merged at switches still travel once per group, but local
        // chiplet results never leave the chiplet.
        (ReplicaPolicy::CoLocated, TokenSource::RoundRobin) => {
            counts.group_combine.iter().sum::<u64>().min(inter)
        }
    };
    Ok(A2AAccount {
        layer,
        n_tokens: n,
        top_k: trace.top_k(),
        policy,
        c_t: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        min_replicas: counts.replicas_per_token.iter().copied().min().unwrap_or(0) as usize,
        max_replicas: counts.replicas_per_token.iter().copied().max().unwrap_or(0) as usize,
        total_replicas: total,
        inter_chiplet_tokens: inter,
        intra_chiplet_tokens: intra,
        bytes_dispatched: inter * token_bytes,
        bytes_combined: combine_units * token_bytes,
    })
}

/// The three quantities of the replication bound with the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub holds: bool,
    pub inter_chiplet_tokens: u64,
    /// `C_T * n_tokens`, held as the exact replica total.
    pub ct_times_tokens: u64,
    pub k_times_tokens: u64,
}

pub fn verify_bound(account: &A2AAccount, k: usize) -> BoundCertificate {
    let k_n = k as u64 * account.n_tokens;
    BoundCertificate {
        holds: account.inter_chiplet_tokens <= account.total_replicas
            && account.total_replicas <= k_n,
        inter_chiplet_tokens: account.inter_chiplet_tokens,
        ct_times_tokens: account.total_replicas,
        k_times_tokens: k_n,
    }
}

/// One CSV/JSON row per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2ARow {
    pub layer: usize,
    pub c_t: f64,
    pub inter_chiplet_bytes: u64,
    pub combine_bytes: u64,
}

impl From<&A2AAccount> for A2ARow {
    fn from(a: &A2AAccount) -> Self {
        A2ARow {
            layer: a.layer,
            c_t: a.c_t,
            inter_chiplet_bytes: a.bytes_dispatched,
            combine_bytes: a.bytes_combined,
        }
    }
}
