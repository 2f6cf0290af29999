//! Builds the task graph of a training step and evaluates it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::engine::{self, Span, Task, TaskId};
use super::report::{Breakdown, LayerRow, StepReport, WorkTotals};
use super::{RunConfig, SimError};
use crate::comm::{dispatch_counts, DispatchCounts};
use crate::hwmodel::{
    compute_latency, energy_of, transfer_latency, Activity, Channel, ChipletClass, HardwareSpec,
    PowerComponent,
};
use crate::model::ModelSpec;
use crate::placement::ExpertLayout;
use crate::trace::RoutingTrace;

/// Relative slack for floating-point comparisons in invariant checks.
const REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AttnLoad,
    AttnCompute,
    AttnSave,
    DispatchRoot,
    DispatchLeaf,
    ExpertLoad,
    ExpertCompute,
    ExpertSave,
    CombineLeaf,
    CombineRoot,
    GradDispatchRoot,
    GradDispatchLeaf,
    BwdExpertLoad,
    BwdExpertActRead,
    BwdExpertCompute,
    BwdExpertGradWrite,
    GradCombineLeaf,
    GradCombineRoot,
    BwdAttnLoad,
    BwdAttnActRead,
    BwdAttnCompute,
    BwdAttnGradWrite,
    Barrier,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Category {
    AttentionCompute,
    ExpertCompute,
    WeightStream,
    A2a,
    Combine,
    None,
}

impl Phase {
    fn category(self) -> Category {
        use Phase::*;
        match self {
            AttnCompute | BwdAttnCompute | BwdAttnActRead => Category::AttentionCompute,
            ExpertCompute | BwdExpertCompute | BwdExpertActRead => Category::ExpertCompute,
            AttnLoad | AttnSave | ExpertLoad | ExpertSave | BwdExpertLoad | BwdExpertGradWrite
            | BwdAttnLoad | BwdAttnGradWrite => Category::WeightStream,
            DispatchRoot | DispatchLeaf | GradDispatchRoot | GradDispatchLeaf => Category::A2a,
            CombineLeaf | CombineRoot | GradCombineLeaf | GradCombineRoot => Category::Combine,
            Barrier => Category::None,
        }
    }

    pub fn is_backward(self) -> bool {
        use Phase::*;
        matches!(
            self,
            GradDispatchRoot
                | GradDispatchLeaf
                | BwdExpertLoad
                | BwdExpertActRead
                | BwdExpertCompute
                | BwdExpertGradWrite
                | GradCombineLeaf
                | GradCombineRoot
                | BwdAttnLoad
                | BwdAttnActRead
                | BwdAttnCompute
                | BwdAttnGradWrite
        )
    }

    fn is_dram(self) -> bool {
        self.category() == Category::WeightStream
    }

    fn is_nop(self) -> bool {
        matches!(self.category(), Category::A2a | Category::Combine)
    }

    pub fn as_str(self) -> &'static str {
        use Phase::*;
        match self {
            AttnLoad => "attn_load",
            AttnCompute => "attn_compute",
            AttnSave => "attn_save",
            DispatchRoot => "dispatch_root",
            DispatchLeaf => "dispatch_leaf",
            ExpertLoad => "expert_load",
            ExpertCompute => "expert_compute",
            ExpertSave => "expert_save",
            CombineLeaf => "combine_leaf",
            CombineRoot => "combine_root",
            GradDispatchRoot => "grad_dispatch_root",
            GradDispatchLeaf => "grad_dispatch_leaf",
            BwdExpertLoad => "bwd_expert_load",
            BwdExpertActRead => "bwd_expert_act_read",
            BwdExpertCompute => "bwd_expert_compute",
            BwdExpertGradWrite => "bwd_expert_grad_write",
            GradCombineLeaf => "grad_combine_leaf",
            GradCombineRoot => "grad_combine_root",
            BwdAttnLoad => "bwd_attn_load",
            BwdAttnActRead => "bwd_attn_act_read",
            BwdAttnCompute => "bwd_attn_compute",
            BwdAttnGradWrite => "bwd_attn_grad_write",
            Barrier => "barrier",
        }
    }
}

/// Serialized hardware resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    AttentionChiplet,
    AttentionDram,
    MoeChiplet(usize),
    GroupDram(usize),
    /// Edge between the root and a group's switch.
    RootEdge(usize),
    /// Edge between a switch and one MoE chiplet.
    LeafEdge(usize),
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::AttentionChiplet => write!(f, "attention_chiplet"),
            Resource::AttentionDram => write!(f, "dram_channel_attn"),
            Resource::MoeChiplet(c) => write!(f, "moe_chiplet[{c}]"),
            Resource::GroupDram(g) => write!(f, "dram_channel[{g}]"),
            Resource::RootEdge(g) => write!(f, "nop_edge[root-{g}]"),
            Resource::LeafEdge(c) => write!(f, "nop_edge[leaf-{c}]"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n_chiplets: usize,
    n_groups: usize,
}

impl Layout {
    fn count(self) -> usize {
        2 + 2 * self.n_chiplets + 2 * self.n_groups
    }
    fn attn(self) -> usize {
        0
    }
    fn attn_dram(self) -> usize {
        1
    }
    fn moe(self, c: usize) -> usize {
        2 + c
    }
    fn dram(self, g: usize) -> usize {
        2 + self.n_chiplets + g
    }
    fn root(self, g: usize) -> usize {
        2 + self.n_chiplets + self.n_groups + g
    }
    fn leaf(self, c: usize) -> usize {
        2 + self.n_chiplets + 2 * self.n_groups + c
    }
    fn resource(self, r: usize) -> Resource {
        let (nc, ng) = (self.n_chiplets, self.n_groups);
        match r {
            0 => Resource::AttentionChiplet,
            1 => Resource::AttentionDram,
            r if r < 2 + nc => Resource::MoeChiplet(r - 2),
            r if r < 2 + nc + ng => Resource::GroupDram(r - 2 - nc),
            r if r < 2 + nc + 2 * ng => Resource::RootEdge(r - 2 - nc - ng),
            r => Resource::LeafEdge(r - 2 - nc - 2 * ng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Info {
    phase: Phase,
    step: u32,
    layer: u32,
    micro_batch: u32,
    bytes: u64,
    flops: f64,
}

/// One executed task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub resource: String,
    pub kind: Phase,
    pub step: u32,
    pub layer: u32,
    pub micro_batch: u32,
    pub bytes: u64,
    pub flops: f64,
}

pub struct Simulation {
    pub report: StepReport,
    tasks: Vec<Task<Info>>,
    spans: Vec<Span>,
    layout: Layout,
}

impl Simulation {
    /// Executed resource tasks ordered by start time, then resource.
    pub fn timeline(&self) -> Vec<TimelineEvent> {
        let mut ids: Vec<usize> = (0..self.tasks.len())
            .filter(|&i| {
                self.tasks[i].resource.is_some() && self.spans[i].end > self.spans[i].start
            })
            .collect();
        ids.sort_by(|&a, &b| {
            self.spans[a]
                .start
                .total_cmp(&self.spans[b].start)
                .then(self.tasks[a].resource.cmp(&self.tasks[b].resource))
                .then(a.cmp(&b))
        });
        ids.into_iter()
            .map(|i| {
                let t = &self.tasks[i];
                TimelineEvent {
                    start_s: self.spans[i].start,
                    end_s: self.spans[i].end,
                    resource: self
                        .layout
                        .resource(t.resource.expect("filtered"))
                        .to_string(),
                    kind: t.kind.phase,
                    step: t.kind.step,
                    layer: t.kind.layer,
                    micro_batch: t.kind.micro_batch,
                    bytes: t.kind.bytes,
                    flops: t.kind.flops,
                }
            })
            .collect()
    }

    /// `time_s,resource,kind,duration_s` rows for Gantt plotting.
    pub fn timeline_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            time_s: f64,
            resource: &'a str,
            kind: &'static str,
            duration_s: f64,
            layer: u32,
            micro_batch: u32,
        }
        let events = self.timeline();
        let rows: Vec<Row> = events
            .iter()
            .map(|e| Row {
                time_s: e.start_s,
                resource: &e.resource,
                kind: e.kind.as_str(),
                duration_s: e.end_s - e.start_s,
                layer: e.layer,
                micro_batch: e.micro_batch,
            })
            .collect();
        super::report::to_csv(&rows)
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }
}

struct Builder {
    tasks: Vec<Task<Info>>,
    serial: bool,
    step_gate: Option<TaskId>,
    phase_gate: Option<TaskId>,
    phase_ids: Vec<TaskId>,
}

impl Builder {
    fn add(
        &mut self,
        resource: Option<usize>,
        duration: f64,
        mut deps: Vec<TaskId>,
        info: Info,
    ) -> TaskId {
        if self.serial {
            if let Some(g) = self.phase_gate {
                deps.push(g);
            }
        } else if deps.is_empty() {
            if let Some(g) = self.step_gate {
                deps.push(g);
            }
        }
        let id = self.tasks.len();
        self.tasks.push(Task {
            resource,
            duration,
            deps,
            kind: info,
        });
        if self.serial && resource.is_some() {
            self.phase_ids.push(id);
        }
        id
    }

    fn barrier(&mut self, deps: Vec<TaskId>, step: u32) -> TaskId {
        self.add(
            None,
            0.0,
            deps,
            Info {
                phase: Phase::Barrier,
                step,
                layer: 0,
                micro_batch: 0,
                bytes: 0,
                flops: 0.0,
            },
        )
    }

    /// In serial mode, everything after this point waits for every task
    /// added since the previous call.
    fn end_phase(&mut self, step: u32) {
        if self.serial && !self.phase_ids.is_empty() {
            let deps = std::mem::take(&mut self.phase_ids);
            let b = self.barrier(deps, step);
            self.phase_gate = Some(b);
        }
    }
}

struct Costs {
    attn_weight_bytes: u64,
    expert_weight_bytes: u64,
    token_bytes: u64,
    attn_act_bytes: u64,
    expert_act_bytes: u64,
    attn_flops_per_token: f64,
    expert_flops_per_token: f64,
}

/// Simulates `run.n_steps` training steps.
///
/// `layouts[l]` places layer `l`. The method in `run` picks overlap,
/// replica policy and loading order; the caller supplies the layout that
/// goes with it.
pub fn simulate_step(
    model: &ModelSpec,
    hw: &HardwareSpec,
    run: &RunConfig,
    layouts: &[ExpertLayout],
    trace: &RoutingTrace,
) -> Result<Simulation, SimError> {
    model.validate()?;
    hw.validate()?;
    run.validate()?;
    trace.check_model(model)?;
    if layouts.len() != model.n_layers {
        return Err(SimError::LayoutMismatch(format!(
            "{} layouts for {} layers",
            layouts.len(),
            model.n_layers
        )));
    }
    for (l, layout) in layouts.iter().enumerate() {
        if layout.layer != l {
            return Err(SimError::LayoutMismatch(format!(
                "layout at position {l} declares layer {}",
                layout.layer
            )));
        }
        layout.validate(model.n_routed_experts, hw.n_moe_chiplets, hw.n_groups)?;
    }

    let method = run.method;
    let policy = method.policy();
    let res = Layout {
        n_chiplets: hw.n_moe_chiplets,
        n_groups: hw.n_groups,
    };
    let cpg = hw.chiplets_per_group();
    let n_layers = model.n_layers;
    let n_mb = run.micro_batches;
    let per_step = trace.n_tokens().min(run.tokens_per_step());
    let costs = Costs {
        attn_weight_bytes: model.attention_weight_bytes(),
        expert_weight_bytes: model.expert_weight_bytes(),
        token_bytes: model.token_bytes(),
        attn_act_bytes: model.attention_activation_bytes_per_token(),
        expert_act_bytes: model.expert_activation_bytes_per_token(),
        attn_flops_per_token: model.attention_flops_per_token(run.seq_len),
        expert_flops_per_token: model.expert_flops_per_token(),
    };
    let xfer = |bytes: u64, ch: Channel| transfer_latency(bytes, ch, hw).latency_s;
    let comp = |flops: f64, class: ChipletClass| compute_latency(flops, class, hw).latency_s;
    let sram_capacity = hw.sram_capacity_per_chiplet();
    let cluster_weight_bytes =
        costs.expert_weight_bytes * (model.n_routed_experts / hw.n_moe_chiplets) as u64;

    // Per-cluster loading order of every group, per layer.
    let load_orders: Vec<Vec<Vec<usize>>> = layouts
        .iter()
        .map(|l| {
            if method.priority_loading() {
                l.load_priority.clone()
            } else {
                (0..hw.n_groups)
                    .map(|g| {
                        let mut v: Vec<usize> = (0..l.n_clusters())
                            .filter(|&x| l.group_of_cluster(x) == g)
                            .collect();
                        v.sort_unstable();
                        v
                    })
                    .collect()
            }
        })
        .collect();

    let mut b = Builder {
        tasks: Vec::new(),
        serial: !method.overlaps(),
        step_gate: None,
        phase_gate: None,
        phase_ids: Vec::new(),
    };
    let mut switch_checks: Vec<(Vec<TaskId>, Vec<TaskId>, bool)> = Vec::new();
    let mut layer_replicas = vec![0u64; n_layers];
    let mut layer_tokens = vec![0u64; n_layers];
    let mut layer_dispatch = vec![0u64; n_layers];
    let mut layer_combine = vec![0u64; n_layers];
    let mut layer_flops = vec![0f64; n_layers];

    for step in 0..run.n_steps {
        let st = step as u32;
        let offset = if trace.n_tokens() == per_step {
            0
        } else {
            (step * per_step) % (trace.n_tokens() - per_step + 1)
        };
        let bounds: Vec<(usize, usize)> = (0..n_mb)
            .map(|m| {
                (
                    offset + m * per_step / n_mb,
                    offset + (m + 1) * per_step / n_mb,
                )
            })
            .collect();
        let counts: Vec<Vec<DispatchCounts>> = (0..n_layers)
            .map(|l| {
                bounds
                    .iter()
                    .map(|&(a, e)| dispatch_counts(trace, &layouts[l], l, a, e, policy))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;

        // SRAM capacity of every micro-batch working set.
        let samples = run.samples_per_micro_batch() as u64;
        for (l, per_mb) in counts.iter().enumerate() {
            for cnt in per_mb {
                let attn =
                    model.attention_sram_footprint(cnt.n_tokens, samples, run.seq_len as u64)
                        + costs.attn_weight_bytes;
                let attn_cap = sram_capacity * hw.attention_chiplets as u64;
                if attn > attn_cap {
                    return Err(SimError::SramCapacity {
                        layer: l,
                        unit: "attention chiplet".into(),
                        required: attn,
                        capacity: attn_cap,
                    });
                }
                for (x, members) in layouts[l].clusters.iter().enumerate() {
                    let hottest = members
                        .iter()
                        .map(|&e| cnt.expert_tokens[e])
                        .max()
                        .unwrap_or(0);
                    let need = cluster_weight_bytes + model.expert_sram_footprint(hottest);
                    if need > sram_capacity {
                        return Err(SimError::SramCapacity {
                            layer: l,
                            unit: format!("moe chiplet {}", layouts[l].chiplet_of_cluster[x]),
                            required: need,
                            capacity: sram_capacity,
                        });
                    }
                }
            }
        }

        let info = |phase: Phase, l: usize, m: usize, bytes: u64, flops: f64| Info {
            phase,
            step: st,
            layer: l as u32,
            micro_batch: m as u32,
            bytes,
            flops,
        };
        let n_slots = 2 * n_layers * n_mb;
        let mut attn_done: Vec<TaskId> = Vec::with_capacity(n_slots);
        let mut chiplet_done: Vec<Vec<TaskId>> = Vec::with_capacity(n_slots);
        let mut out_of: Vec<Vec<TaskId>> = vec![Vec::new(); n_mb];
        let step_start = b.tasks.len();

        // Forward.
        for l in 0..n_layers {
            let layout = &layouts[l];
            let chiplet_of = layout.chiplet_of_expert();
            let cluster_on = layout.cluster_on_chiplet();
            for m in 0..n_mb {
                let slot = attn_done.len();
                let cnt = &counts[l][m];
                let tokens = cnt.n_tokens;
                layer_tokens[l] += tokens;
                layer_replicas[l] += cnt.total_replicas();
                let prev_attn: Vec<TaskId> = if slot >= 2 {
                    vec![attn_done[slot - 2]]
                } else {
                    vec![]
                };

                let al = b.add(
                    Some(res.attn_dram()),
                    xfer(costs.attn_weight_bytes, Channel::DramAttention),
                    prev_attn,
                    info(Phase::AttnLoad, l, m, costs.attn_weight_bytes, 0.0),
                );
                b.end_phase(st);
                let flops = tokens as f64 * costs.attn_flops_per_token;
                let mut deps = vec![al];
                deps.extend_from_slice(&out_of[m]);
                let ac = b.add(
                    Some(res.attn()),
                    comp(flops, ChipletClass::Attention),
                    deps,
                    info(Phase::AttnCompute, l, m, 0, flops),
                );
                b.end_phase(st);
                let bytes = tokens * costs.attn_act_bytes;
                b.add(
                    Some(res.attn_dram()),
                    xfer(bytes, Channel::DramAttention),
                    vec![ac],
                    info(Phase::AttnSave, l, m, bytes, 0.0),
                );
                b.end_phase(st);
                attn_done.push(ac);

                let du: Vec<TaskId> = (0..hw.n_groups)
                    .map(|g| {
                        let bytes = cnt.group_dispatch[g] * costs.token_bytes;
                        layer_dispatch[l] += bytes;
                        b.add(
                            Some(res.root(g)),
                            xfer(bytes, Channel::NopEdge),
                            vec![ac],
                            info(Phase::DispatchRoot, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                let dl: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let bytes = cnt.chiplet_replicas[c] * costs.token_bytes;
                        b.add(
                            Some(res.leaf(c)),
                            xfer(bytes, Channel::NopEdge),
                            vec![du[c / cpg]],
                            info(Phase::DispatchLeaf, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                for g in 0..hw.n_groups {
                    switch_checks.push((vec![du[g]], dl[g * cpg..(g + 1) * cpg].to_vec(), true));
                }

                let el = expert_loads(
                    &mut b,
                    &res,
                    &load_orders[l],
                    layout,
                    slot,
                    &chiplet_done,
                    cluster_weight_bytes,
                    &xfer,
                    |ph| info(ph, l, m, cluster_weight_bytes, 0.0),
                    Phase::ExpertLoad,
                );
                b.end_phase(st);
                let ec = expert_computes(
                    &mut b,
                    &res,
                    layout,
                    &chiplet_of,
                    cnt,
                    &el,
                    &dl,
                    1.0,
                    &costs,
                    &comp,
                    Phase::ExpertCompute,
                    |ph, fl| info(ph, l, m, 0, fl),
                );
                for fl in ec.iter().flatten().map(|&id| b.tasks[id].kind.flops) {
                    layer_flops[l] += fl;
                }
                b.end_phase(st);
                let done: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let mut deps = ec[c].clone();
                        deps.push(el[cluster_on[c]]);
                        b.barrier(deps, st)
                    })
                    .collect();
                chiplet_done.push(done);
                let after_compute = |c: usize| -> Vec<TaskId> {
                    if ec[c].is_empty() {
                        vec![el[cluster_on[c]], dl[c]]
                    } else {
                        ec[c].clone()
                    }
                };
                for c in 0..hw.n_moe_chiplets {
                    let bytes = cnt.chiplet_pairs[c] * costs.expert_act_bytes;
                    b.add(
                        Some(res.dram(c / cpg)),
                        xfer(bytes, Channel::DramGroup),
                        after_compute(c),
                        info(Phase::ExpertSave, l, m, bytes, 0.0),
                    );
                }
                b.end_phase(st);
                let cl: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let bytes = cnt.chiplet_replicas[c] * costs.token_bytes;
                        b.add(
                            Some(res.leaf(c)),
                            xfer(bytes, Channel::NopEdge),
                            after_compute(c),
                            info(Phase::CombineLeaf, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                let cu: Vec<TaskId> = (0..hw.n_groups)
                    .map(|g| {
                        let bytes = cnt.group_combine[g] * costs.token_bytes;
                        layer_combine[l] += bytes;
                        b.add(
                            Some(res.root(g)),
                            xfer(bytes, Channel::NopEdge),
                            cl[g * cpg..(g + 1) * cpg].to_vec(),
                            info(Phase::CombineRoot, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                for g in 0..hw.n_groups {
                    switch_checks.push((
                        vec![cu[g]],
                        cl[g * cpg..(g + 1) * cpg].to_vec(),
                        method.policy() == crate::comm::ReplicaPolicy::PerExpert,
                    ));
                }
                out_of[m] = cu;
            }
        }

        // Backward, layers in reverse.
        let attn_sram = hw.bandwidth(Channel::Sram) * hw.attention_chiplets as f64;
        for l in (0..n_layers).rev() {
            let layout = &layouts[l];
            let chiplet_of = layout.chiplet_of_expert();
            let cluster_on = layout.cluster_on_chiplet();
            for m in 0..n_mb {
                let slot = attn_done.len();
                let cnt = &counts[l][m];
                let tokens = cnt.n_tokens;

                let bdu: Vec<TaskId> = (0..hw.n_groups)
                    .map(|g| {
                        let bytes = cnt.group_combine[g] * costs.token_bytes;
                        b.add(
                            Some(res.root(g)),
                            xfer(bytes, Channel::NopEdge),
                            out_of[m].clone(),
                            info(Phase::GradDispatchRoot, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                let bdl: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let bytes = cnt.chiplet_replicas[c] * costs.token_bytes;
                        b.add(
                            Some(res.leaf(c)),
                            xfer(bytes, Channel::NopEdge),
                            vec![bdu[c / cpg]],
                            info(Phase::GradDispatchLeaf, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                for g in 0..hw.n_groups {
                    switch_checks.push((
                        vec![bdu[g]],
                        bdl[g * cpg..(g + 1) * cpg].to_vec(),
                        method.policy() == crate::comm::ReplicaPolicy::PerExpert,
                    ));
                }
                let bel = expert_loads(
                    &mut b,
                    &res,
                    &load_orders[l],
                    layout,
                    slot,
                    &chiplet_done,
                    cluster_weight_bytes,
                    &xfer,
                    |ph| info(ph, l, m, cluster_weight_bytes, 0.0),
                    Phase::BwdExpertLoad,
                );
                b.end_phase(st);
                let bar: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let bytes = cnt.chiplet_pairs[c] * costs.expert_act_bytes;
                        b.add(
                            Some(res.moe(c)),
                            xfer(bytes, Channel::Sram),
                            vec![bdl[c]],
                            info(Phase::BwdExpertActRead, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                let bec = expert_computes(
                    &mut b,
                    &res,
                    layout,
                    &chiplet_of,
                    cnt,
                    &bel,
                    &bar,
                    run.backward_multiplier,
                    &costs,
                    &comp,
                    Phase::BwdExpertCompute,
                    |ph, fl| info(ph, l, m, 0, fl),
                );
                b.end_phase(st);
                let done: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let mut deps = bec[c].clone();
                        deps.push(bel[cluster_on[c]]);
                        deps.push(bar[c]);
                        b.barrier(deps, st)
                    })
                    .collect();
                chiplet_done.push(done);
                let after_compute = |c: usize| -> Vec<TaskId> {
                    if bec[c].is_empty() {
                        vec![bel[cluster_on[c]], bar[c]]
                    } else {
                        bec[c].clone()
                    }
                };
                for c in 0..hw.n_moe_chiplets {
                    b.add(
                        Some(res.dram(c / cpg)),
                        xfer(cluster_weight_bytes, Channel::DramGroup),
                        after_compute(c),
                        info(Phase::BwdExpertGradWrite, l, m, cluster_weight_bytes, 0.0),
                    );
                }
                b.end_phase(st);
                let bcl: Vec<TaskId> = (0..hw.n_moe_chiplets)
                    .map(|c| {
                        let bytes = cnt.chiplet_replicas[c] * costs.token_bytes;
                        b.add(
                            Some(res.leaf(c)),
                            xfer(bytes, Channel::NopEdge),
                            after_compute(c),
                            info(Phase::GradCombineLeaf, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                let bcu: Vec<TaskId> = (0..hw.n_groups)
                    .map(|g| {
                        let bytes = cnt.group_dispatch[g] * costs.token_bytes;
                        b.add(
                            Some(res.root(g)),
                            xfer(bytes, Channel::NopEdge),
                            bcl[g * cpg..(g + 1) * cpg].to_vec(),
                            info(Phase::GradCombineRoot, l, m, bytes, 0.0),
                        )
                    })
                    .collect();
                b.end_phase(st);
                for g in 0..hw.n_groups {
                    switch_checks.push((vec![bcu[g]], bcl[g * cpg..(g + 1) * cpg].to_vec(), true));
                }

                let prev_attn: Vec<TaskId> = if slot >= 2 {
                    vec![attn_done[slot - 2]]
                } else {
                    vec![]
                };
                let bal = b.add(
                    Some(res.attn_dram()),
                    xfer(costs.attn_weight_bytes, Channel::DramAttention),
                    prev_attn,
                    info(Phase::BwdAttnLoad, l, m, costs.attn_weight_bytes, 0.0),
                );
                b.end_phase(st);
                let bytes = tokens * costs.attn_act_bytes;
                let read = b.add(
                    Some(res.attn()),
                    bytes as f64 / attn_sram,
                    vec![bal],
                    info(Phase::BwdAttnActRead, l, m, bytes, 0.0),
                );
                b.end_phase(st);
                let flops = run.backward_multiplier * tokens as f64 * costs.attn_flops_per_token;
                let mut deps = vec![bal, read];
                deps.extend_from_slice(&bcu);
                let bac = b.add(
                    Some(res.attn()),
                    comp(flops, ChipletClass::Attention),
                    deps,
                    info(Phase::BwdAttnCompute, l, m, 0, flops),
                );
                b.end_phase(st);
                b.add(
                    Some(res.attn_dram()),
                    xfer(costs.attn_weight_bytes, Channel::DramAttention),
                    vec![bac],
                    info(Phase::BwdAttnGradWrite, l, m, costs.attn_weight_bytes, 0.0),
                );
                b.end_phase(st);
                attn_done.push(bac);
                out_of[m] = vec![bac];
            }
        }

        if !b.serial {
            let deps: Vec<TaskId> = (step_start..b.tasks.len()).collect();
            let gate = b.barrier(deps, st);
            b.step_gate = Some(gate);
        }
    }

    let spans = engine::run(&b.tasks, res.count())
        .map_err(|e| SimError::Invariant(format!("task graph failed: {e:?}")))?;

    let tasks = b.tasks;
    let makespan = spans.iter().map(|s| s.end).fold(0.0, f64::max);
    check_exclusive(&tasks, &spans, res)?;
    check_switches(&tasks, &switch_checks)?;

    let mut busy = vec![0.0f64; res.count()];
    let mut serial_sum = 0.0;
    for t in &tasks {
        if let Some(r) = t.resource {
            busy[r] += t.duration;
            serial_sum += t.duration;
        }
    }
    let lower = busy.iter().copied().fold(0.0, f64::max);
    if lower > makespan * (1.0 + REL_EPS) + 1e-15 {
        return Err(SimError::Invariant(format!(
            "makespan {makespan} below busiest-resource bound {lower}"
        )));
    }
    if makespan > serial_sum * (1.0 + REL_EPS) + 1e-15 {
        return Err(SimError::Invariant(format!(
            "makespan {makespan} above serialized bound {serial_sum}"
        )));
    }

    let breakdown = breakdown(&tasks, &spans);
    if breakdown.kind_sum() < makespan * (1.0 - REL_EPS) - 1e-15 {
        return Err(SimError::Invariant(format!(
            "breakdown sum {} does not cover makespan {makespan}",
            breakdown.kind_sum()
        )));
    }

    let mut totals = WorkTotals::default();
    for t in &tasks {
        totals.flops += t.kind.flops;
        if t.kind.phase.is_dram() {
            totals.dram_bytes += t.kind.bytes;
        }
        if t.kind.phase.is_nop() {
            totals.nop_bytes += t.kind.bytes;
        }
    }

    let activity = activity(&tasks, &spans, res, hw, makespan, &busy);
    let energy = energy_of(&activity, hw)?;

    let steps = run.n_steps as f64;
    let per_layer: Vec<LayerRow> = (0..n_layers)
        .map(|l| LayerRow {
            layer: l,
            c_t: if layer_tokens[l] == 0 {
                0.0
            } else {
                layer_replicas[l] as f64 / layer_tokens[l] as f64
            },
            dispatch_bytes: layer_dispatch[l] / run.n_steps as u64,
            combine_bytes: layer_combine[l] / run.n_steps as u64,
            expert_flops: layer_flops[l] / steps,
        })
        .collect();
    let c_t_mean = per_layer.iter().map(|r| r.c_t).sum::<f64>() / n_layers as f64;
    let scale = |b: Breakdown| Breakdown {
        attention_compute: b.attention_compute / steps,
        expert_compute: b.expert_compute / steps,
        weight_stream: b.weight_stream / steps,
        a2a: b.a2a / steps,
        aggregate_combine: b.aggregate_combine / steps,
        backward: b.backward / steps,
    };
    let report = StepReport {
        model: model.name.clone(),
        hardware: hw.name.clone(),
        dram: hw.dram.kind,
        method,
        seq_len: run.seq_len,
        batch_samples: run.batch_samples,
        micro_batches: run.micro_batches,
        n_steps: run.n_steps,
        tokens_per_step: per_step,
        latency_s: makespan / steps,
        breakdown: scale(breakdown),
        energy_j: energy / steps,
        c_t_mean,
        lower_bound_s: lower / steps,
        upper_bound_s: serial_sum / steps,
        totals: WorkTotals {
            flops: totals.flops / steps,
            dram_bytes: totals.dram_bytes / run.n_steps as u64,
            nop_bytes: totals.nop_bytes / run.n_steps as u64,
        },
        per_layer,
    };
    Ok(Simulation {
        report,
        tasks,
        spans,
        layout: res,
    })
}

/// Streams every cluster's weights over its group channel. A chiplet's
/// buffer for this slot is free once its work two slots back finished.
#[allow(clippy::too_many_arguments)]
fn expert_loads(
    b: &mut Builder,
    res: &Layout,
    order: &[Vec<usize>],
    layout: &ExpertLayout,
    slot: usize,
    chiplet_done: &[Vec<TaskId>],
    bytes: u64,
    xfer: &impl Fn(u64, Channel) -> f64,
    info: impl Fn(Phase) -> Info,
    phase: Phase,
) -> Vec<TaskId> {
    let mut el = vec![usize::MAX; layout.n_clusters()];
    for (g, clusters) in order.iter().enumerate() {
        for &x in clusters {
            let c = layout.chiplet_of_cluster[x];
            let deps = if slot >= 2 {
                vec![chiplet_done[slot - 2][c]]
            } else {
                vec![]
            };
            el[x] = b.add(
                Some(res.dram(g)),
                xfer(bytes, Channel::DramGroup),
                deps,
                info(phase),
            );
        }
    }
    el
}

/// Per chiplet, experts in descending token count (ties by index); experts
/// with no tokens are skipped. Returns task ids per chiplet.
#[allow(clippy::too_many_arguments)]
fn expert_computes(
    b: &mut Builder,
    res: &Layout,
    layout: &ExpertLayout,
    chiplet_of: &[usize],
    cnt: &DispatchCounts,
    loads: &[TaskId],
    arrivals: &[TaskId],
    multiplier: f64,
    costs: &Costs,
    comp: &impl Fn(f64, ChipletClass) -> f64,
    phase: Phase,
    info: impl Fn(Phase, f64) -> Info,
) -> Vec<Vec<TaskId>> {
    let mut out = vec![Vec::new(); layout.n_clusters()];
    for (x, members) in layout.clusters.iter().enumerate() {
        let c = layout.chiplet_of_cluster[x];
        let mut experts: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&e| cnt.expert_tokens[e] > 0)
            .collect();
        experts.sort_by(|&a, &e| {
            cnt.expert_tokens[e]
                .cmp(&cnt.expert_tokens[a])
                .then(a.cmp(&e))
        });
        for e in experts {
            debug_assert_eq!(chiplet_of[e], c);
            let flops = multiplier * cnt.expert_tokens[e] as f64 * costs.expert_flops_per_token;
            let id = b.add(
                Some(res.moe(c)),
                comp(flops, ChipletClass::Moe),
                vec![loads[x], arrivals[c]],
                info(phase, flops),
            );
            out[c].push(id);
        }
    }
    out
}

fn check_exclusive(tasks: &[Task<Info>], spans: &[Span], res: Layout) -> Result<(), SimError> {
    let mut per: Vec<Vec<Span>> = vec![Vec::new(); res.count()];
    for (t, s) in tasks.iter().zip(spans) {
        if let Some(r) = t.resource {
            if s.end > s.start {
                per[r].push(*s);
            }
        }
    }
    for (r, v) in per.iter_mut().enumerate() {
        v.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in v.windows(2) {
            if w[1].start < w[0].end * (1.0 - REL_EPS) {
                return Err(SimError::Invariant(format!(
                    "overlapping work on {} at {}s",
                    res.resource(r),
                    w[1].start
                )));
            }
        }
    }
    Ok(())
}

/// Bytes into a switch from one side against bytes out of the other side.
/// Without aggregation they must match; with it the root side may only be
/// smaller.
fn check_switches(
    tasks: &[Task<Info>],
    checks: &[(Vec<TaskId>, Vec<TaskId>, bool)],
) -> Result<(), SimError> {
    for (root, leaves, exact) in checks {
        let up: u64 = root.iter().map(|&i| tasks[i].kind.bytes).sum();
        let down: u64 = leaves.iter().map(|&i| tasks[i].kind.bytes).sum();
        let ok = if *exact { up == down } else { up <= down };
        if !ok {
            let k = tasks[root[0]].kind;
            return Err(SimError::Invariant(format!(
                "switch byte mismatch at layer {} micro-batch {} ({}): root {up} vs leaves {down}",
                k.layer,
                k.micro_batch,
                k.phase.as_str()
            )));
        }
    }
    Ok(())
}

fn breakdown(tasks: &[Task<Info>], spans: &[Span]) -> Breakdown {
    let mut by: BTreeMap<u8, Vec<Span>> = BTreeMap::new();
    let mut bwd = Vec::new();
    for (t, s) in tasks.iter().zip(spans) {
        if t.resource.is_none() {
            continue;
        }
        let key = match t.kind.phase.category() {
            Category::AttentionCompute => 0,
            Category::ExpertCompute => 1,
            Category::WeightStream => 2,
            Category::A2a => 3,
            Category::Combine => 4,
            Category::None => continue,
        };
        by.entry(key).or_default().push(*s);
        if t.kind.phase.is_backward() {
            bwd.push(*s);
        }
    }
    let mut len = |k: u8| by.get_mut(&k).map_or(0.0, |v| engine::union_length(v));
    Breakdown {
        attention_compute: len(0),
        expert_compute: len(1),
        weight_stream: len(2),
        a2a: len(3),
        aggregate_combine: len(4),
        backward: engine::union_length(&mut bwd),
    }
}

fn activity(
    tasks: &[Task<Info>],
    spans: &[Span],
    res: Layout,
    hw: &HardwareSpec,
    makespan: f64,
    busy: &[f64],
) -> Activity {
    let mut a = Activity {
        makespan_s: makespan,
        ..Default::default()
    };
    a.busy_s.insert(PowerComponent::Attention, busy[res.attn()]);
    let moe: f64 = (0..res.n_chiplets).map(|c| busy[res.moe(c)]).sum();
    a.busy_s.insert(PowerComponent::MoeChiplet, moe);
    // DRAM in stack-seconds.
    let dram = busy[res.attn_dram()] * hw.dram.attention_channels as f64
        + (0..res.n_groups).map(|g| busy[res.dram(g)]).sum::<f64>()
            * hw.dram.channels_per_group as f64;
    a.busy_s.insert(PowerComponent::Dram, dram);
    // A switch is active whenever any of its edges carries traffic.
    let cpg = res.n_chiplets / res.n_groups;
    let mut edges: Vec<Vec<Span>> = vec![Vec::new(); res.n_groups];
    for (t, s) in tasks.iter().zip(spans) {
        match t.resource.map(|r| res.resource(r)) {
            Some(Resource::RootEdge(g)) => edges[g].push(*s),
            Some(Resource::LeafEdge(c)) => edges[c / cpg].push(*s),
            _ => {}
        }
    }
    let switch: f64 = edges.iter_mut().map(|v| engine::union_length(v)).sum();
    a.busy_s.insert(PowerComponent::Switch, switch);
    a
}
