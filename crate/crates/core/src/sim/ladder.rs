//! Ladder (all four methods) and sweep (sequence length x memory) drivers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::StepReport;
use super::{simulate_step, Method, RunConfig, SimError};
use crate::hwmodel::{DramKind, HardwareSpec};
use crate::model::ModelSpec;
use crate::placement::{
    baseline_layout, place_layer, AllocationMode, ExpertLayout, PlacementError,
};
use crate::profiling::profile_trace;
use crate::trace::RoutingTrace;

pub fn baseline_layouts(
    model: &ModelSpec,
    hw: &HardwareSpec,
) -> Result<Vec<ExpertLayout>, PlacementError> {
    (0..model.n_layers)
        .map(|l| baseline_layout(l, model, hw))
        .collect()
}

/// Profiles every layer of `trace` and places it.
pub fn optimized_layouts(
    trace: &RoutingTrace,
    hw: &HardwareSpec,
    mode: AllocationMode,
) -> Result<Vec<ExpertLayout>, SimError> {
    let profiles = profile_trace(trace)?;
    let placed: Result<Vec<_>, PlacementError> = profiles
        .par_iter()
        .map(|p| place_layer(p, hw, mode).map(|(layout, _)| layout))
        .collect();
    Ok(placed?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub method: Method,
    pub latency_s: f64,
    pub normalized_latency: f64,
    pub speedup: f64,
    pub c_t: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rows: Vec<LadderRow>,
    pub reports: Vec<StepReport>,
}

impl LadderReport {
    pub fn row(&self, method: Method) -> Option<&LadderRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn check_work_invariance(baseline: &StepReport, a: &StepReport) -> Result<(), SimError> {
    let (x, y) = (&baseline.totals, &a.totals);
    if x.flops.to_bits() != y.flops.to_bits()
        || x.dram_bytes != y.dram_bytes
        || x.nop_bytes != y.nop_bytes
    {
        return Err(SimError::Invariant(format!(
            "baseline and overlap runs did different work: {x:?} vs {y:?}"
        )));
    }
    Ok(())
}

fn run_methods(
    model: &ModelSpec,
    hw: &HardwareSpec,
    base: &RunConfig,
    trace: &RoutingTrace,
    methods: &[Method],
    baseline: &[ExpertLayout],
    optimized: &[ExpertLayout],
) -> Result<Vec<StepReport>, SimError> {
    let reports: Vec<StepReport> = methods
        .par_iter()
        .map(|&m| {
            let layouts = if m.optimized_layout() {
                optimized
            } else {
                baseline
            };
            simulate_step(model, hw, &base.with_method(m), layouts, trace).map(|s| s.report)
        })
        .collect::<Result<_, _>>()?;
    let find = |m| reports.iter().find(|r| r.method == m);
    if let (Some(b), Some(a)) = (find(Method::Baseline), find(Method::A)) {
        check_work_invariance(b, a)?;
    }
    Ok(reports)
}

/// Runs all four methods on the same trace and hardware, normalized to the
/// baseline.
pub fn run_ladder(
    model: &ModelSpec,
    hw: &HardwareSpec,
    base: &RunConfig,
    trace: &RoutingTrace,
    mode: AllocationMode,
) -> Result<LadderReport, SimError> {
    let baseline = baseline_layouts(model, hw)?;
    let optimized = optimized_layouts(trace, hw, mode)?;
    run_ladder_with_layouts(model, hw, base, trace, &baseline, &optimized)
}

pub fn run_ladder_with_layouts(
    model: &ModelSpec,
    hw: &HardwareSpec,
    base: &RunConfig,
    trace: &RoutingTrace,
    baseline: &[ExpertLayout],
    optimized: &[ExpertLayout],
) -> Result<LadderReport, SimError> {
    let reports = run_methods(model, hw, base, trace, &Method::ALL, baseline, optimized)?;
    let reference = reports[0].latency_s;
    let rows = reports
        .iter()
        .map(|r| LadderRow {
            method: r.method,
            latency_s: r.latency_s,
            normalized_latency: r.latency_s / reference,
            speedup: reference / r.latency_s,
            c_t: r.c_t_mean,
            energy_j: r.energy_j,
        })
        .collect();
    Ok(LadderReport { rows, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub seq_lens: Vec<usize>,
    pub drams: Vec<DramKind>,
    pub methods: Vec<Method>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            seq_lens: vec![128, 256, 512],
            drams: vec![DramKind::Hbm2, DramKind::Ssd],
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seq_len: usize,
    pub dram: DramKind,
    pub method: Method,
    pub latency_s: f64,
    /// Relative to the baseline of the same cell, when it was run.
    pub normalized_latency: Option<f64>,
    pub c_t: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<StepReport>,
}

impl SweepReport {
    pub fn latency(&self, seq_len: usize, dram: DramKind, method: Method) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seq_len == seq_len && r.dram == dram && r.method == method)
            .map(|r| r.latency_s)
    }
}

/// Cartesian product of sequence lengths, memory kinds and methods. Rows
/// come out in that nesting order regardless of scheduling.
pub fn sweep(
    model: &ModelSpec,
    hw: &HardwareSpec,
    base: &RunConfig,
    trace: &RoutingTrace,
    grid: &SweepSpec,
    mode: AllocationMode,
) -> Result<SweepReport, SimError> {
    let baseline = baseline_layouts(model, hw)?;
    let optimized = if grid.methods.iter().any(|m| m.optimized_layout()) {
        optimized_layouts(trace, hw, mode)?
    } else {
        baseline.clone()
    };
    let cells: Vec<(usize, DramKind)> = grid
        .seq_lens
        .iter()
        .flat_map(|&s| grid.drams.iter().map(move |&d| (s, d)))
        .collect();
    let per_cell: Vec<Vec<StepReport>> = cells
        .par_iter()
        .map(|&(seq_len, dram)| {
            let hw = hw.clone().with_dram(dram);
            let run = RunConfig {
                seq_len,
                ..base.clone()
            };
            run_methods(
                model,
                &hw,
                &run,
                trace,
                &grid.methods,
                &baseline,
                &optimized,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (&(seq_len, dram), cell) in cells.iter().zip(per_cell) {
        let reference = cell
            .iter()
            .find(|r| r.method == Method::Baseline)
            .map(|r| r.latency_s);
        for r in cell {
            rows.push(SweepRow {
                seq_len,
                dram,
                method: r.method,
                latency_s: r.latency_s,
                normalized_latency: reference.map(|b| r.latency_s / b),
                c_t: r.c_t_mean,
                energy_j: r.energy_j,
            });
            reports.push(r);
        }
    }
    Ok(SweepReport { rows, reports })
}
