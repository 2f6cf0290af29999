use serde::{Deserialize, Serialize};

use super::Method;
use crate::hwmodel::DramKind;

/// Wall-clock time covered by each kind of activity. Categories overlap
/// when work overlaps; `backward` cuts across the others.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub attention_compute: f64,
    pub expert_compute: f64,
    pub weight_stream: f64,
    pub a2a: f64,
    pub aggregate_combine: f64,
    pub backward: f64,
}

impl Breakdown {
    /// Sum of the disjoint-by-kind categories (excludes `backward`).
    pub fn kind_sum(&self) -> f64 {
        self.attention_compute
            + self.expert_compute
            + self.weight_stream
            + self.a2a
            + self.aggregate_combine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub c_t: f64,
    /// Forward dispatch bytes leaving the root.
    pub dispatch_bytes: u64,
    /// Forward combine bytes arriving at the root.
    pub combine_bytes: u64,
    pub expert_flops: f64,
}

/// Work done in a run, independent of scheduling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkTotals {
    pub flops: f64,
    pub dram_bytes: u64,
    pub nop_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub model: String,
    pub hardware: String,
    pub dram: DramKind,
    pub method: Method,
    pub seq_len: usize,
    pub batch_samples: usize,
    pub micro_batches: usize,
    pub n_steps: usize,
    pub tokens_per_step: usize,
    /// Seconds per training step, averaged over steps.
    pub latency_s: f64,
    pub breakdown: Breakdown,
    /// Joules per training step.
    pub energy_j: f64,
    pub c_t_mean: f64,
    /// Busiest-resource time per step.
    pub lower_bound_s: f64,
    /// Fully serialized time per step.
    pub upper_bound_s: f64,
    pub totals: WorkTotals,
    pub per_layer: Vec<LayerRow>,
}

/// Flat one-line view of a report for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub dram: DramKind,
    pub method: Method,
    pub seq_len: usize,
    pub latency_s: f64,
    pub attention_compute_s: f64,
    pub expert_compute_s: f64,
    pub weight_stream_s: f64,
    pub a2a_s: f64,
    pub aggregate_combine_s: f64,
    pub backward_s: f64,
    pub energy_j: f64,
    pub c_t_mean: f64,
}

impl StepReport {
    pub fn summary(&self) -> SummaryRow {
        let b = &self.breakdown;
        SummaryRow {
            model: self.model.clone(),
            dram: self.dram,
            method: self.method,
            seq_len: self.seq_len,
            latency_s: self.latency_s,
            attention_compute_s: b.attention_compute,
            expert_compute_s: b.expert_compute,
            weight_stream_s: b.weight_stream,
            a2a_s: b.a2a,
            aggregate_combine_s: b.aggregate_combine,
            backward_s: b.backward,
            energy_j: self.energy_j,
            c_t_mean: self.c_t_mean,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Serializes rows as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}
