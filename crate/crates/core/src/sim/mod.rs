//! Training-step simulation of an MoE model on the chiplet system.

pub mod engine;
mod graph;
mod ladder;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{simulate_step, Phase, Resource, Simulation, TimelineEvent};
pub use ladder::{
    baseline_layouts, optimized_layouts, run_ladder, run_ladder_with_layouts, sweep, LadderReport,
    LadderRow, SweepReport, SweepRow, SweepSpec,
};
pub use report::{to_csv, Breakdown, LayerRow, StepReport, SummaryRow, WorkTotals};

use crate::comm::{CommError, ReplicaPolicy};
use crate::hwmodel::HwError;
use crate::model::ModelError;
use crate::placement::PlacementError;
use crate::profiling::ProfileError;
use crate::trace::TraceError;

/// Optimization ladder.
///
/// * `Baseline`: phase-serialized execution, one replica per selected expert.
/// * `A`: communication/computation overlap.
/// * `B`: `A` plus co-located dispatch and switch-side combine.
/// * `C`: `B` plus collaboration-aware layout and priority loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    A,
    B,
    C,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::A, Method::B, Method::C];

    pub fn overlaps(self) -> bool {
        self != Method::Baseline
    }

    pub fn policy(self) -> ReplicaPolicy {
        match self {
            Method::Baseline | Method::A => ReplicaPolicy::PerExpert,
            Method::B | Method::C => ReplicaPolicy::CoLocated,
        }
    }

    pub fn optimized_layout(self) -> bool {
        self == Method::C
    }

    /// Load clusters in the layout's priority order rather than by index.
    pub fn priority_loading(self) -> bool {
        self == Method::C
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::A => "a",
            Method::B => "b",
            Method::C => "c",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Method::Baseline),
            "a" => Ok(Method::A),
            "b" => Ok(Method::B),
            "c" => Ok(Method::C),
            other => Err(format!(
                "unknown method `{other}` (expected baseline, a, b or c)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub batch_samples: usize,
    pub micro_batches: usize,
    pub seq_len: usize,
    pub n_steps: usize,
    /// Backward compute FLOPs relative to forward.
    pub backward_multiplier: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::C,
            batch_samples: 32,
            micro_batches: 4,
            seq_len: 256,
            n_steps: 1,
            backward_multiplier: 2.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidRun(m));
        if self.batch_samples == 0 || self.micro_batches == 0 || self.seq_len == 0 {
            return bad("batch_samples, micro_batches and seq_len must be positive".into());
        }
        if !self.batch_samples.is_multiple_of(self.micro_batches) {
            return bad(format!(
                "batch_samples {} is not divisible by micro_batches {}",
                self.batch_samples, self.micro_batches
            ));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be positive".into());
        }
        if !(self.backward_multiplier >= 0.0 && self.backward_multiplier.is_finite()) {
            return bad("backward_multiplier must be a nonnegative number".into());
        }
        Ok(())
    }

    pub fn samples_per_micro_batch(&self) -> usize {
        self.batch_samples / self.micro_batches
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_samples * self.seq_len
    }

    pub fn with_method(&self, method: Method) -> Self {
        RunConfig {
            method,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid run configuration: {0}")]
    InvalidRun(String),
    #[error(
        "layer {layer}: {unit} needs {required} bytes of SRAM but only {capacity} are available"
    )]
    SramCapacity {
        layer: usize,
        unit: String,
        required: u64,
        capacity: u64,
    },
    #[error("layout does not match the model: {0}")]
    LayoutMismatch(String),
    #[error("simulation invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hardware(#[from] HwError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Comm(#[from] CommError),
}

impl SimError {
    pub fn is_invariant(&self) -> bool {
        matches!(self, SimError::Invariant(_))
    }
}
