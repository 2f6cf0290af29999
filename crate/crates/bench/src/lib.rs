//! Fixtures shared by the benchmarks.

use moechip::trace::generate_trace;
use moechip::{HardwareSpec, ModelSpec, RoutingTrace, RunConfig, TraceGenConfig};

/// Preset model and system with a planted-community trace of one step.
pub fn fixture(
    preset: &str,
    n_layers: usize,
    seq_len: usize,
) -> (ModelSpec, HardwareSpec, RunConfig, RoutingTrace) {
    let mut model = ModelSpec::preset(preset).expect("known preset");
    model.n_layers = n_layers;
    let hw = HardwareSpec::preset(preset).expect("known preset");
    let run = RunConfig {
        seq_len,
        ..RunConfig::default()
    };
    let cfg = TraceGenConfig {
        seed: 1,
        skew: 0.5,
        n_collab_groups: 16,
        collab_strength: 0.9,
        n_tokens: run.tokens_per_step(),
    };
    let trace = generate_trace(&model, &cfg).expect("valid generator config");
    (model, hw, run, trace)
}
