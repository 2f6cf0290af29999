//! Expert profiling, collaboration-aware placement and training-step
//! simulation for mixture-of-experts models on a chiplet system.

pub mod comm;
pub mod experiment;
pub mod hwmodel;
pub mod model;
pub mod placement;
pub mod profiling;
pub mod sim;
pub mod trace;

pub use comm::{account_all_to_all, verify_bound, A2AAccount, ReplicaPolicy, TokenSource};
pub use experiment::{ConfigError, ExperimentConfig};
pub use hwmodel::{DramKind, HardwareSpec};
pub use model::ModelSpec;
pub use placement::{AllocationMode, ExpertLayout, PlacementObjective};
pub use profiling::ExpertProfile;
pub use sim::{Method, RunConfig, StepReport};
pub use trace::{RoutingTrace, TraceGenConfig};
