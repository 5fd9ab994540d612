//! Discrete-event simulator of GPU serverless nodes and clusters.
//!
//! Invocations move through a stage plan (container, CPU context, CPU and
//! GPU data loads, GPU context, compute, return) on channels shared under
//! fluid processor sharing, with GPU memory admitted by one of five
//! policies. See [`sim::Simulation`] for the event loop.

pub mod engine;
pub mod error;
pub mod functions;
pub mod metrics;
pub mod policies;
pub mod resources;
pub mod sharing;
pub mod sim;
pub mod validation;
pub mod workload;

pub use engine::{SimDuration, SimTime};
pub use error::SimError;
pub use functions::{default_table, FunctionSpec, SpecTable};
pub use policies::{PolicyConfig, PolicyName};
pub use resources::Megabytes;
pub use sim::{run, ClusterConfig, RunOptions, SimConfig, SimOutput, Simulation};
pub use workload::GeneratorSpec;
