//! Scenario loading, the event loop, and post-run checks.

mod audit;
mod compare;
mod engine;
mod metrics;
mod scenario;
mod topology;

pub use audit::{audit, AuditReport};
pub use compare::{aggregate, compare_csv, compare_table, Aggregate, COMPARE_CSV_HEADER};
pub use engine::{run_simulation, Engine, EngineError, LogEntry, Note, RunLog, RunResult};
pub use metrics::{
    phase_boundaries, phases_from_onsets, to_csv, MetricsRecord, Phase, PhaseMean, RunSummary,
    CSV_HEADER,
};
pub use scenario::{
    AgentSpec, BackgroundClient, BindingSpec, Failure, FailureKind, Issue, RunSettings, Scenario,
    ScenarioError, BUNDLED_SCENARIO,
};
pub use topology::{hop_distance, similarity_index, Topology};
