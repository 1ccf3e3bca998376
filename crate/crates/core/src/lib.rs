//! Self-healing DAG orchestration engine.
//!
//! A query is decomposed into a versioned task graph whose vertices are
//! executed one at a time by pluggable experts (retrieval, deduction,
//! rendering) multiplexed over a shared backbone via hot-swapped adapters.
//! An evaluator watches every feedback tuple for exceptions, per-node
//! confidence floors, and global uncertainty; on suspension the engine
//! repairs the graph in place — inserting a patch node for localized
//! faults or regrafting a fresh subgraph over a corrupted branch — under a
//! strict repair budget with a degraded single-call fallback.
//!
//! Completed runs are scored by a topology critic (legality veto, task
//! grade, logarithmic overhead penalty) and distilled into margin-filtered
//! preference pairs that train a toy planner policy with a DPO objective.
//!
//! The crate is organized around the run loop:
//!
//! - [`graph`]: versioned DAG model, structural queries, repair deltas
//! - [`expert`]: expert interface, output schemas, feedback tuples,
//!   scripted / fault-injecting / remote implementations
//! - [`adapter`]: adapter registry, switch log, memory accounting
//! - [`evaluator`]: uncertainty aggregation and the suspension indicator
//! - [`planner`] / [`repair`]: planner port, repair decisions, delta builders
//! - [`orchestrator`] / [`repo`] / [`output`]: the run loop, the artifact
//!   repository, run documents and deterministic replay
//! - [`critic`] / [`dpo`] / [`datagen`]: trajectory scoring and planner
//!   preference optimization
//! - [`metrics`]: token / compute / latency accounting and reports

pub mod adapter;
pub mod config;
pub mod critic;
pub mod datagen;
pub mod dpo;
pub mod evaluator;
pub mod expert;
pub mod graph;
pub mod metrics;
pub mod orchestrator;
pub mod output;
pub mod planner;
pub mod repair;
pub mod repo;

pub use adapter::{AdapterId, AdapterScheduler, AdapterSpec, MemoryModel, SwitchLog};
pub use config::EngineConfig;
pub use critic::{Critic, TaskGrader, Trajectory};
pub use evaluator::{EvalThresholds, SuspensionCause, SuspensionKind};
pub use expert::{ExpertCall, ExpertOutput, ExpertRegistry, NodeFeedback};
pub use graph::{ExpertKind, GraphDelta, NodeId, TaskGraph, Vertex};
pub use orchestrator::{run, strict_isolation_check, RunMetrics, RunResult, RunStatus};
pub use output::{replay, RunDocument};
pub use planner::PlannerPort;
pub use repo::ArtifactRepository;
