//! Run documents: one structured text file per run, embedding the inputs
//! (query, planner spec, config, plan, scenario) alongside the result so
//! a run can be re-executed and compared bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EngineConfig, ExpertMode};
use crate::expert::{fault_registry, scripted_registry, ExpertRegistry, FaultProfile, Scenario};
use crate::graph::{NodeId, Vertex};
use crate::orchestrator::{run, EngineError, RunResult};
use crate::planner::{InitialPlan, PlannerPort, ScriptedPlanner, StochasticPlanner};

/// Which planner drove (and will re-drive) the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PlannerSpec {
    /// Deterministic planner replaying the embedded plan document.
    Scripted,
    /// Seeded sampling planner.
    Stochastic { seed: u64 },
}

/// The plan document: the decomposition the run starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub query: String,
    pub vertices: Vec<Vertex>,
    pub sink: NodeId,
}

impl GraphDoc {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OutputError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn initial_plan(&self) -> InitialPlan {
        InitialPlan {
            vertices: self.vertices.clone(),
            sink: self.sink.clone(),
        }
    }
}

/// A complete, self-describing run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub query: String,
    pub planner: PlannerSpec,
    pub config: EngineConfig,
    pub graph: GraphDoc,
    pub scenario: Option<Scenario>,
    pub result: RunResult,
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot read run document: {0}")]
    Io(#[from] std::io::Error),
    #[error("run document parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("replay mismatch: first divergence at {location}: {detail}")]
    ReplayMismatch { location: String, detail: String },
    #[error("replay requires a deterministic expert pool; this run used mode {mode:?}")]
    NotReplayable { mode: ExpertMode },
}

impl RunDocument {
    /// Stable serialization: struct fields keep declaration order, maps
    /// are sorted, and float formatting is deterministic, so equal
    /// documents produce equal bytes.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("serializable run document");
        text.push('\n');
        text
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OutputError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OutputError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn build_planner(spec: &PlannerSpec, graph: &GraphDoc) -> Box<dyn PlannerPort> {
    match spec {
        PlannerSpec::Scripted => Box::new(ScriptedPlanner::new(graph.initial_plan())),
        PlannerSpec::Stochastic { seed } => Box::new(StochasticPlanner::new(*seed)),
    }
}

fn build_experts(
    config: &EngineConfig,
    scenario: Option<&Scenario>,
) -> Result<ExpertRegistry, OutputError> {
    match config.experts.mode {
        ExpertMode::Scripted => {
            let scenario = scenario.cloned().ok_or_else(|| {
                OutputError::Engine(EngineError::Config(crate::config::ConfigError::Invalid(
                    "scripted mode requires a scenario".into(),
                )))
            })?;
            Ok(scripted_registry(scenario))
        }
        ExpertMode::Fault => Ok(fault_registry(
            FaultProfile {
                failure_rate: config.experts.failure_rate,
                low_confidence_prob: config.experts.low_confidence_prob,
            },
            config.experts.seed,
        )),
        ExpertMode::Remote => {
            let endpoint = config.experts.endpoint.as_deref().ok_or_else(|| {
                OutputError::Engine(EngineError::Config(crate::config::ConfigError::Invalid(
                    "remote mode requires experts.endpoint".into(),
                )))
            })?;
            Ok(crate::expert::remote_registry(endpoint, config.experts.retries))
        }
    }
}

/// Executes a run from its parts and packages the self-describing
/// document.
pub fn execute_run(
    query: &str,
    planner_spec: PlannerSpec,
    graph: GraphDoc,
    scenario: Option<Scenario>,
    config: EngineConfig,
) -> Result<RunDocument, OutputError> {
    let mut planner = build_planner(&planner_spec, &graph);
    let mut experts = build_experts(&config, scenario.as_ref())?;
    let result = run(query, planner.as_mut(), &mut experts, &config)?;
    Ok(RunDocument {
        query: query.to_string(),
        planner: planner_spec,
        config,
        graph,
        scenario,
        result,
    })
}

/// Re-executes a recorded run from its embedded inputs and verifies the
/// result is bit-identical. Only deterministic pools (scripted, seeded
/// fault injection) are replayable.
pub fn replay(doc: &RunDocument) -> Result<RunResult, OutputError> {
    if doc.config.experts.mode == ExpertMode::Remote {
        return Err(OutputError::NotReplayable {
            mode: doc.config.experts.mode,
        });
    }
    // a re-execution that cannot even finish the same way is itself a
    // divergence, not an infrastructure fault
    let rerun = match execute_run(
        &doc.query,
        doc.planner.clone(),
        doc.graph.clone(),
        doc.scenario.clone(),
        doc.config.clone(),
    ) {
        Ok(rerun) => rerun,
        Err(OutputError::Engine(e)) => {
            return Err(OutputError::ReplayMismatch {
                location: "re-execution".into(),
                detail: e.to_string(),
            })
        }
        Err(e) => return Err(e),
    };
    if rerun.result == doc.result {
        return Ok(rerun.result);
    }
    let (location, detail) = first_divergence(&doc.result, &rerun.result);
    Err(OutputError::ReplayMismatch { location, detail })
}

/// Locates the first divergent event between two run results, for
/// mismatch diagnostics.
fn first_divergence(recorded: &RunResult, rerun: &RunResult) -> (String, String) {
    for (i, (a, b)) in recorded
        .artifacts
        .iter()
        .zip(rerun.artifacts.iter())
        .enumerate()
    {
        if a != b {
            return (
                format!("artifact entry {i} (node {})", a.node),
                format!("recorded {a:?}, replayed {b:?}"),
            );
        }
    }
    if recorded.artifacts.len() != rerun.artifacts.len() {
        return (
            "artifact count".into(),
            format!(
                "recorded {}, replayed {}",
                recorded.artifacts.len(),
                rerun.artifacts.len()
            ),
        );
    }
    for (i, (a, b)) in recorded
        .repair_log
        .iter()
        .zip(rerun.repair_log.iter())
        .enumerate()
    {
        if a != b {
            return (
                format!("repair event {i} (suspension {})", a.step),
                format!("recorded {a:?}, replayed {b:?}"),
            );
        }
    }
    if recorded.repair_log.len() != rerun.repair_log.len() {
        return (
            "repair log length".into(),
            format!(
                "recorded {}, replayed {}",
                recorded.repair_log.len(),
                rerun.repair_log.len()
            ),
        );
    }
    for (i, (a, b)) in recorded
        .switch_log
        .events
        .iter()
        .zip(rerun.switch_log.events.iter())
        .enumerate()
    {
        if a != b {
            return (
                format!("switch event {i}"),
                format!("recorded {a:?}, replayed {b:?}"),
            );
        }
    }
    if recorded.metrics != rerun.metrics {
        return (
            "metrics".into(),
            format!("recorded {:?}, replayed {:?}", recorded.metrics, rerun.metrics),
        );
    }
    ("result".into(), "results differ".into())
}
