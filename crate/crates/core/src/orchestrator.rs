//! The top-level run loop: plan, execute the frontier node by node,
//! evaluate, repair, emit.
//!
//! Execution is strictly sequential — at most one expert call is in
//! flight at any instant, which is what lets a single resident adapter
//! serve the whole pool. The loop owns every mutable piece of state
//! (repository, scheduler, budget) and is the only writer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterId, SwitchLog};
use crate::config::{ConfigError, EngineConfig};
use crate::evaluator::{check_suspension, SuspensionCause};
use crate::expert::{
    ExpertCall, ExpertError, ExpertOutput, ExpertRegistry, NodeFeedback, Payload, PayloadSource,
    RepairContext,
};
use crate::graph::{ExpertKind, GraphError, NodeId, TaskGraph, Vertex};
use crate::metrics::tflops;
use crate::planner::{PlannerError, PlannerPort, PlannerUsage};
use crate::repair::{
    build_patch_delta, build_reconstruct_delta, decide_repair, repair_context_for, RepairAction,
    RepairBudget, RepairError,
};
use crate::repo::{ArtifactRepository, EntryStatus, RepoError};

/// Terminal status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    #[serde(rename = "COMPLETED")]
    Completed,
    #[serde(rename = "DEGRADED")]
    Degraded,
    #[serde(rename = "FAILED")]
    Failed,
}

impl RunStatus {
    /// Process exit code contract: 0 completed, 2 degraded, 3 failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Completed => 0,
            RunStatus::Degraded => 2,
            RunStatus::Failed => 3,
        }
    }
}

/// What a suspension handling did to the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action")]
pub enum RepairActionRecord {
    #[serde(rename = "PATCH")]
    Patch { added: NodeId },
    #[serde(rename = "PATCH_REFUSED")]
    PatchRefused,
    #[serde(rename = "RECONSTRUCT")]
    Reconstruct {
        removed: Vec<NodeId>,
        added: Vec<NodeId>,
    },
    #[serde(rename = "RECONSTRUCT_REFUSED")]
    ReconstructRefused,
    #[serde(rename = "RECONSTRUCT_REJECTED")]
    ReconstructRejected { reason: String },
    #[serde(rename = "FALLBACK")]
    Fallback { node: NodeId },
}

/// One ordered record in the repair event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairEvent {
    /// Ordinal of the suspension this record belongs to (1-based).
    pub step: u32,
    pub cause: SuspensionCause,
    #[serde(flatten)]
    pub action: RepairActionRecord,
    /// Whether this record consumed one unit of the repair budget.
    pub charged: bool,
    pub version_before: u32,
    pub version_after: u32,
}

/// Provenance trace of one expert call, for the isolation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub node: NodeId,
    pub expert_kind: ExpertKind,
    pub payload_sources: Vec<PayloadSource>,
    pub repair_context_source: Option<PayloadSource>,
}

/// Run-level accounting. Token totals sum every expert and planner call,
/// including failed and discarded nodes; latency sums expert wall time,
/// planner wall time, and adapter switch costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tokens_total: u64,
    pub tokens_by_module: BTreeMap<AdapterId, u64>,
    pub tflops: f64,
    pub latency_seconds: f64,
    pub expert_wall_seconds: f64,
    pub planner_wall_seconds: f64,
    pub switch_cost_seconds: f64,
    pub peak_memory_bytes: u64,
    pub suspensions: u32,
    pub expert_calls: u64,
    pub planner_calls: u64,
}

/// A fully executed run: terminal status, the answer (when one was
/// produced), accounting, the repair log, every graph version, every
/// stored artifact, the call-provenance trace, and the switch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    pub answer: Option<String>,
    pub metrics: RunMetrics,
    pub repair_log: Vec<RepairEvent>,
    pub graph_history: Vec<TaskGraph>,
    pub artifacts: Vec<crate::repo::ArtifactEntry>,
    pub call_trace: Vec<CallRecord>,
    pub switch_log: SwitchLog,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid plan: {0}")]
    Plan(#[from] GraphError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("repository fault: {0}")]
    Repo(#[from] RepoError),
    #[error("engine invariant violated: {0}")]
    Internal(String),
}

/// Everything the loop mutates, grouped so helpers can borrow it whole.
struct RunState<'a> {
    config: &'a EngineConfig,
    planner: &'a mut dyn PlannerPort,
    experts: &'a mut ExpertRegistry,
    scheduler: crate::adapter::AdapterScheduler,
    repo: ArtifactRepository,
    graph: TaskGraph,
    budget: RepairBudget,
    clock: f64,
    expert_wall: f64,
    planner_wall: f64,
    tokens_by_module: BTreeMap<AdapterId, u64>,
    expert_calls: u64,
    planner_calls: u64,
    repair_log: Vec<RepairEvent>,
    call_trace: Vec<CallRecord>,
    /// Repair context waiting for a patch node's first execution.
    pending_context: BTreeMap<NodeId, RepairContext>,
    /// Base names whose patch was refused or failed; next trigger
    /// escalates straight to reconstruction.
    patch_failed: BTreeSet<String>,
}

/// Outcome of handling one suspension.
enum Handled {
    Repaired,
    Terminal(RunStatus, Option<String>),
}

/// Executes the full lifecycle for one query and returns the run result.
///
/// The registry must cover every expert kind the plan uses plus the
/// rendering kind used by the fallback.
pub fn run(
    query: &str,
    planner: &mut dyn PlannerPort,
    experts: &mut ExpertRegistry,
    config: &EngineConfig,
) -> Result<RunResult, EngineError> {
    config.validate()?;
    let scheduler = config.scheduler()?;
    let mut state = RunState {
        config,
        planner,
        experts,
        scheduler,
        repo: ArtifactRepository::new(),
        // placeholder until the planner call below
        graph: TaskGraph::new(
            query,
            vec![Vertex::new(
                NodeId::new("bootstrap"),
                ExpertKind::Expr,
                "",
                vec![],
            )],
            None,
        )?,
        budget: RepairBudget::new(config.budget.omega_max),
        clock: 0.0,
        expert_wall: 0.0,
        planner_wall: 0.0,
        tokens_by_module: BTreeMap::new(),
        expert_calls: 0,
        planner_calls: 0,
        repair_log: Vec::new(),
        call_trace: Vec::new(),
        pending_context: BTreeMap::new(),
        patch_failed: BTreeSet::new(),
    };

    // phase 1: planning
    state.switch(AdapterId::plan())?;
    let plan = state.planner.initial_plan(query)?;
    state.charge_planner(plan.usage);
    state.graph = TaskGraph::new(query, plan.value.vertices, Some(plan.value.sink))?;
    for vertex in state.graph.vertices() {
        if !state.experts.covers(vertex.expert_kind) {
            return Err(EngineError::Config(ConfigError::Invalid(format!(
                "no expert registered for kind {}",
                vertex.expert_kind
            ))));
        }
    }
    if !state.experts.covers(ExpertKind::Expr) {
        return Err(EngineError::Config(ConfigError::Invalid(
            "fallback requires an EXPR expert".into(),
        )));
    }
    state.repo.push_topology(state.graph.clone());

    // phases 2-4: execute / evaluate / repair until terminal
    let (status, answer) = drive(&mut state)?;
    state.repo.final_answer = answer.clone();

    Ok(finish(state, status, answer))
}

/// The execute / evaluate / repair loop.
fn drive(state: &mut RunState) -> Result<(RunStatus, Option<String>), EngineError> {
    // hard bound: every iteration either executes a vertex (bounded by
    // the budgeted graph size) or charges budget / falls back
    let mut guard = 0usize;
    loop {
        guard += 1;
        if guard > 100_000 {
            return Err(EngineError::Internal("run loop failed to converge".into()));
        }

        let view = state.repo.evaluation_view(&state.graph);
        let cause = check_suspension(&view, &state.config.thresholds);
        if cause.is_suspended() {
            match handle_suspension(state, cause)? {
                Handled::Repaired => continue,
                Handled::Terminal(status, answer) => return Ok((status, answer)),
            }
        }

        let committed = state.repo.committed_ids();
        if committed.contains(state.graph.sink()) {
            let answer = state
                .repo
                .payload_for(state.graph.sink())
                .map(|p| render_answer(&p.output));
            return Ok((RunStatus::Completed, answer));
        }

        let frontier = state.graph.ready_frontier(&committed);
        let Some(node) = frontier.first().cloned() else {
            return Err(EngineError::Internal(
                "no ready vertex and no suspension while the sink is uncommitted".into(),
            ));
        };
        execute_vertex(state, &node)?;
    }
}

/// Runs one vertex: switch adapter, materialize parent payloads, execute,
/// store the feedback.
fn execute_vertex(state: &mut RunState, node: &NodeId) -> Result<(), EngineError> {
    let vertex = state
        .graph
        .vertex(node)
        .ok_or_else(|| EngineError::Internal(format!("frontier returned unknown node {node}")))?
        .clone();

    let mut payloads = Vec::with_capacity(vertex.parents.len());
    for parent in &vertex.parents {
        let payload = state.repo.payload_for(parent).ok_or_else(|| {
            EngineError::Internal(format!("parent {parent} of {node} has no committed artifact"))
        })?;
        payloads.push(payload);
    }
    let repair_context = state.pending_context.remove(node);

    state.call_trace.push(CallRecord {
        node: node.clone(),
        expert_kind: vertex.expert_kind,
        payload_sources: payloads.iter().map(|p| p.source.clone()).collect(),
        repair_context_source: repair_context.as_ref().map(|c| c.source.clone()),
    });

    state.switch(AdapterId::from(vertex.expert_kind))?;
    let call = ExpertCall {
        vertex,
        parent_payloads: payloads,
        repair_context,
    };
    let feedback = state.experts.execute(&call)?;
    state.charge_expert(call.vertex.expert_kind, &feedback);

    let status = if feedback.exception {
        EntryStatus::Failed
    } else {
        EntryStatus::Committed
    };
    state
        .repo
        .append(state.graph.version(), node.clone(), feedback, status);
    Ok(())
}

/// Handles one suspension end to end: decide, generate, apply, account.
fn handle_suspension(
    state: &mut RunState,
    cause: SuspensionCause,
) -> Result<Handled, EngineError> {
    let offender = cause
        .offending_node
        .clone()
        .ok_or_else(|| EngineError::Internal("suspension without an offending node".into()))?;
    let already_failed =
        offender.is_patch() || state.patch_failed.contains(offender.base_name());
    let action = decide_repair(&cause, already_failed, &state.budget);
    let step = state.budget.eta() + 1;

    match action {
        RepairAction::Fallback => run_fallback(state, &cause),
        RepairAction::Patch => {
            state
                .budget
                .charge()
                .map_err(|e| EngineError::Internal(e.to_string()))?;
            state.switch(AdapterId::plan())?;
            let built = build_patch_delta(
                &state.graph,
                &offender,
                &cause,
                state.planner,
                &state.repo,
            );
            match built {
                Ok(built) => {
                    state.charge_planner(built.usage);
                    apply_patch(state, step, cause, &offender, built.delta)?;
                    Ok(Handled::Repaired)
                }
                Err(RepairError::PlannerRefusal | RepairError::InvalidPatchKind { .. }) => {
                    state.planner_calls += 1;
                    state.patch_failed.insert(offender.base_name().to_string());
                    state.log_repair(step, cause.clone(), RepairActionRecord::PatchRefused, true);
                    // escalate within the same suspension; budget already charged
                    attempt_reconstruct(state, step, cause, &offender, false)
                }
                Err(RepairError::Planner(e)) => Err(EngineError::Planner(e)),
                Err(e) => Err(EngineError::Internal(e.to_string())),
            }
        }
        RepairAction::Reconstruct => {
            state
                .budget
                .charge()
                .map_err(|e| EngineError::Internal(e.to_string()))?;
            attempt_reconstruct(state, step, cause, &offender, true)
        }
    }
}

fn apply_patch(
    state: &mut RunState,
    step: u32,
    cause: SuspensionCause,
    offender: &NodeId,
    delta: crate::graph::GraphDelta,
) -> Result<(), EngineError> {
    let patch_id = delta.added[0].id.clone();
    let next = state.graph.apply_delta(&delta).map_err(|e| {
        // an engine-built patch delta failing to apply is a bug, not input
        EngineError::Internal(format!("patch delta rejected: {e}"))
    })?;

    if let Some(context) = repair_context_for(&state.repo, offender) {
        state.pending_context.insert(patch_id.clone(), context);
    }
    if let Some((index, entry)) = state.repo.latest_entry(offender) {
        if entry.status == EntryStatus::Committed {
            state.repo.transition(index, EntryStatus::Superseded)?;
        }
    }
    state.log_repair(
        step,
        cause,
        RepairActionRecord::Patch { added: patch_id },
        true,
    );
    state.graph = next;
    state.repo.push_topology(state.graph.clone());
    Ok(())
}

fn attempt_reconstruct(
    state: &mut RunState,
    step: u32,
    cause: SuspensionCause,
    offender: &NodeId,
    charged: bool,
) -> Result<Handled, EngineError> {
    state.switch(AdapterId::plan())?;
    let built = build_reconstruct_delta(
        &state.graph,
        offender,
        &cause,
        state.planner,
        &state.repo,
        state.config.budget.replacement_size_cap,
    );
    let built = match built {
        Ok(built) => {
            state.charge_planner(built.usage);
            built
        }
        Err(RepairError::PlannerRefusal) => {
            state.planner_calls += 1;
            state.log_repair(step, cause.clone(), RepairActionRecord::ReconstructRefused, charged);
            return run_fallback(state, &cause);
        }
        Err(RepairError::ReplacementTooLarge { proposed, cap }) => {
            state.planner_calls += 1;
            state.log_repair(
                step,
                cause,
                RepairActionRecord::ReconstructRejected {
                    reason: format!("replacement of {proposed} vertices exceeds cap {cap}"),
                },
                charged,
            );
            // the cause persists; the next evaluation decides again
            return Ok(Handled::Repaired);
        }
        Err(RepairError::Planner(e)) => return Err(EngineError::Planner(e)),
        Err(e) => return Err(EngineError::Internal(e.to_string())),
    };

    match state.graph.apply_delta(&built.delta) {
        Ok(next) => {
            // committed work under the cut is kept for the trace but
            // discarded from live context
            for removed in &built.delta.removed {
                if let Some((index, entry)) = state.repo.latest_entry(removed) {
                    if entry.status == EntryStatus::Committed {
                        state.repo.transition(index, EntryStatus::Discarded)?;
                    }
                }
                state.pending_context.remove(removed);
            }
            state.log_repair(
                step,
                cause,
                RepairActionRecord::Reconstruct {
                    removed: built.delta.removed.iter().cloned().collect(),
                    added: built.delta.added.iter().map(|v| v.id.clone()).collect(),
                },
                charged,
            );
            state.graph = next;
            state.repo.push_topology(state.graph.clone());
            Ok(Handled::Repaired)
        }
        Err(e) => {
            state.log_repair(
                step,
                cause,
                RepairActionRecord::ReconstructRejected {
                    reason: e.to_string(),
                },
                charged,
            );
            Ok(Handled::Repaired)
        }
    }
}

/// Budget exhausted (or the planner gave up): synthesize a degraded
/// answer with one rendering call over the query plus every committed
/// artifact.
fn run_fallback(
    state: &mut RunState,
    cause: &SuspensionCause,
) -> Result<Handled, EngineError> {
    let fallback_id = NodeId::with_generation("fallback", state.graph.version());
    let payloads: Vec<Payload> = state
        .repo
        .committed_outputs()
        .into_iter()
        .filter_map(|(node, _)| state.repo.payload_for(&node))
        .collect();
    let vertex = Vertex::new(
        fallback_id.clone(),
        ExpertKind::Expr,
        state.graph.query().to_string(),
        vec![],
    );

    state.call_trace.push(CallRecord {
        node: fallback_id.clone(),
        expert_kind: ExpertKind::Expr,
        payload_sources: payloads.iter().map(|p| p.source.clone()).collect(),
        repair_context_source: None,
    });

    state.switch(AdapterId::from(ExpertKind::Expr))?;
    let call = ExpertCall {
        vertex,
        parent_payloads: payloads,
        repair_context: None,
    };
    let feedback = state.experts.execute(&call)?;
    state.charge_expert(ExpertKind::Expr, &feedback);

    let failed = feedback.exception;
    let answer = if failed {
        None
    } else {
        Some(render_answer(&feedback.output))
    };
    let entry_status = if failed {
        EntryStatus::Failed
    } else {
        EntryStatus::Committed
    };
    state
        .repo
        .append(state.graph.version(), fallback_id.clone(), feedback, entry_status);
    state.log_repair(
        state.budget.eta(),
        cause.clone(),
        RepairActionRecord::Fallback { node: fallback_id },
        false,
    );

    if failed {
        Ok(Handled::Terminal(RunStatus::Failed, None))
    } else {
        Ok(Handled::Terminal(RunStatus::Degraded, answer))
    }
}

/// Renders a final answer from a sink output: drafts pass through,
/// retrieval sinks join their assertions, deduction sinks emit the last
/// verified step.
pub fn render_answer(output: &ExpertOutput) -> String {
    match output {
        ExpertOutput::Expr(expr) => expr.draft.clone(),
        ExpertOutput::Rag(rag) => rag.assertions.join("\n"),
        ExpertOutput::Logic(logic) => logic
            .history
            .iter()
            .zip(&logic.verifications)
            .filter(|(_, ok)| **ok)
            .map(|(step, _)| step.clone())
            .next_back()
            .or_else(|| logic.history.last().cloned())
            .unwrap_or_default(),
    }
}

fn finish(state: RunState, status: RunStatus, answer: Option<String>) -> RunResult {
    let tokens_total: u64 = state.tokens_by_module.values().sum();
    let switch_cost = state.scheduler.log().total_cost();
    let metrics = RunMetrics {
        tokens_total,
        tokens_by_module: state.tokens_by_module,
        tflops: tflops(tokens_total, state.config.backbone.parameter_count),
        latency_seconds: state.expert_wall + state.planner_wall + switch_cost,
        expert_wall_seconds: state.expert_wall,
        planner_wall_seconds: state.planner_wall,
        switch_cost_seconds: switch_cost,
        peak_memory_bytes: state.scheduler.peak_bound(),
        suspensions: state.budget.eta(),
        expert_calls: state.expert_calls,
        planner_calls: state.planner_calls,
    };
    RunResult {
        status,
        answer,
        metrics,
        repair_log: state.repair_log,
        graph_history: state.repo.topologies.clone(),
        artifacts: state.repo.entries.clone(),
        call_trace: state.call_trace,
        switch_log: state.scheduler.into_log(),
    }
}

impl RunState<'_> {
    fn switch(&mut self, target: AdapterId) -> Result<(), EngineError> {
        let cost = self.scheduler.switch_to(target, self.clock)?;
        self.clock += cost;
        Ok(())
    }

    fn charge_planner(&mut self, usage: PlannerUsage) {
        self.planner_calls += 1;
        self.planner_wall += usage.wall_time;
        self.clock += usage.wall_time;
        *self
            .tokens_by_module
            .entry(AdapterId::plan())
            .or_insert(0) += usage.tokens_prompt + usage.tokens_completion;
    }

    fn charge_expert(&mut self, kind: ExpertKind, feedback: &NodeFeedback) {
        self.expert_calls += 1;
        self.expert_wall += feedback.wall_time;
        self.clock += feedback.wall_time;
        *self
            .tokens_by_module
            .entry(AdapterId::from(kind))
            .or_insert(0) += feedback.tokens_total();
    }

    fn log_repair(
        &mut self,
        step: u32,
        cause: SuspensionCause,
        action: RepairActionRecord,
        charged: bool,
    ) {
        let version_before = self
            .repo
            .topologies
            .last()
            .map(|g| g.version())
            .unwrap_or(0);
        self.repair_log.push(RepairEvent {
            step,
            cause,
            action,
            charged,
            version_before,
            version_after: self.graph.version(),
        });
    }
}

/// Verifies the strict module-isolation principle over a recorded run:
/// every payload an expert saw must have been materialized from a
/// repository entry of the right node, and every repair context must
/// point at the entry of the node being repaired.
pub fn strict_isolation_check(result: &RunResult) -> bool {
    let entry_node = |index: usize| result.artifacts.get(index).map(|e| &e.node);
    for record in &result.call_trace {
        for source in &record.payload_sources {
            match source {
                PayloadSource::Repository { node, entry } => {
                    if entry_node(*entry) != Some(node) {
                        return false;
                    }
                }
                PayloadSource::External => return false,
            }
        }
        if let Some(source) = &record.repair_context_source {
            match source {
                PayloadSource::Repository { node, entry } => {
                    let ok = entry_node(*entry) == Some(node)
                        && record.node.is_patch()
                        && record.node.base_name() == node.base_name();
                    if !ok {
                        return false;
                    }
                }
                PayloadSource::External => return false,
            }
        }
    }
    true
}

/// Cross-checks the run-level accounting invariants; returns the list of
/// violated ones (empty for a conserved run).
pub fn conservation_report(result: &RunResult) -> Vec<String> {
    let mut violations = Vec::new();
    let entry_tokens: u64 = result
        .artifacts
        .iter()
        .map(|e| e.feedback.tokens_total())
        .sum();
    let plan_tokens = result
        .metrics
        .tokens_by_module
        .get(&AdapterId::plan())
        .copied()
        .unwrap_or(0);
    if entry_tokens + plan_tokens != result.metrics.tokens_total {
        violations.push(format!(
            "token conservation: entries {entry_tokens} + planner {plan_tokens} != total {}",
            result.metrics.tokens_total
        ));
    }
    let charged = result.repair_log.iter().filter(|e| e.charged).count() as u32;
    if charged != result.metrics.suspensions {
        violations.push(format!(
            "suspension accounting: {charged} charged events != eta {}",
            result.metrics.suspensions
        ));
    }
    let expected_latency = result.metrics.expert_wall_seconds
        + result.metrics.planner_wall_seconds
        + result.metrics.switch_cost_seconds;
    if (expected_latency - result.metrics.latency_seconds).abs() > 1e-9 {
        violations.push("latency breakdown does not sum to latency".into());
    }
    for (i, entry) in result.artifacts.iter().enumerate() {
        if entry.status != EntryStatus::Committed {
            continue;
        }
        let in_topology = result
            .graph_history
            .iter()
            .find(|g| g.version() == entry.version)
            .is_some_and(|g| g.contains(&entry.node) || entry.node.base_name() == "fallback");
        if !in_topology {
            violations.push(format!(
                "committed entry {i} ({}) missing from topology version {}",
                entry.node, entry.version
            ));
        }
    }
    violations
}
