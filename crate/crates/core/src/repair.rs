//! The hierarchical repair policy: fine-grained patching for localized
//! faults, subgraph reconstruction for ruptures, and a degraded fallback
//! once the budget is spent.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{SuspensionCause, SuspensionKind};
use crate::expert::PayloadSource;
use crate::graph::{DeltaKind, GraphDelta, GraphError, NodeId, TaskGraph, Vertex};
use crate::planner::{PatchContext, PlannerError, PlannerPort, PlannerUsage, SubgraphContext};
use crate::repo::ArtifactRepository;

/// Cumulative suspension count against its cap. Exhaustion routes the
/// next suspension to the fallback instead of another repair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairBudget {
    eta: u32,
    omega_max: u32,
}

impl RepairBudget {
    pub fn new(omega_max: u32) -> Self {
        RepairBudget { eta: 0, omega_max }
    }

    pub fn eta(&self) -> u32 {
        self.eta
    }

    pub fn omega_max(&self) -> u32 {
        self.omega_max
    }

    pub fn exhausted(&self) -> bool {
        self.eta >= self.omega_max
    }

    pub fn charge(&mut self) -> Result<(), RepairError> {
        if self.exhausted() {
            return Err(RepairError::BudgetExhausted {
                omega_max: self.omega_max,
            });
        }
        self.eta += 1;
        Ok(())
    }
}

/// What the repair policy chose to do about a suspension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairAction {
    #[serde(rename = "PATCH")]
    Patch,
    #[serde(rename = "RECONSTRUCT")]
    Reconstruct,
    #[serde(rename = "FALLBACK")]
    Fallback,
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("planner declined to propose a repair")]
    PlannerRefusal,
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("patch kind {proposed} not permitted for failed {expected} node (cause {cause:?})")]
    InvalidPatchKind {
        proposed: crate::graph::ExpertKind,
        expected: crate::graph::ExpertKind,
        cause: SuspensionKind,
    },
    #[error("replacement subgraph of {proposed} vertices exceeds cap {cap}")]
    ReplacementTooLarge { proposed: usize, cap: usize },
    #[error("repair budget exhausted at omega_max = {omega_max}")]
    BudgetExhausted { omega_max: u32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Routes a suspension to a repair tier.
///
/// Localized causes (exception flag, confidence floor) get the cheap
/// patch first; a failed patch or a global-uncertainty breach escalates
/// to reconstruction; an exhausted budget always falls back.
pub fn decide_repair(
    cause: &SuspensionCause,
    patch_already_failed: bool,
    budget: &RepairBudget,
) -> RepairAction {
    debug_assert!(cause.is_suspended());
    if budget.exhausted() {
        return RepairAction::Fallback;
    }
    match cause.kind {
        SuspensionKind::GlobalUncertainty => RepairAction::Reconstruct,
        SuspensionKind::ExceptionFlag | SuspensionKind::ConfidenceFloor => {
            if patch_already_failed {
                RepairAction::Reconstruct
            } else {
                RepairAction::Patch
            }
        }
        SuspensionKind::None => RepairAction::Fallback,
    }
}

/// A built delta plus the planner usage it cost.
#[derive(Debug)]
pub struct BuiltDelta {
    pub delta: GraphDelta,
    pub usage: PlannerUsage,
}

/// Builds a patch-insertion delta for `failed`: the planner proposes the
/// repair vertex, the engine wires it — the patch inherits the failed
/// node's parents and takes over its out-edges.
pub fn build_patch_delta(
    graph: &TaskGraph,
    failed: &NodeId,
    cause: &SuspensionCause,
    planner: &mut dyn PlannerPort,
    repo: &ArtifactRepository,
) -> Result<BuiltDelta, RepairError> {
    let failed_vertex = graph
        .vertex(failed)
        .ok_or_else(|| GraphError::UnknownNode(failed.clone()))?
        .clone();
    let failed_feedback = repo.latest_entry(failed).map(|(_, e)| &e.feedback);
    let proposal = planner.propose_patch(
        &failed_vertex,
        &PatchContext {
            cause,
            failed_feedback,
        },
    )?;
    let usage = proposal.usage;
    let proposed = proposal.value.ok_or(RepairError::PlannerRefusal)?;

    // The planner picks the expert; the engine enforces the protocol: a
    // patch keeps the failed node's kind, except a confidence-floor cause
    // may route to retrieval to fill a factual gap.
    let kind_ok = proposed.expert_kind == failed_vertex.expert_kind
        || (cause.kind == SuspensionKind::ConfidenceFloor
            && proposed.expert_kind == crate::graph::ExpertKind::Rag);
    if !kind_ok {
        return Err(RepairError::InvalidPatchKind {
            proposed: proposed.expert_kind,
            expected: failed_vertex.expert_kind,
            cause: cause.kind,
        });
    }

    let patch_id = failed_vertex.id.patch_of();
    let patch = Vertex::new(
        patch_id.clone(),
        proposed.expert_kind,
        proposed.instruction,
        failed_vertex.parents.clone(),
    );
    let rewired: BTreeSet<(NodeId, NodeId)> = graph
        .children(failed)
        .into_iter()
        .map(|child| (patch_id.clone(), child))
        .collect();
    Ok(BuiltDelta {
        delta: GraphDelta {
            kind: DeltaKind::PatchInsert,
            removed: BTreeSet::new(),
            added: vec![patch],
            rewired,
            trigger: cause.clone(),
        },
        usage,
    })
}

/// Builds a subgraph-replacement delta rooted at `failed`: the downstream
/// closure is truncated and the planner's replacement is grafted onto the
/// failed node's surviving parents.
pub fn build_reconstruct_delta(
    graph: &TaskGraph,
    failed: &NodeId,
    cause: &SuspensionCause,
    planner: &mut dyn PlannerPort,
    repo: &ArtifactRepository,
    replacement_size_cap: usize,
) -> Result<BuiltDelta, RepairError> {
    let failed_vertex = graph
        .vertex(failed)
        .ok_or_else(|| GraphError::UnknownNode(failed.clone()))?
        .clone();
    let removed = graph.downstream_closure(failed)?;
    let sink_removed = removed.contains(graph.sink());
    let sink_kind = graph
        .vertex(graph.sink())
        .map(|v| v.expert_kind)
        .unwrap_or(crate::graph::ExpertKind::Expr);
    let upstream: Vec<(NodeId, crate::expert::ExpertOutput)> = repo
        .committed_outputs()
        .into_iter()
        .filter(|(id, _)| !removed.contains(id) && graph.contains(id))
        .collect();

    let ctx = SubgraphContext {
        cause,
        removed: &removed,
        attach_parents: &failed_vertex.parents,
        sink_removed,
        sink_kind,
        upstream: &upstream,
        next_version: graph.version() + 1,
    };
    let proposal = planner.propose_subgraph(&failed_vertex, graph.query(), &ctx)?;
    let usage = proposal.usage;
    let proposed = proposal.value.ok_or(RepairError::PlannerRefusal)?;

    let cap = removed.len() + replacement_size_cap;
    if proposed.vertices.len() > cap {
        return Err(RepairError::ReplacementTooLarge {
            proposed: proposed.vertices.len(),
            cap,
        });
    }

    // Roots attach to the failed node's surviving parents, plus any
    // survivor whose entire downstream fell inside the cut: truncation
    // must not orphan a converging sibling branch.
    let mut attach = failed_vertex.parents.clone();
    for survivor in dangling_survivors(graph, &removed) {
        if !attach.contains(&survivor) {
            attach.push(survivor);
        }
    }
    let added: Vec<Vertex> = proposed
        .vertices
        .into_iter()
        .map(|mut v| {
            if v.parents.is_empty() {
                v.parents = attach.clone();
            }
            v
        })
        .collect();

    Ok(BuiltDelta {
        delta: GraphDelta {
            kind: DeltaKind::SubgraphReplace,
            removed,
            added,
            rewired: BTreeSet::new(),
            trigger: cause.clone(),
        },
        usage,
    })
}

/// Live vertices outside the cut whose every child sits inside it; they
/// would be left without a path to the sink once the cut applies.
pub fn dangling_survivors(graph: &TaskGraph, removed: &BTreeSet<NodeId>) -> Vec<NodeId> {
    graph
        .vertices()
        .filter(|v| !removed.contains(&v.id) && !graph.is_failed_mark(&v.id))
        .filter(|v| {
            let children = graph.children(&v.id);
            !children.is_empty() && children.iter().all(|c| removed.contains(c))
        })
        .map(|v| v.id.clone())
        .collect()
}

/// Provenance-tagged repair context for the patch call: the failed
/// node's recorded feedback, rendered to text.
pub fn repair_context_for(
    repo: &ArtifactRepository,
    failed: &NodeId,
) -> Option<crate::expert::RepairContext> {
    let (index, entry) = repo.latest_entry(failed)?;
    Some(crate::expert::RepairContext {
        text: serde_json::to_string(&entry.feedback).expect("serializable feedback"),
        source: PayloadSource::Repository {
            node: failed.clone(),
            entry: index,
        },
    })
}
