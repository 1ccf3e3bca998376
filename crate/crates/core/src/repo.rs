//! The global artifact repository: the single state space every payload,
//! topology, and feedback flows through. Experts never communicate
//! directly — parent context is always materialized from entries stored
//! here, which is what makes the strict-isolation check possible.
//!
//! Entries are append-only. A stored feedback never changes; only the
//! entry status moves, and only along the lattice
//! `COMMITTED -> {SUPERSEDED, DISCARDED}` with `FAILED` terminal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::EvalSample;
use crate::expert::{ExpertOutput, NodeFeedback, Payload, PayloadSource};
use crate::graph::{NodeId, TaskGraph};

/// Lifecycle status of one stored artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryStatus {
    #[serde(rename = "COMMITTED")]
    Committed,
    #[serde(rename = "FAILED")]
    Failed,
    #[serde(rename = "DISCARDED")]
    Discarded,
    #[serde(rename = "SUPERSEDED")]
    Superseded,
}

/// One stored execution artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Graph version current when the node executed.
    pub version: u32,
    pub node: NodeId,
    pub feedback: NodeFeedback,
    pub status: EntryStatus,
}

#[derive(Debug, Error, PartialEq)]
pub enum RepoError {
    #[error("entry {index} does not exist")]
    UnknownEntry { index: usize },
    #[error("illegal status transition {from:?} -> {to:?} on entry {index}")]
    IllegalTransition {
        index: usize,
        from: EntryStatus,
        to: EntryStatus,
    },
}

/// Append-only store of node payloads, topologies, and feedback.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArtifactRepository {
    pub entries: Vec<ArtifactEntry>,
    pub topologies: Vec<TaskGraph>,
    pub final_answer: Option<String>,
}

impl ArtifactRepository {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an artifact, returning its entry index.
    pub fn append(
        &mut self,
        version: u32,
        node: NodeId,
        feedback: NodeFeedback,
        status: EntryStatus,
    ) -> usize {
        self.entries.push(ArtifactEntry {
            version,
            node,
            feedback,
            status,
        });
        self.entries.len() - 1
    }

    /// Moves an entry's status along the allowed lattice.
    pub fn transition(&mut self, index: usize, to: EntryStatus) -> Result<(), RepoError> {
        let entry = self
            .entries
            .get_mut(index)
            .ok_or(RepoError::UnknownEntry { index })?;
        let allowed = matches!(
            (entry.status, to),
            (EntryStatus::Committed, EntryStatus::Superseded)
                | (EntryStatus::Committed, EntryStatus::Discarded)
        );
        if !allowed {
            return Err(RepoError::IllegalTransition {
                index,
                from: entry.status,
                to,
            });
        }
        entry.status = to;
        Ok(())
    }

    pub fn push_topology(&mut self, graph: TaskGraph) {
        self.topologies.push(graph);
    }

    /// Latest stored entry for a node, with its index.
    pub fn latest_entry(&self, node: &NodeId) -> Option<(usize, &ArtifactEntry)> {
        self.entries
            .iter()
            .enumerate()
            .rev()
            .find(|(_, e)| &e.node == node)
    }

    /// Node ids whose latest entry is committed.
    pub fn committed_ids(&self) -> std::collections::BTreeSet<NodeId> {
        let mut latest: std::collections::BTreeMap<&NodeId, EntryStatus> =
            std::collections::BTreeMap::new();
        for entry in &self.entries {
            latest.insert(&entry.node, entry.status);
        }
        latest
            .into_iter()
            .filter(|(_, s)| *s == EntryStatus::Committed)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Committed outputs in entry order, for downstream context.
    pub fn committed_outputs(&self) -> Vec<(NodeId, ExpertOutput)> {
        let committed = self.committed_ids();
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (index, entry) in self.entries.iter().enumerate().rev() {
            if committed.contains(&entry.node) && seen.insert(entry.node.clone()) {
                out.push((index, entry));
            }
        }
        out.sort_by_key(|(index, _)| *index);
        out.into_iter()
            .map(|(_, e)| (e.node.clone(), e.feedback.output.clone()))
            .collect()
    }

    /// Materializes a provenance-tagged payload from a node's latest
    /// committed entry.
    pub fn payload_for(&self, node: &NodeId) -> Option<Payload> {
        let (index, entry) = self.latest_entry(node)?;
        if entry.status != EntryStatus::Committed {
            return None;
        }
        Some(Payload {
            source: PayloadSource::Repository {
                node: node.clone(),
                entry: index,
            },
            output: entry.feedback.output.clone(),
        })
    }

    /// The live evaluation view against a graph version: the latest entry
    /// per node that is still in the topology, not failed-marked, and in
    /// status `COMMITTED` or `FAILED`. Rows come back in execution order
    /// and carry topological ranks for the evaluator's tie-breaks.
    pub fn evaluation_view(&self, graph: &TaskGraph) -> Vec<EvalSample> {
        let ranks = match graph.topo_ranks() {
            Ok(r) => r,
            Err(_) => return Vec::new(),
        };
        let mut latest: std::collections::BTreeMap<&NodeId, (usize, &ArtifactEntry)> =
            std::collections::BTreeMap::new();
        for (index, entry) in self.entries.iter().enumerate() {
            latest.insert(&entry.node, (index, entry));
        }
        let mut rows: Vec<(usize, EvalSample)> = latest
            .into_values()
            .filter(|(_, e)| {
                matches!(e.status, EntryStatus::Committed | EntryStatus::Failed)
                    && graph.contains(&e.node)
                    && !graph.is_failed_mark(&e.node)
            })
            .map(|(index, e)| {
                (
                    index,
                    EvalSample {
                        node: e.node.clone(),
                        rank: ranks.get(&e.node).copied().unwrap_or(0),
                        exception: e.feedback.exception,
                        confidence: e.feedback.confidence,
                    },
                )
            })
            .collect();
        rows.sort_by_key(|(index, _)| *index);
        rows.into_iter().map(|(_, s)| s).collect()
    }

    /// Sum of prompt and completion tokens over every stored entry,
    /// including failed and discarded ones.
    pub fn token_total(&self) -> u64 {
        self.entries.iter().map(|e| e.feedback.tokens_total()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertOutput;
    use crate::graph::{ExpertKind, Vertex};

    fn id(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn feedback(confidence: f64, exception: bool) -> NodeFeedback {
        NodeFeedback::new(
            ExpertOutput::empty(ExpertKind::Logic),
            exception,
            confidence,
            10,
            5,
            0.5,
        )
    }

    #[test]
    fn transitions_follow_the_lattice() {
        let mut repo = ArtifactRepository::new();
        let a = repo.append(0, id("v1"), feedback(0.9, false), EntryStatus::Committed);
        let b = repo.append(0, id("v2"), feedback(0.0, true), EntryStatus::Failed);

        assert!(repo.transition(a, EntryStatus::Superseded).is_ok());
        // superseded is terminal for further moves
        assert!(matches!(
            repo.transition(a, EntryStatus::Discarded),
            Err(RepoError::IllegalTransition { .. })
        ));
        // failed is terminal
        assert!(matches!(
            repo.transition(b, EntryStatus::Committed),
            Err(RepoError::IllegalTransition { .. })
        ));
        assert!(matches!(
            repo.transition(b, EntryStatus::Discarded),
            Err(RepoError::IllegalTransition { .. })
        ));
    }

    #[test]
    fn evaluation_view_skips_superseded_and_failed_marked_nodes() {
        let graph = TaskGraph::new(
            "q",
            vec![
                Vertex::new(id("v1"), ExpertKind::Logic, "a", vec![]),
                Vertex::new(id("v2"), ExpertKind::Expr, "b", vec![id("v1")]),
            ],
            None,
        )
        .unwrap();
        let mut repo = ArtifactRepository::new();
        let a = repo.append(0, id("v1"), feedback(0.2, false), EntryStatus::Committed);
        repo.append(0, id("v2"), feedback(0.9, false), EntryStatus::Committed);

        let view = repo.evaluation_view(&graph);
        assert_eq!(view.len(), 2);
        assert_eq!(view[0].node, id("v1"));
        assert_eq!(view[0].rank, 0);

        repo.transition(a, EntryStatus::Superseded).unwrap();
        let view = repo.evaluation_view(&graph);
        assert_eq!(view.len(), 1);
        assert_eq!(view[0].node, id("v2"));
    }

    #[test]
    fn payloads_carry_repository_provenance() {
        let mut repo = ArtifactRepository::new();
        let index = repo.append(0, id("v1"), feedback(0.9, false), EntryStatus::Committed);
        let payload = repo.payload_for(&id("v1")).unwrap();
        assert_eq!(
            payload.source,
            PayloadSource::Repository {
                node: id("v1"),
                entry: index
            }
        );
        // nothing committed for v2
        assert!(repo.payload_for(&id("v2")).is_none());
    }

    #[test]
    fn token_total_includes_failed_entries() {
        let mut repo = ArtifactRepository::new();
        repo.append(0, id("v1"), feedback(0.9, false), EntryStatus::Committed);
        repo.append(0, id("v2"), feedback(0.0, true), EntryStatus::Failed);
        assert_eq!(repo.token_total(), 30);
    }
}
