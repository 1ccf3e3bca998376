//! Versioned task-graph model.
//!
//! A [`TaskGraph`] is an immutable snapshot of the decomposed task at one
//! version. Repairs never mutate a snapshot: [`TaskGraph::apply_delta`]
//! produces the next version and the orchestrator keeps every prior
//! version for the run trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::SuspensionCause;

/// The fixed pool of expert kinds a vertex can be assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpertKind {
    #[serde(rename = "RAG")]
    Rag,
    #[serde(rename = "LOGIC")]
    Logic,
    #[serde(rename = "EXPR")]
    Expr,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Rag, ExpertKind::Logic, ExpertKind::Expr];

    pub fn name(&self) -> &'static str {
        match self {
            ExpertKind::Rag => "RAG",
            ExpertKind::Logic => "LOGIC",
            ExpertKind::Expr => "EXPR",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifier of a task-graph vertex.
///
/// Repair descendants stay linked to the vertex they replace: a patch of
/// `v2` renders as `v2_patch`, and replacement vertices introduced at graph
/// version `t` carry generation `t` (rendered `name@t`). Base names must
/// not contain `@`; the `_patch` suffix is reserved for patch nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    name: String,
    generation: u32,
    patch: bool,
}

impl NodeId {
    pub fn new(name: impl Into<String>) -> Self {
        NodeId {
            name: name.into(),
            generation: 0,
            patch: false,
        }
    }

    /// A fresh id introduced by a repair at graph version `generation`.
    pub fn with_generation(name: impl Into<String>, generation: u32) -> Self {
        NodeId {
            name: name.into(),
            generation,
            patch: false,
        }
    }

    /// The patch descendant of this id: same base name, bumped generation.
    pub fn patch_of(&self) -> Self {
        NodeId {
            name: self.name.clone(),
            generation: self.generation + 1,
            patch: true,
        }
    }

    pub fn is_patch(&self) -> bool {
        self.patch
    }

    pub fn base_name(&self) -> &str {
        &self.name
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.patch, self.generation) {
            (false, 0) => write!(f, "{}", self.name),
            (false, g) => write!(f, "{}@{}", self.name, g),
            (true, 1) => write!(f, "{}_patch", self.name),
            (true, g) => write!(f, "{}_patch{}", self.name, g),
        }
    }
}

impl FromStr for NodeId {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(GraphError::BadNodeId(s.to_string()));
        }
        if let Some(pos) = s.rfind("_patch") {
            let (name, rest) = (&s[..pos], &s[pos + "_patch".len()..]);
            if !name.is_empty() && !name.contains('@') {
                let generation = if rest.is_empty() {
                    Some(1)
                } else {
                    rest.parse::<u32>().ok()
                };
                if let Some(generation) = generation {
                    return Ok(NodeId {
                        name: name.to_string(),
                        generation,
                        patch: true,
                    });
                }
            }
            return Err(GraphError::BadNodeId(s.to_string()));
        }
        if let Some((name, gen)) = s.rsplit_once('@') {
            let generation = gen
                .parse::<u32>()
                .map_err(|_| GraphError::BadNodeId(s.to_string()))?;
            if name.is_empty() || name.contains('@') {
                return Err(GraphError::BadNodeId(s.to_string()));
            }
            return Ok(NodeId {
                name: name.to_string(),
                generation,
                patch: false,
            });
        }
        Ok(NodeId::new(s))
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A sub-task vertex: which expert runs it, what it is asked to do, and
/// which vertices' outputs it consumes (in order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: NodeId,
    pub expert_kind: ExpertKind,
    pub instruction: String,
    pub parents: Vec<NodeId>,
}

impl Vertex {
    pub fn new(
        id: NodeId,
        expert_kind: ExpertKind,
        instruction: impl Into<String>,
        parents: Vec<NodeId>,
    ) -> Self {
        Vertex {
            id,
            expert_kind,
            instruction: instruction.into(),
            parents,
        }
    }
}

/// One structural violation found by [`TaskGraph::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    Cycle { node: NodeId },
    DanglingParent { vertex: NodeId, parent: NodeId },
    DuplicateParent { vertex: NodeId, parent: NodeId },
    EdgeParentMismatch { from: NodeId, to: NodeId },
    NoSink,
    MultipleSinks { sinks: Vec<NodeId> },
    SinkMismatch { declared: NodeId, derived: NodeId },
    UnknownFailedMark { node: NodeId },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::Cycle { .. } => "CYCLE",
            Violation::DanglingParent { .. } => "DANGLING_PARENT",
            Violation::DuplicateParent { .. } => "DUPLICATE_PARENT",
            Violation::EdgeParentMismatch { .. } => "EDGE_PARENT_MISMATCH",
            Violation::NoSink => "NO_SINK",
            Violation::MultipleSinks { .. } => "MULTIPLE_SINKS",
            Violation::SinkMismatch { .. } => "SINK_MISMATCH",
            Violation::UnknownFailedMark { .. } => "UNKNOWN_FAILED_MARK",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { node } => write!(f, "CYCLE through {node}"),
            Violation::DanglingParent { vertex, parent } => {
                write!(f, "DANGLING_PARENT {parent} referenced by {vertex}")
            }
            Violation::DuplicateParent { vertex, parent } => {
                write!(f, "DUPLICATE_PARENT {parent} on {vertex}")
            }
            Violation::EdgeParentMismatch { from, to } => {
                write!(f, "EDGE_PARENT_MISMATCH {from} -> {to}")
            }
            Violation::NoSink => write!(f, "NO_SINK"),
            Violation::MultipleSinks { sinks } => {
                write!(f, "MULTIPLE_SINKS ")?;
                for (i, s) in sinks.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{s}")?;
                }
                Ok(())
            }
            Violation::SinkMismatch { declared, derived } => {
                write!(f, "SINK_MISMATCH declared {declared}, derived {derived}")
            }
            Violation::UnknownFailedMark { node } => write!(f, "UNKNOWN_FAILED_MARK {node}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid node id `{0}`")]
    BadNodeId(String),
    #[error("invalid graph: {}", render_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("invalid delta: {reason}")]
    InvalidDelta { reason: String },
}

fn render_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Which shape of repair a delta performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaKind {
    #[serde(rename = "PATCH_INSERT")]
    PatchInsert,
    #[serde(rename = "SUBGRAPH_REPLACE")]
    SubgraphReplace,
}

/// A structural repair applied to one graph version to produce the next.
///
/// `rewired` pairs `(new_parent, child)` replace the triggering node in
/// `child`'s parent list, preserving position. For `PatchInsert` the
/// triggering node is additionally marked failed and drops out of future
/// frontiers; for `SubgraphReplace` the removed set must equal the
/// triggering node's downstream closure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDelta {
    pub kind: DeltaKind,
    pub removed: BTreeSet<NodeId>,
    pub added: Vec<Vertex>,
    pub rewired: BTreeSet<(NodeId, NodeId)>,
    pub trigger: SuspensionCause,
}

/// Serialized shape of a task graph (also the on-disk plan document body).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphRepr {
    version: u32,
    query: String,
    vertices: Vec<Vertex>,
    sink: NodeId,
    failed: Vec<NodeId>,
}

/// One immutable version of the task graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct TaskGraph {
    version: u32,
    query: String,
    vertices: BTreeMap<NodeId, Vertex>,
    edges: BTreeSet<(NodeId, NodeId)>,
    sink: NodeId,
    failed: BTreeSet<NodeId>,
}

impl TryFrom<GraphRepr> for TaskGraph {
    type Error = GraphError;

    fn try_from(repr: GraphRepr) -> Result<Self, Self::Error> {
        TaskGraph::assemble(
            repr.version,
            repr.query,
            repr.vertices,
            Some(repr.sink),
            repr.failed.into_iter().collect(),
        )
    }
}

impl From<TaskGraph> for GraphRepr {
    fn from(graph: TaskGraph) -> Self {
        GraphRepr {
            version: graph.version,
            query: graph.query,
            vertices: graph.vertices.into_values().collect(),
            sink: graph.sink,
            failed: graph.failed.into_iter().collect(),
        }
    }
}

impl TaskGraph {
    /// Builds and validates the initial version (t = 0) of a graph.
    pub fn new(
        query: impl Into<String>,
        vertices: Vec<Vertex>,
        declared_sink: Option<NodeId>,
    ) -> Result<Self, GraphError> {
        TaskGraph::assemble(0, query.into(), vertices, declared_sink, BTreeSet::new())
    }

    /// Builds a graph without rejecting violations. Used by the critic to
    /// score recorded topologies that may be structurally illegal.
    pub fn new_unvalidated(
        query: impl Into<String>,
        vertices: Vec<Vertex>,
        sink: NodeId,
    ) -> Self {
        let vertices: BTreeMap<NodeId, Vertex> =
            vertices.into_iter().map(|v| (v.id.clone(), v)).collect();
        let edges = derive_edges(&vertices);
        TaskGraph {
            version: 0,
            query: query.into(),
            vertices,
            edges,
            sink,
            failed: BTreeSet::new(),
        }
    }

    fn assemble(
        version: u32,
        query: String,
        vertices: Vec<Vertex>,
        declared_sink: Option<NodeId>,
        failed: BTreeSet<NodeId>,
    ) -> Result<Self, GraphError> {
        let mut map = BTreeMap::new();
        for v in vertices {
            if map.insert(v.id.clone(), v.clone()).is_some() {
                return Err(GraphError::InvalidDelta {
                    reason: format!("duplicate vertex id {}", v.id),
                });
            }
        }
        let edges = derive_edges(&map);
        let derived_sink = derive_sink(&map, &edges, &failed);
        let sink = match (declared_sink, &derived_sink) {
            (Some(s), _) => s,
            (None, Ok(s)) => s.clone(),
            (None, Err(_)) => NodeId::new("?"),
        };
        let graph = TaskGraph {
            version,
            query,
            vertices: map,
            edges,
            sink,
            failed,
        };
        let report = graph.validate();
        if report.is_empty() {
            Ok(graph)
        } else {
            Err(GraphError::Invalid(report))
        }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn sink(&self) -> &NodeId {
        &self.sink
    }

    pub fn vertex(&self, id: &NodeId) -> Option<&Vertex> {
        self.vertices.get(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.vertices.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Vertex> {
        self.vertices.values()
    }

    pub fn edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.edges
    }

    pub fn is_failed_mark(&self, id: &NodeId) -> bool {
        self.failed.contains(id)
    }

    pub fn failed_marks(&self) -> &BTreeSet<NodeId> {
        &self.failed
    }

    /// Children of `id` in edge order.
    pub fn children(&self, id: &NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter(|(from, _)| from == id)
            .map(|(_, to)| to.clone())
            .collect()
    }

    /// Checks every structural invariant; an empty report means the graph
    /// is acyclic, edge/parent-consistent, and has exactly one live sink.
    pub fn validate(&self) -> Vec<Violation> {
        let mut report = Vec::new();

        for vertex in self.vertices.values() {
            let mut seen = BTreeSet::new();
            for parent in &vertex.parents {
                if !self.vertices.contains_key(parent) {
                    report.push(Violation::DanglingParent {
                        vertex: vertex.id.clone(),
                        parent: parent.clone(),
                    });
                }
                if !seen.insert(parent.clone()) {
                    report.push(Violation::DuplicateParent {
                        vertex: vertex.id.clone(),
                        parent: parent.clone(),
                    });
                }
            }
        }

        let derived = derive_edges(&self.vertices);
        for edge in self.edges.symmetric_difference(&derived) {
            report.push(Violation::EdgeParentMismatch {
                from: edge.0.clone(),
                to: edge.1.clone(),
            });
        }

        for node in cycle_nodes(&self.vertices, &self.edges) {
            report.push(Violation::Cycle { node });
        }

        for mark in &self.failed {
            if !self.vertices.contains_key(mark) {
                report.push(Violation::UnknownFailedMark { node: mark.clone() });
            }
        }

        match derive_sink(&self.vertices, &self.edges, &self.failed) {
            Ok(derived) => {
                if derived != self.sink {
                    report.push(Violation::SinkMismatch {
                        declared: self.sink.clone(),
                        derived,
                    });
                }
            }
            Err(v) => report.push(v),
        }

        report
    }

    /// Longest-path rank of every vertex from the roots. Errors if the
    /// graph is cyclic.
    pub fn topo_ranks(&self) -> Result<BTreeMap<NodeId, usize>, GraphError> {
        let mut indegree: BTreeMap<&NodeId, usize> = self
            .vertices
            .keys()
            .map(|id| (id, self.vertices[id].parents.len()))
            .collect();
        let mut ranks: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut queue: VecDeque<&NodeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        while let Some(id) = queue.pop_front() {
            let rank = self.vertices[id]
                .parents
                .iter()
                .map(|p| ranks.get(p).copied().unwrap_or(0) + 1)
                .max()
                .unwrap_or(0);
            ranks.insert(id.clone(), rank);
            for (from, to) in self.edges.range((id.clone(), NodeId::new(""))..) {
                if from != id {
                    break;
                }
                let d = indegree.get_mut(to).expect("edge target present");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(to);
                }
            }
        }
        if ranks.len() != self.vertices.len() {
            let node = self
                .vertices
                .keys()
                .find(|id| !ranks.contains_key(*id))
                .cloned()
                .expect("some node missing a rank");
            return Err(GraphError::Invalid(vec![Violation::Cycle { node }]));
        }
        Ok(ranks)
    }

    /// Number of vertices on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.topo_ranks()
            .map(|r| r.values().max().map(|m| m + 1).unwrap_or(0))
            .unwrap_or(0)
    }

    /// The uncommitted, non-failed vertices whose parents are all
    /// committed, ordered by topological rank then id.
    pub fn ready_frontier(&self, committed: &BTreeSet<NodeId>) -> Vec<NodeId> {
        let ranks = match self.topo_ranks() {
            Ok(r) => r,
            Err(_) => return Vec::new(),
        };
        let mut ready: Vec<&Vertex> = self
            .vertices
            .values()
            .filter(|v| !committed.contains(&v.id) && !self.failed.contains(&v.id))
            .filter(|v| v.parents.iter().all(|p| committed.contains(p)))
            .collect();
        ready.sort_by_key(|v| (ranks[&v.id], v.id.clone()));
        ready.into_iter().map(|v| v.id.clone()).collect()
    }

    /// `root` plus every vertex reachable from it along directed edges.
    pub fn downstream_closure(&self, root: &NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        if !self.vertices.contains_key(root) {
            return Err(GraphError::UnknownNode(root.clone()));
        }
        let mut closure = BTreeSet::new();
        let mut queue = VecDeque::from([root.clone()]);
        while let Some(id) = queue.pop_front() {
            if !closure.insert(id.clone()) {
                continue;
            }
            for child in self.children(&id) {
                queue.push_back(child);
            }
        }
        Ok(closure)
    }

    /// Applies a repair delta, yielding the next graph version. The input
    /// snapshot is untouched; the result is validated before it is
    /// returned.
    pub fn apply_delta(&self, delta: &GraphDelta) -> Result<TaskGraph, GraphError> {
        let offender = delta.trigger.offending_node.clone();
        match delta.kind {
            DeltaKind::PatchInsert => {
                if !delta.removed.is_empty() {
                    return Err(GraphError::InvalidDelta {
                        reason: "patch insertion must not remove nodes".into(),
                    });
                }
            }
            DeltaKind::SubgraphReplace => {
                if !delta.removed.is_empty() {
                    let offender = offender.clone().ok_or_else(|| GraphError::InvalidDelta {
                        reason: "subgraph replacement without a triggering node".into(),
                    })?;
                    let closure = self.downstream_closure(&offender)?;
                    if delta.removed != closure {
                        return Err(GraphError::InvalidDelta {
                            reason: format!(
                                "removed set must equal the downstream closure of {offender}"
                            ),
                        });
                    }
                }
            }
        }

        let mut vertices = self.vertices.clone();
        let mut failed = self.failed.clone();
        for id in &delta.removed {
            vertices.remove(id);
            failed.remove(id);
        }
        for vertex in &delta.added {
            if vertices.contains_key(&vertex.id) {
                return Err(GraphError::InvalidDelta {
                    reason: format!("added vertex {} already exists", vertex.id),
                });
            }
            vertices.insert(vertex.id.clone(), vertex.clone());
        }
        if !delta.rewired.is_empty() {
            let offender = offender.clone().ok_or_else(|| GraphError::InvalidDelta {
                reason: "rewire without a triggering node".into(),
            })?;
            for (new_parent, child) in &delta.rewired {
                let vertex = vertices.get_mut(child).ok_or_else(|| GraphError::InvalidDelta {
                    reason: format!("rewire target {child} not present"),
                })?;
                let slot = vertex.parents.iter().position(|p| p == &offender).ok_or_else(
                    || GraphError::InvalidDelta {
                        reason: format!("{child} does not list {offender} as a parent"),
                    },
                )?;
                vertex.parents[slot] = new_parent.clone();
            }
        }
        if delta.kind == DeltaKind::PatchInsert && !delta.added.is_empty() {
            let offender = offender.ok_or_else(|| GraphError::InvalidDelta {
                reason: "patch insertion without a triggering node".into(),
            })?;
            failed.insert(offender);
        }

        let next = TaskGraph::assemble(
            self.version + 1,
            self.query.clone(),
            vertices.into_values().collect(),
            None,
            failed,
        );
        match next {
            Ok(graph) => Ok(graph),
            Err(GraphError::Invalid(report)) => Err(GraphError::InvalidDelta {
                reason: render_violations(&report),
            }),
            Err(e) => Err(e),
        }
    }
}

fn derive_edges(vertices: &BTreeMap<NodeId, Vertex>) -> BTreeSet<(NodeId, NodeId)> {
    let mut edges = BTreeSet::new();
    for vertex in vertices.values() {
        for parent in &vertex.parents {
            edges.insert((parent.clone(), vertex.id.clone()));
        }
    }
    edges
}

/// Nodes that sit on a directed cycle: Kahn leftovers narrowed to the
/// vertices that can reach themselves (a leftover can also be a node
/// merely downstream of a cycle, which does not participate in it).
fn cycle_nodes(
    vertices: &BTreeMap<NodeId, Vertex>,
    edges: &BTreeSet<(NodeId, NodeId)>,
) -> Vec<NodeId> {
    let mut indegree: BTreeMap<&NodeId, usize> = vertices.keys().map(|id| (id, 0)).collect();
    for (_, to) in edges {
        if let Some(d) = indegree.get_mut(to) {
            *d += 1;
        }
    }
    let mut queue: VecDeque<&NodeId> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut seen = 0usize;
    let mut done: BTreeSet<&NodeId> = BTreeSet::new();
    while let Some(id) = queue.pop_front() {
        if !done.insert(id) {
            continue;
        }
        seen += 1;
        for (from, to) in edges.iter() {
            if from == id {
                if let Some(d) = indegree.get_mut(to) {
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(to);
                    }
                }
            }
        }
    }
    if seen == vertices.len() {
        return Vec::new();
    }
    vertices
        .keys()
        .filter(|id| !done.contains(id))
        .filter(|id| reaches_itself(id, edges))
        .cloned()
        .collect()
}

fn reaches_itself(node: &NodeId, edges: &BTreeSet<(NodeId, NodeId)>) -> bool {
    let mut frontier: VecDeque<&NodeId> = edges
        .iter()
        .filter(|(from, _)| from == node)
        .map(|(_, to)| to)
        .collect();
    let mut visited: BTreeSet<&NodeId> = BTreeSet::new();
    while let Some(current) = frontier.pop_front() {
        if current == node {
            return true;
        }
        if !visited.insert(current) {
            continue;
        }
        for (from, to) in edges.iter() {
            if from == current {
                frontier.push_back(to);
            }
        }
    }
    false
}

/// The unique live (non-failed) vertex with no outgoing edges.
fn derive_sink(
    vertices: &BTreeMap<NodeId, Vertex>,
    edges: &BTreeSet<(NodeId, NodeId)>,
    failed: &BTreeSet<NodeId>,
) -> Result<NodeId, Violation> {
    let with_out: BTreeSet<&NodeId> = edges.iter().map(|(from, _)| from).collect();
    let sinks: Vec<NodeId> = vertices
        .keys()
        .filter(|id| !with_out.contains(id) && !failed.contains(*id))
        .cloned()
        .collect();
    match sinks.len() {
        0 => Err(Violation::NoSink),
        1 => Ok(sinks.into_iter().next().unwrap()),
        _ => Err(Violation::MultipleSinks { sinks }),
    }
}
