//! The topology critic: maps a finished trajectory to a scalar reward —
//! a legality veto gating a task-completion grade, minus a logarithmic
//! overhead penalty on topology size and repair count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{Evidence, ExpertOutput, ExprOutput, NodeFeedback};
use crate::graph::{ExpertKind, NodeId, TaskGraph, Vertex};
use crate::orchestrator::RunResult;

/// A fully executed run projected to what the critic scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub graph_history: Vec<TaskGraph>,
    /// Vertices in the final executed topology, patch nodes included;
    /// vertices removed by reconstruction are priced through the
    /// suspension count instead.
    pub node_count: usize,
    /// Suspensions handled (patches and reconstructions both draw on the
    /// same budget).
    pub reconstructions: u32,
    pub final_answer: Option<String>,
    pub per_node_legality: Vec<bool>,
    pub feedbacks: Vec<NodeFeedback>,
}

impl Trajectory {
    /// Projects a run result into a trajectory, recomputing legality over
    /// the final topology.
    pub fn from_run(query: impl Into<String>, result: &RunResult) -> Self {
        let query = query.into();
        let final_graph = result
            .graph_history
            .last()
            .expect("a run stores at least the initial topology");
        let table = assignment_table(&result.graph_history);
        let per_node_legality = final_graph
            .vertices()
            .map(|v| legality(v, final_graph, &table))
            .collect();
        Trajectory {
            query,
            graph_history: result.graph_history.clone(),
            node_count: final_graph.len(),
            reconstructions: result.metrics.suspensions,
            final_answer: result.answer.clone(),
            per_node_legality,
            feedbacks: result.artifacts.iter().map(|e| e.feedback.clone()).collect(),
        }
    }

    pub fn vetoed(&self) -> bool {
        self.per_node_legality.iter().any(|ok| !ok)
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.feedbacks.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.feedbacks.iter().map(|f| f.confidence).sum();
        sum / self.feedbacks.len() as f64
    }
}

/// The declared expert assignment per node, accumulated over every graph
/// version of a run (a node's kind never changes across versions).
pub type AssignmentTable = BTreeMap<NodeId, ExpertKind>;

pub fn assignment_table(history: &[TaskGraph]) -> AssignmentTable {
    let mut table = AssignmentTable::new();
    for graph in history {
        for vertex in graph.vertices() {
            table.entry(vertex.id.clone()).or_insert(vertex.expert_kind);
        }
    }
    table
}

/// A vertex is legal unless it sits on a cycle in its recorded topology
/// or its expert kind contradicts the declared assignment table.
pub fn legality(vertex: &Vertex, graph: &TaskGraph, table: &AssignmentTable) -> bool {
    if graph
        .validate()
        .iter()
        .any(|v| matches!(v, crate::graph::Violation::Cycle { node } if node == &vertex.id))
    {
        return false;
    }
    match table.get(&vertex.id) {
        Some(kind) => *kind == vertex.expert_kind,
        None => false,
    }
}

/// Deterministic task grader.
pub trait TaskGrader {
    fn grade(&self, trajectory: &Trajectory) -> f64;
}

/// Strict ground-truth matching for deterministic tasks: 1.0 when the
/// trimmed final answer equals the keyed answer, else 0.0.
#[derive(Debug, Clone, Default)]
pub struct ExactMatchGrader {
    key: BTreeMap<String, String>,
}

impl ExactMatchGrader {
    pub fn new(key: BTreeMap<String, String>) -> Self {
        ExactMatchGrader { key }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CriticError> {
        let text = std::fs::read_to_string(path)?;
        Ok(ExactMatchGrader {
            key: serde_json::from_str(&text)?,
        })
    }
}

impl TaskGrader for ExactMatchGrader {
    fn grade(&self, trajectory: &Trajectory) -> f64 {
        match (self.key.get(&trajectory.query), &trajectory.final_answer) {
            (Some(expected), Some(answer)) if expected.trim() == answer.trim() => 1.0,
            _ => 0.0,
        }
    }
}

/// Open-ended grader: the fraction of draft propositions supported by
/// retrieved evidence, with a per-item penalty for statements the expert
/// itself flagged as unsupported.
#[derive(Debug, Clone)]
pub struct SupportedRatioGrader {
    pub hallucination_penalty: f64,
}

impl Default for SupportedRatioGrader {
    fn default() -> Self {
        SupportedRatioGrader {
            hallucination_penalty: 0.1,
        }
    }
}

impl TaskGrader for SupportedRatioGrader {
    fn grade(&self, trajectory: &Trajectory) -> f64 {
        let draft = trajectory.feedbacks.iter().rev().find_map(|f| match &f.output {
            ExpertOutput::Expr(e) => Some(e),
            _ => None,
        });
        let Some(draft) = draft else { return 0.0 };
        let evidence: Vec<Evidence> = trajectory
            .feedbacks
            .iter()
            .filter_map(|f| match &f.output {
                ExpertOutput::Rag(r) => Some(r.evidence.clone()),
                _ => None,
            })
            .flatten()
            .collect();
        grade_supported_ratio(draft, &evidence, self.hallucination_penalty)
    }
}

/// Splits a draft into propositions at terminal punctuation and scores
/// each as supported iff it matches provided evidence (normalized
/// containment either way) and is absent from the unsupported list; every
/// unsupported statement additionally subtracts the penalty, floored at
/// zero. An empty draft grades 0.
pub fn grade_supported_ratio(
    draft: &ExprOutput,
    evidence: &[Evidence],
    hallucination_penalty: f64,
) -> f64 {
    let propositions = split_propositions(&draft.draft);
    if propositions.is_empty() {
        return 0.0;
    }
    let normalized_evidence: Vec<String> =
        evidence.iter().map(|e| normalize(&e.snippet)).collect();
    let normalized_unsupported: Vec<String> =
        draft.unsupported.iter().map(|u| normalize(u)).collect();

    let supported = propositions
        .iter()
        .filter(|p| {
            let p = normalize(p);
            let cited = normalized_evidence
                .iter()
                .any(|e| !e.is_empty() && (e.contains(&p) || p.contains(e.as_str())));
            let flagged = normalized_unsupported
                .iter()
                .any(|u| !u.is_empty() && (u == &p || p.contains(u.as_str()) || u.contains(p.as_str())));
            cited && !flagged
        })
        .count();

    let ratio = supported as f64 / propositions.len() as f64;
    (ratio - hallucination_penalty * draft.unsupported.len() as f64).max(0.0)
}

/// Sentence-boundary segmentation at `.`, `!`, `?`.
pub fn split_propositions(text: &str) -> Vec<String> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_end_matches(['.', '!', '?'])
        .to_string()
}

/// Serializable critic settings (the config-file block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticSettings {
    pub lambda: f64,
    pub gamma: f64,
    pub hallucination_penalty: f64,
    pub grader: GraderSettings,
}

impl Default for CriticSettings {
    fn default() -> Self {
        CriticSettings {
            lambda: 0.05,
            gamma: 1.0,
            hallucination_penalty: 0.1,
            grader: GraderSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraderSettings {
    ExactMatch {
        answer_key_path: Option<std::path::PathBuf>,
    },
    SupportedRatio,
}

impl Default for GraderSettings {
    fn default() -> Self {
        GraderSettings::ExactMatch {
            answer_key_path: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("cannot read answer key: {0}")]
    Io(#[from] std::io::Error),
    #[error("answer key parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// The critic: composite reward over a trajectory.
pub struct Critic {
    pub lambda: f64,
    pub gamma: f64,
    grader: Box<dyn TaskGrader>,
}

impl Critic {
    pub fn new(lambda: f64, gamma: f64, grader: Box<dyn TaskGrader>) -> Self {
        assert!(lambda >= 0.0 && gamma >= 0.0);
        Critic {
            lambda,
            gamma,
            grader,
        }
    }

    pub fn from_settings(settings: &CriticSettings) -> Result<Self, CriticError> {
        let grader: Box<dyn TaskGrader> = match &settings.grader {
            GraderSettings::ExactMatch { answer_key_path } => match answer_key_path {
                Some(path) => Box::new(ExactMatchGrader::load(path)?),
                None => Box::new(ExactMatchGrader::default()),
            },
            GraderSettings::SupportedRatio => Box::new(SupportedRatioGrader {
                hallucination_penalty: settings.hallucination_penalty,
            }),
        };
        Ok(Critic::new(settings.lambda, settings.gamma, grader))
    }

    /// Composite reward: the legality product gates the task grade
    /// (one illegal node nullifies it), and a natural-log penalty prices
    /// topology size and repairs sub-linearly.
    pub fn reward(&self, trajectory: &Trajectory) -> f64 {
        let gate = if trajectory.vetoed() { 0.0 } else { 1.0 };
        let task = self.grader.grade(trajectory);
        let penalty = self.lambda
            * (1.0 + trajectory.node_count as f64
                + self.gamma * f64::from(trajectory.reconstructions))
            .ln();
        gate * task - penalty
    }

    /// Per-trajectory score report row: id, grade, legality gate, node
    /// count, suspensions, reward.
    pub fn score_row(&self, id: &str, trajectory: &Trajectory) -> Vec<String> {
        let gate = if trajectory.vetoed() { 0 } else { 1 };
        vec![
            id.to_string(),
            format!("{:.4}", self.grader.grade(trajectory)),
            gate.to_string(),
            trajectory.node_count.to_string(),
            trajectory.reconstructions.to_string(),
            format!("{:.6}", self.reward(trajectory)),
        ]
    }
}

impl std::fmt::Debug for Critic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Critic")
            .field("lambda", &self.lambda)
            .field("gamma", &self.gamma)
            .finish()
    }
}

/// A grader that returns a fixed grade; for tests and penalty studies.
#[derive(Debug, Clone, Copy)]
pub struct ConstantGrader(pub f64);

impl TaskGrader for ConstantGrader {
    fn grade(&self, _trajectory: &Trajectory) -> f64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn trajectory(node_count: usize, reconstructions: u32, legal: bool) -> Trajectory {
        Trajectory {
            query: "q".into(),
            graph_history: vec![],
            node_count,
            reconstructions,
            final_answer: Some("answer".into()),
            per_node_legality: (0..node_count).map(|i| legal || i > 0).collect(),
            feedbacks: vec![],
        }
    }

    #[test]
    fn disabled_penalty_reduces_to_gated_grade() {
        let critic = Critic::new(0.0, 0.0, Box::new(ConstantGrader(1.0)));
        assert_eq!(critic.reward(&trajectory(4, 0, true)), 1.0);
    }

    #[test]
    fn veto_nullifies_the_grade_but_keeps_the_penalty() {
        let critic = Critic::new(0.1, 2.0, Box::new(ConstantGrader(0.77)));
        let r = critic.reward(&trajectory(4, 1, false));
        let expect = -0.1 * (7.0f64).ln();
        assert!((r - expect).abs() < 1e-12);
        assert!((r + 0.1946).abs() < 1e-4);
    }

    #[test]
    fn reward_matches_hand_arithmetic() {
        let critic = Critic::new(0.05, 1.0, Box::new(ConstantGrader(0.8)));
        let r = critic.reward(&trajectory(5, 1, true));
        let expect = 0.8 - 0.05 * (7.0f64).ln();
        assert!((r - expect).abs() < 1e-12);
        assert!((r - 0.7027).abs() < 1e-4);
    }

    #[test]
    fn veto_makes_reward_independent_of_grade() {
        let rewards: Vec<f64> = (0..=10)
            .map(|i| {
                let critic = Critic::new(0.1, 2.0, Box::new(ConstantGrader(i as f64 / 10.0)));
                critic.reward(&trajectory(4, 1, false))
            })
            .collect();
        assert!(rewards.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn penalty_is_monotone_and_sublinear() {
        let critic = Critic::new(0.05, 1.0, Box::new(ConstantGrader(1.0)));
        let reward_at = |n: usize, eta: u32| critic.reward(&trajectory(n, eta, true));
        // strictly decreasing in node count and in repairs
        assert!(reward_at(5, 0) > reward_at(6, 0));
        assert!(reward_at(5, 0) > reward_at(5, 1));
        // marginal penalty shrinks with size
        let marginal = |n: usize| reward_at(n, 0) - reward_at(n + 1, 0);
        assert!(marginal(5) > marginal(6));
        assert!(marginal(100) > marginal(101));
    }

    #[test]
    fn legality_detects_assignment_mismatch() {
        let graph = TaskGraph::new(
            "q",
            vec![
                Vertex::new(id("v1"), ExpertKind::Logic, "a", vec![]),
                Vertex::new(id("v2"), ExpertKind::Expr, "b", vec![id("v1")]),
            ],
            None,
        )
        .unwrap();
        let table = assignment_table(std::slice::from_ref(&graph));
        let good = graph.vertex(&id("v1")).unwrap();
        assert!(legality(good, &graph, &table));
        // the same instruction routed to the wrong expert kind
        let mismatched = Vertex::new(id("v1"), ExpertKind::Expr, "a", vec![]);
        assert!(!legality(&mismatched, &graph, &table));
    }

    #[test]
    fn legality_vetoes_cycle_members() {
        let graph = TaskGraph::new_unvalidated(
            "q",
            vec![
                Vertex::new(id("a"), ExpertKind::Logic, "a", vec![id("b")]),
                Vertex::new(id("b"), ExpertKind::Logic, "b", vec![id("a")]),
                Vertex::new(id("c"), ExpertKind::Expr, "c", vec![id("b")]),
            ],
            id("c"),
        );
        let table = assignment_table(std::slice::from_ref(&graph));
        assert!(!legality(graph.vertex(&id("a")).unwrap(), &graph, &table));
        assert!(legality(graph.vertex(&id("c")).unwrap(), &graph, &table));
    }

    #[test]
    fn supported_ratio_grades_by_citation_and_penalty() {
        let evidence = vec![
            Evidence {
                source: "s1".into(),
                snippet: "water boils at 100 C at sea level".into(),
            },
            Evidence {
                source: "s2".into(),
                snippet: "the capital of France is Paris".into(),
            },
        ];
        let fully_supported = ExprOutput {
            draft: "Water boils at 100 C at sea level. The capital of France is Paris.".into(),
            unsupported: vec![],
        };
        assert_eq!(grade_supported_ratio(&fully_supported, &evidence, 0.1), 1.0);

        // 4 propositions, 3 supported, 1 flagged unsupported: 0.75 - 0.1
        let partial = ExprOutput {
            draft: "Water boils at 100 C at sea level. The capital of France is Paris. \
                    Water boils at 100 C at sea level. The moon is made of cheese."
                .into(),
            unsupported: vec!["The moon is made of cheese".into()],
        };
        let got = grade_supported_ratio(&partial, &evidence, 0.1);
        assert!((got - 0.65).abs() < 1e-12);
    }

    #[test]
    fn empty_draft_grades_zero() {
        let empty = ExprOutput {
            draft: "".into(),
            unsupported: vec![],
        };
        assert_eq!(grade_supported_ratio(&empty, &[], 0.1), 0.0);
    }

    #[test]
    fn score_rows_carry_the_report_fields() {
        // id, grade, legality gate, node count, suspensions, reward
        let critic = Critic::new(0.05, 1.0, Box::new(ConstantGrader(0.8)));
        let row = critic.score_row("t1", &trajectory(5, 1, true));
        assert_eq!(row[0], "t1");
        assert_eq!(row[1], "0.8000");
        assert_eq!(row[2], "1");
        assert_eq!(row[3], "5");
        assert_eq!(row[4], "1");
        assert_eq!(row[5], "0.702704");
        let vetoed = critic.score_row("t2", &trajectory(5, 1, false));
        assert_eq!(vetoed[2], "0");
    }

    #[test]
    fn exact_match_grader_is_strict() {
        let grader = ExactMatchGrader::new(BTreeMap::from([(
            "q".to_string(),
            "x = -1/8".to_string(),
        )]));
        let mut t = trajectory(3, 0, true);
        t.final_answer = Some("x = -1/8".into());
        assert_eq!(grader.grade(&t), 1.0);
        t.final_answer = Some("x = 3/2".into());
        assert_eq!(grader.grade(&t), 0.0);
        t.final_answer = None;
        assert_eq!(grader.grade(&t), 0.0);
    }
}
