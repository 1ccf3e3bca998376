//! Expert interface and the standardized feedback tuple.
//!
//! Every expert returns a [`NodeFeedback`]: a kind-specific structured
//! output, an exception flag, a self-reported confidence, and token/time
//! accounting. The exception flag is deterministic protocol, not opinion:
//! it is forced on whenever structured parsing fails, an output violates
//! its schema, or a deduction output carries a failed verification entry.
//!
//! Experts never talk to each other. Parent context reaches a call as
//! [`Payload`] values materialized from the artifact repository, each
//! carrying its provenance so a run trace can prove isolation end to end.

mod fault;
mod remote;
mod scripted;

pub use fault::{fault_registry, FaultInjectingExpert, FaultProfile};
pub use remote::{remote_registry, RemoteExpert};
pub use scripted::{
    load_scripted_scenario, parse_scenario, scripted_registry, Scenario, ScenarioError,
    ScriptedExpert,
};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ExpertKind, NodeId, Vertex};

/// Retrieval output: assertions, supporting evidence, and which evidence
/// backs which assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagOutput {
    pub assertions: Vec<String>,
    pub evidence: Vec<Evidence>,
    pub citations: Vec<(usize, usize)>,
}

/// One retrieved snippet with its source id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub source: String,
    pub snippet: String,
}

/// Deduction output: the reasoning history and a parallel list of
/// per-step verification verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicOutput {
    pub history: Vec<String>,
    pub verifications: Vec<bool>,
}

/// Rendering output: the draft text and any statements the expert itself
/// flags as unsupported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprOutput {
    pub draft: String,
    pub unsupported: Vec<String>,
}

/// The kind-tagged structured output of one expert execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ExpertOutput {
    #[serde(rename = "RAG")]
    Rag(RagOutput),
    #[serde(rename = "LOGIC")]
    Logic(LogicOutput),
    #[serde(rename = "EXPR")]
    Expr(ExprOutput),
}

impl ExpertOutput {
    pub fn kind(&self) -> ExpertKind {
        match self {
            ExpertOutput::Rag(_) => ExpertKind::Rag,
            ExpertOutput::Logic(_) => ExpertKind::Logic,
            ExpertOutput::Expr(_) => ExpertKind::Expr,
        }
    }

    /// An empty output of the given kind, used when a backend produced
    /// nothing usable.
    pub fn empty(kind: ExpertKind) -> Self {
        match kind {
            ExpertKind::Rag => ExpertOutput::Rag(RagOutput {
                assertions: vec![],
                evidence: vec![],
                citations: vec![],
            }),
            ExpertKind::Logic => ExpertOutput::Logic(LogicOutput {
                history: vec![],
                verifications: vec![],
            }),
            ExpertKind::Expr => ExpertOutput::Expr(ExprOutput {
                draft: String::new(),
                unsupported: vec![],
            }),
        }
    }

    /// Structural problems that make the output untrustworthy.
    pub fn schema_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            ExpertOutput::Rag(rag) => {
                for (a, k) in &rag.citations {
                    if *a >= rag.assertions.len() || *k >= rag.evidence.len() {
                        out.push(format!("citation ({a}, {k}) out of bounds"));
                    }
                }
            }
            ExpertOutput::Logic(logic) => {
                if logic.history.len() != logic.verifications.len() {
                    out.push(format!(
                        "verification list length {} does not match history length {}",
                        logic.verifications.len(),
                        logic.history.len()
                    ));
                }
            }
            ExpertOutput::Expr(_) => {}
        }
        out
    }

    /// In-protocol reasons this output must carry an exception flag, in
    /// addition to whatever the expert self-reported.
    pub fn forced_exception(&self) -> Option<String> {
        let violations = self.schema_violations();
        if !violations.is_empty() {
            return Some(violations.join("; "));
        }
        if let ExpertOutput::Logic(logic) = self {
            if logic.verifications.iter().any(|v| !v) {
                return Some("localized verification failure".into());
            }
        }
        None
    }
}

fn clamp_confidence<'de, D>(deserializer: D) -> Result<f64, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = f64::deserialize(deserializer)?;
    Ok(clamp_unit(raw))
}

fn clamp_unit(raw: f64) -> f64 {
    if !raw.is_finite() {
        log::warn!("non-finite confidence {raw} clamped to 0");
        return 0.0;
    }
    if !(0.0..=1.0).contains(&raw) {
        log::warn!("confidence {raw} outside [0, 1], clamping");
    }
    raw.clamp(0.0, 1.0)
}

/// The standardized feedback tuple plus resource accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeedback {
    pub output: ExpertOutput,
    pub exception: bool,
    #[serde(deserialize_with = "clamp_confidence")]
    pub confidence: f64,
    pub tokens_prompt: u64,
    pub tokens_completion: u64,
    pub wall_time: f64,
}

impl NodeFeedback {
    pub fn new(
        output: ExpertOutput,
        exception: bool,
        confidence: f64,
        tokens_prompt: u64,
        tokens_completion: u64,
        wall_time: f64,
    ) -> Self {
        NodeFeedback {
            output,
            exception,
            confidence: clamp_unit(confidence),
            tokens_prompt,
            tokens_completion,
            wall_time,
        }
    }

    /// Applies the deterministic exception rules to a raw feedback.
    pub fn normalized(mut self) -> Self {
        if let Some(reason) = self.output.forced_exception() {
            if !self.exception {
                log::warn!("forcing exception flag: {reason}");
            }
            self.exception = true;
        }
        self.confidence = clamp_unit(self.confidence);
        self
    }

    pub fn tokens_total(&self) -> u64 {
        self.tokens_prompt + self.tokens_completion
    }
}

/// Where a payload handed to an expert came from. Every payload the
/// engine materializes is tagged with its repository entry; anything else
/// fails the isolation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin")]
pub enum PayloadSource {
    #[serde(rename = "repository")]
    Repository { node: NodeId, entry: usize },
    #[serde(rename = "external")]
    External,
}

/// Parent context delivered to an expert call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub source: PayloadSource,
    pub output: ExpertOutput,
}

/// Repair context attached to a patch-node call: the failed node's
/// feedback rendered to text, with its repository provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairContext {
    pub text: String,
    pub source: PayloadSource,
}

/// One unit of work handed to an expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCall {
    pub vertex: Vertex,
    pub parent_payloads: Vec<Payload>,
    pub repair_context: Option<RepairContext>,
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("expert backend unreachable: {reason}")]
    Unavailable { reason: String },
    #[error("no scripted fixture for node {node} (consultation #{attempt})")]
    MissingFixture { node: NodeId, attempt: usize },
    #[error("no expert registered for kind {kind}")]
    UnknownKind { kind: ExpertKind },
}

/// A pluggable expert. The engine guarantees at most one in-flight
/// execute call system-wide, so implementations only need `&mut self`.
pub trait Expert: Send {
    fn kind(&self) -> ExpertKind;

    /// Runs one call. An in-protocol failure (exception flag set) is a
    /// valid `Ok` result; `Err` is reserved for infrastructure faults.
    fn execute(&mut self, call: &ExpertCall) -> Result<NodeFeedback, ExpertError>;
}

/// The expert pool: one expert per kind.
#[derive(Default)]
pub struct ExpertRegistry {
    experts: BTreeMap<ExpertKind, Box<dyn Expert>>,
}

impl ExpertRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, expert: Box<dyn Expert>) {
        self.experts.insert(expert.kind(), expert);
    }

    pub fn covers(&self, kind: ExpertKind) -> bool {
        self.experts.contains_key(&kind)
    }

    pub fn execute(&mut self, call: &ExpertCall) -> Result<NodeFeedback, ExpertError> {
        let kind = call.vertex.expert_kind;
        let expert = self
            .experts
            .get_mut(&kind)
            .ok_or(ExpertError::UnknownKind { kind })?;
        debug_assert_eq!(expert.kind(), kind);
        expert.execute(call)
    }
}

impl fmt::Debug for ExpertRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExpertRegistry")
            .field("kinds", &self.experts.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Result of reading a verbalized confidence field out of a raw response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedConfidence {
    pub value: f64,
    /// True when the field was missing or malformed; forces the exception
    /// flag on the resulting feedback.
    pub parse_failed: bool,
    pub clamped: bool,
}

/// Extracts the mandatory `confidence` field from a structured response.
///
/// Absent or malformed fields degrade to 0.0 with the parse-failure
/// marker set; out-of-range values are clamped and logged.
pub fn parse_confidence(raw: &str) -> ParsedConfidence {
    let failed = ParsedConfidence {
        value: 0.0,
        parse_failed: true,
        clamped: false,
    };
    let value: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => return failed,
    };
    let confidence = match value.get("confidence").and_then(|c| c.as_f64()) {
        Some(c) if c.is_finite() => c,
        _ => return failed,
    };
    let clamped = !(0.0..=1.0).contains(&confidence);
    if clamped {
        log::warn!("confidence {confidence} outside [0, 1], clamping");
    }
    ParsedConfidence {
        value: confidence.clamp(0.0, 1.0),
        parse_failed: false,
        clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_confidence_reads_direct_field() {
        let parsed = parse_confidence(r#"{"confidence": 0.85}"#);
        assert_eq!(parsed.value, 0.85);
        assert!(!parsed.parse_failed);
        assert!(!parsed.clamped);
    }

    #[test]
    fn parse_confidence_clamps_out_of_range() {
        let parsed = parse_confidence(r#"{"confidence": 1.7}"#);
        assert_eq!(parsed.value, 1.0);
        assert!(!parsed.parse_failed);
        assert!(parsed.clamped);
    }

    #[test]
    fn parse_confidence_degrades_on_missing_field() {
        for raw in [r#"{}"#, r#"{"confidence": "high"}"#, "not json"] {
            let parsed = parse_confidence(raw);
            assert_eq!(parsed.value, 0.0, "raw = {raw}");
            assert!(parsed.parse_failed, "raw = {raw}");
        }
    }

    #[test]
    fn logic_verification_failure_forces_exception() {
        let feedback = NodeFeedback::new(
            ExpertOutput::Logic(LogicOutput {
                history: vec!["case A: x = 2".into(), "case B: x = -3".into()],
                verifications: vec![true, false],
            }),
            false,
            0.8,
            10,
            10,
            0.5,
        )
        .normalized();
        assert!(feedback.exception);
    }

    #[test]
    fn citation_out_of_bounds_forces_exception() {
        let feedback = NodeFeedback::new(
            ExpertOutput::Rag(RagOutput {
                assertions: vec!["a".into()],
                evidence: vec![],
                citations: vec![(0, 0)],
            }),
            false,
            0.9,
            1,
            1,
            0.1,
        )
        .normalized();
        assert!(feedback.exception);
    }

    #[test]
    fn feedback_constructor_clamps_confidence() {
        let feedback = NodeFeedback::new(
            ExpertOutput::empty(ExpertKind::Expr),
            false,
            1.4,
            0,
            0,
            0.0,
        );
        assert_eq!(feedback.confidence, 1.0);
    }

    #[test]
    fn feedback_deserialization_clamps_confidence() {
        let json = r#"{
            "output": {"kind": "EXPR", "draft": "x", "unsupported": []},
            "exception": false,
            "confidence": 2.5,
            "tokens_prompt": 1,
            "tokens_completion": 2,
            "wall_time": 0.1
        }"#;
        let feedback: NodeFeedback = serde_json::from_str(json).unwrap();
        assert_eq!(feedback.confidence, 1.0);
    }

    fn arb_output() -> impl Strategy<Value = ExpertOutput> {
        let rag = (
            proptest::collection::vec("[a-z ]{0,12}", 0..4),
            proptest::collection::vec(("[a-z]{1,6}", "[a-z ]{0,16}"), 0..4),
        )
            .prop_map(|(assertions, ev)| {
                let evidence: Vec<Evidence> = ev
                    .into_iter()
                    .map(|(source, snippet)| Evidence { source, snippet })
                    .collect();
                let citations = assertions
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i < evidence.len())
                    .map(|(i, _)| (i, i))
                    .collect();
                ExpertOutput::Rag(RagOutput {
                    assertions,
                    evidence,
                    citations,
                })
            });
        let logic = proptest::collection::vec(("[a-z ]{0,12}", any::<bool>()), 0..5).prop_map(
            |steps| {
                let (history, verifications) = steps.into_iter().unzip();
                ExpertOutput::Logic(LogicOutput {
                    history,
                    verifications,
                })
            },
        );
        let expr = ("[a-zA-Z .]{0,30}", proptest::collection::vec("[a-z ]{0,10}", 0..3))
            .prop_map(|(draft, unsupported)| {
                ExpertOutput::Expr(ExprOutput { draft, unsupported })
            });
        prop_oneof![rag, logic, expr]
    }

    proptest! {
        #[test]
        fn prop_output_schema_round_trips(output in arb_output()) {
            let json = serde_json::to_string(&output).unwrap();
            let back: ExpertOutput = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(output, back);
        }
    }
}
