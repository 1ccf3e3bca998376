//! Scripted experts: deterministic fixture playback for offline runs,
//! tests, and replay.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use super::{Expert, ExpertCall, ExpertError, ExpertRegistry, NodeFeedback};
use crate::graph::ExpertKind;

/// A fixture table: node id (rendered form) to the ordered feedback each
/// consultation of that node returns. A node consulted k times yields the
/// k-th record, so scripts can express "fails once, patch succeeds".
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Scenario {
    #[serde(flatten)]
    pub table: BTreeMap<String, Vec<NodeFeedback>>,
}

impl Scenario {
    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }
}

// Hand-rolled map visitor: serde's default map handling silently keeps the
// last duplicate key, but duplicate node ids in a scenario are authoring
// errors and must be reported.
impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ScenarioVisitor;

        impl<'de> Visitor<'de> for ScenarioVisitor {
            type Value = Scenario;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from node id to a list of feedback records")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut table = BTreeMap::new();
                while let Some((key, value)) =
                    access.next_entry::<String, Vec<NodeFeedback>>()?
                {
                    if table.insert(key.clone(), value).is_some() {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate node id key `{key}`"
                        )));
                    }
                }
                Ok(Scenario { table })
            }
        }

        deserializer.deserialize_map(ScenarioVisitor)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Loads a fixture table from a scenario file.
pub fn load_scripted_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

#[derive(Debug)]
struct ScriptedState {
    scenario: Scenario,
    cursors: BTreeMap<String, usize>,
}

/// Plays back fixtures for one expert kind. All kinds of one pool share
/// the same cursor state so per-node consultation counts are global.
pub struct ScriptedExpert {
    kind: ExpertKind,
    state: Arc<Mutex<ScriptedState>>,
}

impl Expert for ScriptedExpert {
    fn kind(&self) -> ExpertKind {
        self.kind
    }

    fn execute(&mut self, call: &ExpertCall) -> Result<NodeFeedback, ExpertError> {
        let key = call.vertex.id.to_string();
        let mut state = self.state.lock().expect("scripted state poisoned");
        let attempt = *state.cursors.get(&key).unwrap_or(&0);
        let record = state
            .scenario
            .table
            .get(&key)
            .and_then(|seq| seq.get(attempt))
            .cloned()
            .ok_or_else(|| ExpertError::MissingFixture {
                node: call.vertex.id.clone(),
                attempt,
            })?;
        state.cursors.insert(key, attempt + 1);
        Ok(record.normalized())
    }
}

/// Builds a pool of three scripted experts sharing one fixture table.
pub fn scripted_registry(scenario: Scenario) -> ExpertRegistry {
    let state = Arc::new(Mutex::new(ScriptedState {
        scenario,
        cursors: BTreeMap::new(),
    }));
    let mut registry = ExpertRegistry::new();
    for kind in ExpertKind::ALL {
        registry.register(Box::new(ScriptedExpert {
            kind,
            state: Arc::clone(&state),
        }));
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{Evidence, ExpertOutput, RagOutput};
    use crate::graph::Vertex;

    fn call_for(name: &str, kind: ExpertKind) -> ExpertCall {
        ExpertCall {
            vertex: Vertex::new(name.parse().unwrap(), kind, "task", vec![]),
            parent_payloads: vec![],
            repair_context: None,
        }
    }

    #[test]
    fn scripted_expert_plays_back_fixture_verbatim() {
        let fixture = NodeFeedback::new(
            ExpertOutput::Rag(RagOutput {
                assertions: vec!["Paris is the capital".into()],
                evidence: vec![Evidence {
                    source: "snippet#1".into(),
                    snippet: "Paris, capital of France".into(),
                }],
                citations: vec![(0, 0)],
            }),
            false,
            0.92,
            30,
            12,
            0.8,
        );
        let scenario = parse_scenario(&serde_json::to_string(&Scenario {
            table: BTreeMap::from([("v1".to_string(), vec![fixture.clone()])]),
        }).unwrap())
        .unwrap();
        let mut registry = scripted_registry(scenario);
        let got = registry.execute(&call_for("v1", ExpertKind::Rag)).unwrap();
        assert_eq!(got, fixture);
    }

    #[test]
    fn consultations_advance_through_the_sequence() {
        let mk = |c: f64| {
            NodeFeedback::new(ExpertOutput::empty(ExpertKind::Expr), false, c, 1, 1, 0.1)
        };
        let scenario = Scenario {
            table: BTreeMap::from([("v1".to_string(), vec![mk(0.1), mk(0.9)])]),
        };
        let mut registry = scripted_registry(scenario);
        let call = call_for("v1", ExpertKind::Expr);
        assert_eq!(registry.execute(&call).unwrap().confidence, 0.1);
        assert_eq!(registry.execute(&call).unwrap().confidence, 0.9);
        let exhausted = registry.execute(&call);
        assert!(matches!(
            exhausted,
            Err(ExpertError::MissingFixture { attempt: 2, .. })
        ));
    }

    #[test]
    fn empty_scenario_yields_missing_fixture() {
        let scenario = parse_scenario("{}").unwrap();
        assert!(scenario.is_empty());
        let mut registry = scripted_registry(scenario);
        let err = registry.execute(&call_for("v1", ExpertKind::Logic));
        assert!(matches!(err, Err(ExpertError::MissingFixture { .. })));
    }

    #[test]
    fn duplicate_node_keys_are_a_parse_error() {
        let text = r#"{
            "v1": [],
            "v1": []
        }"#;
        let err = parse_scenario(text).unwrap_err();
        match err {
            ScenarioError::Parse { message, .. } => {
                assert!(message.contains("duplicate"), "{message}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line_diagnostics() {
        let text = "{\n  \"v1\": [ { \"output\": 3 } ]\n}";
        match parse_scenario(text).unwrap_err() {
            ScenarioError::Parse { line, .. } => assert!(line >= 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn two_runs_of_one_scenario_are_bit_identical() {
        let text = r#"{
            "v1": [{
                "output": {"kind": "LOGIC", "history": ["a"], "verifications": [true]},
                "exception": false,
                "confidence": 0.7,
                "tokens_prompt": 5,
                "tokens_completion": 7,
                "wall_time": 0.25
            }]
        }"#;
        let run = || {
            let mut registry = scripted_registry(parse_scenario(text).unwrap());
            registry.execute(&call_for("v1", ExpertKind::Logic)).unwrap()
        };
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixture_with_failed_verification_forces_exception() {
        let text = r#"{
            "v2": [{
                "output": {"kind": "LOGIC",
                           "history": ["case A ok", "case B: arithmetic slip"],
                           "verifications": [true, false]},
                "exception": false,
                "confidence": 0.62,
                "tokens_prompt": 40,
                "tokens_completion": 55,
                "wall_time": 1.1
            }]
        }"#;
        let mut registry = scripted_registry(parse_scenario(text).unwrap());
        let feedback = registry.execute(&call_for("v2", ExpertKind::Logic)).unwrap();
        assert!(feedback.exception);
    }
}
