//! End-to-end engine tests: full lifecycles across repair tiers, history
//! immutability, escalation, remote experts, and adversarial termination.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;

use regraft::config::{EngineConfig, ExpertMode};
use regraft::critic::{Critic, ExactMatchGrader, Trajectory};
use regraft::expert::{
    fault_registry, load_scripted_scenario, scripted_registry, ExpertOutput, ExprOutput,
    FaultProfile, LogicOutput, NodeFeedback, Scenario,
};
use regraft::graph::{ExpertKind, NodeId, Vertex};
use regraft::orchestrator::{
    conservation_report, render_answer, run, strict_isolation_check, RepairActionRecord,
    RunStatus,
};
use regraft::output::{execute_run, GraphDoc, PlannerSpec};
use regraft::planner::{InitialPlan, PlannerUsage, ScriptedPlanner, StochasticPlanner};
use regraft::repo::EntryStatus;

fn id(s: &str) -> NodeId {
    s.parse().unwrap()
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn logic(history: &[(&str, bool)], confidence: f64, exception: bool) -> NodeFeedback {
    NodeFeedback::new(
        ExpertOutput::Logic(LogicOutput {
            history: history.iter().map(|(h, _)| h.to_string()).collect(),
            verifications: history.iter().map(|(_, v)| *v).collect(),
        }),
        exception,
        confidence,
        40,
        25,
        1.0,
    )
}

fn expr(draft: &str, confidence: f64) -> NodeFeedback {
    NodeFeedback::new(
        ExpertOutput::Expr(ExprOutput {
            draft: draft.into(),
            unsupported: vec![],
        }),
        false,
        confidence,
        35,
        18,
        0.7,
    )
}

#[test]
fn scripted_repair_lifecycle_accounts_every_phase() {
    let dir = scenario_dir().join("fig3");
    let graph = GraphDoc::load(dir.join("graph.json")).unwrap();
    let scenario = load_scripted_scenario(dir.join("scenario.json")).unwrap();
    let config = EngineConfig::load(dir.join("config.toml")).unwrap();

    let doc = execute_run(
        &graph.query.clone(),
        PlannerSpec::Scripted,
        graph,
        Some(scenario),
        config,
    )
    .unwrap();
    let result = &doc.result;

    assert_eq!(result.status, RunStatus::Completed);
    assert_eq!(result.metrics.expert_calls, 5); // v1, v2, v2_patch, v3, v4
    assert_eq!(result.metrics.planner_calls, 2); // initial plan + patch proposal
    assert_eq!(result.metrics.suspensions, 1);

    // token accounting sums every fixture including the failed attempt
    let fixture_tokens = 96 + 64 + 88 + 41 + 132 + 57 + 142 + 66 + 118 + 38;
    assert_eq!(result.metrics.tokens_total, fixture_tokens);
    // compute estimate is linear in tokens over the 8e9 backbone
    let expect_tflops = 2.0 * 8e9 * fixture_tokens as f64 / 1e12;
    assert!((result.metrics.tflops - expect_tflops).abs() < 1e-9);

    // switches: cold plan, plan->logic, logic->plan (patch), plan->logic,
    // logic->expr; the two consecutive logic nodes are free
    assert_eq!(result.switch_log.len(), 5);
    assert!((result.metrics.switch_cost_seconds - 4.0).abs() < 1e-9);
    let expert_wall = 1.3 + 1.1 + 1.4 + 1.5 + 0.9;
    assert!((result.metrics.expert_wall_seconds - expert_wall).abs() < 1e-9);
    assert!((result.metrics.latency_seconds - (expert_wall + 4.0)).abs() < 1e-9);

    // peak memory is the backbone plus one resident adapter
    assert_eq!(
        result.metrics.peak_memory_bytes,
        16_500_000_000 + 32 * 8 * (4096 + 4096) * 2
    );

    // the failed node keeps its terminal entry; the patch commits
    let v2 = result.artifacts.iter().find(|e| e.node == id("v2")).unwrap();
    assert_eq!(v2.status, EntryStatus::Failed);
    let patch = result
        .artifacts
        .iter()
        .find(|e| e.node == id("v2_patch"))
        .unwrap();
    assert_eq!(patch.status, EntryStatus::Committed);

    // the patch call consumed v2's feedback as repair context with
    // provenance pointing at v2's failed entry
    let patch_call = result
        .call_trace
        .iter()
        .find(|c| c.node == id("v2_patch"))
        .unwrap();
    let v2_index = result
        .artifacts
        .iter()
        .position(|e| e.node == id("v2"))
        .unwrap();
    match &patch_call.repair_context_source {
        Some(regraft::expert::PayloadSource::Repository { node, entry }) => {
            assert_eq!(node, &id("v2"));
            assert_eq!(*entry, v2_index);
        }
        other => panic!("unexpected repair context source {other:?}"),
    }

    assert!(strict_isolation_check(result));
    assert!(conservation_report(result).is_empty());

    // the answer key grades this run 1.0
    let grader = ExactMatchGrader::load(dir.join("answer_key.json")).unwrap();
    let critic = Critic::new(0.05, 1.0, Box::new(grader));
    let trajectory = Trajectory::from_run(doc.query.clone(), result);
    assert_eq!(trajectory.node_count, 5); // v1..v4 + v2_patch
    assert_eq!(trajectory.reconstructions, 1);
    let reward = critic.reward(&trajectory);
    assert!((reward - (1.0 - 0.05 * (7.0f64).ln())).abs() < 1e-12);
}

#[test]
fn graph_history_versions_stay_bit_identical() {
    let dir = scenario_dir().join("fig3");
    let graph = GraphDoc::load(dir.join("graph.json")).unwrap();
    let scenario = load_scripted_scenario(dir.join("scenario.json")).unwrap();
    let config = EngineConfig::load(dir.join("config.toml")).unwrap();

    let mut planner = ScriptedPlanner::new(graph.initial_plan());
    let mut experts = scripted_registry(scenario);
    let result = run(&graph.query, &mut planner, &mut experts, &config).unwrap();

    assert_eq!(result.graph_history.len(), 2);
    assert_eq!(result.graph_history[0].version(), 0);
    assert_eq!(result.graph_history[1].version(), 1);

    // version 0 as stored is exactly the planned topology, unaffected by
    // the later patch delta
    let mut replanner = ScriptedPlanner::new(graph.initial_plan());
    let plan = regraft::planner::PlannerPort::initial_plan(&mut replanner, &graph.query)
        .unwrap()
        .value;
    let v0 = regraft::graph::TaskGraph::new(&graph.query, plan.vertices, Some(plan.sink)).unwrap();
    assert_eq!(
        serde_json::to_string(&result.graph_history[0]).unwrap(),
        serde_json::to_string(&v0).unwrap()
    );
    assert!(!result.graph_history[0].contains(&id("v2_patch")));
    assert!(result.graph_history[1].contains(&id("v2_patch")));
}

#[test]
fn global_uncertainty_reconstructs_and_reattaches_siblings() {
    // diamond: v1 -> {v2, v3} -> v4; low confidences push the global
    // uncertainty over the line after v2 commits
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "root", vec![]),
            Vertex::new(id("v2"), ExpertKind::Logic, "left", vec![id("v1")]),
            Vertex::new(id("v3"), ExpertKind::Logic, "right", vec![id("v1")]),
            Vertex::new(id("v4"), ExpertKind::Expr, "merge", vec![id("v2"), id("v3")]),
        ],
        sink: id("v4"),
    };
    let scenario = Scenario {
        table: BTreeMap::from([
            ("v1".to_string(), vec![logic(&[("root done", true)], 0.7, false)]),
            ("v2".to_string(), vec![logic(&[("left done", true)], 0.4, false)]),
            ("v3".to_string(), vec![logic(&[("right done", true)], 0.45, false)]),
            (
                "redo_v2@1".to_string(),
                vec![logic(&[("left redone", true)], 0.9, false)],
            ),
            ("emit@1".to_string(), vec![expr("merged answer", 0.95)]),
        ]),
    };
    let mut planner = ScriptedPlanner::new(plan);
    let mut experts = scripted_registry(scenario);
    let config = EngineConfig::default();
    let result = run("diamond query", &mut planner, &mut experts, &config).unwrap();

    assert_eq!(result.status, RunStatus::Completed);
    assert_eq!(result.answer.as_deref(), Some("merged answer"));
    assert_eq!(result.metrics.suspensions, 1);

    let reconstruct = result
        .repair_log
        .iter()
        .find_map(|e| match &e.action {
            RepairActionRecord::Reconstruct { removed, added } => Some((e, removed, added)),
            _ => None,
        })
        .expect("one reconstruction");
    assert_eq!(
        reconstruct.0.cause.kind,
        regraft::evaluator::SuspensionKind::GlobalUncertainty
    );
    // pinned on the minimum-confidence node; its closure fell
    assert_eq!(reconstruct.0.cause.offending_node, Some(id("v2")));
    assert_eq!(reconstruct.1.clone(), vec![id("v2"), id("v4")]);

    // v3 lost its only consumer and was regrafted onto the replacement
    let final_graph = result.graph_history.last().unwrap();
    let redo = final_graph.vertex(&id("redo_v2@1")).unwrap();
    assert_eq!(redo.parents, vec![id("v1"), id("v3")]);
    assert_eq!(final_graph.sink(), &id("emit@1"));

    // discarded work is retained in the trace with its status moved
    let v2 = result.artifacts.iter().find(|e| e.node == id("v2")).unwrap();
    assert_eq!(v2.status, EntryStatus::Discarded);
}

#[test]
fn failed_patch_escalates_to_reconstruction() {
    // v2 fails, its patch also fails, and the reconstruction succeeds
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "one", vec![]),
            Vertex::new(id("v2"), ExpertKind::Logic, "two", vec![id("v1")]),
            Vertex::new(id("v3"), ExpertKind::Expr, "three", vec![id("v2")]),
        ],
        sink: id("v3"),
    };
    let scenario = Scenario {
        table: BTreeMap::from([
            ("v1".to_string(), vec![logic(&[("ok", true)], 0.9, false)]),
            ("v2".to_string(), vec![logic(&[("bad", false)], 0.3, true)]),
            (
                "v2_patch".to_string(),
                vec![logic(&[("still bad", false)], 0.2, true)],
            ),
            (
                "redo_v2@2".to_string(),
                vec![logic(&[("solid", true)], 0.92, false)],
            ),
            ("emit@2".to_string(), vec![expr("recovered", 0.94)]),
        ]),
    };
    let mut planner = ScriptedPlanner::new(plan);
    let mut experts = scripted_registry(scenario);
    let config = EngineConfig::default();
    let result = run("escalation query", &mut planner, &mut experts, &config).unwrap();

    assert_eq!(result.status, RunStatus::Completed);
    assert_eq!(result.answer.as_deref(), Some("recovered"));
    assert_eq!(result.metrics.suspensions, 2);

    let kinds: Vec<&str> = result
        .repair_log
        .iter()
        .map(|e| match &e.action {
            RepairActionRecord::Patch { .. } => "patch",
            RepairActionRecord::Reconstruct { .. } => "reconstruct",
            _ => "other",
        })
        .collect();
    assert_eq!(kinds, vec!["patch", "reconstruct"]);

    // the reconstruction was rooted at the failed patch node
    let reconstruct = &result.repair_log[1];
    assert_eq!(reconstruct.cause.offending_node, Some(id("v2_patch")));

    // no node is ever patched twice
    let mut patched = std::collections::BTreeSet::new();
    for event in &result.repair_log {
        if let RepairActionRecord::Patch { added } = &event.action {
            assert!(patched.insert(added.base_name().to_string()));
        }
    }
}

#[test]
fn planner_refusals_escalate_all_the_way_to_fallback() {
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "one", vec![]),
            Vertex::new(id("v2"), ExpertKind::Expr, "two", vec![id("v1")]),
        ],
        sink: id("v2"),
    };
    let scenario = Scenario {
        table: BTreeMap::from([
            ("v1".to_string(), vec![logic(&[("bad", false)], 0.1, true)]),
            (
                "fallback".to_string(),
                vec![expr("best effort answer", 0.5)],
            ),
        ]),
    };
    let mut planner = ScriptedPlanner::new(plan)
        .refusing_patches()
        .refusing_subgraphs();
    let mut experts = scripted_registry(scenario);
    let config = EngineConfig::default();
    let result = run("refusal query", &mut planner, &mut experts, &config).unwrap();

    assert_eq!(result.status, RunStatus::Degraded);
    assert_eq!(result.answer.as_deref(), Some("best effort answer"));
    let kinds: Vec<&RepairActionRecord> = result.repair_log.iter().map(|e| &e.action).collect();
    assert!(matches!(kinds[0], RepairActionRecord::PatchRefused));
    assert!(matches!(kinds[1], RepairActionRecord::ReconstructRefused));
    assert!(matches!(kinds[2], RepairActionRecord::Fallback { .. }));
    // one suspension charged despite three log records
    assert_eq!(result.metrics.suspensions, 1);
    assert!(conservation_report(&result).is_empty());
}

#[test]
fn fallback_consumes_committed_artifacts_only() {
    // budget of 1: v2's failure burns it, v2_patch's failure falls back;
    // the fallback sees v1's committed artifact
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Rag, "gather", vec![]),
            Vertex::new(id("v2"), ExpertKind::Logic, "derive", vec![id("v1")]),
            Vertex::new(id("v3"), ExpertKind::Expr, "render", vec![id("v2")]),
        ],
        sink: id("v3"),
    };
    let rag = NodeFeedback::new(
        ExpertOutput::Rag(regraft::expert::RagOutput {
            assertions: vec!["fact".into()],
            evidence: vec![regraft::expert::Evidence {
                source: "s".into(),
                snippet: "fact".into(),
            }],
            citations: vec![(0, 0)],
        }),
        false,
        0.9,
        20,
        10,
        0.5,
    );
    let scenario = Scenario {
        table: BTreeMap::from([
            ("v1".to_string(), vec![rag]),
            ("v2".to_string(), vec![logic(&[("bad", false)], 0.1, true)]),
            (
                "v2_patch".to_string(),
                vec![logic(&[("worse", false)], 0.05, true)],
            ),
            ("fallback@1".to_string(), vec![expr("degraded", 0.6)]),
        ]),
    };
    let mut config = EngineConfig::default();
    config.budget.omega_max = 1;
    let mut planner = ScriptedPlanner::new(plan);
    let mut experts = scripted_registry(scenario);
    let result = run("fallback query", &mut planner, &mut experts, &config).unwrap();

    assert_eq!(result.status, RunStatus::Degraded);
    assert_eq!(result.metrics.suspensions, 1);
    // expert calls: v1, v2, v2_patch, fallback
    assert_eq!(result.metrics.expert_calls, 4);
    let fallback_call = result
        .call_trace
        .iter()
        .find(|c| c.node.base_name() == "fallback")
        .unwrap();
    // exactly one committed artifact (v1) went in as context
    assert_eq!(fallback_call.payload_sources.len(), 1);
    assert!(strict_isolation_check(&result));
}

#[test]
fn exhausted_fallback_with_failing_expert_fails_the_run() {
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "one", vec![]),
            Vertex::new(id("v2"), ExpertKind::Expr, "two", vec![id("v1")]),
        ],
        sink: id("v2"),
    };
    let mut config = EngineConfig::default();
    config.budget.omega_max = 2;
    let mut planner = ScriptedPlanner::new(plan);
    let mut experts = fault_registry(
        FaultProfile {
            failure_rate: 1.0,
            low_confidence_prob: 0.0,
        },
        3,
    );
    let result = run("doomed", &mut planner, &mut experts, &config).unwrap();
    assert_eq!(result.status, RunStatus::Failed);
    assert_eq!(result.answer, None);
    assert_eq!(result.metrics.suspensions, 2);
    assert!(result
        .repair_log
        .iter()
        .any(|e| matches!(e.action, RepairActionRecord::Fallback { .. })));
    // nothing ever committed, so the fallback ran over the query alone
    let fallback_call = result
        .call_trace
        .iter()
        .find(|c| c.node.base_name() == "fallback")
        .unwrap();
    assert!(fallback_call.payload_sources.is_empty());
}

#[test]
fn rejected_replacements_burn_budget_and_fall_back() {
    // a planner whose replacement subgraphs always contain a cycle: every
    // reconstruction is rejected at apply, the cause persists, and the
    // budget drains to the fallback
    struct CyclicPlanner(ScriptedPlanner);
    impl regraft::planner::PlannerPort for CyclicPlanner {
        fn initial_plan(
            &mut self,
            query: &str,
        ) -> Result<regraft::planner::Planned<InitialPlan>, regraft::planner::PlannerError>
        {
            self.0.initial_plan(query)
        }
        fn propose_patch(
            &mut self,
            failed: &Vertex,
            ctx: &regraft::planner::PatchContext<'_>,
        ) -> Result<regraft::planner::Planned<Option<Vertex>>, regraft::planner::PlannerError>
        {
            self.0.propose_patch(failed, ctx)
        }
        fn propose_subgraph(
            &mut self,
            _root: &Vertex,
            _query: &str,
            ctx: &regraft::planner::SubgraphContext<'_>,
        ) -> Result<
            regraft::planner::Planned<Option<regraft::planner::SubgraphProposal>>,
            regraft::planner::PlannerError,
        > {
            let a = NodeId::with_generation("a", ctx.next_version);
            let b = NodeId::with_generation("b", ctx.next_version);
            Ok(regraft::planner::Planned::free(Some(
                regraft::planner::SubgraphProposal {
                    vertices: vec![
                        Vertex::new(a.clone(), ExpertKind::Logic, "a", vec![b.clone()]),
                        Vertex::new(b, ExpertKind::Expr, "b", vec![a]),
                    ],
                },
            )))
        }
    }

    let mut config = EngineConfig::default();
    config.budget.omega_max = 3;
    let mut planner = CyclicPlanner(ScriptedPlanner::new(adversarial_plan()));
    let mut experts = fault_registry(
        FaultProfile {
            failure_rate: 1.0,
            low_confidence_prob: 0.0,
        },
        11,
    );
    let result = run("cyclic proposals", &mut planner, &mut experts, &config).unwrap();
    assert!(matches!(
        result.status,
        RunStatus::Degraded | RunStatus::Failed
    ));
    assert_eq!(result.metrics.suspensions, 3);
    assert!(result
        .repair_log
        .iter()
        .any(|e| matches!(e.action, RepairActionRecord::ReconstructRejected { .. })));
    assert!(result
        .repair_log
        .iter()
        .any(|e| matches!(e.action, RepairActionRecord::Fallback { .. })));
    // rejected deltas never made it into history
    for graph in &result.graph_history {
        assert!(graph.validate().is_empty());
    }
}

fn adversarial_plan() -> InitialPlan {
    InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "one", vec![]),
            Vertex::new(id("v2"), ExpertKind::Expr, "two", vec![id("v1")]),
        ],
        sink: id("v2"),
    }
}

#[test]
fn adversarial_runs_terminate_across_seeds_and_budgets() {
    for seed in 0..12u64 {
        for omega_max in [1u32, 2, 4] {
            let mut config = EngineConfig::default();
            config.budget.omega_max = omega_max;
            let mut planner = StochasticPlanner::new(seed);
            let mut experts = fault_registry(
                FaultProfile {
                    failure_rate: 1.0,
                    low_confidence_prob: 0.0,
                },
                seed,
            );
            let result = run("adversarial", &mut planner, &mut experts, &config).unwrap();
            assert!(matches!(
                result.status,
                RunStatus::Degraded | RunStatus::Failed
            ));
            assert_eq!(result.metrics.suspensions, omega_max);
            let max_replacement = result
                .repair_log
                .iter()
                .filter_map(|e| match &e.action {
                    RepairActionRecord::Reconstruct { added, .. } => Some(added.len() as u64),
                    _ => None,
                })
                .max()
                .unwrap_or(1)
                .max(1);
            let initial = result.graph_history[0].len() as u64;
            assert!(
                result.metrics.expert_calls
                    <= initial + u64::from(omega_max) * max_replacement + 1,
                "seed {seed} omega {omega_max}: {} calls",
                result.metrics.expert_calls
            );
            // every intermediate topology version stayed valid
            for graph in &result.graph_history {
                assert!(graph.validate().is_empty());
            }
        }
    }
}

#[test]
fn planner_usage_is_charged_under_the_plan_module() {
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "one", vec![]),
            Vertex::new(id("v2"), ExpertKind::Expr, "two", vec![id("v1")]),
        ],
        sink: id("v2"),
    };
    let scenario = Scenario {
        table: BTreeMap::from([
            ("v1".to_string(), vec![logic(&[("ok", true)], 0.9, false)]),
            ("v2".to_string(), vec![expr("fine", 0.95)]),
        ]),
    };
    let mut planner = ScriptedPlanner::new(plan).with_usage(PlannerUsage {
        tokens_prompt: 100,
        tokens_completion: 50,
        wall_time: 0.25,
    });
    let mut experts = scripted_registry(scenario);
    let config = EngineConfig::default();
    let result = run("charged planning", &mut planner, &mut experts, &config).unwrap();

    let plan_tokens = result
        .metrics
        .tokens_by_module
        .get(&regraft::adapter::AdapterId::plan())
        .copied()
        .unwrap();
    assert_eq!(plan_tokens, 150);
    let entry_tokens: u64 = result
        .artifacts
        .iter()
        .map(|e| e.feedback.tokens_total())
        .sum();
    assert_eq!(result.metrics.tokens_total, entry_tokens + 150);
    assert!((result.metrics.planner_wall_seconds - 0.25).abs() < 1e-12);
    assert!(conservation_report(&result).is_empty());
}

/// Minimal HTTP server answering a fixed number of expert requests.
fn serve_expert_endpoint(responses: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for _ in 0..responses {
            let Ok((mut stream, _)) = listener.accept() else {
                return;
            };
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read headers + body (requests are small; one read usually
            // suffices, loop until the blank line and declared length)
            loop {
                let n = stream.read(&mut chunk).unwrap_or(0);
                if n == 0 {
                    break;
                }
                buf.extend_from_slice(&chunk[..n]);
                if let Some(header_end) = find_subslice(&buf, b"\r\n\r\n") {
                    let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
                    let length: usize = headers
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .and_then(|v| v.trim().parse().ok())
                        .unwrap_or(0);
                    if buf.len() >= header_end + 4 + length {
                        break;
                    }
                }
            }
            let path_is_logic = buf.starts_with(b"POST /logic");
            let body = if path_is_logic {
                r#"{"output": {"kind": "LOGIC", "history": ["remote step"], "verifications": [true]},
                    "confidence": 0.88, "exception": false,
                    "tokens_prompt": 60, "tokens_completion": 20, "wall_time": 0.4}"#
            } else {
                r#"{"output": {"kind": "EXPR", "draft": "remote answer", "unsupported": []},
                    "confidence": 0.93, "exception": false,
                    "tokens_prompt": 45, "tokens_completion": 12, "wall_time": 0.3}"#
            };
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    format!("http://{addr}")
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[test]
fn remote_expert_pool_drives_a_full_run() {
    let endpoint = serve_expert_endpoint(2);
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "reason remotely", vec![]),
            Vertex::new(id("v2"), ExpertKind::Expr, "render remotely", vec![id("v1")]),
        ],
        sink: id("v2"),
    };
    let mut config = EngineConfig::default();
    config.experts.mode = ExpertMode::Remote;
    config.experts.endpoint = Some(endpoint.clone());
    let mut planner = ScriptedPlanner::new(plan);
    let mut experts = regraft::expert::remote_registry(&endpoint, 1);
    let result = run("remote query", &mut planner, &mut experts, &config).unwrap();

    assert_eq!(result.status, RunStatus::Completed);
    assert_eq!(result.answer.as_deref(), Some("remote answer"));
    assert_eq!(result.metrics.expert_calls, 2);
    assert_eq!(result.metrics.tokens_total, 60 + 20 + 45 + 12);
    assert!(strict_isolation_check(&result));
}

#[test]
fn logic_sink_renders_last_verified_step_as_answer() {
    let plan = InitialPlan {
        vertices: vec![
            Vertex::new(id("v1"), ExpertKind::Logic, "derive", vec![]),
            Vertex::new(id("v2"), ExpertKind::Logic, "conclude", vec![id("v1")]),
        ],
        sink: id("v2"),
    };
    let scenario = Scenario {
        table: BTreeMap::from([
            ("v1".to_string(), vec![logic(&[("setup", true)], 0.9, false)]),
            (
                "v2".to_string(),
                vec![logic(
                    &[("the answer is 42", true), ("post-hoc note", true)],
                    0.9,
                    false,
                )],
            ),
        ]),
    };
    let mut planner = ScriptedPlanner::new(plan);
    let mut experts = scripted_registry(scenario);
    let result = run("logic sink", &mut planner, &mut experts, &EngineConfig::default()).unwrap();
    assert_eq!(result.status, RunStatus::Completed);
    assert_eq!(result.answer.as_deref(), Some("post-hoc note"));
    // render_answer picks the last verified entry
    assert_eq!(
        render_answer(&ExpertOutput::Logic(LogicOutput {
            history: vec!["a".into(), "b".into()],
            verifications: vec![true, false],
        })),
        "a"
    );
}
