//! The planner port: the engine decides *when* to repair, the planner
//! decides *what* to generate — the initial decomposition, patch
//! vertices, and replacement subgraphs.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::SuspensionCause;
use crate::expert::{ExpertOutput, NodeFeedback};
use crate::graph::{ExpertKind, NodeId, Vertex};

/// Token and time accounting for one planner call; charged under the
/// `plan` module.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlannerUsage {
    pub tokens_prompt: u64,
    pub tokens_completion: u64,
    pub wall_time: f64,
}

/// A planner result together with its usage.
#[derive(Debug, Clone, PartialEq)]
pub struct Planned<T> {
    pub value: T,
    pub usage: PlannerUsage,
}

impl<T> Planned<T> {
    pub fn free(value: T) -> Self {
        Planned {
            value,
            usage: PlannerUsage::default(),
        }
    }
}

/// The initial decomposition of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPlan {
    pub vertices: Vec<Vertex>,
    pub sink: NodeId,
}

/// Context handed to a patch proposal.
#[derive(Debug)]
pub struct PatchContext<'a> {
    pub cause: &'a SuspensionCause,
    pub failed_feedback: Option<&'a NodeFeedback>,
}

/// Context handed to a subgraph proposal.
#[derive(Debug)]
pub struct SubgraphContext<'a> {
    pub cause: &'a SuspensionCause,
    /// The downstream closure being truncated.
    pub removed: &'a BTreeSet<NodeId>,
    /// Parents of the truncation root that survive the cut; proposal
    /// roots (vertices with empty parent lists) are attached to these.
    pub attach_parents: &'a [NodeId],
    /// Whether the old sink is being removed, and its kind — the
    /// replacement must then supply the new answer-emitting vertex.
    pub sink_removed: bool,
    pub sink_kind: ExpertKind,
    /// Surviving committed context upstream of the cut.
    pub upstream: &'a [(NodeId, ExpertOutput)],
    /// Version the repaired graph will carry; fresh ids should use it as
    /// their generation so names never collide across repairs.
    pub next_version: u32,
}

/// A replacement subgraph. Vertices with an empty parent list are roots
/// and get attached to the truncation point by the engine; other parent
/// references must point at proposal vertices or surviving nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphProposal {
    pub vertices: Vec<Vertex>,
}

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("planner failure: {0}")]
    Failed(String),
}

/// Generation capabilities the engine requires of a planner. Returning
/// `Ok(None)` from a proposal is a refusal: the engine escalates to the
/// next repair tier.
pub trait PlannerPort {
    fn initial_plan(&mut self, query: &str) -> Result<Planned<InitialPlan>, PlannerError>;

    /// Proposes a repair vertex for a failed node. Only `expert_kind` and
    /// `instruction` of the returned vertex are honored; the engine
    /// assigns the patch id and wires the parents.
    fn propose_patch(
        &mut self,
        failed: &Vertex,
        ctx: &PatchContext<'_>,
    ) -> Result<Planned<Option<Vertex>>, PlannerError>;

    fn propose_subgraph(
        &mut self,
        root: &Vertex,
        query: &str,
        ctx: &SubgraphContext<'_>,
    ) -> Result<Planned<Option<SubgraphProposal>>, PlannerError>;
}

/// Deterministic planner driven by a fixed plan document. Used for
/// scripted runs and replay: the same inputs always yield the same
/// decomposition and the same repair proposals.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    plan: InitialPlan,
    refuse_patches: bool,
    refuse_subgraphs: bool,
    usage_per_call: PlannerUsage,
}

impl ScriptedPlanner {
    pub fn new(plan: InitialPlan) -> Self {
        ScriptedPlanner {
            plan,
            refuse_patches: false,
            refuse_subgraphs: false,
            usage_per_call: PlannerUsage::default(),
        }
    }

    /// Fixed usage charged per planner call (defaults to zero).
    pub fn with_usage(mut self, usage: PlannerUsage) -> Self {
        self.usage_per_call = usage;
        self
    }

    pub fn refusing_patches(mut self) -> Self {
        self.refuse_patches = true;
        self
    }

    pub fn refusing_subgraphs(mut self) -> Self {
        self.refuse_subgraphs = true;
        self
    }
}

impl PlannerPort for ScriptedPlanner {
    fn initial_plan(&mut self, _query: &str) -> Result<Planned<InitialPlan>, PlannerError> {
        Ok(Planned {
            value: self.plan.clone(),
            usage: self.usage_per_call,
        })
    }

    fn propose_patch(
        &mut self,
        failed: &Vertex,
        _ctx: &PatchContext<'_>,
    ) -> Result<Planned<Option<Vertex>>, PlannerError> {
        if self.refuse_patches {
            return Ok(Planned {
                value: None,
                usage: self.usage_per_call,
            });
        }
        let vertex = Vertex::new(
            failed.id.patch_of(),
            failed.expert_kind,
            format!("Revisit and correct: {}", failed.instruction),
            failed.parents.clone(),
        );
        Ok(Planned {
            value: Some(vertex),
            usage: self.usage_per_call,
        })
    }

    fn propose_subgraph(
        &mut self,
        root: &Vertex,
        query: &str,
        ctx: &SubgraphContext<'_>,
    ) -> Result<Planned<Option<SubgraphProposal>>, PlannerError> {
        if self.refuse_subgraphs {
            return Ok(Planned {
                value: None,
                usage: self.usage_per_call,
            });
        }
        let version = ctx.next_version;
        let mut vertices = Vec::new();
        let redo = NodeId::with_generation(format!("redo_{}", root.id.base_name()), version);
        vertices.push(Vertex::new(
            redo.clone(),
            root.expert_kind,
            format!("Redo from a clean state: {}", root.instruction),
            vec![], // root: engine attaches surviving parents
        ));
        if ctx.sink_removed {
            let emit = NodeId::with_generation("emit", version);
            vertices.push(Vertex::new(
                emit,
                ctx.sink_kind,
                format!("Produce the final answer for: {query}"),
                vec![redo],
            ));
        }
        Ok(Planned {
            value: Some(SubgraphProposal { vertices }),
            usage: self.usage_per_call,
        })
    }
}

/// Seeded planner that samples topology variants: used to generate
/// candidate trajectories for preference-pair construction and for the
/// fault-injection corpus.
#[derive(Debug)]
pub struct StochasticPlanner {
    rng: ChaCha8Rng,
    seed: u64,
}

impl StochasticPlanner {
    pub fn new(seed: u64) -> Self {
        StochasticPlanner {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn sample_usage(&mut self) -> PlannerUsage {
        PlannerUsage {
            tokens_prompt: self.rng.gen_range(60..200),
            tokens_completion: self.rng.gen_range(30..120),
            wall_time: self.rng.gen_range(0.4..1.6),
        }
    }

    fn sample_kind(&mut self) -> ExpertKind {
        ExpertKind::ALL[self.rng.gen_range(0..ExpertKind::ALL.len())]
    }
}

impl PlannerPort for StochasticPlanner {
    fn initial_plan(&mut self, query: &str) -> Result<Planned<InitialPlan>, PlannerError> {
        let usage = self.sample_usage();
        let n = self.rng.gen_range(2..=5);
        let mut vertices: Vec<Vertex> = Vec::new();
        for i in 0..n {
            let id = NodeId::new(format!("s{i}"));
            let kind = if i == n - 1 {
                ExpertKind::Expr
            } else {
                self.sample_kind()
            };
            // chain backbone with an occasional extra skip edge
            let mut parents = if i == 0 {
                vec![]
            } else {
                vec![NodeId::new(format!("s{}", i - 1))]
            };
            if i >= 2 && self.rng.gen_bool(0.4) {
                let extra = self.rng.gen_range(0..i - 1);
                let extra = NodeId::new(format!("s{extra}"));
                if !parents.contains(&extra) {
                    parents.push(extra);
                }
            }
            vertices.push(Vertex::new(
                id,
                kind,
                format!("step {i} of: {query}"),
                parents,
            ));
        }
        let sink = vertices.last().expect("n >= 2").id.clone();
        Ok(Planned {
            value: InitialPlan { vertices, sink },
            usage,
        })
    }

    fn propose_patch(
        &mut self,
        failed: &Vertex,
        _ctx: &PatchContext<'_>,
    ) -> Result<Planned<Option<Vertex>>, PlannerError> {
        let usage = self.sample_usage();
        let vertex = Vertex::new(
            failed.id.patch_of(),
            failed.expert_kind,
            format!("Retry with corrections: {}", failed.instruction),
            failed.parents.clone(),
        );
        Ok(Planned {
            value: Some(vertex),
            usage,
        })
    }

    fn propose_subgraph(
        &mut self,
        root: &Vertex,
        query: &str,
        ctx: &SubgraphContext<'_>,
    ) -> Result<Planned<Option<SubgraphProposal>>, PlannerError> {
        let usage = self.sample_usage();
        let version = ctx.next_version;
        let chain = self.rng.gen_range(1..=2usize);
        let mut vertices = Vec::new();
        let mut prev: Option<NodeId> = None;
        for i in 0..chain {
            let id = NodeId::with_generation(format!("r{i}"), version);
            let kind = self.sample_kind();
            vertices.push(Vertex::new(
                id.clone(),
                kind,
                format!("replan step {i}: {}", root.instruction),
                prev.map(|p| vec![p]).unwrap_or_default(),
            ));
            prev = Some(id);
        }
        if ctx.sink_removed {
            let emit = NodeId::with_generation("emit", version);
            vertices.push(Vertex::new(
                emit,
                ctx.sink_kind,
                format!("Produce the final answer for: {query}"),
                vec![prev.expect("chain >= 1")],
            ));
        }
        Ok(Planned {
            value: Some(SubgraphProposal { vertices }),
            usage,
        })
    }
}
