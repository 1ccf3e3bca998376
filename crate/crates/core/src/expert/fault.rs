//! Fault-injecting experts: seeded synthetic experts that fail at a
//! configurable rate. Used by the fault-injection corpus, adversarial
//! termination tests, and planner-training candidate generation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    Expert, ExpertCall, ExpertError, ExpertOutput, ExpertRegistry, LogicOutput, NodeFeedback,
};
use crate::graph::ExpertKind;

/// Tunable failure behavior for a synthetic expert pool.
#[derive(Debug, Clone, Copy)]
pub struct FaultProfile {
    /// Probability a call returns an exception-flagged feedback.
    pub failure_rate: f64,
    /// Probability a successful call still lands below a typical
    /// confidence floor, exercising the floor trigger.
    pub low_confidence_prob: f64,
}

impl Default for FaultProfile {
    fn default() -> Self {
        FaultProfile {
            failure_rate: 0.0,
            low_confidence_prob: 0.1,
        }
    }
}

/// A deterministic (seeded) expert that injects faults at a fixed rate
/// and otherwise either delegates to an inner expert or fabricates a
/// plausible success.
pub struct FaultInjectingExpert {
    kind: ExpertKind,
    profile: FaultProfile,
    rng: ChaCha8Rng,
    inner: Option<Box<dyn Expert>>,
}

impl FaultInjectingExpert {
    pub fn new(kind: ExpertKind, profile: FaultProfile, seed: u64) -> Self {
        // per-kind stream so determinism is independent of interleaving
        let stream = seed ^ ((kind as u64 + 1) << 56);
        FaultInjectingExpert {
            kind,
            profile,
            rng: ChaCha8Rng::seed_from_u64(stream),
            inner: None,
        }
    }

    pub fn wrapping(inner: Box<dyn Expert>, profile: FaultProfile, seed: u64) -> Self {
        let kind = inner.kind();
        let mut expert = FaultInjectingExpert::new(kind, profile, seed);
        expert.inner = Some(inner);
        expert
    }

    fn failure_feedback(&mut self) -> NodeFeedback {
        let output = match self.kind {
            ExpertKind::Logic => ExpertOutput::Logic(LogicOutput {
                history: vec!["execution aborted".into()],
                verifications: vec![false],
            }),
            kind => ExpertOutput::empty(kind),
        };
        NodeFeedback::new(
            output,
            true,
            0.0,
            self.rng.gen_range(20..80),
            self.rng.gen_range(5..30),
            self.rng.gen_range(0.2..1.5),
        )
    }

    fn synthetic_success(&mut self, call: &ExpertCall) -> NodeFeedback {
        let summary = format!("result of: {}", call.vertex.instruction);
        let output = match self.kind {
            ExpertKind::Rag => ExpertOutput::Rag(super::RagOutput {
                assertions: vec![summary],
                evidence: vec![super::Evidence {
                    source: "synthetic".into(),
                    snippet: call.vertex.instruction.clone(),
                }],
                citations: vec![(0, 0)],
            }),
            ExpertKind::Logic => ExpertOutput::Logic(LogicOutput {
                history: vec![summary],
                verifications: vec![true],
            }),
            ExpertKind::Expr => ExpertOutput::Expr(super::ExprOutput {
                draft: summary,
                unsupported: vec![],
            }),
        };
        let confidence = if self.rng.gen::<f64>() < self.profile.low_confidence_prob {
            self.rng.gen_range(0.05..0.30)
        } else {
            self.rng.gen_range(0.45..0.98)
        };
        NodeFeedback::new(
            output,
            false,
            confidence,
            self.rng.gen_range(40..160),
            self.rng.gen_range(20..120),
            self.rng.gen_range(0.3..2.5),
        )
    }
}

impl Expert for FaultInjectingExpert {
    fn kind(&self) -> ExpertKind {
        self.kind
    }

    fn execute(&mut self, call: &ExpertCall) -> Result<NodeFeedback, ExpertError> {
        if self.rng.gen::<f64>() < self.profile.failure_rate {
            return Ok(self.failure_feedback());
        }
        match &mut self.inner {
            Some(inner) => inner.execute(call).map(NodeFeedback::normalized),
            None => Ok(self.synthetic_success(call)),
        }
    }
}

/// A pool of three fault-injecting experts with a shared seed.
pub fn fault_registry(profile: FaultProfile, seed: u64) -> ExpertRegistry {
    let mut registry = ExpertRegistry::new();
    for kind in ExpertKind::ALL {
        registry.register(Box::new(FaultInjectingExpert::new(kind, profile, seed)));
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Vertex;

    fn call() -> ExpertCall {
        ExpertCall {
            vertex: Vertex::new("v1".parse().unwrap(), ExpertKind::Expr, "task", vec![]),
            parent_payloads: vec![],
            repair_context: None,
        }
    }

    #[test]
    fn rate_one_always_fails_with_zero_confidence() {
        let profile = FaultProfile {
            failure_rate: 1.0,
            low_confidence_prob: 0.0,
        };
        let mut expert = FaultInjectingExpert::new(ExpertKind::Expr, profile, 7);
        for _ in 0..5 {
            let feedback = expert.execute(&call()).unwrap();
            assert!(feedback.exception);
            assert_eq!(feedback.confidence, 0.0);
        }
    }

    #[test]
    fn rate_zero_always_succeeds() {
        let mut expert = FaultInjectingExpert::new(
            ExpertKind::Logic,
            FaultProfile {
                failure_rate: 0.0,
                low_confidence_prob: 0.0,
            },
            7,
        );
        let feedback = expert.execute(&call()).unwrap();
        assert!(!feedback.exception);
        assert!(feedback.confidence >= 0.45);
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let profile = FaultProfile {
            failure_rate: 0.5,
            low_confidence_prob: 0.2,
        };
        let stream = |seed| {
            let mut expert = FaultInjectingExpert::new(ExpertKind::Rag, profile, seed);
            (0..10)
                .map(|_| expert.execute(&call()).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(stream(42), stream(42));
        assert_ne!(stream(42), stream(43));
    }
}
