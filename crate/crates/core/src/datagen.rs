//! Candidate-trajectory generation for planner training: the reference
//! policy is a seeded stochastic planner sampling topology variants per
//! query; runs execute against a seeded synthetic expert pool and are
//! scored by the critic.

use std::collections::BTreeMap;

use crate::config::EngineConfig;
use crate::critic::{Critic, Trajectory};
use crate::expert::{fault_registry, FaultProfile};
use crate::orchestrator::{run, EngineError};
use crate::planner::StochasticPlanner;

/// Knobs for candidate generation.
#[derive(Debug, Clone, Copy)]
pub struct DatagenConfig {
    pub candidates_per_query: usize,
    pub seed: u64,
    pub failure_rate: f64,
    pub low_confidence_prob: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            candidates_per_query: 4,
            seed: 0,
            failure_rate: 0.15,
            low_confidence_prob: 0.1,
        }
    }
}

fn candidate_seed(base: u64, query_index: usize, candidate: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add(query_index as u64 * 10_007)
        .wrapping_add(candidate as u64)
}

/// Runs the engine once per candidate with a fresh seeded planner and
/// expert pool, scoring each finished trajectory.
pub fn generate_candidates(
    queries: &[String],
    datagen: &DatagenConfig,
    engine: &EngineConfig,
    critic: &Critic,
) -> Result<BTreeMap<String, Vec<(Trajectory, f64)>>, EngineError> {
    let mut out = BTreeMap::new();
    for (qi, query) in queries.iter().enumerate() {
        let mut scored = Vec::with_capacity(datagen.candidates_per_query);
        for c in 0..datagen.candidates_per_query {
            let seed = candidate_seed(datagen.seed, qi, c);
            let mut planner = StochasticPlanner::new(seed);
            let mut experts = fault_registry(
                FaultProfile {
                    failure_rate: datagen.failure_rate,
                    low_confidence_prob: datagen.low_confidence_prob,
                },
                seed,
            );
            let result = run(query, &mut planner, &mut experts, engine)?;
            let trajectory = Trajectory::from_run(query.clone(), &result);
            let reward = critic.reward(&trajectory);
            scored.push((trajectory, reward));
        }
        out.insert(query.clone(), scored);
    }
    Ok(out)
}
