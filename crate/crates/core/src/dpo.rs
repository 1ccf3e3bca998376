//! Preference optimization for the planner policy.
//!
//! The policy is a linear-logit softmax over each query's candidate
//! trajectories: `log pi(tau | x) = w . f(tau) - logsumexp over the
//! candidate set`. That keeps the implicit-reward and loss definitions
//! intact while making every gradient analytically checkable against
//! finite differences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::Trajectory;
use crate::graph::ExpertKind;

/// Names of the extracted features, in vector order.
pub const FEATURE_NAMES: [&str; 7] = [
    "node_count",
    "reconstructions",
    "rag_count",
    "logic_count",
    "expr_count",
    "mean_confidence",
    "graph_depth",
];

pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

/// A trajectory reduced to a fixed-dimension feature vector,
/// standardized to zero mean/unit variance over its candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeatures {
    pub values: Vec<f64>,
}

/// Raw (unstandardized) features of a trajectory.
pub fn extract_features(trajectory: &Trajectory) -> Vec<f64> {
    let final_graph = trajectory.graph_history.last();
    let count_kind = |kind: ExpertKind| {
        final_graph
            .map(|g| g.vertices().filter(|v| v.expert_kind == kind).count())
            .unwrap_or(0) as f64
    };
    vec![
        trajectory.node_count as f64,
        f64::from(trajectory.reconstructions),
        count_kind(ExpertKind::Rag),
        count_kind(ExpertKind::Logic),
        count_kind(ExpertKind::Expr),
        trajectory.mean_confidence(),
        final_graph.map(|g| g.depth()).unwrap_or(0) as f64,
    ]
}

/// Standardizes a candidate set per feature (population statistics); a
/// zero-variance feature standardizes to zero. The statistics are frozen
/// into the dataset so training is replayable.
pub fn standardize(raw: &[Vec<f64>]) -> Vec<TrajectoryFeatures> {
    if raw.is_empty() {
        return Vec::new();
    }
    let dim = raw[0].len();
    let n = raw.len() as f64;
    let mut means = vec![0.0; dim];
    for row in raw {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut variances = vec![0.0; dim];
    for row in raw {
        for ((var, v), m) in variances.iter_mut().zip(row).zip(&means) {
            *var += (v - m) * (v - m) / n;
        }
    }
    raw.iter()
        .map(|row| TrajectoryFeatures {
            values: row
                .iter()
                .zip(&means)
                .zip(&variances)
                .map(|((v, m), var)| {
                    if *var < 1e-12 {
                        0.0
                    } else {
                        (v - m) / var.sqrt()
                    }
                })
                .collect(),
        })
        .collect()
}

/// Trainable weights next to the frozen reference weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub reference_weights: Vec<f64>,
}

impl PolicyParams {
    /// Fresh parameters at the (uniform) reference policy.
    pub fn at_reference(dim: usize) -> Self {
        PolicyParams {
            weights: vec![0.0; dim],
            reference_weights: vec![0.0; dim],
        }
    }
}

/// One preference pair with its candidate set: the chosen and rejected
/// indices, the critic reward gap that admitted it, and every candidate's
/// standardized features (the softmax normalizer needs the whole set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub chosen: usize,
    pub rejected: usize,
    pub reward_gap: f64,
    pub candidates: Vec<TrajectoryFeatures>,
}

impl PreferencePair {
    pub fn chosen_features(&self) -> &TrajectoryFeatures {
        &self.candidates[self.chosen]
    }

    pub fn rejected_features(&self) -> &TrajectoryFeatures {
        &self.candidates[self.rejected]
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    /// KL-penalty scale of the implicit reward.
    pub beta: f64,
    /// Margin: a pair enters the dataset only if the reward gap meets it.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub steps: u32,
    pub candidates_per_query: usize,
    pub seed: u64,
    /// Whether vetoed trajectories may appear on the rejected side.
    pub allow_vetoed_rejected: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            epsilon: 0.05,
            learning_rate: 0.05,
            steps: 500,
            candidates_per_query: 4,
            seed: 0,
            allow_vetoed_rejected: true,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if self.beta <= 0.0 {
            return Err(DpoError::BadConfig("beta must be positive".into()));
        }
        if self.epsilon < 0.0 {
            return Err(DpoError::BadConfig("epsilon must be non-negative".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(DpoError::BadConfig(
                "learning_rate must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("candidate sets need at least two members")]
    SingletonCandidateSet,
    #[error("candidate index {index} out of range {len}")]
    BadCandidate { index: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: u32, loss: f64 },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Log-probability of one candidate under the softmax policy with the
/// given weights. The distribution over a degenerate set (identical
/// feature vectors) is uniform; that case is logged, not rejected.
pub fn policy_logprob(
    weights: &[f64],
    candidate: usize,
    candidate_set: &[TrajectoryFeatures],
) -> Result<f64, DpoError> {
    if candidate_set.len() < 2 {
        return Err(DpoError::SingletonCandidateSet);
    }
    if candidate >= candidate_set.len() {
        return Err(DpoError::BadCandidate {
            index: candidate,
            len: candidate_set.len(),
        });
    }
    if candidate_set
        .windows(2)
        .all(|w| w[0].values == w[1].values)
    {
        log::warn!("degenerate candidate set: all feature vectors identical; policy is uniform");
    }
    let scores: Vec<f64> = candidate_set
        .iter()
        .map(|f| dot(weights, &f.values))
        .collect();
    Ok(scores[candidate] - logsumexp(&scores))
}

/// Per-candidate softmax probabilities under the given weights.
fn policy_probs(weights: &[f64], candidate_set: &[TrajectoryFeatures]) -> Vec<f64> {
    let scores: Vec<f64> = candidate_set
        .iter()
        .map(|f| dot(weights, &f.values))
        .collect();
    let lse = logsumexp(&scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// Implicit reward: the KL-scaled log-probability ratio of a candidate
/// under the trained versus reference policy.
pub fn implicit_reward(
    params: &PolicyParams,
    candidate: usize,
    candidate_set: &[TrajectoryFeatures],
    beta: f64,
) -> Result<f64, DpoError> {
    let trained = policy_logprob(&params.weights, candidate, candidate_set)?;
    let reference = policy_logprob(&params.reference_weights, candidate, candidate_set)?;
    Ok(beta * (trained - reference))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean negative log-likelihood that the chosen side out-rewards the
/// rejected side.
pub fn dpo_loss(
    params: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<f64, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut total = 0.0;
    for pair in batch {
        let chosen = implicit_reward(params, pair.chosen, &pair.candidates, beta)?;
        let rejected = implicit_reward(params, pair.rejected, &pair.candidates, beta)?;
        total += -sigmoid(chosen - rejected).ln();
    }
    Ok(total / batch.len() as f64)
}

/// Exact analytic gradient of [`dpo_loss`] with respect to the trainable
/// weights. The gradient of a candidate's log-probability is its feature
/// vector minus the probability-weighted feature mean of its set.
pub fn dpo_gradient(
    params: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<Vec<f64>, DpoError> {
    if batch.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let dim = params.weights.len();
    let mut grad = vec![0.0; dim];
    for pair in batch {
        let chosen = implicit_reward(params, pair.chosen, &pair.candidates, beta)?;
        let rejected = implicit_reward(params, pair.rejected, &pair.candidates, beta)?;
        let margin = chosen - rejected;
        // d/d_margin of -log sigmoid(margin)
        let outer = -sigmoid(-margin);

        let probs = policy_probs(&params.weights, &pair.candidates);
        let mut expected = vec![0.0; dim];
        for (p, f) in probs.iter().zip(&pair.candidates) {
            for (e, v) in expected.iter_mut().zip(&f.values) {
                *e += p * v;
            }
        }
        let chosen_f = &pair.chosen_features().values;
        let rejected_f = &pair.rejected_features().values;
        for d in 0..dim {
            // grad log pi terms: the set expectation cancels within a pair
            let grad_margin = beta * ((chosen_f[d] - expected[d]) - (rejected_f[d] - expected[d]));
            grad[d] += outer * grad_margin;
        }
    }
    for g in &mut grad {
        *g /= batch.len() as f64;
    }
    Ok(grad)
}

/// Central finite-difference gradient of the loss; the independent check
/// behind `gradcheck`.
pub fn finite_difference_gradient(
    params: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
    step: f64,
) -> Result<Vec<f64>, DpoError> {
    let mut grad = vec![0.0; params.weights.len()];
    for (d, slot) in grad.iter_mut().enumerate() {
        let mut plus = params.clone();
        plus.weights[d] += step;
        let mut minus = params.clone();
        minus.weights[d] -= step;
        *slot = (dpo_loss(&plus, batch, beta)? - dpo_loss(&minus, batch, beta)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Builds margin-filtered preference pairs from critic-scored candidates.
///
/// For each query every strictly ordered pair whose reward gap meets the
/// margin is kept; pairs with a vetoed trajectory on the chosen side are
/// always excluded, and vetoed rejected sides are excluded unless
/// `allow_vetoed_rejected` (a vetoed trajectory is a maximally
/// dispreferred example).
pub fn build_pairs(
    candidates: &BTreeMap<String, Vec<(Trajectory, f64)>>,
    epsilon: f64,
    allow_vetoed_rejected: bool,
) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for (query_id, scored) in candidates {
        let raw: Vec<Vec<f64>> = scored.iter().map(|(t, _)| extract_features(t)).collect();
        let features = standardize(&raw);
        if features.len() < 2 {
            continue;
        }
        for i in 0..scored.len() {
            for j in 0..scored.len() {
                if i == j {
                    continue;
                }
                let gap = scored[i].1 - scored[j].1;
                if gap <= 0.0 || gap < epsilon {
                    continue;
                }
                if scored[i].0.vetoed() {
                    continue;
                }
                if !allow_vetoed_rejected && scored[j].0.vetoed() {
                    continue;
                }
                pairs.push(PreferencePair {
                    query_id: query_id.clone(),
                    chosen: i,
                    rejected: j,
                    reward_gap: gap,
                    candidates: features.clone(),
                });
            }
        }
    }
    pairs
}

/// The on-disk preference dataset: queries, standardized candidate
/// features, per-candidate rewards, and pair indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub queries: Vec<QueryCandidates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCandidates {
    pub query_id: String,
    pub features: Vec<TrajectoryFeatures>,
    pub rewards: Vec<f64>,
    pub pairs: Vec<PairIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    pub chosen: usize,
    pub rejected: usize,
    pub reward_gap: f64,
}

impl PreferenceDataset {
    /// Packages scored candidates into the replayable dataset form.
    pub fn from_scored(
        candidates: &BTreeMap<String, Vec<(Trajectory, f64)>>,
        epsilon: f64,
        allow_vetoed_rejected: bool,
    ) -> Self {
        let pairs = build_pairs(candidates, epsilon, allow_vetoed_rejected);
        let mut queries: Vec<QueryCandidates> = candidates
            .iter()
            .map(|(query_id, scored)| {
                let raw: Vec<Vec<f64>> =
                    scored.iter().map(|(t, _)| extract_features(t)).collect();
                QueryCandidates {
                    query_id: query_id.clone(),
                    features: standardize(&raw),
                    rewards: scored.iter().map(|(_, r)| *r).collect(),
                    pairs: Vec::new(),
                }
            })
            .collect();
        for pair in pairs {
            if let Some(q) = queries.iter_mut().find(|q| q.query_id == pair.query_id) {
                q.pairs.push(PairIndex {
                    chosen: pair.chosen,
                    rejected: pair.rejected,
                    reward_gap: pair.reward_gap,
                });
            }
        }
        PreferenceDataset { queries }
    }

    /// Expands the dataset into training pairs with embedded candidate
    /// sets.
    pub fn training_pairs(&self) -> Vec<PreferencePair> {
        let mut out = Vec::new();
        for q in &self.queries {
            for p in &q.pairs {
                out.push(PreferencePair {
                    query_id: q.query_id.clone(),
                    chosen: p.chosen,
                    rejected: p.rejected,
                    reward_gap: p.reward_gap,
                    candidates: q.features.clone(),
                });
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Trained parameters plus the per-step loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub loss_curve: Vec<f64>,
}

/// Full-batch gradient descent from the reference policy. Deterministic:
/// fixed iteration order, fixed reduction order.
pub fn train(config: &DpoConfig, dataset: &[PreferencePair]) -> Result<TrainOutcome, DpoError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let dim = dataset[0].candidates[0].values.len();
    let mut params = PolicyParams::at_reference(dim);
    let mut loss_curve = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let loss = dpo_loss(&params, dataset, config.beta)?;
        if !loss.is_finite() {
            return Err(DpoError::Divergence { step, loss });
        }
        loss_curve.push(loss);
        let grad = dpo_gradient(&params, dataset, config.beta)?;
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }
    Ok(TrainOutcome { params, loss_curve })
}

/// Gradient-check report over randomized parameterizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: u32,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient against central finite differences on
/// randomly generated batches and parameterizations.
pub fn gradcheck(seed: u64, cases: u32) -> GradcheckReport {
    let tolerance = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..cases {
        let dim = rng.gen_range(2..=FEATURE_DIM);
        let set_size = rng.gen_range(2..=5usize);
        let pairs: Vec<PreferencePair> = (0..rng.gen_range(1..=4usize))
            .map(|p| {
                let candidates: Vec<TrajectoryFeatures> = (0..set_size)
                    .map(|_| TrajectoryFeatures {
                        values: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    })
                    .collect();
                let chosen = rng.gen_range(0..set_size);
                let mut rejected = rng.gen_range(0..set_size);
                if rejected == chosen {
                    rejected = (rejected + 1) % set_size;
                }
                PreferencePair {
                    query_id: format!("q{p}"),
                    chosen,
                    rejected,
                    reward_gap: 0.1,
                    candidates,
                }
            })
            .collect();
        let params = PolicyParams {
            weights: (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            reference_weights: (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        };
        let beta = rng.gen_range(0.05..2.0);
        let analytic = dpo_gradient(&params, &pairs, beta).expect("non-empty batch");
        let numeric =
            finite_difference_gradient(&params, &pairs, beta, 1e-5).expect("non-empty batch");
        for (a, n) in analytic.iter().zip(&numeric) {
            let scale = a.abs().max(n.abs()).max(1e-8);
            max_rel = max_rel.max((a - n).abs() / scale);
        }
    }
    GradcheckReport {
        cases,
        max_relative_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    }
}

/// Training report written by the CLI: config echo, loss curve, final
/// weights with their feature names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: DpoConfig,
    pub feature_names: Vec<String>,
    pub final_weights: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    pub fn new(config: DpoConfig, outcome: &TrainOutcome) -> Self {
        TrainReport {
            config,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            final_weights: outcome.params.weights.clone(),
            initial_loss: outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
            final_loss: outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
            loss_curve: outcome.loss_curve.clone(),
        }
    }
}
