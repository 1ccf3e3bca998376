//! Global uncertainty and the suspension indicator.
//!
//! After every committed feedback the orchestrator hands the live
//! evaluation view to [`check_suspension`], which reports the first
//! matching trigger in fixed priority: an exception flag beats a
//! confidence-floor breach beats a global-uncertainty breach. Boundary
//! semantics follow the trigger rows exactly: `c < tau_c` fires strictly,
//! `U >= tau_u` fires inclusively.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NodeId;

/// Suspension thresholds: the single-node confidence floor and the global
/// uncertainty tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalThresholds {
    pub tau_c: f64,
    pub tau_u: f64,
}

impl EvalThresholds {
    pub fn new(tau_c: f64, tau_u: f64) -> Result<Self, EvalError> {
        let t = EvalThresholds { tau_c, tau_u };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, value) in [("tau_c", self.tau_c), ("tau_u", self.tau_u)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(EvalError::BadThreshold {
                    name,
                    value,
                });
            }
        }
        Ok(())
    }
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            tau_c: 0.35,
            tau_u: 0.45,
        }
    }
}

/// Why scheduling halted (or `None` when it did not).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SuspensionKind {
    #[serde(rename = "EXCEPTION_FLAG")]
    ExceptionFlag,
    #[serde(rename = "CONFIDENCE_FLOOR")]
    ConfidenceFloor,
    #[serde(rename = "GLOBAL_UNCERTAINTY")]
    GlobalUncertainty,
    #[serde(rename = "NONE")]
    None,
}

/// The evaluator's verdict: trigger kind, the node it pins the failure
/// on, and the value that crossed the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspensionCause {
    pub kind: SuspensionKind,
    pub offending_node: Option<NodeId>,
    pub observed_value: f64,
}

impl SuspensionCause {
    pub fn none() -> Self {
        SuspensionCause {
            kind: SuspensionKind::None,
            offending_node: None,
            observed_value: 0.0,
        }
    }

    pub fn is_suspended(&self) -> bool {
        self.kind != SuspensionKind::None
    }
}

/// One row of the evaluation view: a stored feedback projected to what the
/// evaluator needs, plus the node's topological rank for tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub node: NodeId,
    pub rank: usize,
    pub exception: bool,
    pub confidence: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("global uncertainty is undefined over an empty committed set")]
    EmptySet,
    #[error("threshold {name} = {value} must lie strictly inside (0, 1)")]
    BadThreshold { name: &'static str, value: f64 },
}

/// Aggregate execution instability: one minus the mean confidence of the
/// committed view.
pub fn global_uncertainty(committed: &[EvalSample]) -> Result<f64, EvalError> {
    if committed.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let sum: f64 = committed.iter().map(|s| s.confidence).sum();
    Ok(1.0 - sum / committed.len() as f64)
}

/// Evaluates the three trigger rows over the committed view.
///
/// Priority is fixed: exception flag, then confidence floor, then global
/// uncertainty — localized causes route to the cheaper repair first. The
/// offending node is the lowest-ranked violator (ties broken by id); for a
/// global-uncertainty trigger the violators are the minimum-confidence
/// nodes, since the truncation root should sit where trust is lowest.
pub fn check_suspension(committed: &[EvalSample], thresholds: &EvalThresholds) -> SuspensionCause {
    if committed.is_empty() {
        return SuspensionCause::none();
    }

    if let Some(sample) = pick_violator(committed, |s| s.exception) {
        return SuspensionCause {
            kind: SuspensionKind::ExceptionFlag,
            offending_node: Some(sample.node.clone()),
            observed_value: 1.0,
        };
    }

    if let Some(sample) = pick_violator(committed, |s| s.confidence < thresholds.tau_c) {
        return SuspensionCause {
            kind: SuspensionKind::ConfidenceFloor,
            offending_node: Some(sample.node.clone()),
            observed_value: sample.confidence,
        };
    }

    let uncertainty = global_uncertainty(committed).expect("non-empty view");
    if uncertainty >= thresholds.tau_u {
        let min = committed
            .iter()
            .map(|s| s.confidence)
            .fold(f64::INFINITY, f64::min);
        let sample =
            pick_violator(committed, |s| s.confidence == min).expect("minimum is attained");
        return SuspensionCause {
            kind: SuspensionKind::GlobalUncertainty,
            offending_node: Some(sample.node.clone()),
            observed_value: uncertainty,
        };
    }

    SuspensionCause::none()
}

fn pick_violator(
    committed: &[EvalSample],
    f: impl Fn(&EvalSample) -> bool,
) -> Option<&EvalSample> {
    committed
        .iter()
        .filter(|s| f(s))
        .min_by(|a, b| (a.rank, &a.node).cmp(&(b.rank, &b.node)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(name: &str, rank: usize, exception: bool, confidence: f64) -> EvalSample {
        EvalSample {
            node: name.parse().unwrap(),
            rank,
            exception,
            confidence,
        }
    }

    fn committed(confs: &[f64]) -> Vec<EvalSample> {
        confs
            .iter()
            .enumerate()
            .map(|(i, c)| sample(&format!("v{i}"), i, false, *c))
            .collect()
    }

    #[test]
    fn uncertainty_of_perfect_confidence_is_zero() {
        assert_eq!(global_uncertainty(&committed(&[1.0, 1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn uncertainty_is_one_minus_mean() {
        let u = global_uncertainty(&committed(&[0.8, 0.6])).unwrap();
        assert!((u - 0.3).abs() < 1e-12);
        let u = global_uncertainty(&committed(&[0.35, 0.35, 0.9])).unwrap();
        assert!((u - (1.0 - 1.6 / 3.0)).abs() < 1e-12);
        assert!((u - 0.4667).abs() < 1e-4);
    }

    #[test]
    fn uncertainty_over_empty_set_is_an_error() {
        assert_eq!(global_uncertainty(&[]), Err(EvalError::EmptySet));
    }

    #[test]
    fn exception_flag_outranks_everything() {
        let mut view = committed(&[0.9, 0.9]);
        view.push(sample("bad", 2, true, 0.9));
        let cause = check_suspension(&view, &EvalThresholds::default());
        assert_eq!(cause.kind, SuspensionKind::ExceptionFlag);
        assert_eq!(cause.offending_node, Some("bad".parse().unwrap()));
    }

    #[test]
    fn confidence_floor_fires_strictly_below_tau_c() {
        let thresholds = EvalThresholds::default();
        let view = committed(&[0.9, 0.30, 0.95]);
        let cause = check_suspension(&view, &thresholds);
        assert_eq!(cause.kind, SuspensionKind::ConfidenceFloor);
        assert_eq!(cause.offending_node, Some("v1".parse().unwrap()));
        assert!((cause.observed_value - 0.30).abs() < 1e-12);
    }

    #[test]
    fn global_uncertainty_fires_at_or_above_tau_u() {
        let thresholds = EvalThresholds::default();
        let view = committed(&[0.5, 0.5]);
        let cause = check_suspension(&view, &thresholds);
        assert_eq!(cause.kind, SuspensionKind::GlobalUncertainty);
        assert!((cause.observed_value - 0.5).abs() < 1e-12);
        // pinned on the (tied) minimum-confidence node with lowest rank
        assert_eq!(cause.offending_node, Some("v0".parse().unwrap()));
    }

    #[test]
    fn boundary_equality_at_tau_c_does_not_trigger() {
        // dyadic threshold so equality is exact in f64
        let thresholds = EvalThresholds::new(0.25, 0.9375).unwrap();
        let view = committed(&[0.25, 1.0]);
        let cause = check_suspension(&view, &thresholds);
        assert_eq!(cause.kind, SuspensionKind::None);
    }

    #[test]
    fn boundary_equality_at_tau_u_triggers() {
        let thresholds = EvalThresholds::new(0.25, 0.5).unwrap();
        let view = committed(&[0.5]);
        assert_eq!(global_uncertainty(&view).unwrap(), 0.5);
        let cause = check_suspension(&view, &thresholds);
        assert_eq!(cause.kind, SuspensionKind::GlobalUncertainty);
    }

    #[test]
    fn empty_view_reports_none() {
        let cause = check_suspension(&[], &EvalThresholds::default());
        assert_eq!(cause.kind, SuspensionKind::None);
        assert_eq!(cause.offending_node, None);
    }

    #[test]
    fn thresholds_must_sit_inside_unit_interval() {
        assert!(EvalThresholds::new(0.0, 0.5).is_err());
        assert!(EvalThresholds::new(0.5, 1.0).is_err());
        assert!(EvalThresholds::new(0.35, 0.45).is_ok());
    }

    /// Literal three-row evaluation of the suspension indicator.
    fn indicator_oracle(view: &[EvalSample], t: &EvalThresholds) -> bool {
        if view.is_empty() {
            return false;
        }
        let row1 = view.iter().any(|s| s.exception);
        let row2 = view.iter().any(|s| s.confidence < t.tau_c);
        let sum: f64 = view.iter().map(|s| s.confidence).sum();
        let row3 = 1.0 - sum / view.len() as f64 >= t.tau_u;
        row1 || row2 || row3
    }

    proptest! {
        #[test]
        fn prop_indicator_matches_three_row_oracle(
            confs in proptest::collection::vec(0.0f64..=1.0, 1..12),
            flags in proptest::collection::vec(proptest::bool::weighted(0.15), 1..12),
        ) {
            let view: Vec<EvalSample> = confs
                .iter()
                .zip(flags.iter().cycle())
                .enumerate()
                .map(|(i, (c, x))| sample(&format!("v{i}"), i, *x, *c))
                .collect();
            let thresholds = EvalThresholds::default();
            let fired = check_suspension(&view, &thresholds).is_suspended();
            prop_assert_eq!(fired, indicator_oracle(&view, &thresholds));
        }

        #[test]
        fn prop_adding_an_exception_always_suspends(
            confs in proptest::collection::vec(0.36f64..=1.0, 1..10),
        ) {
            let mut view = committed(&confs);
            view.push(sample("z", confs.len(), true, 1.0));
            let cause = check_suspension(&view, &EvalThresholds::default());
            prop_assert_eq!(cause.kind, SuspensionKind::ExceptionFlag);
        }

        #[test]
        fn prop_cause_is_deterministic(
            confs in proptest::collection::vec(0.0f64..=1.0, 1..10),
        ) {
            let view = committed(&confs);
            let thresholds = EvalThresholds::default();
            let a = check_suspension(&view, &thresholds);
            let b = check_suspension(&view, &thresholds);
            prop_assert_eq!(a, b);
        }
    }
}
