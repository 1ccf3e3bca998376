//! Adapter time-division scheduling and memory accounting.
//!
//! The engine models a frozen shared backbone with exactly one low-rank
//! adapter resident at a time. Switching to another module unloads the
//! previous adapter and charges a fixed hot-load cost. This module is an
//! accounting model, not a GPU driver: bytes and seconds are simulated
//! quantities fed by config, which makes the constant-peak-memory claim a
//! machine-checkable property at desk scale while letting real backends
//! report true numbers through the same interface.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ExpertKind;

/// Identifier of an adapter-bearing module. The canonical engine modules
/// are `plan`, `rag`, `logic`, and `expr`, but the registry is an open
/// set so pools of any size can be modeled.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdapterId(String);

impl AdapterId {
    pub fn new(name: impl Into<String>) -> Self {
        AdapterId(name.into())
    }

    pub fn plan() -> Self {
        AdapterId("plan".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<ExpertKind> for AdapterId {
    fn from(kind: ExpertKind) -> Self {
        AdapterId(kind.name().to_lowercase())
    }
}

/// Geometry of one module's low-rank adapter. The scaling factor and
/// dropout ride along for fidelity with training configs but do not enter
/// the memory arithmetic — only rank, layer dims, and bytes per parameter
/// do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub module: AdapterId,
    pub rank: u32,
    pub scaling: f64,
    pub dropout: f64,
    pub dims: Vec<(u64, u64)>,
    pub bytes_per_param: u64,
}

impl AdapterSpec {
    pub fn new(
        module: AdapterId,
        rank: u32,
        scaling: f64,
        dropout: f64,
        dims: Vec<(u64, u64)>,
        bytes_per_param: u64,
    ) -> Result<Self, AdapterError> {
        if rank == 0 {
            return Err(AdapterError::InvalidRank {
                module,
                rank,
                limit: 0,
            });
        }
        // low-rank means low: keep rank at most an eighth of the smallest dim
        for (d, k) in &dims {
            let limit = (*d).min(*k) / 8;
            if u64::from(rank) > limit {
                return Err(AdapterError::InvalidRank {
                    module,
                    rank,
                    limit,
                });
            }
        }
        Ok(AdapterSpec {
            module,
            rank,
            scaling,
            dropout,
            dims,
            bytes_per_param,
        })
    }

    /// Resident bytes of this adapter: for each adapted layer the two
    /// low-rank factors hold `rank * (d + k)` parameters.
    pub fn adapter_bytes(&self) -> u64 {
        self.dims
            .iter()
            .map(|(d, k)| u64::from(self.rank) * (d + k) * self.bytes_per_param)
            .sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("module {module} is not registered")]
    UnknownModule { module: AdapterId },
    #[error("adapter rank {rank} for {module} exceeds the low-rank limit {limit}")]
    InvalidRank {
        module: AdapterId,
        rank: u32,
        limit: u64,
    },
}

/// Resident-memory state: the frozen backbone plus at most one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub backbone_bytes: u64,
    pub adapter_bytes: BTreeMap<AdapterId, u64>,
    pub loaded: Option<AdapterId>,
}

impl MemoryModel {
    pub fn new(backbone_bytes: u64) -> Self {
        MemoryModel {
            backbone_bytes,
            adapter_bytes: BTreeMap::new(),
            loaded: None,
        }
    }

    pub fn register(&mut self, spec: &AdapterSpec) {
        self.adapter_bytes
            .insert(spec.module.clone(), spec.adapter_bytes());
    }

    pub fn register_raw(&mut self, module: AdapterId, bytes: u64) {
        self.adapter_bytes.insert(module, bytes);
    }

    /// Current resident footprint.
    pub fn footprint(&self) -> u64 {
        let adapter = self
            .loaded
            .as_ref()
            .and_then(|m| self.adapter_bytes.get(m))
            .copied()
            .unwrap_or(0);
        self.backbone_bytes + adapter
    }

    /// The peak bound: backbone plus the largest registered adapter,
    /// independent of pool size.
    pub fn peak_bound(&self) -> u64 {
        self.backbone_bytes + self.adapter_bytes.values().max().copied().unwrap_or(0)
    }
}

/// One adapter switch: when, from what, to what, and the charged cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub at: f64,
    pub from: Option<AdapterId>,
    pub to: AdapterId,
    pub cost: f64,
}

/// Ordered record of every module-changing switch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SwitchLog {
    pub events: Vec<SwitchEvent>,
}

/// Spacing applied when two switches would otherwise share a timestamp
/// (possible only with a zero hot-load cost); keeps the log strictly
/// increasing without disturbing latency sums.
const TIME_QUANTUM: f64 = 1e-9;

impl SwitchLog {
    fn append(&mut self, mut event: SwitchEvent) {
        if let Some(last) = self.events.last() {
            if event.at <= last.at {
                event.at = last.at + TIME_QUANTUM;
            }
        }
        debug_assert!(event.cost >= 0.0);
        self.events.push(event);
    }

    pub fn total_cost(&self) -> f64 {
        self.events.iter().map(|e| e.cost).sum()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// One row of the memory trace: timestamp, resident module, footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTraceRow {
    pub at: f64,
    pub module: AdapterId,
    pub footprint_bytes: u64,
}

/// Owns the memory model and switch log for one run. Single-writer: only
/// the orchestrator's control thread mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterScheduler {
    model: MemoryModel,
    log: SwitchLog,
    hot_load_seconds: f64,
    overrides: BTreeMap<AdapterId, f64>,
    observed_peak: u64,
}

impl AdapterScheduler {
    pub fn new(backbone_bytes: u64, hot_load_seconds: f64) -> Self {
        let model = MemoryModel::new(backbone_bytes);
        let observed_peak = model.footprint();
        AdapterScheduler {
            model,
            log: SwitchLog::default(),
            hot_load_seconds,
            overrides: BTreeMap::new(),
            observed_peak,
        }
    }

    pub fn register(&mut self, spec: &AdapterSpec) {
        self.model.register(spec);
    }

    pub fn register_raw(&mut self, module: AdapterId, bytes: u64) {
        self.model.register_raw(module, bytes);
    }

    /// Per-module hot-load cost override.
    pub fn set_cost_override(&mut self, module: AdapterId, seconds: f64) {
        self.overrides.insert(module, seconds);
    }

    /// Makes `target` the resident adapter, returning the charged cost:
    /// zero when it is already loaded, the hot-load cost otherwise.
    pub fn switch_to(&mut self, target: AdapterId, now: f64) -> Result<f64, AdapterError> {
        if !self.model.adapter_bytes.contains_key(&target) {
            return Err(AdapterError::UnknownModule { module: target });
        }
        if self.model.loaded.as_ref() == Some(&target) {
            return Ok(0.0);
        }
        let cost = self
            .overrides
            .get(&target)
            .copied()
            .unwrap_or(self.hot_load_seconds);
        let from = self.model.loaded.replace(target.clone());
        self.log.append(SwitchEvent {
            at: now,
            from,
            to: target,
            cost,
        });
        self.observed_peak = self.observed_peak.max(self.model.footprint());
        Ok(cost)
    }

    pub fn model(&self) -> &MemoryModel {
        &self.model
    }

    pub fn log(&self) -> &SwitchLog {
        &self.log
    }

    pub fn into_log(self) -> SwitchLog {
        self.log
    }

    /// Peak footprint bound per the one-resident-adapter rule.
    pub fn peak_bound(&self) -> u64 {
        self.model.peak_bound()
    }

    /// Largest footprint actually observed while switching.
    pub fn observed_peak(&self) -> u64 {
        self.observed_peak
    }

    /// The memory trace rows induced by the switch history.
    pub fn memory_trace(&self) -> Vec<MemoryTraceRow> {
        self.log
            .events
            .iter()
            .map(|e| MemoryTraceRow {
                at: e.at,
                module: e.to.clone(),
                footprint_bytes: self.model.backbone_bytes
                    + self.model.adapter_bytes.get(&e.to).copied().unwrap_or(0),
            })
            .collect()
    }
}

/// Rebuilds the memory trace for a recorded switch log against a memory
/// model, for reporting on persisted runs.
pub fn memory_trace_for(log: &SwitchLog, model: &MemoryModel) -> Vec<MemoryTraceRow> {
    log.events
        .iter()
        .map(|e| MemoryTraceRow {
            at: e.at,
            module: e.to.clone(),
            footprint_bytes: model.backbone_bytes
                + model.adapter_bytes.get(&e.to).copied().unwrap_or(0),
        })
        .collect()
}
