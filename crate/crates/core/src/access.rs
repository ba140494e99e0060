//! Row access tracing. Every pipeline stage reads samples through a
//! [`DatasetView`]; when a log is attached, each gather is recorded with the
//! stage that asked for it.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::datasets::TabularDataset;
use crate::nn::LabeledData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TargetTraining,
    ShadowTraining,
    AttackFitting,
    AttackEvaluation,
    Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessEvent {
    pub stage: Stage,
    pub indices: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct AccessLog {
    events: Mutex<Vec<AccessEvent>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: Stage, indices: &[usize]) {
        self.events
            .lock()
            .expect("access log poisoned")
            .push(AccessEvent {
                stage,
                indices: indices.to_vec(),
            });
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().expect("access log poisoned").clone()
    }

    /// Stage of the first event that touched any of `indices`.
    pub fn first_touch(&self, indices: &[usize]) -> Option<Stage> {
        let wanted: std::collections::HashSet<usize> = indices.iter().copied().collect();
        self.events
            .lock()
            .expect("access log poisoned")
            .iter()
            .find(|e| e.indices.iter().any(|i| wanted.contains(i)))
            .map(|e| e.stage)
    }
}

/// Read-only handle on a dataset that optionally logs row gathers.
#[derive(Debug, Clone, Copy)]
pub struct DatasetView<'a> {
    pub dataset: &'a TabularDataset,
    log: Option<&'a AccessLog>,
}

impl<'a> DatasetView<'a> {
    pub fn new(dataset: &'a TabularDataset) -> Self {
        DatasetView { dataset, log: None }
    }

    pub fn traced(dataset: &'a TabularDataset, log: &'a AccessLog) -> Self {
        DatasetView {
            dataset,
            log: Some(log),
        }
    }

    pub fn gather(&self, indices: &[usize], stage: Stage) -> LabeledData {
        if let Some(log) = self.log {
            log.record(stage, indices);
        }
        self.dataset.subset(indices)
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }
}
