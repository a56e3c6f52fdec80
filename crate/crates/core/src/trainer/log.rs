use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::cell::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

/// `α` of every supercell edge at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub epoch: usize,
    pub alpha: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub records: Vec<EpochRecord>,
    pub alpha: Vec<AlphaSnapshot>,
    /// Seconds per epoch; only written to the JSON summary.
    pub wall_clock: Vec<f64>,
}

impl StageLog {
    pub fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, epoch: usize, split: &str, loss: f64, top1: f64) {
        self.records.push(EpochRecord {
            epoch,
            split: split.into(),
            loss,
            top1,
        });
    }

    pub fn push_alpha(&mut self, epoch: usize, net: &Network) {
        let alpha = net
            .supercells()
            .iter()
            .map(|c| c.edges.iter().map(|e| e.arch.alpha.clone()).collect())
            .collect();
        self.alpha.push(AlphaSnapshot { epoch, alpha });
    }

    pub fn epochs(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch + 1)
    }

    /// Last record of `split`.
    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,top1\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{}", r.epoch, r.split, r.loss, r.top1).expect("string write");
        }
        s
    }

    /// Summary including wall-clock times and `α` trajectories.
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("log serializes");
        s.push('\n');
        s
    }
}
