use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{Stage, StepLoss};
use crate::binio::write_atomic;
use crate::error::Result;

pub const CSV_HEADER: &str = "stage,epoch,step,contrastive,consensus,total,seconds";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    /// `None` when the part is not part of the stage objective.
    pub contrastive: Option<f64>,
    pub consensus: Option<f64>,
    pub total: f64,
    pub seconds: f64,
}

/// Mean loss parts over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    pub contrastive: Option<f64>,
    pub consensus: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.17e},{:.3}",
                r.stage,
                r.epoch,
                r.step,
                opt(r.contrastive),
                opt(r.consensus),
                r.total,
                r.seconds
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn stage_epochs(&self, stage: Stage) -> impl Iterator<Item = &EpochLog> {
        self.epochs.iter().filter(move |e| e.stage == stage.number())
    }
}

pub(super) struct EpochAccumulator {
    stage: Stage,
    epoch: usize,
    n: usize,
    contrastive: Option<f64>,
    consensus: Option<f64>,
    total: f64,
}

impl EpochAccumulator {
    pub fn new(stage: Stage, epoch: usize) -> Self {
        EpochAccumulator {
            stage,
            epoch,
            n: 0,
            contrastive: None,
            consensus: None,
            total: 0.0,
        }
    }

    pub fn add(&mut self, l: &StepLoss) {
        self.n += 1;
        if let Some(c) = l.contrastive {
            *self.contrastive.get_or_insert(0.0) += c;
        }
        if let Some(c) = l.consensus {
            *self.consensus.get_or_insert(0.0) += c;
        }
        self.total += l.total;
    }

    pub fn finish(self) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            stage: self.stage.number(),
            epoch: self.epoch,
            steps: self.n,
            contrastive: self.contrastive.map(|c| c / n),
            consensus: self.consensus.map(|c| c / n),
            total: self.total / n,
        }
    }
}
