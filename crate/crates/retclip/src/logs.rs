//! Metrics CSV and evaluation results JSON.

use std::fmt::Write as _;

use retclip_core::eval::{mode_name, AdaptOutcome, ClassMetric};
use retclip_core::train::StepRecord;
use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "step,lr,loss_left,loss_right,loss_patient,loss_total";

pub fn metrics_csv(log: &[StepRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.loss_left, r.loss_right, r.loss_patient, r.loss_total
        )
        .expect("string write");
    }
    out
}

/// One evaluation run, as written to the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub mode: String,
    pub seed: u64,
    pub auroc: f64,
    pub aupr: f64,
    pub per_class: Vec<ClassMetric>,
    pub excluded_classes: usize,
    pub epochs: usize,
    pub best_epoch: usize,
}

impl ResultRecord {
    pub fn new(dataset: &str, o: &AdaptOutcome) -> Self {
        Self {
            dataset: dataset.to_owned(),
            mode: mode_name(o.mode),
            seed: o.seed,
            auroc: o.test.auroc,
            aupr: o.test.aupr,
            per_class: o.test.per_class.clone(),
            excluded_classes: o.test.excluded_classes,
            epochs: o.epochs,
            best_epoch: o.best_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanBlock {
    pub seeds: usize,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub runs: Vec<ResultRecord>,
    pub mean: MeanBlock,
}

impl ResultsFile {
    pub fn new(runs: Vec<ResultRecord>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = MeanBlock {
            seeds: runs.len(),
            auroc: runs.iter().map(|r| r.auroc).sum::<f64>() / n,
            aupr: runs.iter().map(|r| r.aupr).sum::<f64>() / n,
        };
        Self { runs, mean }
    }
}
