//! CSV emission for run reports.
//!
//! Step rows exclude wall-clock values so that reruns with identical seeds
//! produce identical bytes; timings go to a separate file.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{RunReport, StepRecord};

/// Deterministic columns of a [`StepRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub layer_index: usize,
    pub target_ratio: f64,
    pub alpha: f64,
    pub acc_before_ft: f64,
    pub triggered: bool,
    pub probe: bool,
    pub lr_max_used: Option<f64>,
    pub acc_after: f64,
}

impl From<&StepRecord> for StepRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            layer_index: r.layer_index,
            target_ratio: r.target_ratio,
            alpha: r.alpha,
            acc_before_ft: r.acc_before_ft,
            triggered: r.triggered,
            probe: r.probe,
            lr_max_used: r.lr_max_used,
            acc_after: r.acc_after,
        }
    }
}

pub fn write_steps_csv<W: Write>(report: &RunReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in &report.records {
        wr.serialize(StepRow::from(r))?;
    }
    if report.records.is_empty() {
        wr.write_record([
            "step",
            "layer_index",
            "target_ratio",
            "alpha",
            "acc_before_ft",
            "triggered",
            "probe",
            "lr_max_used",
            "acc_after",
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// CSV reader that skips `#` comment lines, such as provenance headers.
fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r)
}

pub fn read_steps_csv<R: Read>(r: R) -> Result<Vec<StepRow>> {
    let mut rd = reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: String,
    pub seconds: f64,
}

pub fn write_timing_csv<W: Write>(report: &RunReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in &report.records {
        wr.serialize(TimingRow {
            step: r.step.to_string(),
            seconds: r.step_seconds,
        })?;
    }
    wr.serialize(TimingRow {
        step: "total".into(),
        seconds: report.total_seconds,
    })?;
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeRow {
    pub layer_index: usize,
    pub l1_change: f64,
    pub init_l2: f64,
    pub score: f64,
    pub frozen: bool,
}

/// Per-layer probe scores; empty (header only) when no probe ran.
pub fn write_freeze_csv<W: Write>(report: &RunReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    match &report.freeze {
        Some(f) => {
            for d in &f.deltas {
                wr.serialize(FreezeRow {
                    layer_index: d.layer_index,
                    l1_change: d.l1_change,
                    init_l2: d.init_l2,
                    score: d.score,
                    frozen: f.freeze.frozen_layer_indices.contains(&d.layer_index),
                })?;
            }
        }
        None => wr.write_record(["layer_index", "l1_change", "init_l2", "score", "frozen"])?,
    }
    wr.flush()?;
    Ok(())
}

pub fn read_freeze_csv<R: Read>(r: R) -> Result<Vec<FreezeRow>> {
    let mut rd = reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
