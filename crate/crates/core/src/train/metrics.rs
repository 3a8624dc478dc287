//! Per-step training metrics.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::ZeroShotReport;
use crate::losses::LossKind;

/// One metrics line. Loss components are unweighted and absent when the
/// loss is disabled; accuracies are present only on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub info_nce: Option<f64>,
    pub bce_tag: Option<f64>,
    pub soft_target_ce: Option<f64>,
    pub grounding: Option<f64>,
    pub logit_scale: f64,
    pub lr: f64,
    pub top1_base: Option<f64>,
    pub top5_base: Option<f64>,
    pub top1_novel: Option<f64>,
    pub top5_novel: Option<f64>,
    pub top1_all: Option<f64>,
    pub top5_all: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: u64, loss: f64, components: &[(LossKind, f64)], logit_scale: f64, lr: f64) -> Self {
        let get = |k: LossKind| components.iter().find(|(c, _)| *c == k).map(|&(_, v)| v);
        Self {
            step,
            loss,
            info_nce: get(LossKind::InfoNce),
            bce_tag: get(LossKind::BceTag),
            soft_target_ce: get(LossKind::SoftTargetCe),
            grounding: get(LossKind::Grounding),
            logit_scale,
            lr,
            top1_base: None,
            top5_base: None,
            top1_novel: None,
            top5_novel: None,
            top1_all: None,
            top5_all: None,
        }
    }

    pub fn with_eval(mut self, r: &ZeroShotReport) -> Self {
        self.top1_base = Some(r.base.top1);
        self.top5_base = Some(r.base.top5);
        self.top1_novel = Some(r.novel.top1);
        self.top5_novel = Some(r.novel.top5);
        self.top1_all = Some(r.all.top1);
        self.top5_all = Some(r.all.top5);
        self
    }
}

/// Appends rows to `metrics.csv` and wall-clock times to `timing.csv`.
///
/// Timing is kept apart so the metrics file of a seed-fixed run is
/// reproducible byte for byte.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: File,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Opens both files in `dir`, appending when `append` is set and the
    /// files exist.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let existing = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(&path)?;
        let metrics = csv::WriterBuilder::new().has_headers(!existing).from_writer(file);
        let timing_path = dir.join("timing.csv");
        let timing_existing = append && timing_path.exists();
        let mut timing = OpenOptions::new()
            .create(true)
            .write(true)
            .append(timing_existing)
            .truncate(!timing_existing)
            .open(&timing_path)?;
        if !timing_existing {
            writeln!(timing, "step,wall_seconds")?;
        }
        Ok(Self {
            metrics,
            timing,
            last_step: None,
        })
    }

    pub fn write(&mut self, row: &MetricsRow, wall_seconds: f64) -> Result<()> {
        debug_assert!(self.last_step.is_none_or(|s| s < row.step), "metrics rows out of order");
        self.last_step = Some(row.step);
        self.metrics.serialize(row)?;
        self.metrics.flush()?;
        writeln!(self.timing, "{},{wall_seconds:.3}", row.step)?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
