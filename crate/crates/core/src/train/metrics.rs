use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;

/// One row of the metrics log. Column order is fixed:
/// `epoch, split, loss, top1, distill_loss_component, ce_component, lr, wall_time_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub distill_loss_component: f64,
    pub ce_component: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// Every field except wall-clock time, for reproducibility comparisons.
    pub fn deterministic_part(&self) -> (usize, Split, u64, u64, u64, u64, u64) {
        (
            self.epoch,
            self.split,
            self.loss.to_bits(),
            self.top1.to_bits(),
            self.distill_loss_component.to_bits(),
            self.ce_component.to_bits(),
            self.lr.to_bits(),
        )
    }
}

/// Appends records to `metrics.csv` and `metrics.jsonl`.
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            csv: csv::Writer::from_path(dir.join("metrics.csv"))?,
            jsonl: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.csv.serialize(record)?;
        self.csv.flush()?;
        serde_json::to_writer(&mut self.jsonl, record)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        Ok(())
    }
}
