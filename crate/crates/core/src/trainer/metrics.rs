use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the metrics stream: a training batch or a validation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    /// Training rows: index of the batch. Validation rows: number of
    /// completed batches (0 = before any update).
    pub batch: usize,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_native_loss: Option<f64>,
    pub val_72h_loss: Option<f64>,
}

/// Append-only metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricsRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validation(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.val_native_loss.is_some())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "batch", "lr", "train_loss", "val_native_loss", "val_72h_loss"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for r in &self.records {
            w.write_record([
                r.stage.clone(),
                r.batch.to_string(),
                opt(r.lr),
                opt(r.train_loss),
                opt(r.val_native_loss),
                opt(r.val_72h_loss),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Read back a log written by [`MetricsLog::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| Error::InvalidParameter(format!("bad number {s:?} in metrics log")))
        };
        let mut log = Self::new();
        for row in r.records() {
            let row = row?;
            if row.len() != 6 {
                return Err(Error::InvalidParameter(format!("metrics row has {} fields", row.len())));
            }
            log.push(MetricsRecord {
                stage: row[0].to_string(),
                batch: row[1]
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("bad batch index {:?}", &row[1])))?,
                lr: opt(&row[2])?,
                train_loss: opt(&row[3])?,
                val_native_loss: opt(&row[4])?,
                val_72h_loss: opt(&row[5])?,
            });
        }
        Ok(log)
    }
}
