//! Per-step training log.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub cs: f64,
    pub mmd: f64,
    pub total: f64,
    /// Cumulative training-phase queries after this step.
    pub queries_total: u64,
    pub wall_ms: u64,
    /// The value the trainer actually minimises at this step.
    pub objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
}

impl RunLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["step", "epoch", "ce", "cs", "mmd", "total", "queries_total", "wall_ms", "objective"])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
    }

    pub fn parse_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let rows = r.deserialize().collect::<std::result::Result<Vec<RunLogRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Mean of `total` over the rows of `epoch`.
    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn epoch_mean_objective(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.objective).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}
