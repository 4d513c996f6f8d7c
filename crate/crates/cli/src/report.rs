//! Structured run report and deterministic table output.

use anyhow::{Context, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::TableFormat;
use pasim_core::stats::Estimate;

/// A reported number: either a Monte-Carlo estimate with a standard error or
/// an exact quantity.
#[derive(Debug, Clone, Serialize)]
pub struct Metric {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub exact: bool,
}

impl Metric {
    pub fn exact(value: f64) -> Self {
        Metric {
            value,
            se: None,
            exact: true,
        }
    }

    pub fn estimate(e: Estimate) -> Self {
        Metric {
            value: e.value,
            se: Some(e.se),
            exact: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    /// Excluded from the determinism contract.
    pub wall_clock_ms: u128,
}

#[derive(Debug, Default, Serialize)]
pub struct RunReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMeta>,
    pub results: BTreeMap<String, Metric>,
    pub verdicts: Vec<Verdict>,
}

impl RunReport {
    pub fn record(&mut self, key: &str, metric: Metric) {
        self.results.insert(key.to_string(), metric);
    }

    pub fn verdict(&mut self, name: &str, pass: bool, detail: String) {
        self.verdicts.push(Verdict {
            name: name.to_string(),
            pass,
            detail,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .with_context(|| format!("cannot write report {}", path.display()))?;
        Ok(())
    }

    pub fn print_verdicts(&self) {
        for v in &self.verdicts {
            let mark = if v.pass { "pass" } else { "FAIL" };
            println!("[{mark}] {name}: {detail}", name = v.name, detail = v.detail);
        }
    }
}

/// A rectangular table written as CSV or JSON rows, with deterministic
/// formatting.
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path, format: TableFormat) -> Result<PathBuf> {
        match format {
            TableFormat::Csv => {
                let path = dir.join(format!("{}.csv", self.name));
                let mut w = csv::Writer::from_path(&path)
                    .with_context(|| format!("cannot write table {}", path.display()))?;
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row)?;
                }
                w.flush()?;
                Ok(path)
            }
            TableFormat::Json => {
                let path = dir.join(format!("{}.json", self.name));
                let rows: Vec<BTreeMap<&str, &str>> = self
                    .rows
                    .iter()
                    .map(|row| {
                        self.columns
                            .iter()
                            .map(|c| c.as_str())
                            .zip(row.iter().map(|v| v.as_str()))
                            .collect()
                    })
                    .collect();
                let text = serde_json::to_string_pretty(&rows)?;
                std::fs::write(&path, text + "\n")
                    .with_context(|| format!("cannot write table {}", path.display()))?;
                Ok(path)
            }
        }
    }
}

/// Deterministic float formatting for table cells.
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.12e}")
    }
}
