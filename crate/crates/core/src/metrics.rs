//! Metrics CSV rows shared by training evaluation and the standalone
//! evaluation harness.
//!
//! Layout: one `#` metadata line carrying the format version and producing
//! config hash, then the fixed header, then one row per evaluation point.

use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const METRICS_FORMAT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "step,mean_reward,mean_visibility_change,mean_steps,mean_graspability_change,mean_heap_disturbance,actor_fraction,wall_seconds";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad metrics file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_visibility_change: f64,
    pub mean_steps: f64,
    pub mean_graspability_change: f64,
    pub mean_heap_disturbance: f64,
    pub actor_fraction: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    fn to_csv(self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_visibility_change,
            self.mean_steps,
            self.mean_graspability_change,
            self.mean_heap_disturbance,
            self.actor_fraction,
            self.wall_seconds
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], config_hash: &str) -> Result<(), MetricsError> {
    let mut out = Vec::new();
    writeln!(
        out,
        "# vmms metrics format_version={METRICS_FORMAT_VERSION} config_hash={config_hash}"
    )?;
    writeln!(out, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.to_csv())?;
    }
    Ok(std::fs::write(path, out)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != METRICS_HEADER {
                return Err(MetricsError::Parse(format!("unexpected header: {line}")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(MetricsError::Parse(format!("bad row: {line}")));
        }
        let f = |i: usize| -> Result<f64, MetricsError> {
            fields[i]
                .parse()
                .map_err(|e| MetricsError::Parse(format!("field {i} in `{line}`: {e}")))
        };
        rows.push(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|e| MetricsError::Parse(format!("step in `{line}`: {e}")))?,
            mean_reward: f(1)?,
            mean_visibility_change: f(2)?,
            mean_steps: f(3)?,
            mean_graspability_change: f(4)?,
            mean_heap_disturbance: f(5)?,
            actor_fraction: f(6)?,
            wall_seconds: f(7)?,
        });
    }
    if !saw_header {
        return Err(MetricsError::Parse("missing header".into()));
    }
    Ok(rows)
}
