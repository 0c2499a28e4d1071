//! Cross-seed report: merges the metrics CSVs under a run directory into a
//! per-step mean +- sd table.

use crate::row_metrics;
use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use vmms_core::metrics::{read_metrics, MetricsRow};

const METRIC_NAMES: [&str; 7] = [
    "reward",
    "visibility_change",
    "steps",
    "graspability_change",
    "heap_disturbance",
    "actor_fraction",
    "wall_seconds",
];

/// Metrics files for a run: either one metrics.csv directly in the run
/// directory or one per seed*/ subdirectory.
fn find_metrics_files(run: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    let direct = run.join("metrics.csv");
    if direct.is_file() {
        files.push(direct);
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(run)
        .with_context(|| format!("reading run directory {}", run.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed"))
        })
        .collect();
    subdirs.sort();
    for dir in subdirs {
        let f = dir.join("metrics.csv");
        if f.is_file() {
            files.push(f);
        }
    }
    Ok(files)
}

pub fn cmd_report(run: &Path, csv: Option<&Path>) -> Result<()> {
    let files = find_metrics_files(run)?;
    if files.is_empty() {
        bail!("no metrics.csv found under {}", run.display());
    }
    let mut runs: Vec<Vec<MetricsRow>> = Vec::new();
    for f in &files {
        runs.push(read_metrics(f).with_context(|| format!("reading {}", f.display()))?);
    }

    // Group by step over all runs.
    let mut by_step: BTreeMap<u64, Vec<[f64; 7]>> = BTreeMap::new();
    for rows in &runs {
        for row in rows {
            by_step.entry(row.step).or_default().push(row_metrics(row));
        }
    }

    let mut out = String::new();
    out.push_str("step,seeds");
    for name in METRIC_NAMES {
        out.push_str(&format!(",{name}_mean,{name}_sd"));
    }
    out.push('\n');
    println!(
        "{:>6} {:>5} {:>22} {:>22} {:>14}",
        "step", "seeds", "visibility_change", "reward", "steps"
    );
    for (step, samples) in &by_step {
        let n = samples.len() as f64;
        let mut mean = [0.0f64; 7];
        let mut sd = [0.0f64; 7];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        for s in samples {
            for ((d, v), m) in sd.iter_mut().zip(s).zip(&mean) {
                *d += (v - m) * (v - m);
            }
        }
        for d in &mut sd {
            *d = if n > 1.0 { (*d / (n - 1.0)).sqrt() } else { 0.0 };
        }
        out.push_str(&format!("{step},{}", samples.len()));
        for k in 0..7 {
            out.push_str(&format!(",{},{}", mean[k], sd[k]));
        }
        out.push('\n');
        println!(
            "{:>6} {:>5} {:>11.4} ± {:>7.4} {:>11.3} ± {:>7.3} {:>9.1}",
            step,
            samples.len(),
            mean[1],
            sd[1],
            mean[0],
            sd[0],
            mean[2]
        );
    }
    if let Some(path) = csv {
        std::fs::write(path, out)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
