//! Figure-data tables over replicated RL runs: per-epoch series and
//! accidents per training-phase bucket, per seed and median.

use std::fs;
use std::path::{Path, PathBuf};

use steer_core::rl::EpochMetrics;

use crate::error::CliError;
use crate::manifest::{read_json, RunManifest, MANIFEST_FILE};
use crate::stages::{ABORT_FILE, METRICS_FILE};

/// Bucket edges, in epochs, for a 60-epoch run.
pub const BUCKET_EDGES: [usize; 5] = [0, 3, 12, 39, 60];
const REFERENCE_EPOCHS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub config_hash: String,
    pub metrics: Vec<EpochMetrics>,
    pub aborted: bool,
}

/// Parses a metrics file. A final line without its newline is an append cut
/// short by a crash and is ignored.
pub fn parse_metrics(text: &str) -> Result<Vec<EpochMetrics>, CliError> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    lines.pop();
    lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}

pub fn load_run(dir: &Path) -> Result<RunMetrics, CliError> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    let manifest: Option<RunManifest> = if dir.join(MANIFEST_FILE).is_file() {
        Some(read_json(&dir.join(MANIFEST_FILE))?)
    } else {
        None
    };
    Ok(RunMetrics {
        label: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        config_hash: manifest.map(|m| m.config_hash).unwrap_or_default(),
        metrics: parse_metrics(&text)?,
        aborted: dir.join(ABORT_FILE).exists(),
    })
}

/// Loads every run named in `dirs`; a directory without a metrics file
/// contributes its `seed-*` subdirectories. All runs must share one
/// configuration hash.
pub fn collect_runs(dirs: &[PathBuf]) -> Result<Vec<RunMetrics>, CliError> {
    let mut runs = Vec::new();
    for dir in dirs {
        if dir.join(METRICS_FILE).is_file() {
            runs.push(load_run(dir)?);
            continue;
        }
        let entries = fs::read_dir(dir).map_err(|e| CliError::MissingInput(format!("{}: {e}", dir.display())))?;
        let mut seeds: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        seeds.sort();
        if seeds.is_empty() {
            return Err(CliError::MissingInput(format!("no metrics under {}", dir.display())));
        }
        for s in seeds {
            runs.push(load_run(&s)?);
        }
    }
    if let Some(first) = runs.first() {
        if let Some(other) = runs.iter().find(|r| r.config_hash != first.config_hash) {
            return Err(CliError::Usage(format!(
                "runs {} and {} come from different configurations ({} vs {})",
                first.label, other.label, first.config_hash, other.config_hash
            )));
        }
    }
    Ok(runs)
}

/// Median; the mean of the middle pair for even counts, NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bucket ranges `[start, end)` scaled to a run of `epochs` epochs.
pub fn bucket_bounds(epochs: usize) -> Vec<(usize, usize)> {
    let edge = |e: usize| (e * epochs + REFERENCE_EPOCHS / 2) / REFERENCE_EPOCHS;
    BUCKET_EDGES.windows(2).map(|w| (edge(w[0]), edge(w[1]))).collect()
}

/// Mean accidents per epoch inside each bucket; NaN for empty buckets.
pub fn bucket_accidents(metrics: &[EpochMetrics], bounds: &[(usize, usize)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(a, b)| {
            let inside: Vec<f64> = metrics
                .iter()
                .filter(|m| m.epoch >= a && m.epoch < b)
                .map(|m| m.accidents as f64)
                .collect();
            if inside.is_empty() {
                f64::NAN
            } else {
                inside.iter().sum::<f64>() / inside.len() as f64
            }
        })
        .collect()
}

/// One value per (row, run) plus the per-row median.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub key: String,
    pub row_keys: Vec<String>,
    pub runs: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub median: Vec<f64>,
}

impl Table {
    fn new(key: &str, row_keys: Vec<String>, runs: &[RunMetrics], cell: impl Fn(&RunMetrics, usize) -> f64) -> Self {
        let values: Vec<Vec<f64>> = (0..row_keys.len())
            .map(|i| runs.iter().map(|r| cell(r, i)).collect())
            .collect();
        let median = values.iter().map(|row| median(row)).collect();
        Table {
            key: key.into(),
            row_keys,
            runs: runs.iter().map(|r| r.label.clone()).collect(),
            values,
            median,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut header = vec![self.key.clone()];
        header.extend(self.runs.iter().cloned());
        header.push("median".into());
        let csv_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, key) in self.row_keys.iter().enumerate() {
            let mut row = vec![key.clone()];
            row.extend(self.values[i].iter().map(|v| fmt_cell(*v)));
            row.push(fmt_cell(self.median[i]));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub reward: Table,
    pub action_value: Table,
    pub takeover: Table,
    pub accidents: Table,
    pub accident_buckets: Table,
}

impl Report {
    pub fn tables(&self) -> [(&'static str, &Table); 5] {
        [
            ("reward.csv", &self.reward),
            ("action_value.csv", &self.action_value),
            ("takeover.csv", &self.takeover),
            ("accidents.csv", &self.accidents),
            ("accident_buckets.csv", &self.accident_buckets),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        for (name, table) in self.tables() {
            table.write_csv(&dir.join(name))?;
        }
        Ok(())
    }
}

pub fn build_report(runs: &[RunMetrics]) -> Result<Report, CliError> {
    if runs.is_empty() {
        return Err(CliError::MissingInput("no runs to report".into()));
    }
    let epochs = runs.iter().map(|r| r.metrics.len()).max().unwrap_or(0);
    let epoch_keys: Vec<String> = (0..epochs).map(|e| e.to_string()).collect();
    let series = |name: &str, f: fn(&EpochMetrics) -> f64| {
        Table::new(name, epoch_keys.clone(), runs, |r, i| r.metrics.get(i).map(f).unwrap_or(f64::NAN))
    };
    let bounds = bucket_bounds(epochs);
    let bucket_keys = bounds.iter().map(|(a, b)| format!("{a}-{b}")).collect();
    let per_run: Vec<Vec<f64>> = runs.iter().map(|r| bucket_accidents(&r.metrics, &bounds)).collect();
    let mut buckets = Table::new("epochs", bucket_keys, runs, |_, _| 0.0);
    for (i, row) in buckets.values.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = per_run[j][i];
        }
    }
    buckets.median = buckets.values.iter().map(|row| median(row)).collect();
    Ok(Report {
        reward: series("epoch", |m| m.avg_reward),
        action_value: series("epoch", |m| m.avg_action_value),
        takeover: series("epoch", |m| m.takeover_fraction),
        accidents: series("epoch", |m| m.accidents as f64),
        accident_buckets: buckets,
    })
}
