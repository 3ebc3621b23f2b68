//! Run-level reports and comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{code_accuracy_at_k, mean_precision_at_k, scored_view, EvalError, RunArtifact};
use crate::evidence::Task;

/// k values evaluated per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KGrid {
    pub novel: Vec<usize>,
    pub overall: Vec<usize>,
}

impl Default for KGrid {
    fn default() -> Self {
        Self { novel: vec![5, 10], overall: vec![10, 20] }
    }
}

impl KGrid {
    pub fn for_task(&self, task: Task) -> &[usize] {
        match task {
            Task::Novel => &self.novel,
            Task::Overall => &self.overall,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.novel.iter().chain(&self.overall).any(|&k| k == 0) {
            return Err(EvalError::ZeroK);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub precision: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    /// Records with a non-empty target for this task.
    pub n_eligible: usize,
    pub n_excluded: usize,
    /// Empty when no record is eligible.
    pub at_k: Vec<AtK>,
}

impl TaskMetrics {
    pub fn precision(&self, k: usize) -> Option<f64> {
        self.at_k.iter().find(|m| m.k == k).map(|m| m.precision)
    }

    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.at_k.iter().find(|m| m.k == k).map(|m| m.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_instances: usize,
    pub n_failed: usize,
    pub fingerprint: String,
    pub seed: u64,
    pub novel: TaskMetrics,
    pub overall: TaskMetrics,
}

impl MetricsReport {
    pub fn task(&self, task: Task) -> &TaskMetrics {
        match task {
            Task::Novel => &self.novel,
            Task::Overall => &self.overall,
        }
    }

    fn grid(&self) -> KGrid {
        KGrid {
            novel: self.novel.at_k.iter().map(|m| m.k).collect(),
            overall: self.overall.at_k.iter().map(|m| m.k).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "instances: {}  failed: {}", self.n_instances, self.n_failed);
        let _ = writeln!(s, "{:<8} {:>5} {:>10} {:>10} {:>9}", "task", "k", "P@k", "Acc@k", "eligible");
        for tm in [&self.novel, &self.overall] {
            for m in &tm.at_k {
                let _ = writeln!(
                    s,
                    "{:<8} {:>5} {:>10.4} {:>10.4} {:>9}",
                    tm.task.to_string(),
                    m.k,
                    m.precision,
                    m.accuracy,
                    tm.n_eligible
                );
            }
            if tm.at_k.is_empty() {
                let _ = writeln!(s, "{:<8} (no eligible instances)", tm.task.to_string());
            }
        }
        s
    }
}

fn task_metrics(artifact: &RunArtifact, task: Task, ks: &[usize]) -> Result<TaskMetrics, EvalError> {
    let n_eligible = artifact.records.iter().filter(|r| scored_view(r, task).is_some()).count();
    let mut at_k = Vec::new();
    if n_eligible > 0 {
        for &k in ks {
            at_k.push(AtK {
                k,
                precision: mean_precision_at_k(&artifact.records, k, task)?,
                accuracy: code_accuracy_at_k(&artifact.records, k, task)?,
            });
        }
    }
    Ok(TaskMetrics { task, n_eligible, n_excluded: artifact.records.len() - n_eligible, at_k })
}

/// Scores both tasks at the grid's k values.
pub fn evaluate_run(artifact: &RunArtifact, ks: &KGrid) -> Result<MetricsReport, EvalError> {
    ks.validate()?;
    Ok(MetricsReport {
        n_instances: artifact.records.len(),
        n_failed: artifact.n_failed(),
        fingerprint: artifact.meta.fingerprint.clone(),
        seed: artifact.meta.seed,
        novel: task_metrics(artifact, Task::Novel, &ks.novel)?,
        overall: task_metrics(artifact, Task::Overall, &ks.overall)?,
    })
}

/// Identifies one column of a comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricKey {
    pub task: Task,
    pub k: usize,
    /// `true` for P@k, `false` for Acc@k.
    pub precision: bool,
}

impl MetricKey {
    pub fn name(&self) -> String {
        format!("{}_{}@{}", self.task, if self.precision { "p" } else { "acc" }, self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub sd: f64,
    /// Change of the mean from the previous row; 0 on the first row.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub n_runs: usize,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<MetricKey>,
    pub rows: Vec<ComparisonRow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per label, in the given order, each averaging its reports
/// (sample standard deviation). All reports must share one k-grid.
pub fn compare_ablations(groups: &[(String, Vec<MetricsReport>)]) -> Result<ComparisonTable, EvalError> {
    let first = groups.iter().flat_map(|(_, r)| r.first()).next().ok_or(EvalError::NoReports)?;
    let grid = first.grid();
    let mut columns = Vec::new();
    for task in [Task::Novel, Task::Overall] {
        for &k in grid.for_task(task) {
            columns.push(MetricKey { task, k, precision: true });
            columns.push(MetricKey { task, k, precision: false });
        }
    }
    let mut rows: Vec<ComparisonRow> = Vec::with_capacity(groups.len());
    for (label, reports) in groups {
        if reports.is_empty() {
            return Err(EvalError::NoReports);
        }
        if reports.iter().any(|r| r.grid() != grid) {
            return Err(EvalError::MismatchedGrid);
        }
        let cells = columns
            .iter()
            .enumerate()
            .map(|(ci, col)| {
                let xs: Vec<f64> = reports
                    .iter()
                    .map(|r| {
                        let tm = r.task(col.task);
                        if col.precision { tm.precision(col.k) } else { tm.accuracy(col.k) }.unwrap_or(0.0)
                    })
                    .collect();
                let (mean, sd) = mean_sd(&xs);
                let delta = rows.last().map_or(0.0, |prev| mean - prev.cells[ci].mean);
                Cell { mean, sd, delta }
            })
            .collect();
        rows.push(ComparisonRow { label: label.clone(), n_runs: reports.len(), cells });
    }
    Ok(ComparisonTable { columns, rows })
}

impl ComparisonTable {
    pub fn column(&self, key: MetricKey) -> Option<usize> {
        self.columns.iter().position(|c| *c == key)
    }

    /// Mean of `key` per row.
    pub fn means(&self, key: MetricKey) -> Option<Vec<f64>> {
        let i = self.column(key)?;
        Some(self.rows.iter().map(|r| r.cells[i].mean).collect())
    }

    /// Header plus one line per row; each metric has mean, sd and delta columns.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string(), "n_runs".to_string()];
        for c in &self.columns {
            let n = c.name();
            header.extend([format!("{n}_mean"), format!("{n}_sd"), format!("{n}_delta")]);
        }
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.label.clone(), r.n_runs.to_string()];
            for c in &r.cells {
                rec.extend([format!("{:.6}", c.mean), format!("{:.6}", c.sd), format!("{:.6}", c.delta)]);
            }
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let _ = write!(s, "{:<width$}", "label");
        for c in &self.columns {
            let _ = write!(s, " {:>24}", c.name());
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}", r.label);
            for c in &r.cells {
                let _ = write!(s, " {:>24}", format!("{:.4}±{:.4} ({:+.4})", c.mean, c.sd, c.delta));
            }
            s.push('\n');
        }
        s
    }
}
