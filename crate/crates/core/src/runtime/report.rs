use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BudgetPoint, LogitTable, PolicyResult};
use crate::error::{Error, Result};
use crate::tensor::{format, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusivityReport {
    pub fraction: f64,
    /// Samples classifier 1 gets right and every deeper classifier misses.
    pub exclusive: usize,
    /// Samples classifier 1 gets right.
    pub first_correct: usize,
    pub denominator: String,
}

impl ExclusivityReport {
    pub fn new(exclusive: usize, first_correct: usize) -> Self {
        ExclusivityReport {
            fraction: if first_correct == 0 { 0.0 } else { exclusive as f64 / first_correct as f64 },
            exclusive,
            first_correct,
            denominator: "samples classified correctly by classifier 1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub per_classifier_accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    pub exit_macs: Vec<u64>,
    pub policy: Option<PolicyResult>,
    #[serde(default)]
    pub budget_curve: Vec<BudgetPoint>,
    pub exclusivity: Option<ExclusivityReport>,
    #[serde(default)]
    pub agreement: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Io { path: path.into(), source: e })
    }
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Per-classifier accuracies, one row per method, in percent.
pub fn accuracy_table(rows: &[(String, Vec<f64>, Option<f64>)]) -> String {
    let n = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let with_ensemble = rows.iter().any(|r| r.2.is_some());
    let mut header = vec!["Method".to_string()];
    header.extend((1..=n).map(|i| format!("Classifier {i}")));
    if with_ensemble {
        header.push("Ensemble".into());
    }
    let mut table = vec![header];
    for (name, accs, ens) in rows {
        let mut row = vec![name.clone()];
        row.extend(accs.iter().map(|a| format!("{:.2}", 100.0 * a)));
        if with_ensemble {
            row.push(ens.map_or("-".into(), |e| format!("{:.2}", 100.0 * e)));
        }
        table.push(row);
    }
    pad_table(&table)
}

pub fn agreement_table(matrix: &[Vec<f64>]) -> String {
    let n = matrix.len();
    let mut table = vec![std::iter::once(String::new()).chain((1..=n).map(|j| format!("C{j}"))).collect()];
    for (i, row) in matrix.iter().enumerate() {
        table.push(std::iter::once(format!("C{}", i + 1)).chain(row.iter().map(|v| format!("{v:.3}"))).collect());
    }
    pad_table(&table)
}

pub fn budget_table(points: &[BudgetPoint], full_cost: u64) -> String {
    let mut table = vec![vec![
        "Threshold".to_string(),
        "Mean MACs".into(),
        "Share of full".into(),
        "Accuracy".into(),
    ]];
    for p in points {
        table.push(vec![
            format!("{:.3}", p.threshold),
            format!("{:.0}", p.mean_macs),
            format!("{:.1}%", 100.0 * p.mean_macs / full_cost.max(1) as f64),
            format!("{:.2}", 100.0 * p.accuracy),
        ]);
    }
    pad_table(&table)
}

/// Writes `logits.exft` (`[count, N, M]`, 32-bit) and `labels.exft`
/// (`[count]`) into `dir`.
pub fn export_logits(table: &LogitTable, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    format::save(&table.to_tensor(), dir.join("logits.exft"))?;
    let labels = Tensor::new(vec![table.len()], table.labels.iter().map(|&l| l as f32).collect())?;
    format::save(&labels, dir.join("labels.exft"))
}
