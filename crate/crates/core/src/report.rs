//! Aggregation of repeated runs into JSON, text tables and CSV.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Mode, RunOutcome, TrainConfig};

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean, std }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub minority_precision: f64,
    pub minority_recall: f64,
    pub minority_f1: f64,
    pub majority_precision: f64,
    pub majority_recall: f64,
    pub majority_f1: f64,
    pub macro_f1: f64,
    pub minority_classes: Vec<usize>,
}

impl From<&RunOutcome> for RunRow {
    fn from(o: &RunOutcome) -> Self {
        let m = &o.metrics;
        RunRow {
            run: o.run,
            seed: o.seed,
            accuracy: m.accuracy,
            minority_precision: m.minority_avg.precision,
            minority_recall: m.minority_avg.recall,
            minority_f1: m.minority_avg.f1,
            majority_precision: m.majority_avg.precision,
            majority_recall: m.majority_avg.recall,
            majority_f1: m.majority_avg.f1,
            macro_f1: m.macro_avg.f1,
            minority_classes: o.minority.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Summary,
    pub minority_precision: Summary,
    pub minority_recall: Summary,
    pub minority_f1: Summary,
    pub majority_precision: Summary,
    pub majority_recall: Summary,
    pub majority_f1: Summary,
    pub macro_f1: Summary,
}

impl Aggregate {
    pub fn of(rows: &[RunRow]) -> Aggregate {
        let s = |f: fn(&RunRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        Aggregate {
            accuracy: s(|r| r.accuracy),
            minority_precision: s(|r| r.minority_precision),
            minority_recall: s(|r| r.minority_recall),
            minority_f1: s(|r| r.minority_f1),
            majority_precision: s(|r| r.majority_precision),
            majority_recall: s(|r| r.majority_recall),
            majority_f1: s(|r| r.majority_f1),
            macro_f1: s(|r| r.macro_f1),
        }
    }

    fn named(&self) -> [(&'static str, Summary); 8] {
        [
            ("accuracy", self.accuracy),
            ("minority_precision", self.minority_precision),
            ("minority_recall", self.minority_recall),
            ("minority_f1", self.minority_f1),
            ("majority_precision", self.majority_precision),
            ("majority_recall", self.majority_recall),
            ("majority_f1", self.majority_f1),
            ("macro_f1", self.macro_f1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arch: String,
    /// Absent when the report evaluates a saved model.
    pub config: Option<TrainConfig>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRow>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn new(arch: &str, config: Option<&TrainConfig>, outcomes: &[RunOutcome]) -> Result<RunReport> {
        Self::from_rows(arch, config, outcomes.iter().map(RunRow::from).collect())
    }

    pub fn from_rows(arch: &str, config: Option<&TrainConfig>, runs: Vec<RunRow>) -> Result<RunReport> {
        if runs.is_empty() {
            return Err(Error::invalid("no runs to report"));
        }
        Ok(RunReport {
            arch: arch.to_string(),
            config: config.cloned(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            aggregate: Aggregate::of(&runs),
            runs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(c) = &self.config {
            let _ = write!(out, "mode {}  ", c.mode);
        }
        let _ = writeln!(out, "arch {}  runs {}", self.arch, self.runs.len());
        for (name, s) in self.aggregate.named() {
            let _ = writeln!(out, "{name:<20} {s}");
        }
        out
    }

    /// One line per run. Contains only deterministic quantities.
    pub fn runs_csv(&self) -> String {
        keyed_runs_csv(None, &[(String::new(), self)])
    }
}

const RUN_COLUMNS: &str = "run,seed,accuracy,minority_precision,minority_recall,minority_f1,\
majority_precision,majority_recall,majority_f1,macro_f1,minority_classes";

/// Per-run rows of several reports, each prefixed by its key when a key
/// column name is given.
pub fn keyed_runs_csv(key_column: Option<&str>, reports: &[(String, &RunReport)]) -> String {
    let mut out = String::new();
    if let Some(k) = key_column {
        let _ = write!(out, "{k},");
    }
    let _ = writeln!(out, "{RUN_COLUMNS}");
    for (key, report) in reports {
        for r in &report.runs {
            if key_column.is_some() {
                let _ = write!(out, "{key},");
            }
            let minority: Vec<String> = r.minority_classes.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.run,
                r.seed,
                r.accuracy,
                r.minority_precision,
                r.minority_recall,
                r.minority_f1,
                r.majority_precision,
                r.majority_recall,
                r.majority_f1,
                r.macro_f1,
                minority.join(" ")
            );
        }
    }
    out
}

/// Modes side by side on the headline measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonGrid {
    pub rows: Vec<(Mode, Aggregate)>,
}

impl ComparisonGrid {
    pub fn from_reports(reports: &[(Mode, RunReport)]) -> ComparisonGrid {
        ComparisonGrid {
            rows: reports
                .iter()
                .map(|(m, r)| (*m, r.aggregate.clone()))
                .collect(),
        }
    }

    pub fn get(&self, mode: Mode) -> Option<&Aggregate> {
        self.rows.iter().find(|(m, _)| *m == mode).map(|(_, a)| a)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>17} {:>17} {:>17}\n",
            "mode", "accuracy", "minority_f1", "majority_f1"
        );
        for (mode, a) in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>17} {:>17} {:>17}",
                mode.name(),
                a.accuracy.to_string(),
                a.minority_f1.to_string(),
                a.majority_f1.to_string()
            );
        }
        out
    }
}

/// One mode evaluated over a list of trade-off weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub mode: Mode,
    pub alphas: Vec<f64>,
    /// One aggregate per alpha, in order.
    pub cells: Vec<Aggregate>,
}

impl AlphaSweep {
    /// Largest minus smallest mean accuracy across alphas.
    pub fn accuracy_spread(&self) -> f64 {
        let means = self.cells.iter().map(|c| c.accuracy.mean);
        let max = means.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = means.fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12}", "alpha");
        for a in &self.alphas {
            let _ = write!(out, " {a:>17}");
        }
        out.push('\n');
        let rows: [(&str, fn(&Aggregate) -> Summary); 3] = [
            ("accuracy", |a| a.accuracy),
            ("minority_f1", |a| a.minority_f1),
            ("majority_f1", |a| a.majority_f1),
        ];
        for (name, get) in rows {
            let _ = write!(out, "{name:<12}");
            for c in &self.cells {
                let _ = write!(out, " {:>17}", get(c).to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Minority sets in a report, for checking that runs differ in sampling.
pub fn distinct_minority_sets(report: &RunReport) -> BTreeSet<Vec<usize>> {
    report.runs.iter().map(|r| r.minority_classes.clone()).collect()
}
