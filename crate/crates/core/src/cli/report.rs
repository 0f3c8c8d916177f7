//! Machine-readable and text summaries of an experiment run.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `value <= threshold`
    AtMost,
    /// `value >= threshold`
    AtLeast,
    /// `threshold <= value <= upper`
    Within,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
}

impl Metric {
    /// Reported value without a threshold.
    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: None,
            comparison: None,
            upper: None,
            pass: None,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: Some(threshold),
            comparison: Some(Comparison::AtMost),
            upper: None,
            pass: Some(value <= threshold),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: Some(threshold),
            comparison: Some(Comparison::AtLeast),
            upper: None,
            pass: Some(value >= threshold),
        }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: Some(lo),
            comparison: Some(Comparison::Within),
            upper: Some(hi),
            pass: Some(value >= lo && value <= hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub field: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: Status,
    pub metrics: Vec<Metric>,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Report {
    /// Status is `fail` as soon as one thresholded metric fails.
    pub fn new(
        experiment: &str,
        field: &str,
        config_hash: &str,
        seed: u64,
        metrics: Vec<Metric>,
        artifacts: Vec<String>,
        notes: Vec<String>,
    ) -> Self {
        let status = if metrics.iter().any(|m| m.pass == Some(false)) {
            Status::Fail
        } else {
            Status::Pass
        };
        Self {
            experiment: experiment.into(),
            field: field.into(),
            config_hash: config_hash.into(),
            seed,
            status,
            metrics,
            artifacts,
            notes,
        }
    }

    pub fn failed_metrics(&self) -> Vec<&str> {
        self.metrics.iter().filter(|m| m.pass == Some(false)).map(|m| m.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
        };
        let _ = writeln!(s, "{} on {}: {status}", self.experiment, self.field);
        let _ = writeln!(s, "config_hash={} seed={}", self.config_hash, self.seed);
        for m in &self.metrics {
            let verdict = match m.pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "info",
            };
            match (m.threshold, m.comparison) {
                (Some(t), Some(Comparison::AtMost)) => {
                    let _ = writeln!(s, "  [{verdict}] {} = {:.6e} (<= {t})", m.name, m.value);
                }
                (Some(t), Some(Comparison::AtLeast)) => {
                    let _ = writeln!(s, "  [{verdict}] {} = {:.6e} (>= {t})", m.name, m.value);
                }
                (Some(t), Some(Comparison::Within)) => {
                    let hi = m.upper.unwrap_or(f64::INFINITY);
                    let _ = writeln!(s, "  [{verdict}] {} = {:.6e} (in [{t}, {hi}])", m.name, m.value);
                }
                _ => {
                    let _ = writeln!(s, "  [{verdict}] {} = {:.6e}", m.name, m.value);
                }
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "  note: {n}");
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "  wrote {a}");
        }
        s
    }
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    std::fs::write(dir.join("report.txt"), report.to_text())
}
