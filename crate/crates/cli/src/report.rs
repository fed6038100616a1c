//! Verdict records and their JSONL and CSV forms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use zakai_core::verify::ResidualReport;
use zakai_core::zakai::AuditReport;
use zakai_core::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(passed: bool) -> Self {
        if passed {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        }
    }
}

/// One emitted check. `detail` carries the suite-specific record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub label: String,
    pub residual: f64,
    pub stderr: f64,
    pub allowance: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl Report {
    /// A deterministic check: passes when `residual <= allowance`.
    pub fn bound(suite: &str, label: impl Into<String>, residual: f64, allowance: f64) -> Self {
        Self {
            suite: suite.into(),
            label: label.into(),
            residual,
            stderr: 0.0,
            allowance,
            verdict: Verdict::from_bool(residual.is_finite() && residual <= allowance),
            detail: serde_json::Value::Null,
        }
    }

    pub fn residual(suite: &str, r: &ResidualReport) -> Result<Self> {
        Ok(Self {
            suite: suite.into(),
            label: format!("{} t={}", r.label, r.t),
            residual: r.residual,
            stderr: r.stderr,
            allowance: r.allowance,
            verdict: Verdict::from_bool(r.passed),
            detail: serde_json::to_value(r)?,
        })
    }

    pub fn audit(suite: &str, label: impl Into<String>, a: &AuditReport) -> Result<Self> {
        Ok(Self {
            suite: suite.into(),
            label: label.into(),
            residual: a.value,
            stderr: 0.0,
            allowance: a.ceiling,
            verdict: Verdict::from_bool(a.passed),
            detail: serde_json::to_value(a)?,
        })
    }

    pub fn with_detail<T: Serialize>(mut self, detail: &T) -> Result<Self> {
        self.detail = serde_json::to_value(detail)?;
        Ok(self)
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

pub fn all_pass(reports: &[Report]) -> bool {
    reports.iter().all(Report::passed)
}

/// Report and summary paths of one suite run; names carry the config hash and seed.
pub fn report_paths(out: &Path, suite: &str, hash: &str, seed: u64) -> (PathBuf, PathBuf) {
    let dir = out.join("reports");
    let stem = format!("{suite}-{}-s{seed}", &hash[..12]);
    (dir.join(format!("{stem}.jsonl")), dir.join(format!("{stem}.csv")))
}

pub fn write_jsonl(path: &Path, reports: &[Report]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `suite, label, residual, stderr, allowance, verdict`.
pub fn write_summary_csv(path: &Path, reports: &[Report]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(["suite", "label", "residual", "stderr", "allowance", "verdict"])?;
    for r in reports {
        wr.write_record([
            r.suite.clone(),
            r.label.clone(),
            format!("{:e}", r.residual),
            format!("{:e}", r.stderr),
            format!("{:e}", r.allowance),
            r.verdict.as_str().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Report>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_verdicts() {
        assert!(Report::bound("x", "a", 0.0, 0.0).passed());
        assert!(!Report::bound("x", "a", 1e-300, 0.0).passed());
        assert!(!Report::bound("x", "a", f64::NAN, 1.0).passed());
    }

    #[test]
    fn jsonl_round_trip_and_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![
            Report::bound("lderiv", "max relative error", 1e-6, 1e-4),
            Report::bound("kalman", "mean gap", 0.5, 0.02)
                .with_detail(&serde_json::json!({"path": 3}))
                .unwrap(),
        ];
        let (jp, cp) = report_paths(dir.path(), "mixed", &"ab".repeat(32), 7);
        std::fs::create_dir_all(jp.parent().unwrap()).unwrap();
        write_jsonl(&jp, &reports).unwrap();
        write_summary_csv(&cp, &reports).unwrap();
        assert_eq!(read_jsonl(&jp).unwrap(), reports);
        let csv = std::fs::read_to_string(&cp).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "suite,label,residual,stderr,allowance,verdict");
        assert!(lines[2].ends_with(",fail"));
        assert!(jp.ends_with("mixed-abababababab-s7.jsonl"));
    }
}
