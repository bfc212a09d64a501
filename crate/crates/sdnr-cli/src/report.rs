//! Run reports: per-hour records, summary statistics, CSV and JSON
//! emission.
//!
//! The CSV table always carries the fixed header
//! `hour,method,objective_pu,objective_kw,opened,relerr_pct,opf_solves,ms`.
//! Objectives are the expected total active loss of the chosen
//! configuration (per-unit and kW), `opened` lists the open branches as
//! `from-to` endpoint pairs joined by `;`, and `relerr_pct` is the
//! relative loss gap to the oracle record of the same hour — blank when
//! the oracle did not run. Summary rows (sweeps only) reuse the `hour`
//! column for the statistic name.

use std::io::Write;

use anyhow::Result;
use serde::Serialize;

/// Fixed CSV header of every report table.
pub const CSV_HEADER: &str =
    "hour,method,objective_pu,objective_kw,opened,relerr_pct,opf_solves,ms";

/// How one record's run ended.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    /// The oracle refused: the spanning-tree count exceeds the budget.
    BudgetExceeded,
    /// The method failed outright (message attached).
    Failed(String),
}

/// One (hour, method) outcome.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub hour: usize,
    pub method: String,
    pub status: RecordStatus,
    /// Expected total active loss, per-unit.
    pub objective_pu: Option<f64>,
    /// Expected total active loss, kW.
    pub objective_kw: Option<f64>,
    /// Open branches as `(from, to)` endpoint pairs, ascending branch id.
    pub opened: Vec<(u32, u32)>,
    /// Relative loss gap to the same hour's oracle record, percent.
    pub relerr_pct: Option<f64>,
    /// Deterministic power flow solves performed by the method.
    pub opf_solves: usize,
    /// Wall time in milliseconds (zeroed under `--stable-ms`).
    pub ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Spanning-tree count, present on oracle records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_count: Option<String>,
}

/// Mean/max/min of the finished records of one method.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub stat: String,
    pub method: String,
    pub objective_pu: f64,
    pub objective_kw: f64,
    pub relerr_pct: Option<f64>,
    pub opf_solves: f64,
    pub ms: f64,
}

/// A full report: every record of a run plus optional summary rows.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub case_name: String,
    pub seed: u64,
    /// Sweep coordinate that produced this report, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<AxisPoint>,
    pub records: Vec<RunRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub summary: Vec<SummaryRow>,
}

/// One grid point of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct AxisPoint {
    pub axis: String,
    pub value: f64,
}

impl RunReport {
    /// Recompute the mean/max/min summary rows from the finished records,
    /// one triple per method in first-appearance order.
    pub fn rebuild_summary(&mut self) {
        self.summary.clear();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.records {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut rows = Vec::new();
        for method in methods {
            let done: Vec<&RunRecord> = self
                .records
                .iter()
                .filter(|r| r.method == method && r.status == RecordStatus::Ok)
                .collect();
            if done.is_empty() {
                continue;
            }
            let n = done.len() as f64;
            let mean = |f: &dyn Fn(&RunRecord) -> f64| done.iter().map(|r| f(r)).sum::<f64>() / n;
            let fold = |f: &dyn Fn(&RunRecord) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
                done.iter().map(|r| f(r)).fold(init, pick)
            };
            let obj = |r: &RunRecord| r.objective_pu.unwrap_or(f64::NAN);
            let kw = |r: &RunRecord| r.objective_kw.unwrap_or(f64::NAN);
            let relerrs: Vec<f64> = done.iter().filter_map(|r| r.relerr_pct).collect();
            let rel_stat = |pick: fn(f64, f64) -> f64, init: f64| {
                (!relerrs.is_empty()).then(|| relerrs.iter().copied().fold(init, pick))
            };
            let rel_mean =
                (!relerrs.is_empty()).then(|| relerrs.iter().sum::<f64>() / relerrs.len() as f64);
            for (stat, o, k, rel) in [
                ("mean", mean(&obj), mean(&kw), rel_mean),
                (
                    "max",
                    fold(&obj, f64::NEG_INFINITY, f64::max),
                    fold(&kw, f64::NEG_INFINITY, f64::max),
                    rel_stat(f64::max, f64::NEG_INFINITY),
                ),
                (
                    "min",
                    fold(&obj, f64::INFINITY, f64::min),
                    fold(&kw, f64::INFINITY, f64::min),
                    rel_stat(f64::min, f64::INFINITY),
                ),
            ] {
                rows.push(SummaryRow {
                    stat: stat.to_string(),
                    method: method.to_string(),
                    objective_pu: o,
                    objective_kw: k,
                    relerr_pct: rel,
                    opf_solves: mean(&|r: &RunRecord| r.opf_solves as f64),
                    ms: mean(&|r: &RunRecord| r.ms as f64),
                });
            }
        }
        self.summary = rows;
    }

    /// Hours whose records did not finish cleanly, ascending and deduped.
    pub fn failed_hours(&self) -> Vec<usize> {
        let mut hours: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.status != RecordStatus::Ok)
            .map(|r| r.hour)
            .collect();
        hours.sort_unstable();
        hours.dedup();
        hours
    }

    /// Write the fixed-header CSV table.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER.split(','))?;
        for r in &self.records {
            w.write_record([
                r.hour.to_string(),
                r.method.clone(),
                r.objective_pu.map(fmt_f64).unwrap_or_default(),
                r.objective_kw.map(fmt_f64).unwrap_or_default(),
                format_opened(&r.opened),
                r.relerr_pct.map(fmt_f64).unwrap_or_default(),
                r.opf_solves.to_string(),
                r.ms.to_string(),
            ])?;
        }
        for s in &self.summary {
            w.write_record([
                s.stat.clone(),
                s.method.clone(),
                fmt_f64(s.objective_pu),
                fmt_f64(s.objective_kw),
                String::new(),
                s.relerr_pct.map(fmt_f64).unwrap_or_default(),
                fmt_f64(s.opf_solves),
                fmt_f64(s.ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write the full JSON trace.
    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Shortest round-trip decimal for a float; empty cells are handled by
/// the callers.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// `(from, to)` pairs as `3-7;6-8`.
pub fn format_opened(opened: &[(u32, u32)]) -> String {
    opened
        .iter()
        .map(|(f, t)| format!("{f}-{t}"))
        .collect::<Vec<_>>()
        .join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(hour: usize, method: &str, obj: f64, rel: Option<f64>) -> RunRecord {
        RunRecord {
            hour,
            method: method.to_string(),
            status: RecordStatus::Ok,
            objective_pu: Some(obj),
            objective_kw: Some(obj * 1000.0),
            opened: vec![(3, 7), (6, 8)],
            relerr_pct: rel,
            opf_solves: 40,
            ms: 0,
            note: None,
            tree_count: None,
        }
    }

    #[test]
    fn csv_has_the_fixed_header_and_blank_optionals() {
        let mut report = RunReport {
            case_name: "t".into(),
            seed: 0,
            axis: None,
            records: vec![record(0, "proposed", 0.5, None)],
            summary: Vec::new(),
        };
        report.records.push(RunRecord {
            relerr_pct: None,
            objective_pu: None,
            objective_kw: None,
            status: RecordStatus::BudgetExceeded,
            opened: Vec::new(),
            ..record(1, "oracle", 0.0, None)
        });
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("0,proposed,0.5,500,3-7;6-8,,40,0"));
        assert_eq!(lines.next(), Some("1,oracle,,,,,40,0"));
    }

    #[test]
    fn summary_matches_recomputation() {
        let mut report = RunReport {
            case_name: "t".into(),
            seed: 0,
            axis: None,
            records: vec![
                record(0, "proposed", 0.4, Some(0.0)),
                record(1, "proposed", 0.6, Some(2.0)),
            ],
            summary: Vec::new(),
        };
        report.rebuild_summary();
        assert_eq!(report.summary.len(), 3);
        let mean = &report.summary[0];
        assert_eq!(mean.stat, "mean");
        assert!((mean.objective_pu - 0.5).abs() < 1e-15);
        assert_eq!(mean.relerr_pct, Some(1.0));
        let max = &report.summary[1];
        assert_eq!(max.objective_pu, 0.6);
        assert_eq!(max.relerr_pct, Some(2.0));
        let min = &report.summary[2];
        assert_eq!(min.objective_pu, 0.4);
        assert_eq!(min.relerr_pct, Some(0.0));
    }

    #[test]
    fn failed_hours_are_listed_once() {
        let mut report = RunReport {
            case_name: "t".into(),
            seed: 0,
            axis: None,
            records: vec![record(0, "a", 0.1, None), record(0, "b", 0.1, None)],
            summary: Vec::new(),
        };
        report.records[0].status = RecordStatus::Failed("x".into());
        report.records[1].status = RecordStatus::BudgetExceeded;
        assert_eq!(report.failed_hours(), vec![0]);
    }
}
