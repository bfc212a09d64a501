//! Experiment driver: hourly scenario construction, method dispatch,
//! and parameter sweeps.
//!
//! A run turns a time-series table into one optimization problem per
//! hour of day: the rows of hour `h` (row indices congruent to `h`
//! modulo 24) are clustered down to the requested scenario count and the
//! chosen methods solve the resulting stochastic problem. Hours run
//! concurrently; records are assembled in (hour, method) order
//! regardless of completion order, so reports are deterministic for a
//! fixed seed.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use sdnr::{
    baseline_two_stage, build_scenarios, exhaustive_oracle, expected_loss, ingest_csv,
    reduce_kmedoids, solve_sopf_r, synthetic_table, two_stage_sbr, BusAssignment, ColumnMapping,
    Network, PowerFactors, ReconfigurationResult, SbrError, ScenarioSet, SolverConfig,
    SwitchConfiguration, TimeSeriesTable,
};

use crate::case::CaseDocument;
use crate::report::{AxisPoint, RecordStatus, RunRecord, RunReport};

/// Solution method selectable on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Two-stage successive branch reduction with sub-path candidate
    /// sets.
    Proposed,
    /// Two-stage greedy reduction without the close-and-open refinement.
    Baseline,
    /// Exhaustive enumeration of every radial configuration.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Baseline => "baseline",
            Method::Oracle => "oracle",
        }
    }
}

/// Knobs shared by every run.
#[derive(Clone, Debug)]
pub struct RunSettings {
    pub seed: u64,
    pub tolerance: f64,
    pub budget: u64,
    /// Hourly problems to solve (hour of day = index mod 24).
    pub hours: usize,
    /// Scenario count after clustering.
    pub scenario_count: usize,
    /// Days of synthetic data when no time series file is given.
    pub days: usize,
    pub timeseries: Option<PathBuf>,
    /// Column names used when reading a time series file.
    pub columns: ColumnMapping,
    /// Renewable penetration multiplier.
    pub k_r: f64,
    /// Zero the wall-time column for byte-stable reports.
    pub stable_ms: bool,
}

impl RunSettings {
    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            ..SolverConfig::default()
        }
    }
}

/// Load the factor table backing a run: a CSV file when given, the
/// seeded synthetic profile otherwise. Rejected CSV rows are reported on
/// stderr.
pub fn load_table(settings: &RunSettings) -> Result<TimeSeriesTable> {
    match &settings.timeseries {
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("opening time series {}", path.display()))?;
            let outcome = ingest_csv(BufReader::new(file), &settings.columns)
                .with_context(|| format!("reading time series {}", path.display()))?;
            if !outcome.rejected.is_empty() {
                eprintln!(
                    "warning: dropped {} malformed row(s) from {}",
                    outcome.rejected.len(),
                    path.display()
                );
            }
            Ok(outcome.table)
        }
        None => Ok(synthetic_table(settings.days, settings.seed)),
    }
}

/// The per-hour problem after clustering.
struct HourProblem {
    hour: usize,
    scenarios: ScenarioSet,
}

fn build_hour_problem(
    net: &Network,
    assignments: &[BusAssignment],
    pf: &PowerFactors,
    table: &TimeSeriesTable,
    settings: &RunSettings,
    hour: usize,
) -> Result<HourProblem> {
    let sub = table.hourly_subtable(hour % 24);
    if sub.is_empty() {
        bail!(
            "hour {hour}: the time series has no rows for hour-of-day {}",
            hour % 24
        );
    }
    let k = settings.scenario_count.min(sub.len());
    let clustering = reduce_kmedoids(&sub, k, settings.seed.wrapping_add(hour as u64))
        .with_context(|| format!("clustering hour {hour}"))?;
    let scenarios = build_scenarios(
        net,
        assignments,
        &clustering.scenario_factors(),
        pf,
        settings.k_r,
    )
    .with_context(|| format!("building scenarios for hour {hour}"))?;
    Ok(HourProblem { hour, scenarios })
}

/// Expected loss (per-unit) of a configuration under a scenario set.
fn loss_of(
    net: &Network,
    cfg: &SwitchConfiguration,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<f64> {
    let sols = solve_sopf_r(net, cfg, scenarios, config)?;
    Ok(expected_loss(net, &sols))
}

/// Open branches of a configuration as `(from, to)` endpoint pairs in
/// ascending branch id order.
fn opened_pairs(net: &Network, cfg: &SwitchConfiguration) -> Vec<(u32, u32)> {
    let mut ids = cfg.open_ids();
    ids.sort();
    ids.iter()
        .filter_map(|id| net.branch_index(*id))
        .map(|e| {
            let b = &net.branches()[e];
            (b.from.0, b.to.0)
        })
        .collect()
}

fn run_method(
    net: &Network,
    problem: &HourProblem,
    method: Method,
    settings: &RunSettings,
) -> RunRecord {
    let config = settings.solver_config();
    let started = Instant::now();
    let outcome: Result<ReconfigurationResult, SbrError> = match method {
        Method::Proposed => two_stage_sbr(net, &problem.scenarios, &config),
        Method::Baseline => baseline_two_stage(net, &problem.scenarios, &config),
        Method::Oracle => exhaustive_oracle(net, &problem.scenarios, &config, settings.budget),
    };
    let ms = if settings.stable_ms {
        0
    } else {
        started.elapsed().as_millis() as u64
    };
    let mut record = RunRecord {
        hour: problem.hour,
        method: method.name().to_string(),
        status: RecordStatus::Ok,
        objective_pu: None,
        objective_kw: None,
        opened: Vec::new(),
        relerr_pct: None,
        opf_solves: 0,
        ms,
        note: None,
        tree_count: None,
    };
    match outcome {
        Ok(result) => {
            record.opf_solves = result.stats.opf_solves;
            record.opened = opened_pairs(net, &result.config);
            record.note = result.note.clone();
            if let Some(info) = &result.oracle {
                record.tree_count = Some(info.tree_count.to_string());
            }
            match loss_of(net, &result.config, &problem.scenarios, &config) {
                Ok(loss) => {
                    record.objective_pu = Some(loss);
                    record.objective_kw = Some(loss * net.base_mva() * 1000.0);
                }
                Err(err) => {
                    record.status = RecordStatus::Failed(format!("reporting solve failed: {err}"));
                }
            }
        }
        Err(SbrError::TreeBudgetExceeded { count, budget }) => {
            record.status = RecordStatus::BudgetExceeded;
            record.note = Some(format!(
                "{count} spanning trees exceed the budget of {budget}"
            ));
            record.tree_count = Some(count.to_string());
        }
        Err(err) => {
            record.status = RecordStatus::Failed(err.to_string());
        }
    }
    record
}

/// Solve `settings.hours` hourly problems with each requested method.
///
/// Records appear in (hour, method-argument) order. When the oracle is
/// among the methods, every finished record of the same hour gets its
/// relative loss gap against the oracle's; oracle records carry zero by
/// definition.
pub fn run_solve(
    case: &CaseDocument,
    methods: &[Method],
    settings: &RunSettings,
) -> Result<RunReport> {
    if methods.is_empty() {
        bail!("no methods requested");
    }
    let net = case.to_network()?;
    let assignments = case.assignments();
    let pf = case.power_factors();
    let table = load_table(settings)?;

    let hour_records: Vec<Result<Vec<RunRecord>>> = (0..settings.hours)
        .into_par_iter()
        .map(|hour| {
            let problem = build_hour_problem(&net, &assignments, &pf, &table, settings, hour)?;
            let mut records: Vec<RunRecord> = methods
                .iter()
                .map(|&m| run_method(&net, &problem, m, settings))
                .collect();
            let oracle_loss = records
                .iter()
                .find(|r| r.method == Method::Oracle.name() && r.status == RecordStatus::Ok)
                .and_then(|r| r.objective_pu);
            if let Some(oracle) = oracle_loss {
                for r in &mut records {
                    if r.status != RecordStatus::Ok {
                        continue;
                    }
                    r.relerr_pct = if r.method == Method::Oracle.name() {
                        Some(0.0)
                    } else if oracle.abs() > f64::MIN_POSITIVE {
                        r.objective_pu.map(|o| (o - oracle) / oracle * 100.0)
                    } else {
                        None
                    };
                }
            }
            Ok(records)
        })
        .collect();

    let mut records = Vec::new();
    for hour in hour_records {
        records.extend(hour?);
    }
    let mut report = RunReport {
        case_name: case.name.clone(),
        seed: settings.seed,
        axis: None,
        records,
        summary: Vec::new(),
    };
    report.rebuild_summary();
    Ok(report)
}

/// Sweep axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Renewable penetration multiplier k_r.
    Kr,
    /// Scenario count after clustering.
    Scenarios,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Kr => "kr",
            Axis::Scenarios => "scenarios",
        }
    }
}

/// Run every (value, method) grid point of a sweep. Each grid point
/// yields one report with records over all hours plus mean/max/min
/// summary rows; the grid is ordered values-major, methods-minor.
pub fn run_sweep(
    case: &CaseDocument,
    axis: Axis,
    values: &[f64],
    methods: &[Method],
    settings: &RunSettings,
) -> Result<Vec<RunReport>> {
    if values.is_empty() {
        bail!("no sweep values given");
    }
    let combined: Vec<Result<Vec<RunReport>>> = values
        .par_iter()
        .map(|&value| {
            let mut point = settings.clone();
            match axis {
                Axis::Kr => {
                    if !value.is_finite() || value < 0.0 {
                        bail!("k_r must be non-negative, got {value}");
                    }
                    point.k_r = value;
                }
                Axis::Scenarios => {
                    if value < 1.0 || value.fract() != 0.0 {
                        bail!("scenario counts must be positive integers, got {value}");
                    }
                    point.scenario_count = value as usize;
                }
            }
            let all = run_solve(case, methods, &point)?;
            let reports = methods
                .iter()
                .map(|&m| {
                    let mut report = RunReport {
                        case_name: all.case_name.clone(),
                        seed: all.seed,
                        axis: Some(AxisPoint {
                            axis: axis.name().to_string(),
                            value,
                        }),
                        records: all
                            .records
                            .iter()
                            .filter(|r| r.method == m.name())
                            .cloned()
                            .collect(),
                        summary: Vec::new(),
                    };
                    report.rebuild_summary();
                    report
                })
                .collect();
            Ok(reports)
        })
        .collect();

    let mut reports = Vec::new();
    for point in combined {
        reports.extend(point?);
    }
    Ok(reports)
}

/// One clustered scenario of one hour, for `cluster` output.
#[derive(Debug, serde::Serialize)]
pub struct ClusterRow {
    pub hour: usize,
    pub scenario: usize,
    pub medoid_row: usize,
    pub wind_cf: f64,
    pub solar_cf: f64,
    pub load_factor: f64,
    pub probability: f64,
}

/// Cluster each hour's rows and list the representative scenarios.
pub fn run_cluster(settings: &RunSettings) -> Result<Vec<ClusterRow>> {
    let table = load_table(settings)?;
    let mut rows = Vec::new();
    for hour in 0..settings.hours.min(24) {
        let sub = table.hourly_subtable(hour);
        if sub.is_empty() {
            bail!("the time series has no rows for hour-of-day {hour}");
        }
        let k = settings.scenario_count.min(sub.len());
        let clustering = reduce_kmedoids(&sub, k, settings.seed.wrapping_add(hour as u64))
            .with_context(|| format!("clustering hour {hour}"))?;
        for (s, sf) in clustering.scenario_factors().iter().enumerate() {
            rows.push(ClusterRow {
                hour,
                scenario: s,
                medoid_row: clustering.medoid_rows[s],
                wind_cf: sf.factors.wind_cf,
                solar_cf: sf.factors.solar_cf,
                load_factor: sf.factors.load_factor,
                probability: sf.probability,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::CaseDocument;

    fn toy_case() -> CaseDocument {
        CaseDocument::from_json(
            r#"{
  "schema": "sdnr-case/1",
  "name": "triangle",
  "source": "native",
  "base_mva": 1.0,
  "base_kv": 11.0,
  "buses": [
    { "id": 0, "substation": true, "v_min": 0.5, "v_max": 1.5 },
    { "id": 1, "v_min": 0.5, "v_max": 1.5 },
    { "id": 2, "v_min": 0.5, "v_max": 1.5 }
  ],
  "branches": [
    { "id": 1, "from": 0, "to": 1, "r": 0.01, "x": 0.02 },
    { "id": 2, "from": 0, "to": 2, "r": 0.01, "x": 0.02 },
    { "id": 3, "from": 1, "to": 2, "r": 0.01, "x": 0.02, "open": true }
  ],
  "profiles": [
    { "bus": 1, "load_mw": 0.3 },
    { "bus": 2, "wind_mw": 0.1, "solar_mw": 0.05 }
  ]
}
"#,
        )
        .unwrap()
    }

    fn toy_settings() -> RunSettings {
        RunSettings {
            seed: 7,
            tolerance: 1e-8,
            budget: 100,
            hours: 2,
            scenario_count: 3,
            days: 2,
            timeseries: None,
            columns: ColumnMapping::default(),
            k_r: 1.0,
            stable_ms: true,
        }
    }

    #[test]
    fn paired_run_reports_oracle_relative_errors() {
        let case = toy_case();
        let report =
            run_solve(&case, &[Method::Proposed, Method::Oracle], &toy_settings()).unwrap();
        assert_eq!(report.records.len(), 4);
        assert!(report.failed_hours().is_empty());
        for pair in report.records.chunks(2) {
            let (proposed, oracle) = (&pair[0], &pair[1]);
            assert_eq!(proposed.method, "proposed");
            assert_eq!(oracle.method, "oracle");
            assert_eq!(oracle.relerr_pct, Some(0.0));
            assert!(proposed.relerr_pct.unwrap() >= -1e-9);
            assert!(oracle.tree_count.is_some());
            assert_eq!(proposed.ms, 0);
        }
    }

    #[test]
    fn runs_are_deterministic_for_a_fixed_seed() {
        let case = toy_case();
        let settings = toy_settings();
        let a = run_solve(&case, &[Method::Proposed], &settings).unwrap();
        let b = run_solve(&case, &[Method::Proposed], &settings).unwrap();
        let render = |r: &RunReport| {
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(render(&a), render(&b));
    }

    #[test]
    fn budget_exhaustion_flags_the_record_and_continues() {
        let case = toy_case();
        let mut settings = toy_settings();
        settings.budget = 1;
        settings.hours = 1;
        let report = run_solve(&case, &[Method::Oracle, Method::Proposed], &settings).unwrap();
        assert_eq!(report.records[0].status, RecordStatus::BudgetExceeded);
        assert_eq!(report.records[0].tree_count.as_deref(), Some("3"));
        assert_eq!(report.records[1].status, RecordStatus::Ok);
        assert_eq!(report.failed_hours(), vec![0]);
    }

    #[test]
    fn single_value_sweep_equals_run_solve() {
        let case = toy_case();
        let settings = toy_settings();
        let sweep = run_sweep(&case, Axis::Kr, &[1.0], &[Method::Proposed], &settings).unwrap();
        assert_eq!(sweep.len(), 1);
        let solo = run_solve(&case, &[Method::Proposed], &settings).unwrap();
        let objectives =
            |r: &RunReport| r.records.iter().map(|x| x.objective_pu).collect::<Vec<_>>();
        assert_eq!(objectives(&sweep[0]), objectives(&solo));
        assert_eq!(sweep[0].summary.len(), 3);
        let mean = sweep[0]
            .records
            .iter()
            .map(|r| r.objective_pu.unwrap())
            .sum::<f64>()
            / sweep[0].records.len() as f64;
        assert!((sweep[0].summary[0].objective_pu - mean).abs() <= 1e-15);
    }

    #[test]
    fn sweep_orders_grid_points_values_major() {
        let case = toy_case();
        let mut settings = toy_settings();
        settings.hours = 1;
        let reports = run_sweep(
            &case,
            Axis::Scenarios,
            &[1.0, 2.0],
            &[Method::Proposed, Method::Baseline],
            &settings,
        )
        .unwrap();
        let coords: Vec<(f64, &str)> = reports
            .iter()
            .map(|r| (r.axis.as_ref().unwrap().value, r.records[0].method.as_str()))
            .collect();
        assert_eq!(
            coords,
            vec![
                (1.0, "proposed"),
                (1.0, "baseline"),
                (2.0, "proposed"),
                (2.0, "baseline"),
            ]
        );
    }

    #[test]
    fn cluster_rows_form_distributions() {
        let settings = toy_settings();
        let rows = run_cluster(&settings).unwrap();
        assert_eq!(rows.len(), 2 * 2); // 2 hours, k = min(3, 2 days) = 2
        for hour in 0..2 {
            let total: f64 = rows
                .iter()
                .filter(|r| r.hour == hour)
                .map(|r| r.probability)
                .sum();
            assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}
