//! `sdnr` — stochastic distribution network reconfiguration from the
//! command line.
//!
//! Verbs: `solve` (hourly problems on a case), `sweep` (penetration or
//! scenario-count grids), `oracle` (exhaustive benchmark), `cluster`
//! (inspect scenario reduction), `validate` (check a case file). Reports
//! are CSV tables or JSON traces; exit codes are 0 (success), 1 (solve
//! failures), 2 (input errors).

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sdnr::{find_loops, is_radial, spanning_tree_count};

use sdnr_cli::case::CaseDocument;
use sdnr_cli::report::RunReport;
use sdnr_cli::runner::{self, Axis, Method, RunSettings};

#[derive(Parser)]
#[command(
    name = "sdnr",
    version,
    about = "Stochastic distribution network reconfiguration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for synthetic data and clustering initialization.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Power flow convergence tolerance (per-unit residual).
    #[arg(long, global = true, default_value_t = 1e-8)]
    tolerance: f64,
    /// Largest spanning-tree count the oracle will enumerate.
    #[arg(long, global = true, default_value_t = 5000)]
    budget: u64,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Zero the wall-time column so reports are byte-stable.
    #[arg(long, global = true)]
    stable_ms: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Scenario-construction flags shared by the solving verbs.
#[derive(Args, Clone, Debug)]
struct ScenarioArgs {
    /// Hourly problems to run (hour of day = index mod 24).
    #[arg(long, default_value_t = 24)]
    hours: usize,
    /// Scenario count after k-medoids reduction.
    #[arg(long, default_value_t = 5)]
    scenarios: usize,
    /// Days of synthetic data when no time series is given.
    #[arg(long, default_value_t = 30)]
    days: usize,
    /// Headered CSV with wind, solar, and load factor columns.
    #[arg(long)]
    timeseries: Option<PathBuf>,
    /// Column holding the load factor.
    #[arg(long, default_value = "load_factor")]
    load_col: String,
    /// Column holding the wind capacity factor.
    #[arg(long, default_value = "wind_cf")]
    wind_col: String,
    /// Column holding the solar capacity factor.
    #[arg(long, default_value = "solar_cf")]
    solar_col: String,
    /// Renewable penetration multiplier.
    #[arg(long, default_value_t = 1.0)]
    kr: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Solve hourly reconfiguration problems on a case.
    Solve {
        case: PathBuf,
        /// Methods to run (comma-separated).
        #[arg(long, value_enum, value_delimiter = ',', default_value = "proposed")]
        method: Vec<Method>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep renewable penetration or scenario count.
    Sweep {
        case: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Grid values (comma-separated).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "proposed,baseline,oracle"
        )]
        method: Vec<Method>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory, one report per grid point (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark by exhaustive enumeration of radial configurations.
    Oracle {
        case: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster the time series and list representative scenarios.
    Cluster {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a case file and check that it describes a solvable network.
    Validate {
        case: PathBuf,
        /// Rewrite the file in canonical form (native cases only).
        #[arg(long)]
        rewrite: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        if jobs > 0 {
            // Ignore the error: the pool can only be sized once per process.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
    }
    let settings = |s: &ScenarioArgs| RunSettings {
        seed: cli.seed,
        tolerance: cli.tolerance,
        budget: cli.budget,
        hours: s.hours,
        scenario_count: s.scenarios,
        days: s.days,
        timeseries: s.timeseries.clone(),
        columns: sdnr::ColumnMapping {
            wind: s.wind_col.clone(),
            solar: s.solar_col.clone(),
            load: s.load_col.clone(),
        },
        k_r: s.kr,
        stable_ms: cli.stable_ms,
    };

    match &cli.command {
        Command::Solve {
            case,
            method,
            scenario,
            out,
        } => {
            let case = CaseDocument::from_path(case)?;
            let report = runner::run_solve(&case, method, &settings(scenario))?;
            emit_report(&report, cli.format, out.as_deref())?;
            Ok(exit_for(&[report]))
        }
        Command::Oracle {
            case,
            scenario,
            out,
        } => {
            let case = CaseDocument::from_path(case)?;
            let report = runner::run_solve(&case, &[Method::Oracle], &settings(scenario))?;
            for r in &report.records {
                if let Some(trees) = &r.tree_count {
                    eprintln!("hour {}: {} spanning trees", r.hour, trees);
                }
            }
            emit_report(&report, cli.format, out.as_deref())?;
            Ok(exit_for(&[report]))
        }
        Command::Sweep {
            case,
            axis,
            values,
            method,
            scenario,
            out,
        } => {
            let case = CaseDocument::from_path(case)?;
            let reports = runner::run_sweep(&case, *axis, values, method, &settings(scenario))?;
            emit_sweep(&reports, cli.format, out.as_deref())?;
            Ok(exit_for(&reports))
        }
        Command::Cluster { scenario, out } => {
            let rows = runner::run_cluster(&settings(scenario))?;
            let mut sink = open_sink(out.as_deref())?;
            match cli.format {
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(&mut sink);
                    w.write_record([
                        "hour",
                        "scenario",
                        "medoid_row",
                        "wind_cf",
                        "solar_cf",
                        "load_factor",
                        "probability",
                    ])?;
                    for r in &rows {
                        w.write_record([
                            r.hour.to_string(),
                            r.scenario.to_string(),
                            r.medoid_row.to_string(),
                            format!("{}", r.wind_cf),
                            format!("{}", r.solar_cf),
                            format!("{}", r.load_factor),
                            format!("{}", r.probability),
                        ])?;
                    }
                    w.flush()?;
                }
                Format::Json => {
                    serde_json::to_writer_pretty(&mut sink, &rows)?;
                    sink.write_all(b"\n")?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { case, rewrite } => {
            let doc = CaseDocument::from_path(case)?;
            let net = doc.to_network()?;
            let cfg = doc.initial_config(&net)?;
            let radial = is_radial(&net, &cfg)?;
            let loops = find_loops(&net)?;
            let trees = spanning_tree_count(&net)?;
            // Resolve every profile reference with a flat one-scenario set.
            sdnr::build_scenarios(
                &net,
                &doc.assignments(),
                &[sdnr::ScenarioFactors {
                    factors: sdnr::FactorRow {
                        wind_cf: 1.0,
                        solar_cf: 1.0,
                        load_factor: 1.0,
                    },
                    probability: 1.0,
                }],
                &doc.power_factors(),
                1.0,
            )
            .context("resolving bus profiles")?;
            println!(
                "{}: {} buses, {} branches, {} loops all-closed, {} spanning trees, initial config {}",
                doc.name,
                net.buses().len(),
                net.branches().len(),
                loops.len(),
                trees,
                if radial { "radial" } else { "NOT radial" },
            );
            if *rewrite {
                if case.extension().is_some_and(|e| e == "m") {
                    anyhow::bail!("--rewrite applies to native case files only");
                }
                doc.save(case)?;
            }
            Ok(if radial {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

/// Exit code from report statuses: 1 when any record failed, else 0.
/// Failed hours are listed on stderr.
fn exit_for(reports: &[RunReport]) -> ExitCode {
    let mut failed: Vec<String> = Vec::new();
    for report in reports {
        for hour in report.failed_hours() {
            let label = match &report.axis {
                Some(a) => format!("{}={} hour {}", a.axis, a.value, hour),
                None => format!("hour {hour}"),
            };
            if !failed.contains(&label) {
                failed.push(label);
            }
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed: {}", failed.join(", "));
        ExitCode::from(1)
    }
}

fn open_sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => {
            Box::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn emit_report(report: &RunReport, format: Format, out: Option<&Path>) -> Result<()> {
    let mut sink = open_sink(out)?;
    match format {
        Format::Csv => report.write_csv(&mut sink),
        Format::Json => report.write_json(&mut sink),
    }
}

/// Sweeps write one file per grid point into `--out DIR`, or labeled
/// sections (CSV) / a single array (JSON) on stdout.
fn emit_sweep(reports: &[RunReport], format: Format, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating directory {}", dir.display()))?;
            let ext = match format {
                Format::Csv => "csv",
                Format::Json => "json",
            };
            for report in reports {
                let axis = report.axis.as_ref().expect("sweep reports carry an axis");
                let method = report
                    .records
                    .first()
                    .map(|r| r.method.as_str())
                    .unwrap_or("none");
                let name = format!(
                    "{}_{}_{}_{}.{}",
                    report.case_name, axis.axis, axis.value, method, ext
                );
                let mut sink: Box<dyn Write> = Box::new(
                    File::create(dir.join(&name)).with_context(|| format!("creating {name}"))?,
                );
                match format {
                    Format::Csv => report.write_csv(&mut sink)?,
                    Format::Json => report.write_json(&mut sink)?,
                }
            }
            Ok(())
        }
        None => {
            let mut sink = open_sink(None)?;
            match format {
                Format::Csv => {
                    for report in reports {
                        let axis = report.axis.as_ref().expect("sweep reports carry an axis");
                        let method = report
                            .records
                            .first()
                            .map(|r| r.method.as_str())
                            .unwrap_or("none");
                        writeln!(sink, "# {}={} method={}", axis.axis, axis.value, method)?;
                        report.write_csv(&mut sink)?;
                        writeln!(sink)?;
                    }
                    Ok(())
                }
                Format::Json => {
                    serde_json::to_writer_pretty(&mut sink, reports)?;
                    sink.write_all(b"\n")?;
                    Ok(())
                }
            }
        }
    }
}
