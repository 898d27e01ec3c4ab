use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gpmpc::harness::{
    comparison_table, compute_metrics, read_metrics, read_timeseries, run_scenario, write_outputs,
    ClockTime, ClockWindow, ControllerKind, RunMetrics, ScenarioConfig, METRICS_FILE,
};

#[derive(Parser)]
#[command(
    name = "gpmpc",
    version,
    about = "Closed-loop glucose control simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Mpc,
    GpMpc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Signal {
    True,
    Cgm,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its artifacts.
    Run {
        /// Scenario file (TOML). Defaults to the built-in seven-day schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        controller: Option<Controller>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metrics of two run directories side by side.
    Compare { first: PathBuf, second: PathBuf },
    /// Recompute metrics from a time-series CSV.
    Metrics {
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "true")]
        signal: Signal,
        #[arg(long, default_value = "00:00")]
        overnight_start: ClockTime,
        #[arg(long, default_value = "07:00")]
        overnight_end: ClockTime,
    },
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> gpmpc::Result<()> {
    match cli.command {
        Command::Run {
            config,
            controller,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => ScenarioConfig::load(&p)?,
                None => ScenarioConfig::table3(),
            };
            if let Some(c) = controller {
                cfg.controller = match c {
                    Controller::Mpc => ControllerKind::Mpc,
                    Controller::GpMpc => ControllerKind::GpMpc,
                };
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let record = run_scenario(&cfg)?;
            write_outputs(&record, &out)?;
            let m = &record.metrics.day_and_night;
            println!(
                "{}: {} steps, mean {:.1} mg/dl, {:.1}% in 70-180, written to {}",
                cfg.controller.as_str(),
                record.rows.len(),
                m.mean,
                m.pct_70_180,
                out.display()
            );
        }
        Command::Compare { first, second } => {
            let a = read_metrics(&first.join(METRICS_FILE))?;
            let b = read_metrics(&second.join(METRICS_FILE))?;
            let label = |p: &PathBuf| {
                p.file_name().map_or_else(
                    || p.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                )
            };
            print!(
                "{}",
                comparison_table(&a, &b, &label(&first), &label(&second))
            );
        }
        Command::Metrics {
            csv,
            signal,
            overnight_start,
            overnight_end,
        } => {
            let rows = read_timeseries(&csv)?;
            let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
            let g: Vec<f64> = rows
                .iter()
                .map(|r| match signal {
                    Signal::True => r.glucose_true,
                    Signal::Cgm => r.cgm,
                })
                .collect();
            let window = ClockWindow {
                start: overnight_start,
                end: overnight_end,
            };
            let m = RunMetrics {
                day_and_night: compute_metrics(&t, &g, None)?,
                overnight: compute_metrics(&t, &g, Some(&window))?,
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&m).expect("metrics serialize")
            );
        }
    }
    Ok(())
}
