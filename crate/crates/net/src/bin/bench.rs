//! Experiment driver.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pullsched_net::bench::{run, BenchOptions, Mode, Scenario};
use pullsched_net::init_logging;

#[derive(Parser)]
#[command(version, about = "Run scheduling experiments and write their metrics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write events.log, metrics.csv and summary.json.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, value_enum, default_value_t = Mode::Embedded)]
    mode: Mode,
    /// Total slots, split evenly across hosts.
    #[arg(long)]
    slots: Option<u32>,
    #[arg(long)]
    hosts: Option<u32>,
    #[arg(long)]
    time_scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Job length for the throughput scenario, seconds.
    #[arg(long, default_value_t = 60.0)]
    job_length: f64,
    /// Job count for the throughput scenario.
    #[arg(long)]
    jobs: Option<u64>,
    /// Abandonment probability; applies to every host unless --faulty-fraction is set.
    #[arg(long)]
    fault_rate: Option<f64>,
    #[arg(long)]
    faulty_fraction: Option<f64>,
    #[arg(long)]
    heartbeat_interval: Option<f64>,
    /// Queue lengths held by the baseline sweep.
    #[arg(long, value_delimiter = ',')]
    queue_lengths: Option<Vec<usize>>,
    /// Seconds measured per sweep bucket.
    #[arg(long)]
    window: Option<f64>,
    /// Directory with the server, agent and baseline binaries (wire mode).
    #[arg(long)]
    bin_dir: Option<PathBuf>,
    /// Real seconds before a wire-mode run gives up.
    #[arg(long, default_value_t = 3600.0)]
    timeout: f64,
}

fn main() -> anyhow::Result<()> {
    init_logging("warn");
    let Cmd::Run(a) = Cli::parse().command;
    let opts = BenchOptions {
        slots: a.slots,
        hosts: a.hosts,
        time_scale: a.time_scale,
        seed: a.seed,
        job_length_s: a.job_length,
        jobs: a.jobs,
        fault_rate: a.fault_rate,
        faulty_fraction: a.faulty_fraction,
        heartbeat_interval_s: a.heartbeat_interval,
        queue_lengths: a.queue_lengths,
        window_s: a.window,
        bin_dir: a.bin_dir,
        timeout_s: a.timeout,
        ..BenchOptions::new(a.scenario, a.mode, a.out)
    };
    let summary = run(&opts)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
