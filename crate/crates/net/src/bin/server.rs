//! Scheduler service.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pullsched_core::service::ServiceConfig;
use pullsched_core::store::Durability;
use pullsched_net::server::{serve, AppState};
use pullsched_net::{init_logging, parse_durability, shutdown_signal};

#[derive(Parser)]
#[command(version, about = "Pull-model scheduler service")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve the HTTP API until interrupted.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Journal and snapshot directory; state is in memory only without it.
    #[arg(long)]
    journal_dir: Option<PathBuf>,
    /// Seconds between agent heartbeats, before scaling.
    #[arg(long, default_value_t = 60.0)]
    heartbeat_interval: f64,
    /// Heartbeat intervals before an unaccepted match expires.
    #[arg(long, default_value_t = 3)]
    match_expiry: u32,
    /// Heartbeat intervals of silence before a machine is declared dead.
    #[arg(long, default_value_t = 3)]
    dead_node: u32,
    /// Seconds between periodic scheduling passes, before scaling.
    #[arg(long, default_value_t = 1.0)]
    schedule_interval: f64,
    /// full, batched, or batched:<ms>.
    #[arg(long, default_value = "full", value_parser = parse_durability)]
    durability: Durability,
    /// Divides every interval and job duration.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Drops tolerated per job before it is removed; unlimited by default.
    #[arg(long)]
    max_retries: Option<u32>,
}

fn main() -> anyhow::Result<()> {
    init_logging("info");
    let Cmd::Run(a) = Cli::parse().command;
    let config = ServiceConfig {
        listen: a.listen.clone(),
        journal_dir: a.journal_dir,
        heartbeat_interval_s: a.heartbeat_interval,
        match_expiry_intervals: a.match_expiry,
        dead_node_intervals: a.dead_node,
        schedule_interval_s: a.schedule_interval,
        durability: a.durability,
        time_scale: a.time_scale,
        max_retries: a.max_retries,
        ..Default::default()
    };
    let state = AppState::open(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.listen).await?;
        serve(state, listener, shutdown_signal()).await
    })
}
