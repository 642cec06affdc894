//! Push-model baseline queue manager.

use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use pullsched_core::baseline::{Baseline, BaselineConfig};
use pullsched_core::clock::SystemClock;
use pullsched_core::store::{Durability, Store, StoreOptions};
use pullsched_net::baselined::{router, run_baseline, Command, HttpClaims};
use pullsched_net::{init_logging, parse_durability, shutdown_signal};
use tracing::info;

#[derive(Parser)]
#[command(version, about = "Push-model baseline scheduler")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve submissions and push jobs to agents until interrupted.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "127.0.0.1:9090")]
    listen: String,
    /// Job starts per second, before scaling.
    #[arg(long, default_value_t = 0.5)]
    throttle: f64,
    /// Journal directory; the queue is in memory only without it.
    #[arg(long)]
    journal_dir: Option<PathBuf>,
    /// Completions between full journal compactions; 0 disables them.
    #[arg(long, default_value_t = 100)]
    compact_every: u64,
    /// Seconds between scheduling ticks, before scaling.
    #[arg(long, default_value_t = 1.0)]
    tick: f64,
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// full, batched, or batched:<ms>.
    #[arg(long, default_value = "batched", value_parser = parse_durability)]
    durability: Durability,
    /// Use the store's idle index instead of scanning the whole queue.
    #[arg(long)]
    no_scan: bool,
    /// Claim request timeout in seconds.
    #[arg(long, default_value_t = 5.0)]
    claim_timeout: f64,
}

fn main() -> anyhow::Result<()> {
    init_logging("info");
    let Cmd::Run(a) = Cli::parse().command;
    let options = StoreOptions { durability: a.durability, verify_full: false };
    let store = Arc::new(match &a.journal_dir {
        Some(dir) => Store::open(dir, options)?,
        None => Store::in_memory(options),
    });
    let config = BaselineConfig {
        throttle: a.throttle,
        tick_s: a.tick,
        time_scale: a.time_scale,
        compact_every: a.compact_every,
        scan_queue: !a.no_scan,
    };
    let baseline = Baseline::new(config, store, Arc::new(SystemClock))?;
    let claims = HttpClaims::new(Duration::from_secs_f64(a.claim_timeout))?;
    let (tx, rx) = mpsc::channel();
    let worker = std::thread::Builder::new().name("baseline".into()).spawn(move || run_baseline(baseline, claims, rx))?;
    let rt = tokio::runtime::Runtime::new()?;
    let stop = tx.clone();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.listen).await?;
        info!(event = "listening", addr = %listener.local_addr()?, "baseline up");
        axum::serve(listener, router(tx)).with_graceful_shutdown(shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    let _ = stop.send(Command::Shutdown);
    worker.join().map_err(|_| anyhow::anyhow!("baseline thread panicked"))?;
    Ok(())
}
