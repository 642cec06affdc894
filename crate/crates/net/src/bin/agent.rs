//! Node agent daemon.

use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pullsched_core::agent::{AgentConfig, NodeAgent};
use pullsched_core::model::{AttrValue, Attributes};
use pullsched_net::agentd::{claim_router, next_boot_epoch, run_agent, Command, CLAIM_URL_ATTR};
use pullsched_net::client::SchedulerClient;
use pullsched_net::{attrs_from, init_logging, parse_attr, shutdown_signal};
use tracing::error;

#[derive(Parser)]
#[command(version, about = "Execute-node agent")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Heartbeat the server and run matched jobs until interrupted.
    Run(RunArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Pull work through heartbeat responses.
    Pull,
    /// Accept jobs pushed to a claim endpoint (push baseline only).
    Push,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
    #[arg(long)]
    host_id: String,
    /// Slots on this host.
    #[arg(long, default_value_t = 1)]
    vms: u32,
    /// Seconds between heartbeats, before scaling.
    #[arg(long, default_value_t = 60.0)]
    heartbeat_interval: f64,
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Probability that a finished job is silently abandoned.
    #[arg(long, default_value_t = 0.0)]
    fault_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Host attribute name=value; memory_mb, disk_mb and cpus are split across slots.
    #[arg(long = "attr", value_parser = parse_attr)]
    attrs: Vec<(String, AttrValue)>,
    /// Adds a slot_group attribute, slot index modulo this count.
    #[arg(long)]
    slot_groups: Option<u32>,
    /// Keeps the boot counter here; Unix time stands in without it.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Pull)]
    mode: Mode,
    /// Claim endpoint address in push mode.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 10.0)]
    timeout: f64,
}

fn main() -> anyhow::Result<()> {
    init_logging("info");
    let Cmd::Run(a) = Cli::parse().command;
    let rt = tokio::runtime::Runtime::new()?;
    let (tx, rx) = mpsc::channel();
    let mut attributes = attrs_from(&a.attrs);
    if a.mode == Mode::Push {
        let listener = rt.block_on(tokio::net::TcpListener::bind(&a.listen))?;
        let addr = listener.local_addr()?;
        attributes.insert(CLAIM_URL_ATTR.into(), AttrValue::Str(format!("http://{addr}")));
        let app = claim_router(tx.clone());
        rt.spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                error!(error = %e, "claim endpoint failed");
            }
        });
    }
    let stop = tx.clone();
    rt.spawn(async move {
        shutdown_signal().await;
        let _ = stop.send(Command::Shutdown);
    });
    let slot_attributes: Vec<Attributes> = match a.slot_groups {
        Some(g) if g > 0 => (0..a.vms)
            .map(|i| [("slot_group".to_string(), AttrValue::Int(i64::from(i % g)))].into_iter().collect())
            .collect(),
        _ => Vec::new(),
    };
    let config = AgentConfig {
        server: a.server.clone(),
        host_id: a.host_id,
        vm_count: a.vms,
        heartbeat_interval_s: a.heartbeat_interval,
        time_scale: a.time_scale,
        attributes,
        slot_attributes,
        fault_rate: a.fault_rate,
        seed: a.seed,
        report_on_change: true,
    };
    let epoch = next_boot_epoch(a.state_dir.as_deref())?;
    let agent = NodeAgent::new(config, epoch).map_err(anyhow::Error::msg)?;
    let client = SchedulerClient::new(&a.server, Duration::from_secs_f64(a.timeout))?;
    run_agent(agent, &client, rx, tx);
    rt.shutdown_timeout(Duration::from_secs(1));
    Ok(())
}
