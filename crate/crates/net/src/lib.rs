//! Network front ends: the HTTP scheduler service, the node agent daemon,
//! the push baseline daemon, and the benchmark driver that runs experiments
//! either in-process or across real processes.

pub mod agentd;
pub mod baselined;
pub mod bench;
pub mod client;
pub mod http;
pub mod server;

use std::time::Duration;

use pullsched_core::model::{AttrValue, Attributes};
use pullsched_core::store::Durability;
use tracing_subscriber::EnvFilter;

/// One JSON object per log line on stderr. `RUST_LOG` overrides the level.
pub fn init_logging(default_filter: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_filter));
    let _ = tracing_subscriber::fmt()
        .json()
        .flatten_event(true)
        .with_current_span(false)
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// `full`, `batched` (5 ms window) or `batched:<ms>`.
pub fn parse_durability(s: &str) -> Result<Durability, String> {
    match s.split_once(':') {
        None if s == "full" => Ok(Durability::Full),
        None if s == "batched" => Ok(Durability::Batched(Duration::from_millis(5))),
        Some(("batched", ms)) => {
            let ms: u64 = ms.parse().map_err(|_| format!("bad batch window {ms:?}"))?;
            Ok(Durability::Batched(Duration::from_millis(ms)))
        }
        _ => Err(format!("durability must be full, batched or batched:<ms>, not {s:?}")),
    }
}

/// `name=value`, with the value typed as in [`AttrValue::parse_loose`].
pub fn parse_attr(s: &str) -> Result<(String, AttrValue), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("attribute {s:?} is not name=value"))?;
    if k.is_empty() {
        return Err(format!("attribute {s:?} has no name"));
    }
    Ok((k.to_string(), AttrValue::parse_loose(v)))
}

pub fn attrs_from(pairs: &[(String, AttrValue)]) -> Attributes {
    pairs.iter().cloned().collect()
}

/// Resolves on ctrl-c or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
