//! Data-centric batch cluster management.
//!
//! A single scheduler service keeps all operational state in a journaled tuple
//! store. Execute nodes pull work: every piece of agent-bound data rides on the
//! response to a heartbeat the agent sent. A Condor-style push scheduler is
//! included as the experimental contrast, along with the harness that drives
//! both.

pub mod agent;
pub mod baseline;
pub mod clock;
pub mod harness;
pub mod matchmaker;
pub mod model;
pub mod service;
pub mod store;
