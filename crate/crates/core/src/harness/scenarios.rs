//! Stock experiment configurations shared by the bench CLI and the tests.

use super::sim::PullScenario;
use super::sweep::SweepConfig;
use super::workload::WorkloadSpec;

/// Paper seconds of full-cluster work queued by the throughput experiment.
pub const THROUGHPUT_BACKLOG_S: f64 = 1200.0;

/// 180 slots, uniform jobs of `duration_s`, time scale 10. The queue holds
/// enough jobs to keep every slot busy for twenty minutes plus one wave.
pub fn throughput(duration_s: f64) -> PullScenario {
    let base = PullScenario { hosts: 45, slots_per_host: 4, time_scale: 10.0, ..Default::default() };
    let waves = (THROUGHPUT_BACKLOG_S / duration_s).ceil() as u64 + 1;
    PullScenario { workload: WorkloadSpec::Uniform { count: base.slots() * waves, duration_s }, ..base }
}

/// 540 slots, 6,480 one-minute jobs and 1,620 six-minute jobs, time scale 10.
pub fn mixed() -> PullScenario {
    PullScenario {
        hosts: 135,
        slots_per_host: 4,
        time_scale: 10.0,
        workload: WorkloadSpec::Mixed { classes: vec![(6480, 60.0), (1620, 360.0)] },
        ..Default::default()
    }
}

/// 2,000 slots on ten 200-slot hosts, 20 pulses of 500 jobs (a quarter of
/// the slots) every five minutes, 150-minute jobs, time scale 50. Each pulse
/// targets one of 20 slot groups.
pub fn large_cluster() -> PullScenario {
    PullScenario {
        hosts: 10,
        slots_per_host: 200,
        time_scale: 50.0,
        slot_groups: Some(20),
        workload: WorkloadSpec::Pulsed { batch_count: 20, batch_size: 500, batch_interval_s: 300.0, duration_s: 9000.0 },
        ..Default::default()
    }
}

/// Overrides the cluster shape, keeping the workload.
pub fn with_cluster(mut sc: PullScenario, hosts: Option<u32>, slots: Option<u32>) -> PullScenario {
    if let Some(h) = hosts {
        sc.hosts = h.max(1);
    }
    if let Some(s) = slots {
        sc.slots_per_host = (s / sc.hosts).max(1);
    }
    sc
}

pub fn baseline_queue() -> SweepConfig {
    SweepConfig::default()
}
