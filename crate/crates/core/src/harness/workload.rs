use serde::{Deserialize, Serialize};

/// Shape of a submitted workload. Durations and times are paper-scale seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkloadSpec {
    Uniform { count: u64, duration_s: f64 },
    /// Job classes submitted in list order.
    Mixed { classes: Vec<(u64, f64)> },
    Pulsed { batch_count: u32, batch_size: u64, batch_interval_s: f64, duration_s: f64 },
}

/// One timed submit call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSubmit {
    pub at_s: f64,
    pub count: u64,
    pub duration_s: f64,
    /// Index of the pulse this call belongs to (0 for non-pulsed workloads).
    pub batch: u32,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        let bad_duration = |d: f64| !(d > 0.0 && d.is_finite());
        match self {
            WorkloadSpec::Uniform { duration_s, .. } if bad_duration(*duration_s) => Err("duration must be positive".into()),
            WorkloadSpec::Mixed { classes } if classes.iter().any(|(_, d)| bad_duration(*d)) => {
                Err("duration must be positive".into())
            }
            WorkloadSpec::Pulsed { batch_interval_s, duration_s, .. } => {
                if bad_duration(*duration_s) {
                    Err("duration must be positive".into())
                } else if batch_interval_s.is_nan() || *batch_interval_s <= 0.0 {
                    Err("batch interval must be positive".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn total_jobs(&self) -> u64 {
        match self {
            WorkloadSpec::Uniform { count, .. } => *count,
            WorkloadSpec::Mixed { classes } => classes.iter().map(|(n, _)| n).sum(),
            WorkloadSpec::Pulsed { batch_count, batch_size, .. } => u64::from(*batch_count) * batch_size,
        }
    }

    /// Sum of all job durations, seconds.
    pub fn total_work_s(&self) -> f64 {
        match self {
            WorkloadSpec::Uniform { count, duration_s } => *count as f64 * duration_s,
            WorkloadSpec::Mixed { classes } => classes.iter().map(|(n, d)| *n as f64 * d).sum(),
            WorkloadSpec::Pulsed { batch_count, batch_size, duration_s, .. } => {
                f64::from(*batch_count) * *batch_size as f64 * duration_s
            }
        }
    }

    pub fn mean_duration_s(&self) -> f64 {
        let n = self.total_jobs();
        if n == 0 {
            0.0
        } else {
            self.total_work_s() / n as f64
        }
    }
}

/// Deterministic submission plan. Empty classes produce no calls.
pub fn generate_workload(spec: &WorkloadSpec) -> Vec<PlannedSubmit> {
    let call = |at_s, count, duration_s, batch| PlannedSubmit { at_s, count, duration_s, batch };
    let plan: Vec<PlannedSubmit> = match spec {
        WorkloadSpec::Uniform { count, duration_s } => vec![call(0.0, *count, *duration_s, 0)],
        WorkloadSpec::Mixed { classes } => classes.iter().map(|(n, d)| call(0.0, *n, *d, 0)).collect(),
        WorkloadSpec::Pulsed { batch_count, batch_size, batch_interval_s, duration_s } => (0..*batch_count)
            .map(|k| call(f64::from(k) * batch_interval_s, *batch_size, *duration_s, k))
            .collect(),
    };
    plan.into_iter().filter(|p| p.count > 0).collect()
}

/// Turnover a fully busy cluster demands: slots divided by mean job length.
pub fn ideal_throughput(slots: u64, mean_duration_s: f64) -> f64 {
    slots as f64 / mean_duration_s
}
