//! Push-baseline start rate as a function of queue length, measured on a real
//! (scaled) clock so that the queue manager's own work competes with its
//! tick schedule.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::ApiError;
use crate::baseline::{Baseline, BaselineConfig, ClaimApi, THROTTLE_WINDOW_S};
use crate::clock::{Clock, SystemClock};
use crate::model::{Attributes, JobDescriptor, JobId, Timestamp, VmId};
use crate::service::{ServiceError, SubmitRequest};
use crate::store::{Durability, Store, StoreOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub baseline: BaselineConfig,
    /// Queue lengths to hold, in order.
    pub queue_lengths: Vec<usize>,
    /// Paper seconds measured at each queue length.
    pub window_s: f64,
    /// Paper seconds run before each window to let the rate settle.
    pub settle_s: f64,
    pub slots: u32,
    pub job_duration_s: f64,
    /// Journal directory; in-memory store (no journal cost) when absent.
    pub journal_dir: Option<PathBuf>,
    pub durability: Durability,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            baseline: BaselineConfig { throttle: 2.0, time_scale: 50.0, compact_every: 20, ..Default::default() },
            queue_lengths: vec![10, 500, 1_000, 2_000, 4_000, 8_000, 16_000, 32_000, 64_000, 128_000],
            window_s: 60.0,
            settle_s: 10.0,
            slots: 1000,
            job_duration_s: 5.0,
            journal_dir: None,
            durability: Durability::Batched(Duration::from_millis(5)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub queue_length: usize,
    pub starts: u64,
    pub window_s: f64,
    /// Paper-scale starts per second.
    pub achieved_rate: f64,
    pub ticks: u64,
    pub compactions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub samples: Vec<SweepSample>,
    /// Start times in paper seconds, across all windows.
    pub start_times_s: Vec<f64>,
    /// 10-second windows (starting at each start) holding more starts than
    /// the throttle allows.
    pub throttle_violations: u64,
    pub lost_jobs: u64,
}

/// In-process slots: every claim succeeds and finishes after the job's
/// duration on the scaled clock.
struct LocalSlots {
    scale: f64,
    now: Timestamp,
    running: BinaryHeap<Reverse<(Timestamp, JobId)>>,
}

impl ClaimApi for LocalSlots {
    fn claim(&mut self, _vm_id: &VmId, job: &JobDescriptor) -> Result<bool, ApiError> {
        self.running.push(Reverse((self.now.plus_secs(job.duration_s / self.scale), job.job_id)));
        Ok(true)
    }
}

/// Counts starts inside any half-open window of `window_s` that exceed `limit`.
pub fn window_violations(start_times_s: &[f64], window_s: f64, limit: usize) -> u64 {
    let mut violations = 0;
    let mut hi = 0;
    for (lo, t) in start_times_s.iter().enumerate() {
        while hi < start_times_s.len() && start_times_s[hi] < t + window_s - 1e-9 {
            hi += 1;
        }
        if hi - lo > limit {
            violations += 1;
        }
    }
    violations
}

/// Holds the queue at each configured length and measures the achieved start
/// rate. Completed jobs are replaced immediately so the length stays put.
pub fn measure_throughput(config: &SweepConfig) -> Result<SweepOutcome, ServiceError> {
    let scale = config.baseline.time_scale;
    let options = StoreOptions { durability: config.durability, verify_full: false };
    let store = Arc::new(match &config.journal_dir {
        Some(dir) => Store::open(dir, options)?,
        None => Store::in_memory(options),
    });
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let mut b = Baseline::new(config.baseline.clone(), Arc::clone(&store), Arc::clone(&clock))?;
    for i in 0..config.slots {
        b.register_slot(VmId::new(format!("exec{:03}", i / 100), i % 100), Attributes::new())?;
    }
    let mut slots = LocalSlots { scale, now: clock.now(), running: BinaryHeap::new() };
    let tick = Duration::from_secs_f64(config.baseline.tick_period());
    let origin = clock.now();
    let paper = |t: Timestamp| (t.0 - origin.0) as f64 / 1e6 * scale;
    let mut out = SweepOutcome::default();
    let mut submitted = 0u64;

    for &target in &config.queue_lengths {
        let missing = target.saturating_sub(b.queue_len());
        if missing > 0 {
            submitted += b.submit(&SubmitRequest::new("sweep", config.job_duration_s, missing as u32))?.len() as u64;
        }
        let before = b.counters();
        let settle_until = clock.now().plus_secs(config.settle_s / scale);
        let end = settle_until.plus_secs(config.window_s / scale);
        let mut starts = 0u64;
        let mut next_tick = clock.now();
        let mut ticks_in_window = 0;
        loop {
            let now = clock.now();
            if now >= end {
                break;
            }
            if now >= next_tick {
                slots.now = now;
                let started = b.schedd_tick(now, &mut slots)?;
                if now >= settle_until {
                    starts += started.len() as u64;
                    ticks_in_window += 1;
                }
                out.start_times_s.extend(started.iter().map(|s| paper(s.at)));
                next_tick = now.plus_secs(tick.as_secs_f64());
            }
            let now = clock.now();
            while let Some(Reverse((at, job))) = slots.running.peek().copied() {
                if at > now {
                    break;
                }
                slots.running.pop();
                if b.handle_completion(job, 0)? {
                    submitted += b.submit(&SubmitRequest::new("sweep", config.job_duration_s, 1))?.len() as u64;
                }
            }
            let wake = slots.running.peek().map_or(next_tick, |Reverse((at, _))| (*at).min(next_tick)).min(end);
            let now = clock.now();
            if wake > now {
                std::thread::sleep(Duration::from_micros((wake.0 - now.0) as u64));
            }
        }
        let after = b.counters();
        out.samples.push(SweepSample {
            queue_length: target,
            starts,
            window_s: config.window_s,
            achieved_rate: starts as f64 / config.window_s,
            ticks: ticks_in_window,
            compactions: after.compactions - before.compactions,
        });
    }
    let limit = ((config.baseline.throttle * THROTTLE_WINDOW_S + 1e-9).floor() as usize).max(1);
    out.throttle_violations = window_violations(&out.start_times_s, THROTTLE_WINDOW_S, limit);
    let (sub, terminal, live) = b.store().read(|s| (s.submitted_count(), s.terminal_count(), s.tables().jobs.len() as u64));
    out.lost_jobs = sub.saturating_sub(terminal + live) + submitted.saturating_sub(sub);
    Ok(out)
}

pub fn render_sweep_csv(samples: &[SweepSample]) -> String {
    let mut out = String::from("queue_length,achieved_rate,starts,window_s,ticks,compactions\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{:.4},{},{},{},{}",
            s.queue_length, s.achieved_rate, s.starts, s.window_s, s.ticks, s.compactions
        );
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
