use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lifecycle events as they appear in an experiment log. `MatchExpired` has
/// no history record of its own; it is derived from the transaction stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogKind {
    Submitted,
    Matched,
    MatchExpired,
    Started,
    Completed,
    Dropped,
    Removed,
    MachineBoot,
}

/// One line of `events.log`. Times are paper-scale microseconds since the
/// experiment started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t_us: i64,
    pub event: LogKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm_id: Option<String>,
}

impl LogEvent {
    pub fn t_s(&self) -> f64 {
        self.t_us as f64 / 1e6
    }
}

/// Server-side measurement that is not part of the deterministic log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ServerSample {
    /// Wall-clock handling time of one heartbeat.
    Heartbeat { t_us: i64, latency_us: u64 },
    /// One committed store transaction.
    Txn { t_us: i64 },
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event {index} at {t_us} us precedes the previous event")]
    OutOfOrder { index: usize, t_us: i64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn parse_log(text: &str) -> Result<Vec<LogEvent>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| MetricsError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn render_log(events: &[LogEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 64);
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("log events serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// End of the interval, paper seconds.
    pub t_s: f64,
    pub idle: u64,
    pub matched: u64,
    pub running: u64,
    pub completed: u64,
    pub dropped: u64,
    /// Completions inside this interval.
    pub turnover: u64,
    pub hb_p50_ms: f64,
    pub hb_p99_ms: f64,
    pub removed: u64,
    pub submitted: u64,
    /// Store transactions committed inside this interval.
    pub txns: u64,
}

impl MetricsRow {
    pub fn conserved(&self) -> bool {
        self.idle + self.matched + self.running + self.completed + self.removed == self.submitted
    }
}

pub const CSV_HEADER: &str =
    "t_s,idle,matched,running,completed,dropped,turnover,hb_p50_ms,hb_p99_ms,removed,submitted,txns";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub makespan_s: f64,
    pub mean_throughput: f64,
    pub submitted: u64,
    pub completed: u64,
    pub removed: u64,
    pub dropped: u64,
    pub slots_with_drop: u64,
    pub hosts_with_drop: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub interval_s: f64,
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Matched,
    Running,
}

#[derive(Default)]
struct Census {
    phase: BTreeMap<u64, Phase>,
    idle: u64,
    matched: u64,
    running: u64,
    submitted: u64,
    completed: u64,
    removed: u64,
    dropped: u64,
}

impl Census {
    fn count(&mut self, p: Phase) -> &mut u64 {
        match p {
            Phase::Idle => &mut self.idle,
            Phase::Matched => &mut self.matched,
            Phase::Running => &mut self.running,
        }
    }

    fn set(&mut self, job: u64, to: Option<Phase>) {
        let from = match to {
            Some(p) => self.phase.insert(job, p),
            None => self.phase.remove(&job),
        };
        if let Some(f) = from {
            *self.count(f) -= 1;
        }
        if let Some(t) = to {
            *self.count(t) += 1;
        }
    }

    fn apply(&mut self, e: &LogEvent) {
        let Some(job) = e.job_id else { return };
        match e.event {
            LogKind::Submitted => {
                self.submitted += 1;
                self.set(job, Some(Phase::Idle));
            }
            LogKind::Matched => self.set(job, Some(Phase::Matched)),
            LogKind::MatchExpired => self.set(job, Some(Phase::Idle)),
            LogKind::Started => self.set(job, Some(Phase::Running)),
            LogKind::Dropped => {
                self.dropped += 1;
                self.set(job, Some(Phase::Idle));
            }
            LogKind::Completed => {
                self.completed += 1;
                self.set(job, None);
            }
            LogKind::Removed => {
                self.removed += 1;
                self.set(job, None);
            }
            LogKind::MachineBoot => {}
        }
    }
}

fn interval_index(t_us: i64, interval_us: i64) -> usize {
    if t_us <= 0 {
        0
    } else {
        ((t_us + interval_us - 1) / interval_us - 1) as usize
    }
}

/// Nearest-rank percentile of an unsorted sample, or 0 when empty.
pub fn percentile(samples: &mut [u64], q: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    samples.sort_unstable();
    let rank = ((q * samples.len() as f64).ceil() as usize).clamp(1, samples.len());
    samples[rank - 1]
}

/// Aggregates a time-ordered log into per-interval rows. Interval `i` covers
/// `(i * interval, (i + 1) * interval]`, with time zero in the first.
pub fn compute_metrics(events: &[LogEvent], interval_s: f64) -> Result<MetricsSeries, MetricsError> {
    let interval_us = ((interval_s * 1e6).round() as i64).max(1);
    let mut rows = Vec::new();
    let mut census = Census::default();
    let mut turnover = 0;
    let mut current = 0usize;
    let mut prev_t = i64::MIN;
    let mut first_submit = None;
    let mut last_complete = None;
    let mut drop_slots = BTreeSet::new();
    let flush = |rows: &mut Vec<MetricsRow>, c: &Census, idx: usize, turnover: u64| {
        rows.push(MetricsRow {
            t_s: (idx as i64 + 1) as f64 * interval_us as f64 / 1e6,
            idle: c.idle,
            matched: c.matched,
            running: c.running,
            completed: c.completed,
            dropped: c.dropped,
            turnover,
            removed: c.removed,
            submitted: c.submitted,
            ..Default::default()
        });
    };
    for (index, e) in events.iter().enumerate() {
        if e.t_us < prev_t {
            return Err(MetricsError::OutOfOrder { index, t_us: e.t_us });
        }
        prev_t = e.t_us;
        let idx = interval_index(e.t_us, interval_us);
        while current < idx {
            flush(&mut rows, &census, current, turnover);
            turnover = 0;
            current += 1;
        }
        census.apply(e);
        match e.event {
            LogKind::Submitted if first_submit.is_none() => first_submit = Some(e.t_us),
            LogKind::Completed => {
                turnover += 1;
                last_complete = Some(e.t_us);
            }
            LogKind::Dropped => {
                if let Some(vm) = &e.vm_id {
                    drop_slots.insert(vm.clone());
                }
            }
            _ => {}
        }
    }
    if !events.is_empty() {
        flush(&mut rows, &census, current, turnover);
    }
    let makespan_s = match (first_submit, last_complete) {
        (Some(a), Some(b)) if b > a => (b - a) as f64 / 1e6,
        _ => 0.0,
    };
    let hosts: BTreeSet<&str> = drop_slots.iter().map(|vm| vm.rsplit_once('/').map_or(vm.as_str(), |(h, _)| h)).collect();
    let summary = Summary {
        makespan_s,
        mean_throughput: if makespan_s > 0.0 { census.completed as f64 / makespan_s } else { 0.0 },
        submitted: census.submitted,
        completed: census.completed,
        removed: census.removed,
        dropped: census.dropped,
        slots_with_drop: drop_slots.len() as u64,
        hosts_with_drop: hosts.len() as u64,
    };
    Ok(MetricsSeries { interval_s, rows, summary })
}

/// Folds heartbeat latencies and transaction counts into the matching rows.
/// Samples past the last row extend the series with carried-forward counts.
pub fn attach_server_samples(series: &mut MetricsSeries, samples: &[ServerSample]) {
    let interval_us = ((series.interval_s * 1e6).round() as i64).max(1);
    let mut latencies: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut txns: BTreeMap<usize, u64> = BTreeMap::new();
    for s in samples {
        match *s {
            ServerSample::Heartbeat { t_us, latency_us } => {
                latencies.entry(interval_index(t_us, interval_us)).or_default().push(latency_us)
            }
            ServerSample::Txn { t_us } => *txns.entry(interval_index(t_us, interval_us)).or_default() += 1,
        }
    }
    let last = latencies.keys().chain(txns.keys()).max().copied();
    if let Some(last) = last {
        while series.rows.len() <= last {
            let mut row = series.rows.last().cloned().unwrap_or_default();
            row.turnover = 0;
            row.t_s = (series.rows.len() as i64 + 1) as f64 * interval_us as f64 / 1e6;
            series.rows.push(row);
        }
    }
    for (i, row) in series.rows.iter_mut().enumerate() {
        if let Some(l) = latencies.get_mut(&i) {
            row.hb_p50_ms = percentile(l, 0.50) as f64 / 1e3;
            row.hb_p99_ms = percentile(l, 0.99) as f64 / 1e3;
        }
        row.txns = txns.get(&i).copied().unwrap_or(0);
    }
}

/// Rate of job starts once every slot is busy: starts after the cluster first
/// fills, up to the last start, divided by that span. `None` if the cluster
/// never fills or nothing starts after it does.
pub fn steady_state_throughput(events: &[LogEvent], slots: u64) -> Option<f64> {
    let mut census = Census::default();
    let mut t_full = None;
    let mut starts_after = Vec::new();
    for e in events {
        census.apply(e);
        if t_full.is_none() && census.running >= slots {
            t_full = Some(e.t_us);
            continue;
        }
        if let (Some(full), LogKind::Started) = (t_full, e.event) {
            if e.t_us > full {
                starts_after.push(e.t_us);
            }
        }
    }
    let full = t_full?;
    let last = *starts_after.last()?;
    Some(starts_after.len() as f64 / ((last - full) as f64 / 1e6))
}

fn fmt_f(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn render_csv(series: &MetricsSeries) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &series.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f(r.t_s),
            r.idle,
            r.matched,
            r.running,
            r.completed,
            r.dropped,
            r.turnover,
            fmt_f(r.hb_p50_ms),
            fmt_f(r.hb_p99_ms),
            r.removed,
            r.submitted,
            r.txns
        );
    }
    out
}

/// Whitespace-separated plot data: the CSV columns plus the ideal turnover
/// per interval and the achieved turnover rate per second.
pub fn render_gnuplot(series: &MetricsSeries, ideal_rate: f64) -> String {
    let mut out = format!("# {} ideal_per_interval achieved_rate\n", CSV_HEADER.replace(',', " "));
    for line in render_csv(series).lines().skip(1) {
        let turnover: f64 = line.split(',').nth(6).and_then(|v| v.parse().ok()).unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{} {} {}",
            line.replace(',', " "),
            fmt_f(ideal_rate * series.interval_s),
            fmt_f(turnover / series.interval_s)
        );
    }
    out
}

/// One point of the throughput-versus-job-length experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPoint {
    pub job_length_s: f64,
    pub ideal_rate: f64,
    pub achieved_rate: f64,
}

pub fn render_throughput_table(points: &[ThroughputPoint]) -> String {
    let mut out = String::from("job_length_s,ideal_rate,achieved_rate\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", fmt_f(p.job_length_s), fmt_f(p.ideal_rate), fmt_f(p.achieved_rate));
    }
    out
}

pub fn emit_report(series: &MetricsSeries, ideal_rate: Option<f64>, dir: &Path) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), render_csv(series))?;
    if let Some(rate) = ideal_rate {
        std::fs::write(dir.join("metrics.dat"), render_gnuplot(series, rate))?;
    }
    Ok(())
}
