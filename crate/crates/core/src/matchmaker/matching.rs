use tracing::warn;

use crate::model::{AttrValue, JobId, JobRecord, MachineRecord, VmId};

use super::eval::{is_satisfied, rank_of};
use super::expr::{parse_expression, Expression};

/// Name of the optional machine attribute holding the owner's requirements.
pub const MACHINE_REQUIREMENTS_ATTR: &str = "requirements";

struct Candidate<'a> {
    machine: &'a MachineRecord,
    requirements: Option<Expression>,
    used: bool,
}

fn machine_requirements(machine: &MachineRecord) -> Result<Option<Expression>, ()> {
    match machine.attributes.get(MACHINE_REQUIREMENTS_ATTR) {
        None => Ok(None),
        Some(AttrValue::Str(text)) => match parse_expression(text) {
            Ok(expr) => Ok(Some(expr)),
            Err(e) => {
                warn!(vm = %machine.vm_id, error = %e, "unparsable machine requirements; slot never matches");
                Err(())
            }
        },
        Some(AttrValue::Bool(true)) => Ok(None),
        Some(_) => Err(()),
    }
}

/// Greedy FIFO matching over jobs that are already in scheduling order.
///
/// For each job the eligible machine with the highest rank wins; ties go to
/// the smallest `vm_id`. Each machine is used at most once.
pub fn match_in_order<'a, I>(jobs: I, machines: &[&MachineRecord]) -> Vec<(JobId, VmId)>
where
    I: IntoIterator<Item = &'a JobRecord>,
{
    let mut candidates: Vec<Candidate<'_>> = machines
        .iter()
        .filter_map(|m| {
            machine_requirements(m).ok().map(|requirements| Candidate { machine: m, requirements, used: false })
        })
        .collect();
    candidates.sort_by(|a, b| a.machine.vm_id.cmp(&b.machine.vm_id));

    let mut remaining = candidates.len();
    let mut out = Vec::new();
    // Machines only get used up during a pass, so a job shape that found no
    // machine will not find one later in the same pass.
    let mut unmatched: Vec<&JobRecord> = Vec::new();
    for job in jobs {
        if remaining == 0 {
            break;
        }
        let same_shape = |j: &&JobRecord| {
            j.requirements == job.requirements && j.attributes == job.attributes && j.rank == job.rank
        };
        if unmatched.iter().any(same_shape) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (idx, c) in candidates.iter().enumerate() {
            if c.used || !is_satisfied(&job.requirements, &job.attributes, &c.machine.attributes) {
                continue;
            }
            if let Some(req) = &c.requirements {
                if !is_satisfied(req, &job.attributes, &c.machine.attributes) {
                    continue;
                }
            }
            let rank = job.rank.as_ref().map_or(0.0, |r| rank_of(r, &job.attributes, &c.machine.attributes));
            if best.is_none_or(|(_, b)| rank > b) {
                best = Some((idx, rank));
            }
            if job.rank.is_none() {
                // Every machine ranks equal; the first in vm_id order wins.
                break;
            }
        }
        if best.is_none() && unmatched.len() < 64 {
            unmatched.push(job);
        }
        if let Some((idx, _)) = best {
            candidates[idx].used = true;
            remaining -= 1;
            out.push((job.job_id, candidates[idx].machine.vm_id.clone()));
        }
    }
    out
}

/// Matches IDLE jobs to UNCLAIMED machines: jobs in `(submit_time, job_id)`
/// order, best-ranked eligible machine per job. Deterministic.
pub fn find_matches(idle_jobs: &[JobRecord], unclaimed: &[MachineRecord]) -> Vec<(JobId, VmId)> {
    let mut ordered: Vec<&JobRecord> = idle_jobs.iter().collect();
    ordered.sort_by_key(|j| (j.submit_time, j.job_id));
    let machines: Vec<&MachineRecord> = unclaimed.iter().collect();
    match_in_order(ordered, &machines)
}
