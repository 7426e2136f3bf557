//! Task profiling and the service scheduler.
//!
//! Every scheduler tick, ready tasks are ordered real-time first by earliest
//! deadline, then batch in arrival order, and each is list-scheduled onto
//! the VM that has been available longest among those with a free core.
//! Tasks that fit nowhere stay buffered for a later tick.
//!
//! Real-time tasks whose projected finish slips past their deadline may be
//! migrated once to another VM with idle cores, provided the move makes the
//! deadline and strictly improves the finish time.

use std::fmt;

use crate::snn::{workload_cost, TaskShape};
use crate::sim::SimTime;
use crate::virt::VmId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtClass {
    RealTime { deadline: SimTime },
    Batch,
}

impl RtClass {
    pub fn deadline(&self) -> Option<SimTime> {
        match *self {
            RtClass::RealTime { deadline } => Some(deadline),
            RtClass::Batch => None,
        }
    }

    pub fn is_realtime(&self) -> bool {
        matches!(self, RtClass::RealTime { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Synaptic operations.
    pub compute_demand: u64,
    /// Fraction of the work that spreads across cores, in `[0, 1]`.
    pub parallelizability: f64,
    pub data_size: u64,
    pub rt_class: RtClass,
    pub arrival: SimTime,
    /// Spiking workload backing the demand, when the task came from a shape.
    pub shape: Option<TaskShape>,
}

/// Unprofiled task description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawTask {
    pub shape: TaskShape,
    pub data_size: u64,
    pub rt_class: RtClass,
    pub arrival: SimTime,
}

pub fn profile(id: TaskId, raw: &RawTask, neurons_per_core: u32) -> TaskSpec {
    TaskSpec {
        id,
        compute_demand: workload_cost(raw.shape),
        parallelizability: (raw.shape.fan_in as f64 / neurons_per_core as f64).min(1.0),
        data_size: raw.data_size,
        rt_class: raw.rt_class,
        arrival: raw.arrival,
        shape: Some(raw.shape),
    }
}

/// Amdahl-style execution time: `demand * ((1 - p) + p / cores) / rate`,
/// rounded up to whole ticks. `core_rate` is synaptic ops per tick.
pub fn exec_time_for(demand: u64, parallelizability: f64, cores: u32, core_rate: f64) -> SimTime {
    assert!(cores >= 1, "at least one core");
    let p = parallelizability.clamp(0.0, 1.0);
    let ticks = demand as f64 * ((1.0 - p) + p / cores as f64) / core_rate;
    // Absorb representation error so exact products do not round up a tick.
    SimTime((ticks - 1e-9).ceil().max(0.0) as u64)
}

pub fn exec_time(task: &TaskSpec, cores: u32, core_rate: f64) -> SimTime {
    exec_time_for(task.compute_demand, task.parallelizability, cores, core_rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedParams {
    pub tick: SimTime,
    pub migration_penalty: SimTime,
    /// Synaptic ops per core per tick.
    pub core_rate: f64,
}

impl Default for SchedParams {
    fn default() -> Self {
        SchedParams {
            tick: SimTime::from_micros(100),
            migration_penalty: SimTime::from_millis(1),
            core_rate: 1.0,
        }
    }
}

/// Scheduler's view of one VM.
#[derive(Debug, Clone, PartialEq)]
pub struct VmView {
    pub vm: VmId,
    pub cores_owned: u32,
    pub cores_free: u32,
    /// When the VM last had a core freed.
    pub available_since: SimTime,
    /// End of any reconfiguration stall; `ZERO` when not stalled.
    pub stalled_until: SimTime,
    /// False when the VM has no usable compute module.
    pub schedulable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub task: TaskId,
    pub vm: VmId,
    pub cores: u32,
    pub start: SimTime,
    pub projected_finish: SimTime,
}

/// Scheduler's view of a task in execution.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningView {
    pub task: TaskSpec,
    pub vm: VmId,
    pub cores: u32,
    pub start: SimTime,
    pub projected_finish: SimTime,
    /// Pure execution time on the current VM, excluding stalls.
    pub exec_total: SimTime,
    pub migrated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Migration {
    pub task: TaskId,
    pub from: VmId,
    pub to: VmId,
    pub at: SimTime,
    pub penalty: SimTime,
    pub cores: u32,
    pub remaining_demand: u64,
    pub old_finish: SimTime,
    pub new_finish: SimTime,
}

fn cores_wanted(task: &TaskSpec, free: u32) -> u32 {
    if task.parallelizability > 0.0 {
        free
    } else {
        1
    }
}

/// Priority key: real-time by deadline, then batch by arrival.
fn order_key(t: &TaskSpec) -> (u8, SimTime, SimTime, TaskId) {
    match t.rt_class {
        RtClass::RealTime { deadline } => (0, deadline, t.arrival, t.id),
        RtClass::Batch => (1, t.arrival, SimTime::ZERO, t.id),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    queue: Vec<TaskSpec>,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, task: TaskSpec) {
        self.queue.push(task);
    }

    pub fn queued(&self) -> &[TaskSpec] {
        &self.queue
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn schedule_tick(
        &mut self,
        now: SimTime,
        vms: &mut [VmView],
        params: &SchedParams,
    ) -> Vec<(Assignment, TaskSpec)> {
        let mut ready: Vec<TaskSpec> = Vec::new();
        let mut waiting: Vec<TaskSpec> = Vec::new();
        for t in self.queue.drain(..) {
            if t.arrival <= now {
                ready.push(t);
            } else {
                waiting.push(t);
            }
        }
        ready.sort_by_key(order_key);

        let mut out = Vec::new();
        for task in ready {
            let choice = vms
                .iter_mut()
                .filter(|v| v.schedulable && v.cores_free >= 1)
                .min_by_key(|v| (now.max(v.stalled_until), v.available_since, v.vm));
            match choice {
                Some(v) => {
                    let cores = cores_wanted(&task, v.cores_free);
                    v.cores_free -= cores;
                    let start = now.max(v.stalled_until);
                    let assignment = Assignment {
                        task: task.id,
                        vm: v.vm,
                        cores,
                        start,
                        projected_finish: start + exec_time(&task, cores, params.core_rate),
                    };
                    out.push((assignment, task));
                }
                None => waiting.push(task),
            }
        }
        waiting.sort_by_key(|t| t.id);
        self.queue = waiting;
        out
    }
}

/// Plans migrations for real-time tasks projected to miss their deadline.
/// `vms` is updated to reflect the planned moves.
pub fn rebalance_on_contention(
    now: SimTime,
    running: &[RunningView],
    vms: &mut [VmView],
    params: &SchedParams,
) -> Vec<Migration> {
    let mut late: Vec<&RunningView> = running
        .iter()
        .filter(|r| !r.migrated)
        .filter(|r| matches!(r.task.rt_class.deadline(), Some(d) if r.projected_finish > d))
        .collect();
    late.sort_by_key(|r| (r.task.rt_class.deadline(), r.task.id));

    let mut out = Vec::new();
    for r in late {
        let deadline = r.task.rt_class.deadline().expect("filtered");
        let source_stall = vms
            .iter()
            .find(|v| v.vm == r.vm)
            .map(|v| v.stalled_until)
            .unwrap_or(SimTime::ZERO);
        let work_left = r.projected_finish.saturating_sub(now.max(source_stall));
        let remaining_demand = if r.exec_total.0 == 0 {
            0
        } else {
            let frac = (work_left.0 as f64 / r.exec_total.0 as f64).min(1.0);
            (r.task.compute_demand as f64 * frac).ceil() as u64
        };
        let best = vms
            .iter()
            .filter(|v| v.vm != r.vm && v.schedulable && v.cores_free >= 1 && v.stalled_until <= now)
            .map(|v| {
                let cores = cores_wanted(&r.task, v.cores_free);
                let finish = now
                    + params.migration_penalty
                    + exec_time_for(remaining_demand, r.task.parallelizability, cores, params.core_rate);
                (finish, v.vm, cores)
            })
            .min();
        let Some((new_finish, to, cores)) = best else {
            continue;
        };
        if new_finish > deadline || new_finish >= r.projected_finish {
            continue;
        }
        for v in vms.iter_mut() {
            if v.vm == to {
                v.cores_free -= cores;
            } else if v.vm == r.vm {
                v.cores_free = (v.cores_free + r.cores).min(v.cores_owned);
            }
        }
        out.push(Migration {
            task: r.task.id,
            from: r.vm,
            to,
            at: now,
            penalty: params.migration_penalty,
            cores,
            remaining_demand,
            old_finish: r.projected_finish,
            new_finish,
        });
    }
    out
}
