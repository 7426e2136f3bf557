//! The composed simulation: hypervisor, I/O driver and service scheduler
//! driven by one event engine.
//!
//! Reconfiguration stalls are applied when a reconfiguration starts. Every
//! pending completion owned by a stalled VM (transfer completions, spike
//! steps, task completions) is pushed back by the reconfiguration's
//! duration, and work submitted to a stalled VM starts when the stall ends.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::fabric::{Fabric, FabricConfig, FabricError, ResourceVector};
use crate::io::{Direction, IoDriver, IoError, LinkModel, RingId, TransferDescriptor, TransferId};
use crate::metrics::{task_energy, EnergyModel, MetricSample};
use crate::sched::{
    exec_time_for, rebalance_on_contention, Assignment, Migration, RunningView, SchedParams,
    Scheduler, TaskId, TaskSpec, VmView,
};
use crate::sim::{Engine, EventId, SimEvent, SimTime, TracePayload};
use crate::snn::{LifParams, Workload};
use crate::virt::{
    Hypervisor, ModuleId, ModuleKind, Priority, ReconfigId, ReconfigMode, ReconfigParams,
    ReconfigRecord, VirtError, VmId,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    TransferComplete { transfer: TransferId, vm: VmId },
    StreamStart { stream: usize },
    ReconfigStart { record: ReconfigId },
    ReconfigDone { record: ReconfigId },
    SpikeStep { task: TaskId, vm: VmId },
    TaskDone { task: TaskId, vm: VmId },
    SchedulerTick,
    Sample,
}

impl TracePayload for Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::TransferComplete { .. } => "TransferComplete",
            Event::StreamStart { .. } => "StreamStart",
            Event::ReconfigStart { .. } => "ReconfigStart",
            Event::ReconfigDone { .. } => "ReconfigDone",
            Event::SpikeStep { .. } => "SpikeStep",
            Event::TaskDone { .. } => "TaskDone",
            Event::SchedulerTick => "SchedulerTick",
            Event::Sample => "Sample",
        }
    }

    fn detail(&self) -> String {
        match self {
            Event::TransferComplete { transfer, vm } => format!("{vm} xfer={}", transfer.0),
            Event::StreamStart { stream } => format!("stream={stream}"),
            Event::ReconfigStart { record } | Event::ReconfigDone { record } => {
                format!("reconfig={}", record.0)
            }
            Event::SpikeStep { task, vm } | Event::TaskDone { task, vm } => format!("{vm} {task}"),
            Event::SchedulerTick | Event::Sample => String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SystemConfig {
    pub fabric: FabricConfig,
    pub link: LinkModel,
    pub reconfig: ReconfigParams,
    pub sched: SchedParams,
    pub energy: EnergyModel,
    pub lif: LifParams,
}

/// Identifies a completed unit of work independently of event ids, so runs
/// with different event interleavings can be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorkKey {
    Task(TaskId),
    Transfer { stream: usize, index: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub vm: VmId,
    pub key: WorkKey,
    pub started: SimTime,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRecord {
    /// Tick at which the scheduler made the decision.
    pub tick: SimTime,
    pub assignment: Assignment,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapStep {
    pub unload: Option<ModuleId>,
    pub load: ModuleId,
    pub mode: ReconfigMode,
}

#[derive(Debug, Clone)]
struct Stream {
    vm: VmId,
    ring: RingId,
    size: u64,
    direction: Direction,
    remaining: u32,
    next_index: u32,
    live: bool,
}

#[derive(Debug, Clone)]
struct RunningTask {
    spec: TaskSpec,
    vm: VmId,
    cores: u32,
    start: SimTime,
    projected_finish: SimTime,
    exec_total: SimTime,
    demand_left: u64,
    migrated: bool,
    event: EventId,
    step_interval: SimTime,
    workload: Option<Workload>,
}

#[derive(Debug, Clone, Copy)]
struct VmRuntime {
    cores_free: u32,
    available_since: SimTime,
}

pub struct System {
    engine: Engine<Event>,
    hv: Hypervisor,
    io: IoDriver,
    scheduler: Scheduler,
    config: SystemConfig,
    vm_rt: BTreeMap<VmId, VmRuntime>,
    running: BTreeMap<TaskId, RunningTask>,
    /// Pending events that belong to a VM and move with its stalls.
    owned: BTreeMap<EventId, VmId>,
    streams: Vec<Stream>,
    transfer_origin: BTreeMap<TransferId, (usize, u32, EventId)>,
    retry: BTreeSet<usize>,
    swap_plans: BTreeMap<VmId, VecDeque<SwapStep>>,
    tick_pending: Option<(EventId, SimTime)>,
    completions: Vec<Completion>,
    assignments: Vec<AssignmentRecord>,
    migrations: Vec<Migration>,
    reconfigs: Vec<ReconfigRecord>,
    samples: Vec<MetricSample>,
    sample_period: Option<SimTime>,
    bits_completed: u128,
    bits_at_last_sample: u128,
    last_sample: SimTime,
    synaptic_ops: u64,
    spikes: u64,
    dynamic_mj: f64,
}

impl System {
    pub fn new(config: SystemConfig, seed: u64, trace: bool) -> Result<Self, SystemError> {
        config.lif.validate().map_err(|e| SystemError::Config(e.to_string()))?;
        config.energy.validate().map_err(SystemError::Config)?;
        if config.sched.core_rate.is_nan() || config.sched.core_rate <= 0.0 || config.sched.tick.0 == 0 {
            return Err(SystemError::Config(
                "scheduler tick and core rate must be positive".into(),
            ));
        }
        if config.reconfig.config_port_bytes_per_s == 0 {
            return Err(SystemError::Config("config port bandwidth must be positive".into()));
        }
        let fabric = Fabric::new(config.fabric.clone())?;
        let io = IoDriver::new(config.link.clone())?;
        let engine = if trace {
            Engine::new(seed).with_trace()
        } else {
            Engine::new(seed)
        };
        Ok(System {
            engine,
            hv: Hypervisor::new(fabric, config.reconfig),
            io,
            scheduler: Scheduler::new(),
            config,
            vm_rt: BTreeMap::new(),
            running: BTreeMap::new(),
            owned: BTreeMap::new(),
            streams: Vec::new(),
            transfer_origin: BTreeMap::new(),
            retry: BTreeSet::new(),
            swap_plans: BTreeMap::new(),
            tick_pending: None,
            completions: Vec::new(),
            assignments: Vec::new(),
            migrations: Vec::new(),
            reconfigs: Vec::new(),
            samples: Vec::new(),
            sample_period: None,
            bits_completed: 0,
            bits_at_last_sample: 0,
            last_sample: SimTime::ZERO,
            synaptic_ops: 0,
            spikes: 0,
            dynamic_mj: 0.0,
        })
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn hypervisor(&self) -> &Hypervisor {
        &self.hv
    }

    pub fn hypervisor_mut(&mut self) -> &mut Hypervisor {
        &mut self.hv
    }

    pub fn io(&self) -> &IoDriver {
        &self.io
    }

    pub fn engine_mut(&mut self) -> &mut Engine<Event> {
        &mut self.engine
    }

    pub fn completions(&self) -> &[Completion] {
        &self.completions
    }

    pub fn assignments(&self) -> &[AssignmentRecord] {
        &self.assignments
    }

    pub fn migrations(&self) -> &[Migration] {
        &self.migrations
    }

    /// Reconfigurations that have finished, in completion order.
    pub fn reconfigs(&self) -> &[ReconfigRecord] {
        &self.reconfigs
    }

    pub fn samples(&self) -> &[MetricSample] {
        &self.samples
    }

    pub fn synaptic_ops(&self) -> u64 {
        self.synaptic_ops
    }

    pub fn spikes(&self) -> u64 {
        self.spikes
    }

    pub fn dynamic_energy_mj(&self) -> f64 {
        self.dynamic_mj
    }

    pub fn running_tasks(&self) -> usize {
        self.running.len()
    }

    pub fn queued_tasks(&self) -> usize {
        self.scheduler.queued().len()
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        self.engine.take_trace()
    }

    pub fn register_module(
        &mut self,
        name: &str,
        kind: ModuleKind,
        fraction: f64,
    ) -> Result<ModuleId, SystemError> {
        Ok(self.hv.register_module_fraction(name, kind, fraction)?)
    }

    /// Allocates a slot, wraps it in a VM and attaches one default I/O ring.
    pub fn create_vm(
        &mut self,
        request: ResourceVector,
        priority: Priority,
    ) -> Result<VmId, SystemError> {
        let vm = self.hv.create_vm(request, priority)?;
        let ring = self.io.open_ring(vm);
        let cores = self.hv.vm(vm).expect("just created").cores;
        self.hv.vm_mut(vm).expect("just created").rings.push(ring);
        self.vm_rt.insert(
            vm,
            VmRuntime {
                cores_free: cores,
                available_since: self.now(),
            },
        );
        Ok(vm)
    }

    pub fn destroy_vm(&mut self, vm: VmId) -> Result<(), SystemError> {
        let removed = self.hv.destroy_vm(vm)?;
        for ring in removed.rings {
            for t in self.io.close_ring(ring)? {
                if let Some((_, _, ev)) = self.transfer_origin.remove(&t.id) {
                    self.engine.cancel(ev);
                    self.owned.remove(&ev);
                }
            }
        }
        for s in self.streams.iter_mut().filter(|s| s.vm == vm) {
            s.live = false;
        }
        let evicted: Vec<TaskId> = self
            .running
            .iter()
            .filter(|(_, r)| r.vm == vm)
            .map(|(&id, _)| id)
            .collect();
        for id in evicted {
            let r = self.running.remove(&id).expect("present");
            self.engine.cancel(r.event);
            self.owned.remove(&r.event);
            self.scheduler.enqueue(r.spec);
        }
        self.vm_rt.remove(&vm);
        self.swap_plans.remove(&vm);
        self.ensure_tick();
        Ok(())
    }

    pub fn preload_module(&mut self, vm: VmId, module: ModuleId) -> Result<(), SystemError> {
        self.hv.preload_module(vm, module)?;
        self.ensure_tick();
        Ok(())
    }

    /// Requests a reconfiguration loading `module` into `vm`.
    pub fn load_module(
        &mut self,
        vm: VmId,
        module: ModuleId,
        mode: ReconfigMode,
    ) -> Result<ReconfigRecord, SystemError> {
        let rec = self.hv.load_module(self.now(), vm, module, mode)?;
        self.engine
            .schedule(Event::ReconfigStart { record: rec.id }, rec.started_at)
            .expect("reservation is never in the past");
        Ok(rec)
    }

    pub fn unload_module(&mut self, vm: VmId, module: ModuleId) -> Result<(), SystemError> {
        self.hv.unload_module(vm, module)?;
        Ok(())
    }

    /// Queues module swaps for `vm`, each issued when the previous one
    /// finishes.
    pub fn plan_swaps(&mut self, vm: VmId, steps: Vec<SwapStep>) -> Result<(), SystemError> {
        if self.hv.vm(vm).is_none() {
            return Err(VirtError::VmUnknown(vm).into());
        }
        let plan = self.swap_plans.entry(vm).or_default();
        let idle = plan.is_empty();
        plan.extend(steps);
        if idle && !self.hv.is_busy(vm) {
            self.issue_next_swap(vm)?;
        }
        Ok(())
    }

    fn issue_next_swap(&mut self, vm: VmId) -> Result<(), SystemError> {
        let Some(step) = self.swap_plans.get_mut(&vm).and_then(|p| p.pop_front()) else {
            return Ok(());
        };
        if let Some(old) = step.unload {
            self.hv.unload_module(vm, old)?;
        }
        self.load_module(vm, step.load, step.mode)?;
        Ok(())
    }

    pub fn submit_task(&mut self, task: TaskSpec) {
        self.scheduler.enqueue(task);
        self.ensure_tick();
    }

    /// Adds a stream of `count` back-to-back transfers from `vm`'s default
    /// ring, starting at `at`. Returns the stream index used in [`WorkKey`].
    pub fn add_stream(
        &mut self,
        vm: VmId,
        size: u64,
        count: u32,
        direction: Direction,
        at: SimTime,
    ) -> Result<usize, SystemError> {
        if size == 0 {
            return Err(IoError::EmptyTransfer.into());
        }
        let ring = *self
            .hv
            .vm(vm)
            .ok_or(VirtError::VmUnknown(vm))?
            .rings
            .first()
            .expect("default ring");
        let idx = self.streams.len();
        self.streams.push(Stream {
            vm,
            ring,
            size,
            direction,
            remaining: count,
            next_index: 0,
            live: true,
        });
        if at <= self.now() {
            self.submit_from_stream(idx);
        } else {
            self.engine
                .schedule(Event::StreamStart { stream: idx }, at)
                .expect("future");
        }
        Ok(idx)
    }

    /// Samples metrics every `period`, starting one period from now.
    pub fn start_sampling(&mut self, period: SimTime) {
        assert!(period.0 > 0);
        self.sample_period = Some(period);
        self.last_sample = self.now();
        self.engine.schedule_in(Event::Sample, period);
    }

    pub fn sample(&self) -> MetricSample {
        let (full, partial) = self.hv.reconfig_accumulators();
        let elapsed = self.now().saturating_sub(self.last_sample).as_secs_f64();
        let bits = (self.bits_completed - self.bits_at_last_sample) as f64;
        MetricSample {
            at: self.now(),
            utilization: self.hv.fabric().utilization(),
            throughput_gibs: if elapsed > 0.0 {
                bits / elapsed / crate::io::GIBIBIT
            } else {
                0.0
            },
            energy_mj: self.dynamic_mj,
            reconfig_full: full,
            reconfig_partial: partial,
        }
    }

    /// Processes every event up to and including `t_end`.
    pub fn run_until(&mut self, t_end: SimTime) -> u64 {
        let mut n = 0;
        while let Some(ev) = self.engine.pop_until(t_end) {
            self.handle(ev);
            n += 1;
        }
        self.engine.advance_to(t_end);
        n
    }

    /// Runs until the queue is empty or `limit` is reached. Returns the time
    /// of the last processed event.
    pub fn run_to_completion(&mut self, limit: SimTime) -> SimTime {
        let mut last = self.now();
        while let Some(ev) = self.engine.pop_until(limit) {
            last = ev.fire_at;
            self.handle(ev);
        }
        last
    }

    fn handle(&mut self, ev: SimEvent<Event>) {
        self.owned.remove(&ev.seq);
        match ev.payload {
            Event::TransferComplete { transfer, .. } => self.on_transfer_complete(transfer),
            Event::StreamStart { stream } => self.submit_from_stream(stream),
            Event::ReconfigStart { record } => self.on_reconfig_start(record),
            Event::ReconfigDone { record } => self.on_reconfig_done(record),
            Event::SpikeStep { task, .. } => self.on_spike_step(task),
            Event::TaskDone { task, .. } => self.on_task_done(task),
            Event::SchedulerTick => self.on_tick(),
            Event::Sample => {
                let s = self.sample();
                self.samples.push(s);
                self.bits_at_last_sample = self.bits_completed;
                self.last_sample = self.now();
                if let Some(p) = self.sample_period {
                    self.engine.schedule_in(Event::Sample, p);
                }
            }
        }
    }

    fn schedule_owned(&mut self, payload: Event, at: SimTime, vm: VmId) -> EventId {
        let id = self.engine.schedule(payload, at).expect("owned events are never in the past");
        self.owned.insert(id, vm);
        id
    }

    fn submit_from_stream(&mut self, idx: usize) {
        let s = &self.streams[idx];
        if !s.live || s.remaining == 0 {
            return;
        }
        let desc = TransferDescriptor {
            vm: s.vm,
            size: s.size,
            direction: s.direction,
            submitted_at: self.now(),
        };
        let (ring, vm) = (s.ring, s.vm);
        let not_before = self.hv.stalled_until(vm).unwrap_or(SimTime::ZERO);
        match self.io.submit(ring, desc, not_before) {
            Ok(t) => {
                let ev = self.schedule_owned(
                    Event::TransferComplete {
                        transfer: t.id,
                        vm,
                    },
                    t.completion,
                    vm,
                );
                let s = &mut self.streams[idx];
                self.transfer_origin.insert(t.id, (idx, s.next_index, ev));
                s.remaining -= 1;
                s.next_index += 1;
            }
            Err(IoError::Backpressure(_)) => {
                self.retry.insert(idx);
                self.ensure_tick();
            }
            Err(_) => self.streams[idx].live = false,
        }
    }

    fn on_transfer_complete(&mut self, id: TransferId) {
        let Some(t) = self.io.complete(id) else {
            return;
        };
        let (stream, index, _) = self.transfer_origin.remove(&id).expect("tracked transfer");
        self.bits_completed += t.desc.size as u128 * 8;
        self.completions.push(Completion {
            vm: t.desc.vm,
            key: WorkKey::Transfer { stream, index },
            started: t.desc.submitted_at,
            at: self.now(),
        });
        self.submit_from_stream(stream);
    }

    fn on_reconfig_start(&mut self, id: ReconfigId) {
        let Some((rec, stalled)) = self.hv.begin_reconfig(id) else {
            return;
        };
        let stalled: BTreeSet<VmId> = stalled.into_iter().collect();
        let d = rec.duration;
        let moving: Vec<(EventId, VmId)> = self
            .owned
            .iter()
            .filter(|(_, vm)| stalled.contains(vm))
            .map(|(&e, &vm)| (e, vm))
            .collect();
        for (old, vm) in moving {
            self.owned.remove(&old);
            let Some((at, payload)) = self.engine.cancel(old) else {
                continue;
            };
            match &payload {
                Event::TransferComplete { transfer, .. } => {
                    self.io.delay(*transfer, d);
                    let new = self.schedule_owned(payload.clone(), at + d, vm);
                    if let Some(o) = self.transfer_origin.get_mut(transfer) {
                        o.2 = new;
                    }
                }
                Event::SpikeStep { task, .. } | Event::TaskDone { task, .. } => {
                    let task = *task;
                    let new = self.schedule_owned(payload.clone(), at + d, vm);
                    if let Some(r) = self.running.get_mut(&task) {
                        r.event = new;
                        r.projected_finish += d;
                    }
                }
                _ => {
                    self.schedule_owned(payload.clone(), at + d, vm);
                }
            }
        }
        self.engine.schedule_in(Event::ReconfigDone { record: id }, d);
        // Shifted real-time work may now miss its deadline.
        self.ensure_tick();
    }

    fn on_reconfig_done(&mut self, id: ReconfigId) {
        let Some(rec) = self.hv.finish_reconfig(id) else {
            return;
        };
        let vm = rec.requested_by;
        self.reconfigs.push(rec);
        if self.hv.vm(vm).is_some() {
            self.issue_next_swap(vm).expect("planned swaps fit");
        }
        self.ensure_tick();
    }

    fn ensure_tick(&mut self) {
        self.schedule_tick_from(self.now());
    }

    fn has_capacity(&self) -> bool {
        self.vm_rt
            .iter()
            .any(|(&vm, rt)| rt.cores_free > 0 && self.hv.has_active_kind(vm, ModuleKind::LifCore))
    }

    /// A running real-time task is projected late and some other VM could
    /// take it right now.
    fn has_rescuable_task(&self) -> bool {
        let now = self.now();
        let idle: Vec<VmId> = self
            .vm_rt
            .iter()
            .filter(|(&vm, rt)| {
                rt.cores_free > 0
                    && self.hv.has_active_kind(vm, ModuleKind::LifCore)
                    && self.hv.stalled_until(vm).is_none_or(|t| t <= now)
            })
            .map(|(&vm, _)| vm)
            .collect();
        !idle.is_empty()
            && self.running.values().any(|r| {
                !r.migrated
                    && matches!(r.spec.rt_class.deadline(), Some(d) if r.projected_finish > d)
                    && idle.iter().any(|&v| v != r.vm)
            })
    }

    /// Keeps the next scheduler tick on the first boundary at or after
    /// `earliest` at which it can act: placing queued work on a VM with a
    /// free core, retrying a backpressured stream, or rescuing a late
    /// real-time task. Without any of those no tick is scheduled; events that
    /// change them call back in here.
    fn schedule_tick_from(&mut self, earliest: SimTime) {
        let tick = self.config.sched.tick.0;
        let align = |t: u64| SimTime(t.div_ceil(tick) * tick);
        let at = align(earliest.0);
        let wanted = if !self.retry.is_empty() || self.has_rescuable_task() {
            Some(at)
        } else if self.has_capacity() {
            self.scheduler
                .queued()
                .iter()
                .map(|t| t.arrival.0)
                .min()
                .map(|first| at.max(align(first)))
        } else {
            None
        };
        match (wanted, self.tick_pending) {
            (Some(want), Some((_, pending))) if pending <= want => {}
            (Some(want), pending) => {
                if let Some((id, _)) = pending {
                    self.engine.cancel(id);
                }
                let id = self
                    .engine
                    .schedule(Event::SchedulerTick, want)
                    .expect("tick boundary is not in the past");
                self.tick_pending = Some((id, want));
            }
            (None, _) => {}
        }
    }

    fn vm_views(&self) -> Vec<VmView> {
        self.hv
            .vms()
            .map(|v| {
                let rt = self.vm_rt[&v.id];
                VmView {
                    vm: v.id,
                    cores_owned: v.cores,
                    cores_free: rt.cores_free,
                    available_since: rt.available_since,
                    stalled_until: self.hv.stalled_until(v.id).unwrap_or(SimTime::ZERO),
                    schedulable: v.cores > 0 && self.hv.has_active_kind(v.id, ModuleKind::LifCore),
                }
            })
            .collect()
    }

    fn on_tick(&mut self) {
        self.tick_pending = None;
        let now = self.now();

        for idx in std::mem::take(&mut self.retry) {
            self.submit_from_stream(idx);
        }

        let mut views = self.vm_views();
        let params = self.config.sched;
        let assigned = self.scheduler.schedule_tick(now, &mut views, &params);
        for v in &views {
            self.vm_rt.get_mut(&v.vm).expect("live vm").cores_free = v.cores_free;
        }
        for (a, spec) in assigned {
            self.start_task(now, a, spec);
        }

        let running: Vec<RunningView> = self
            .running
            .values()
            .map(|r| RunningView {
                task: TaskSpec {
                    compute_demand: r.demand_left,
                    ..r.spec.clone()
                },
                vm: r.vm,
                cores: r.cores,
                start: r.start,
                projected_finish: r.projected_finish,
                exec_total: r.exec_total,
                migrated: r.migrated,
            })
            .collect();
        let moves = rebalance_on_contention(now, &running, &mut views, &params);
        for m in moves {
            self.apply_migration(m);
        }

        self.schedule_tick_from(now + self.config.sched.tick);
    }

    fn start_task(&mut self, tick: SimTime, a: Assignment, spec: TaskSpec) {
        let exec_total = a.projected_finish - a.start;
        let workload = spec
            .shape
            .map(|shape| Workload::new(&mut self.engine, shape, self.config.lif));
        let steps = workload.as_ref().map_or(1, |w| w.shape.steps.max(1));
        let step_interval = SimTime(exec_total.0 / steps);
        let (payload, at) = if steps >= 2 {
            (
                Event::SpikeStep {
                    task: spec.id,
                    vm: a.vm,
                },
                a.start + step_interval,
            )
        } else {
            (
                Event::TaskDone {
                    task: spec.id,
                    vm: a.vm,
                },
                a.projected_finish,
            )
        };
        let event = self.schedule_owned(payload, at, a.vm);
        if spec.data_size > 0 {
            let ring = self.hv.vm(a.vm).expect("live vm").rings[0];
            let idx = self.streams.len();
            self.streams.push(Stream {
                vm: a.vm,
                ring,
                size: spec.data_size,
                direction: Direction::In,
                remaining: 1,
                next_index: 0,
                live: true,
            });
            self.submit_from_stream(idx);
        }
        self.assignments.push(AssignmentRecord {
            tick,
            assignment: a.clone(),
            task: spec.clone(),
        });
        self.running.insert(
            spec.id,
            RunningTask {
                demand_left: spec.compute_demand,
                spec,
                vm: a.vm,
                cores: a.cores,
                start: a.start,
                projected_finish: a.projected_finish,
                exec_total,
                migrated: false,
                event,
                step_interval,
                workload,
            },
        );
    }

    fn on_spike_step(&mut self, task: TaskId) {
        let Some(mut r) = self.running.remove(&task) else {
            return;
        };
        if let Some(w) = r.workload.as_mut() {
            w.step(&mut self.engine);
        }
        let remaining = r.workload.as_ref().map_or(1, |w| w.remaining_steps());
        let next_at = self.now() + r.step_interval;
        r.event = if remaining <= 1 || next_at >= r.projected_finish {
            self.schedule_owned(Event::TaskDone { task, vm: r.vm }, r.projected_finish, r.vm)
        } else {
            self.schedule_owned(Event::SpikeStep { task, vm: r.vm }, next_at, r.vm)
        };
        self.running.insert(task, r);
    }

    fn on_task_done(&mut self, task: TaskId) {
        let Some(mut r) = self.running.remove(&task) else {
            return;
        };
        let ops = match r.workload.as_mut() {
            Some(w) => {
                while w.remaining_steps() > 0 {
                    w.step(&mut self.engine);
                }
                self.spikes += w.spikes_out;
                w.synaptic_ops
            }
            None => r.spec.compute_demand,
        };
        self.synaptic_ops += ops;
        self.dynamic_mj += task_energy(ops, &self.config.energy);
        let now = self.now();
        if let (Some(rt), Some(vm)) = (self.vm_rt.get_mut(&r.vm), self.hv.vm(r.vm)) {
            rt.cores_free = (rt.cores_free + r.cores).min(vm.cores);
            rt.available_since = now;
        }
        self.completions.push(Completion {
            vm: r.vm,
            key: WorkKey::Task(task),
            started: r.start,
            at: now,
        });
        self.ensure_tick();
    }

    fn apply_migration(&mut self, m: Migration) {
        let now = self.now();
        let Some(mut r) = self.running.remove(&m.task) else {
            return;
        };
        self.engine.cancel(r.event);
        self.owned.remove(&r.event);
        if let (Some(rt), Some(vm)) = (self.vm_rt.get_mut(&m.from), self.hv.vm(m.from)) {
            rt.cores_free = (rt.cores_free + r.cores).min(vm.cores);
            rt.available_since = now;
        }
        if let Some(rt) = self.vm_rt.get_mut(&m.to) {
            rt.cores_free -= m.cores;
        }
        let resume = now + m.penalty;
        r.vm = m.to;
        r.cores = m.cores;
        r.start = resume;
        r.projected_finish = m.new_finish;
        r.exec_total = exec_time_for(
            m.remaining_demand,
            r.spec.parallelizability,
            m.cores,
            self.config.sched.core_rate,
        );
        r.demand_left = m.remaining_demand;
        r.migrated = true;
        let remaining = r.workload.as_ref().map_or(1, |w| w.remaining_steps().max(1));
        r.step_interval = SimTime((m.new_finish - resume).0 / remaining);
        r.event = if remaining >= 2 {
            self.schedule_owned(
                Event::SpikeStep {
                    task: m.task,
                    vm: m.to,
                },
                resume + r.step_interval,
                m.to,
            )
        } else {
            self.schedule_owned(
                Event::TaskDone {
                    task: m.task,
                    vm: m.to,
                },
                m.new_finish,
                m.to,
            )
        };
        self.running.insert(m.task, r);
        self.migrations.push(m);
    }
}
