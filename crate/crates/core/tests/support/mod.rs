//! Randomized workloads and their oracles, shared by the property tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use neurovm_core::fabric::{FabricError, ResourceClass, ResourceVector, SlotId};
use neurovm_core::io::Direction;
use neurovm_core::sched::{RtClass, TaskId, TaskSpec};
use neurovm_core::sim::SimTime;
use neurovm_core::snn::{workload_cost, TaskShape};
use neurovm_core::system::{Completion, System, SystemConfig, SystemError, WorkKey};
use neurovm_core::virt::{ModuleId, ModuleKind, Priority, ReconfigMode, VirtError, VmId};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.0.next_u64() % n
    }

    pub fn range(&mut self, lo: u64, hi_inclusive: u64) -> u64 {
        lo + self.below(hi_inclusive - lo + 1)
    }

    pub fn chance(&mut self, pct: u64) -> bool {
        self.below(100) < pct
    }

    pub fn pick<T: Copy>(&mut self, items: &[T]) -> Option<T> {
        if items.is_empty() {
            None
        } else {
            Some(items[self.below(items.len() as u64) as usize])
        }
    }
}

fn catalog(sys: &mut System) -> Vec<ModuleId> {
    vec![
        sys.register_module("lif", ModuleKind::LifCore, 1.0 / 32.0).unwrap(),
        sys.register_module("router", ModuleKind::Router, 1.0 / 64.0).unwrap(),
        sys.register_module("pooling", ModuleKind::Pooling, 1.0 / 64.0).unwrap(),
        sys.register_module("wide", ModuleKind::Pooling, 1.0 / 8.0).unwrap(),
    ]
}

fn small_task(rng: &mut Rng, id: u32, now: SimTime) -> TaskSpec {
    let shape = TaskShape {
        steps: rng.range(1, 6),
        input_rate: rng.range(1, 4),
        fan_in: rng.range(1, 32),
    };
    let rt_class = if rng.chance(30) {
        RtClass::RealTime {
            deadline: now + SimTime(rng.range(10_000, 2_000_000)),
        }
    } else {
        RtClass::Batch
    };
    TaskSpec {
        id: TaskId(id),
        compute_demand: workload_cost(shape),
        parallelizability: rng.below(101) as f64 / 100.0,
        data_size: if rng.chance(20) { rng.range(1, 8192) } else { 0 },
        rt_class,
        arrival: now + SimTime(rng.below(500_000)),
        shape: Some(shape),
    }
}

/// Checks the fabric and slot accounting after one operation.
pub fn check_accounting(sys: &System) -> Result<(), String> {
    let fabric = sys.hypervisor().fabric();
    if !fabric.is_conserved() {
        return Err("free + allocated != total".into());
    }
    let total = fabric.total();
    for class in ResourceClass::ALL {
        let (free, alloc) = (fabric.free().get(class), fabric.allocated().get(class));
        if free > total.get(class) || alloc > total.get(class) {
            return Err(format!("{class} out of range: free {free} allocated {alloc}"));
        }
    }
    let slot_sum: ResourceVector = fabric.slots().map(|s| s.capacity).sum();
    if slot_sum != fabric.allocated() {
        return Err("slot capacities do not sum to the allocated vector".into());
    }
    if !sys.hypervisor().footprints_fit() {
        return Err("a VM's loaded modules exceed its slot".into());
    }
    Ok(())
}

/// Random create/destroy/load/unload/allocate/release/advance sequence with
/// the accounting checked after every operation.
pub fn conservation_run(seed: u64, ops: usize) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    let mut sys = System::new(SystemConfig::default(), seed, false).map_err(|e| e.to_string())?;
    let modules = catalog(&mut sys);
    let total = sys.config().fabric.total;
    let fractions = [64, 32, 16, 8, 4];
    let mut direct: Vec<SlotId> = Vec::new();
    let mut next_task = 0u32;

    for op in 0..ops {
        let vms: Vec<VmId> = sys.hypervisor().vms().map(|v| v.id).collect();
        match rng.below(9) {
            0 | 1 => {
                let f = rng.pick(&fractions).unwrap();
                let prio = if rng.chance(50) { Priority::Batch } else { Priority::RealTime };
                if let Ok(vm) = sys.create_vm(total.div_floor(f), prio) {
                    if rng.chance(70) {
                        let _ = sys.preload_module(vm, modules[0]);
                    }
                }
            }
            2 => {
                if let Some(vm) = rng.pick(&vms) {
                    // Teardown is refused while a reconfiguration is pending.
                    match sys.destroy_vm(vm) {
                        Ok(()) | Err(SystemError::Virt(VirtError::VmBusy(_))) => {}
                        Err(e) => return Err(format!("op {op}: destroy failed: {e}")),
                    }
                }
            }
            3 | 4 => {
                if let Some(vm) = rng.pick(&vms) {
                    let m = rng.pick(&modules).unwrap();
                    let mode = if rng.chance(20) { ReconfigMode::Full } else { ReconfigMode::Partial };
                    let _ = sys.load_module(vm, m, mode);
                }
            }
            5 => {
                if let Some(vm) = rng.pick(&vms) {
                    let loaded: Vec<ModuleId> = sys
                        .hypervisor()
                        .vm(vm)
                        .unwrap()
                        .loaded
                        .iter()
                        .map(|l| l.module)
                        .collect();
                    if let Some(m) = rng.pick(&loaded) {
                        let _ = sys.unload_module(vm, m);
                    }
                }
            }
            6 => {
                let fabric = sys.hypervisor_mut().fabric_mut();
                if rng.chance(50) && !direct.is_empty() {
                    let i = rng.below(direct.len() as u64) as usize;
                    // Slots are pinned while a full reconfiguration runs.
                    match fabric.release(direct[i]) {
                        Ok(_) => {
                            direct.swap_remove(i);
                        }
                        Err(FabricError::SlotBusy(_)) => {}
                        Err(e) => return Err(format!("op {op}: release failed: {e}")),
                    }
                } else {
                    let req = ResourceVector::new(
                        rng.below(total.lut / 8),
                        rng.below(total.memory_bytes / 8),
                        rng.below(total.io_pins / 8),
                        rng.below(total.dsp / 8),
                    );
                    if let Ok(slot) = fabric.allocate(req) {
                        direct.push(slot);
                    }
                }
            }
            7 => {
                let now = sys.now();
                sys.run_until(now + SimTime(rng.below(20_000_000)));
            }
            _ => {
                let now = sys.now();
                let t = small_task(&mut rng, next_task, now);
                next_task += 1;
                sys.submit_task(t);
            }
        }
        check_accounting(&sys).map_err(|e| format!("seed {seed} op {op}: {e}"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsoMode {
    None,
    Partial,
    Full,
}

/// Random workload for VM B next to a VM A that only reconfigures.
#[derive(Debug, Clone)]
pub struct IsoScenario {
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub streams: Vec<(u64, u32, SimTime)>,
    pub reconfig_at: SimTime,
}

impl IsoScenario {
    pub fn generate(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n_tasks = rng.range(1, 6);
        let tasks = (0..n_tasks)
            .map(|i| {
                let shape = TaskShape {
                    steps: rng.range(2, 40),
                    input_rate: rng.range(1, 16),
                    fan_in: rng.range(16, 256),
                };
                let arrival = SimTime(rng.below(5_000_000));
                TaskSpec {
                    id: TaskId(i as u32),
                    compute_demand: workload_cost(shape) * rng.range(1, 50),
                    parallelizability: rng.below(101) as f64 / 100.0,
                    data_size: if rng.chance(40) { rng.range(1, 65_536) } else { 0 },
                    rt_class: if rng.chance(40) {
                        RtClass::RealTime {
                            deadline: arrival + SimTime(rng.range(100_000, 5_000_000)),
                        }
                    } else {
                        RtClass::Batch
                    },
                    arrival,
                    shape: Some(shape),
                }
            })
            .collect();
        let streams = (0..rng.range(1, 3))
            .map(|_| {
                (
                    rng.range(1_024, 4 << 20),
                    rng.range(1, 12) as u32,
                    SimTime(rng.below(3_000_000)),
                )
            })
            .collect();
        IsoScenario {
            seed,
            tasks,
            streams,
            reconfig_at: SimTime(rng.range(100_000, 6_000_000)),
        }
    }

    /// Runs the scenario and returns B's completions and the reconfiguration
    /// duration (zero without one).
    pub fn run(&self, mode: IsoMode) -> (Vec<Completion>, SimTime) {
        let mut sys = System::new(SystemConfig::default(), self.seed, false).unwrap();
        let modules = catalog(&mut sys);
        let slot = sys.config().fabric.total.div_floor(8);
        // A has no compute module, so the scheduler never places work on it.
        let a = sys.create_vm(slot, Priority::Batch).unwrap();
        let b = sys.create_vm(slot, Priority::RealTime).unwrap();
        sys.preload_module(b, modules[0]).unwrap();
        for t in &self.tasks {
            sys.submit_task(t.clone());
        }
        for &(size, count, at) in &self.streams {
            sys.add_stream(b, size, count, Direction::Out, at).unwrap();
        }
        let mut d = SimTime::ZERO;
        if mode != IsoMode::None {
            sys.run_until(self.reconfig_at);
            let m = if mode == IsoMode::Full { ReconfigMode::Full } else { ReconfigMode::Partial };
            d = sys.load_module(a, modules[1], m).unwrap().duration;
        }
        sys.run_to_completion(SimTime(u64::MAX));
        let log = sys.completions().iter().copied().filter(|c| c.vm == b).collect();
        (log, d)
    }
}

/// Compares B's completions across the three runs. Returns how many
/// completions were in flight when the full reconfiguration began.
pub fn isolation_check(seed: u64) -> Result<usize, String> {
    let s = IsoScenario::generate(seed);
    let (base, _) = s.run(IsoMode::None);
    let (partial, _) = s.run(IsoMode::Partial);
    if partial != base {
        return Err(format!("seed {seed}: partial reconfiguration of A changed B's completions"));
    }
    let (full, d) = s.run(IsoMode::Full);
    let full_at: BTreeMap<WorkKey, SimTime> = full.iter().map(|c| (c.key, c.at)).collect();
    let t_r = s.reconfig_at;
    let mut in_flight = 0;
    for c in base.iter().filter(|c| c.started <= t_r && c.at > t_r) {
        in_flight += 1;
        match full_at.get(&c.key) {
            Some(&at) if at == c.at + d => {}
            other => {
                return Err(format!(
                    "seed {seed}: {:?} finished at {:?} under a full reconfiguration, expected {}",
                    c.key,
                    other,
                    c.at + d
                ))
            }
        }
    }
    Ok(in_flight)
}

/// A scheduling instance on two single-core VMs with tick-aligned times.
#[derive(Debug, Clone)]
pub struct SchedInstance {
    pub tasks: Vec<TaskSpec>,
}

pub const TICK: u64 = 100_000;

impl SchedInstance {
    pub fn generate(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n = rng.range(1, 5);
        let tasks = (0..n)
            .map(|i| {
                let arrival = SimTime(rng.below(10) * TICK);
                let demand = rng.range(1, 20) * TICK;
                TaskSpec {
                    id: TaskId(i as u32),
                    compute_demand: demand,
                    parallelizability: rng.below(101) as f64 / 100.0,
                    data_size: 0,
                    rt_class: if rng.chance(50) {
                        RtClass::RealTime {
                            deadline: arrival + SimTime(rng.range(1, 40) * TICK),
                        }
                    } else {
                        RtClass::Batch
                    },
                    arrival,
                    shape: None,
                }
            })
            .collect();
        SchedInstance { tasks }
    }

    /// Exhaustive optimum: every assignment of tasks to the two cores and
    /// every order on each core, each task starting as early as possible.
    pub fn optimal_makespan(&self) -> u64 {
        let n = self.tasks.len();
        let mut best = u64::MAX;
        let mut perm: Vec<usize> = (0..n).collect();
        permutations(&mut perm, 0, &mut |order| {
            for mask in 0..(1u32 << n) {
                let mut free = [0u64; 2];
                let mut span = 0;
                for &i in order {
                    let t = &self.tasks[i];
                    let core = ((mask >> i) & 1) as usize;
                    let start = free[core].max(t.arrival.0);
                    free[core] = start + t.compute_demand;
                    span = span.max(free[core]);
                }
                best = best.min(span);
            }
        });
        best
    }

    pub fn simulate(&self) -> System {
        let mut sys = System::new(SystemConfig::default(), 1, false).unwrap();
        let lif = sys.register_module("lif", ModuleKind::LifCore, 1.0 / 32.0).unwrap();
        let slot = sys.config().fabric.core_footprint;
        for _ in 0..2 {
            let vm = sys.create_vm(slot, Priority::Batch).unwrap();
            sys.preload_module(vm, lif).unwrap();
        }
        for t in &self.tasks {
            sys.submit_task(t.clone());
        }
        sys.run_to_completion(SimTime(u64::MAX));
        sys
    }
}

fn permutations(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, f);
        v.swap(k, i);
    }
}

/// Makespan within twice the optimum, and real-time tasks never lose a tick
/// to batch work.
pub fn scheduler_check(seed: u64) -> Result<(u64, u64), String> {
    let inst = SchedInstance::generate(seed);
    let sys = inst.simulate();
    let done = sys.completions();
    if done.len() != inst.tasks.len() {
        return Err(format!("seed {seed}: {} of {} tasks finished", done.len(), inst.tasks.len()));
    }
    let makespan = done.iter().map(|c| c.at.0).max().unwrap();
    let opt = inst.optimal_makespan();
    if makespan > 2 * opt {
        return Err(format!("seed {seed}: makespan {makespan} > 2 x optimum {opt}"));
    }

    let recs = sys.assignments();
    let tick_of: BTreeMap<TaskId, SimTime> = recs.iter().map(|r| (r.task.id, r.tick)).collect();
    for (i, r) in recs.iter().enumerate() {
        if r.task.rt_class.is_realtime() {
            continue;
        }
        // Every real-time task ready by this tick was placed no later, and
        // ahead of this batch task when placed in the same tick.
        for (j, other) in recs.iter().enumerate() {
            if other.task.rt_class.is_realtime() && other.task.arrival <= r.tick {
                let t = tick_of[&other.task.id];
                if t > r.tick || (t == r.tick && j > i) {
                    return Err(format!(
                        "seed {seed}: batch {} placed at {} before ready real-time {}",
                        r.task.id, r.tick, other.task.id
                    ));
                }
            }
        }
    }
    // Within a tick, real-time tasks go out in deadline order.
    for w in recs.windows(2) {
        if w[0].tick == w[1].tick {
            if let (Some(a), Some(b)) = (w[0].task.rt_class.deadline(), w[1].task.rt_class.deadline()) {
                if a > b {
                    return Err(format!("seed {seed}: deadlines out of order at {}", w[0].tick));
                }
            }
        }
    }
    Ok((makespan, opt))
}
