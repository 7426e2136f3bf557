//! Virtualization layer: VM lifecycle on top of fabric slots, the DFX module
//! catalog, and full/partial reconfiguration bookkeeping.
//!
//! This module only keeps books and computes timings. The event-driven side
//! (stalling in-flight work, firing completion events) lives in
//! [`crate::system`].
//!
//! Reconfigurations are reserved when requested. A full reconfiguration
//! starts once every previously reserved reconfiguration has finished; a
//! partial one starts once the owning VM's previous reconfiguration and any
//! reserved full reconfiguration have finished. Partial reconfigurations of
//! distinct VMs may overlap.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, ResourceVector, SlotId, MIB};
use crate::io::RingId;
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VmId(pub u32);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModuleId(pub u32);

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mod{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReconfigId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Priority {
    RealTime,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    LifCore,
    Router,
    Pooling,
}

impl ModuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleKind::LifCore => "lif_core",
            ModuleKind::Router => "router",
            ModuleKind::Pooling => "pooling",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReconfigMode {
    Full,
    Partial,
}

impl ReconfigMode {
    pub fn name(&self) -> &'static str {
        match self {
            ReconfigMode::Full => "full",
            ReconfigMode::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfxModule {
    pub id: ModuleId,
    pub name: String,
    pub kind: ModuleKind,
    pub footprint: ResourceVector,
    pub bitstream_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconfigParams {
    /// Configuration port bandwidth in bytes per second.
    pub config_port_bytes_per_s: u64,
    pub partial_setup: SimTime,
}

impl Default for ReconfigParams {
    fn default() -> Self {
        ReconfigParams {
            config_port_bytes_per_s: 400 * MIB,
            partial_setup: SimTime::from_micros(100),
        }
    }
}

/// What a reconfiguration stalls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconfigTarget {
    Fabric,
    Vm(VmId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigRecord {
    pub id: ReconfigId,
    pub requested_by: VmId,
    pub target: ReconfigTarget,
    pub mode: ReconfigMode,
    pub module: ModuleId,
    pub started_at: SimTime,
    pub duration: SimTime,
}

impl ReconfigRecord {
    pub fn finished_at(&self) -> SimTime {
        self.started_at + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModule {
    pub module: ModuleId,
    /// False until the reconfiguration that loads it finishes.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMachine {
    pub id: VmId,
    pub slot: SlotId,
    pub capacity: ResourceVector,
    pub priority: Priority,
    pub cores: u32,
    pub loaded: Vec<LoadedModule>,
    pub rings: Vec<RingId>,
    busy_until: SimTime,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VirtError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("unknown VM {0}")]
    VmUnknown(VmId),
    #[error("VM {0} has a reconfiguration pending or in progress")]
    VmBusy(VmId),
    #[error("unknown module {0}")]
    ModuleUnknown(ModuleId),
    #[error("module {module} does not fit the remaining capacity of {vm}")]
    FootprintOverflow { vm: VmId, module: ModuleId },
    #[error("module {module} is not loaded on {vm}")]
    ModuleNotLoaded { vm: VmId, module: ModuleId },
    #[error("module {module} on {vm} is still being loaded")]
    ModuleBusy { vm: VmId, module: ModuleId },
    #[error("invalid module: {0}")]
    InvalidModule(String),
}

#[derive(Debug, Clone)]
pub struct Hypervisor {
    fabric: Fabric,
    params: ReconfigParams,
    catalog: BTreeMap<ModuleId, DfxModule>,
    vms: BTreeMap<VmId, VirtualMachine>,
    pending: BTreeMap<ReconfigId, ReconfigRecord>,
    active: BTreeMap<ReconfigId, ReconfigRecord>,
    full_busy_until: SimTime,
    any_busy_until: SimTime,
    next_vm: u32,
    next_module: u32,
    next_reconfig: u64,
    full_accum: SimTime,
    partial_accum: SimTime,
}

impl Hypervisor {
    pub fn new(fabric: Fabric, params: ReconfigParams) -> Self {
        Hypervisor {
            fabric,
            params,
            catalog: BTreeMap::new(),
            vms: BTreeMap::new(),
            pending: BTreeMap::new(),
            active: BTreeMap::new(),
            full_busy_until: SimTime::ZERO,
            any_busy_until: SimTime::ZERO,
            next_vm: 0,
            next_module: 0,
            next_reconfig: 0,
            full_accum: SimTime::ZERO,
            partial_accum: SimTime::ZERO,
        }
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    /// Direct pool access for slots that belong to no VM.
    pub fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    pub fn params(&self) -> &ReconfigParams {
        &self.params
    }

    /// Adds a module to the catalog. Its bitstream size is the fabric's full
    /// bitstream scaled by the module's share of the LUTs.
    pub fn register_module(
        &mut self,
        name: &str,
        kind: ModuleKind,
        footprint: ResourceVector,
    ) -> Result<ModuleId, VirtError> {
        let total = self.fabric.total();
        if footprint.is_zero() || !footprint.fits_within(&total) {
            return Err(VirtError::InvalidModule(format!(
                "footprint of '{name}' must be non-zero and within the fabric"
            )));
        }
        let bitstream_bytes = (self.fabric.config().bitstream_total_bytes as u128
            * footprint.lut as u128
            / total.lut as u128) as u64;
        let id = ModuleId(self.next_module);
        self.next_module += 1;
        self.catalog.insert(
            id,
            DfxModule {
                id,
                name: name.to_string(),
                kind,
                footprint,
                bitstream_bytes,
            },
        );
        Ok(id)
    }

    /// Registers a module whose footprint is `fraction` of the fabric total.
    pub fn register_module_fraction(
        &mut self,
        name: &str,
        kind: ModuleKind,
        fraction: f64,
    ) -> Result<ModuleId, VirtError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(VirtError::InvalidModule(format!(
                "fraction of '{name}' must lie in (0, 1]"
            )));
        }
        let footprint = self.fabric.total().fraction(fraction);
        self.register_module(name, kind, footprint)
    }

    pub fn module(&self, id: ModuleId) -> Option<&DfxModule> {
        self.catalog.get(&id)
    }

    pub fn modules(&self) -> impl Iterator<Item = &DfxModule> {
        self.catalog.values()
    }

    pub fn vm(&self, id: VmId) -> Option<&VirtualMachine> {
        self.vms.get(&id)
    }

    pub fn vm_mut(&mut self, id: VmId) -> Option<&mut VirtualMachine> {
        self.vms.get_mut(&id)
    }

    pub fn vms(&self) -> impl Iterator<Item = &VirtualMachine> {
        self.vms.values()
    }

    pub fn create_vm(
        &mut self,
        request: ResourceVector,
        priority: Priority,
    ) -> Result<VmId, VirtError> {
        let id = VmId(self.next_vm);
        let slot = self.fabric.allocate_for(request, Some(id))?;
        self.next_vm += 1;
        let cores = self.fabric.cores_for(&request);
        self.vms.insert(
            id,
            VirtualMachine {
                id,
                slot,
                capacity: request,
                priority,
                cores,
                loaded: Vec::new(),
                rings: Vec::new(),
                busy_until: SimTime::ZERO,
            },
        );
        Ok(id)
    }

    /// True while a reconfiguration requested by `vm` is pending or running,
    /// or a full reconfiguration holds every slot.
    pub fn is_busy(&self, vm: VmId) -> bool {
        self.pending
            .values()
            .chain(self.active.values())
            .any(|r| r.requested_by == vm)
            || self.active.values().any(|r| r.target == ReconfigTarget::Fabric)
    }

    pub fn destroy_vm(&mut self, id: VmId) -> Result<VirtualMachine, VirtError> {
        if !self.vms.contains_key(&id) {
            return Err(VirtError::VmUnknown(id));
        }
        if self.is_busy(id) {
            return Err(VirtError::VmBusy(id));
        }
        let slot = self.vms[&id].slot;
        self.fabric.release(slot)?;
        Ok(self.vms.remove(&id).expect("present"))
    }

    pub fn reconfig_time(&self, mode: ReconfigMode, module: &DfxModule) -> SimTime {
        let bytes = match mode {
            ReconfigMode::Full => self.fabric.config().bitstream_total_bytes,
            ReconfigMode::Partial => module.bitstream_bytes,
        };
        let transfer = bytes_over_port(bytes, self.params.config_port_bytes_per_s);
        match mode {
            ReconfigMode::Full => transfer,
            ReconfigMode::Partial => transfer + self.params.partial_setup,
        }
    }

    /// Footprint of every module on `vm`, including ones still loading.
    pub fn loaded_footprint(&self, vm: VmId) -> ResourceVector {
        self.vms
            .get(&vm)
            .map(|v| {
                v.loaded
                    .iter()
                    .map(|l| self.catalog[&l.module].footprint)
                    .sum()
            })
            .unwrap_or_default()
    }

    pub fn has_active_kind(&self, vm: VmId, kind: ModuleKind) -> bool {
        self.vms.get(&vm).is_some_and(|v| {
            v.loaded
                .iter()
                .any(|l| l.active && self.catalog[&l.module].kind == kind)
        })
    }

    /// Reserves a reconfiguration that loads `module` into `vm`. The module
    /// counts against the slot immediately and becomes usable when
    /// [`Hypervisor::finish_reconfig`] runs for the returned record.
    pub fn load_module(
        &mut self,
        now: SimTime,
        vm: VmId,
        module: ModuleId,
        mode: ReconfigMode,
    ) -> Result<ReconfigRecord, VirtError> {
        let m = self.catalog.get(&module).ok_or(VirtError::ModuleUnknown(module))?;
        let v = self.vms.get(&vm).ok_or(VirtError::VmUnknown(vm))?;
        let after = self.loaded_footprint(vm) + m.footprint;
        if !after.fits_within(&v.capacity) {
            return Err(VirtError::FootprintOverflow { vm, module });
        }
        let duration = self.reconfig_time(mode, m);
        let (target, started_at) = match mode {
            ReconfigMode::Full => (ReconfigTarget::Fabric, now.max(self.any_busy_until)),
            ReconfigMode::Partial => (
                ReconfigTarget::Vm(vm),
                now.max(v.busy_until).max(self.full_busy_until),
            ),
        };
        let record = ReconfigRecord {
            id: ReconfigId(self.next_reconfig),
            requested_by: vm,
            target,
            mode,
            module,
            started_at,
            duration,
        };
        self.next_reconfig += 1;
        let end = record.finished_at();
        self.any_busy_until = self.any_busy_until.max(end);
        if mode == ReconfigMode::Full {
            self.full_busy_until = end;
        }
        let v = self.vms.get_mut(&vm).expect("checked");
        v.busy_until = end;
        v.loaded.push(LoadedModule {
            module,
            active: false,
        });
        self.pending.insert(record.id, record.clone());
        Ok(record)
    }

    /// Removes an active module from `vm`. Unloading has no time cost; the
    /// cost of a swap is carried by the load that follows.
    pub fn unload_module(&mut self, vm: VmId, module: ModuleId) -> Result<(), VirtError> {
        let v = self.vms.get_mut(&vm).ok_or(VirtError::VmUnknown(vm))?;
        let idx = v
            .loaded
            .iter()
            .position(|l| l.module == module && l.active)
            .ok_or_else(|| {
                if v.loaded.iter().any(|l| l.module == module) {
                    VirtError::ModuleBusy { vm, module }
                } else {
                    VirtError::ModuleNotLoaded { vm, module }
                }
            })?;
        v.loaded.remove(idx);
        Ok(())
    }

    /// Installs a module as already active, as if it were part of the boot
    /// bitstream. No reconfiguration is recorded.
    pub fn preload_module(&mut self, vm: VmId, module: ModuleId) -> Result<(), VirtError> {
        let m = self.catalog.get(&module).ok_or(VirtError::ModuleUnknown(module))?;
        let v = self.vms.get(&vm).ok_or(VirtError::VmUnknown(vm))?;
        if !(self.loaded_footprint(vm) + m.footprint).fits_within(&v.capacity) {
            return Err(VirtError::FootprintOverflow { vm, module });
        }
        self.vms.get_mut(&vm).expect("checked").loaded.push(LoadedModule {
            module,
            active: true,
        });
        Ok(())
    }

    /// Marks a reserved reconfiguration as running and returns the VMs it
    /// stalls.
    pub fn begin_reconfig(&mut self, id: ReconfigId) -> Option<(ReconfigRecord, Vec<VmId>)> {
        let record = self.pending.remove(&id)?;
        let stalled: Vec<VmId> = match record.target {
            ReconfigTarget::Fabric => self.vms.keys().copied().collect(),
            ReconfigTarget::Vm(vm) => vec![vm],
        };
        match record.target {
            ReconfigTarget::Fabric => {
                let slots: Vec<SlotId> = self.fabric.slots().map(|s| s.id).collect();
                for s in slots {
                    self.fabric.set_reconfiguring(s, true).expect("live slot");
                }
            }
            ReconfigTarget::Vm(vm) => {
                if let Some(v) = self.vms.get(&vm) {
                    self.fabric.set_reconfiguring(v.slot, true).expect("live slot");
                }
            }
        }
        self.active.insert(id, record.clone());
        Some((record, stalled))
    }

    /// Completes a running reconfiguration and activates its module.
    pub fn finish_reconfig(&mut self, id: ReconfigId) -> Option<ReconfigRecord> {
        let record = self.active.remove(&id)?;
        match record.target {
            ReconfigTarget::Fabric => {
                let slots: Vec<SlotId> = self.fabric.slots().map(|s| s.id).collect();
                for s in slots {
                    self.fabric.set_reconfiguring(s, false).expect("live slot");
                }
            }
            ReconfigTarget::Vm(vm) => {
                if let Some(v) = self.vms.get(&vm) {
                    self.fabric.set_reconfiguring(v.slot, false).expect("live slot");
                }
            }
        }
        if let Some(v) = self.vms.get_mut(&record.requested_by) {
            if let Some(l) = v
                .loaded
                .iter_mut()
                .find(|l| l.module == record.module && !l.active)
            {
                l.active = true;
            }
        }
        match record.mode {
            ReconfigMode::Full => self.full_accum += record.duration,
            ReconfigMode::Partial => self.partial_accum += record.duration,
        }
        Some(record)
    }

    /// End of the stall currently affecting `vm`, if any.
    pub fn stalled_until(&self, vm: VmId) -> Option<SimTime> {
        self.active
            .values()
            .filter(|r| r.target == ReconfigTarget::Fabric || r.target == ReconfigTarget::Vm(vm))
            .map(|r| r.finished_at())
            .max()
    }

    /// Total duration of completed reconfigurations as `(full, partial)`.
    pub fn reconfig_accumulators(&self) -> (SimTime, SimTime) {
        (self.full_accum, self.partial_accum)
    }

    /// Every VM's loaded footprint fits its slot.
    pub fn footprints_fit(&self) -> bool {
        self.vms
            .values()
            .all(|v| self.loaded_footprint(v.id).fits_within(&v.capacity))
    }
}

/// `bytes / bandwidth` in nanoseconds, rounded half-up.
fn bytes_over_port(bytes: u64, bytes_per_s: u64) -> SimTime {
    let num = bytes as u128 * 1_000_000_000u128;
    let bw = bytes_per_s as u128;
    SimTime(((2 * num + bw) / (2 * bw)) as u64)
}
