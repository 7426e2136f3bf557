//! Physical resource pool: totals, neurocore geometry and region slots.
//!
//! Resources are fungible counts. A slot records a carved-out share of the
//! pool; there is no placement or fragmentation model.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::virt::VmId;

/// One of the four counted resource classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResourceClass {
    Lut,
    Memory,
    Io,
    Dsp,
}

impl ResourceClass {
    pub const ALL: [ResourceClass; 4] = [
        ResourceClass::Lut,
        ResourceClass::Memory,
        ResourceClass::Io,
        ResourceClass::Dsp,
    ];
}

impl fmt::Display for ResourceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceClass::Lut => "lut",
            ResourceClass::Memory => "memory",
            ResourceClass::Io => "io",
            ResourceClass::Dsp => "dsp",
        })
    }
}

/// Counted capacity or footprint across the four resource classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ResourceVector {
    pub lut: u64,
    pub memory_bytes: u64,
    pub io_pins: u64,
    pub dsp: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector::new(0, 0, 0, 0);

    pub const fn new(lut: u64, memory_bytes: u64, io_pins: u64, dsp: u64) -> Self {
        ResourceVector {
            lut,
            memory_bytes,
            io_pins,
            dsp,
        }
    }

    pub fn get(&self, class: ResourceClass) -> u64 {
        match class {
            ResourceClass::Lut => self.lut,
            ResourceClass::Memory => self.memory_bytes,
            ResourceClass::Io => self.io_pins,
            ResourceClass::Dsp => self.dsp,
        }
    }

    fn map(self, f: impl Fn(u64) -> u64) -> Self {
        ResourceVector::new(f(self.lut), f(self.memory_bytes), f(self.io_pins), f(self.dsp))
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// Componentwise `self <= other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.first_deficient(other).is_none()
    }

    /// First class (in LUT, memory, IO, DSP order) where `self` exceeds `other`.
    pub fn first_deficient(&self, other: &ResourceVector) -> Option<ResourceClass> {
        ResourceClass::ALL
            .into_iter()
            .find(|&c| self.get(c) > other.get(c))
    }

    pub fn checked_sub(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector::new(
            self.lut.checked_sub(other.lut)?,
            self.memory_bytes.checked_sub(other.memory_bytes)?,
            self.io_pins.checked_sub(other.io_pins)?,
            self.dsp.checked_sub(other.dsp)?,
        ))
    }

    pub fn scale(&self, n: u64) -> ResourceVector {
        self.map(|v| v * n)
    }

    /// Integer division of every class, rounding down.
    pub fn div_floor(&self, n: u64) -> ResourceVector {
        self.map(|v| v / n)
    }

    /// Fraction of every class, rounding down.
    pub fn fraction(&self, frac: f64) -> ResourceVector {
        self.map(|v| (v as f64 * frac).floor() as u64)
    }

    /// How many copies of `unit` fit inside `self`. Classes where `unit` is
    /// zero impose no limit.
    pub fn count_fitting(&self, unit: &ResourceVector) -> u64 {
        ResourceClass::ALL
            .into_iter()
            .filter(|&c| unit.get(c) > 0)
            .map(|c| self.get(c) / unit.get(c))
            .min()
            .unwrap_or(0)
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;
    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector::new(
            self.lut + rhs.lut,
            self.memory_bytes + rhs.memory_bytes,
            self.io_pins + rhs.io_pins,
            self.dsp + rhs.dsp,
        )
    }
}

impl AddAssign for ResourceVector {
    fn add_assign(&mut self, rhs: ResourceVector) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, Add::add)
    }
}

/// Resources available on a Zynq UltraScale+ XCZU7EV. Memory uses decimal
/// megabytes (38 MB = 38,000,000 bytes).
pub const XCZU7EV_TOTAL: ResourceVector = ResourceVector::new(504_000, 38_000_000, 464, 1_728);

/// The reference design's measured footprint on the XCZU7EV.
pub const XCZU7EV_DESIGN_UTILIZATION: ResourceVector =
    ResourceVector::new(151_200, 11_400_000, 139, 518);

pub const MIB: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub total: ResourceVector,
    pub neurocore_count: u32,
    pub neurons_per_core: u32,
    pub core_footprint: ResourceVector,
    pub bitstream_total_bytes: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            total: XCZU7EV_TOTAL,
            neurocore_count: 16,
            neurons_per_core: 256,
            core_footprint: XCZU7EV_TOTAL.div_floor(32),
            bitstream_total_bytes: 30 * MIB,
        }
    }
}

impl FabricConfig {
    pub fn validate(&self) -> Result<(), FabricError> {
        if self.bitstream_total_bytes == 0 {
            return Err(FabricError::InvalidConfig(
                "bitstream_total_bytes must be positive".into(),
            ));
        }
        if self.neurons_per_core == 0 {
            return Err(FabricError::InvalidConfig(
                "neurons_per_core must be positive".into(),
            ));
        }
        if self.core_footprint.is_zero() {
            return Err(FabricError::InvalidConfig(
                "core_footprint must be non-zero".into(),
            ));
        }
        if self.total.lut == 0 {
            return Err(FabricError::InvalidConfig("total.lut must be positive".into()));
        }
        let grid = self.core_footprint.scale(self.neurocore_count as u64);
        if let Some(class) = grid.first_deficient(&self.total) {
            return Err(FabricError::InvalidConfig(format!(
                "{} neurocores of the given footprint exceed total {class}",
                self.neurocore_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("invalid fabric config: {0}")]
    InvalidConfig(String),
    #[error("insufficient {0} resources")]
    InsufficientResources(ResourceClass),
    #[error("allocation request is empty")]
    EmptyRequest,
    #[error("unknown slot {0}")]
    UnknownSlot(SlotId),
    #[error("slot {0} is reconfiguring")]
    SlotBusy(SlotId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub u32);

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "slot{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Allocated(Option<VmId>),
    Reconfiguring(Option<VmId>),
}

impl SlotState {
    pub fn owner(&self) -> Option<VmId> {
        match *self {
            SlotState::Allocated(o) | SlotState::Reconfiguring(o) => o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSlot {
    pub id: SlotId,
    pub capacity: ResourceVector,
    pub state: SlotState,
}

/// Per-class utilization in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Utilization {
    pub lut: f64,
    pub memory: f64,
    pub io: f64,
    pub dsp: f64,
}

impl Utilization {
    pub fn get(&self, class: ResourceClass) -> f64 {
        match class {
            ResourceClass::Lut => self.lut,
            ResourceClass::Memory => self.memory,
            ResourceClass::Io => self.io,
            ResourceClass::Dsp => self.dsp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fabric {
    config: FabricConfig,
    free: ResourceVector,
    slots: BTreeMap<SlotId, RegionSlot>,
    next_slot: u32,
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Result<Self, FabricError> {
        config.validate()?;
        Ok(Fabric {
            free: config.total,
            config,
            slots: BTreeMap::new(),
            next_slot: 0,
        })
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn total(&self) -> ResourceVector {
        self.config.total
    }

    pub fn free(&self) -> ResourceVector {
        self.free
    }

    pub fn allocated(&self) -> ResourceVector {
        self.slots.values().map(|s| s.capacity).sum()
    }

    pub fn slot(&self, id: SlotId) -> Option<&RegionSlot> {
        self.slots.get(&id)
    }

    pub fn slots(&self) -> impl Iterator<Item = &RegionSlot> {
        self.slots.values()
    }

    /// Neurocores that fit inside `capacity`.
    pub fn cores_for(&self, capacity: &ResourceVector) -> u32 {
        capacity.count_fitting(&self.config.core_footprint) as u32
    }

    pub fn allocate(&mut self, request: ResourceVector) -> Result<SlotId, FabricError> {
        self.allocate_for(request, None)
    }

    pub fn allocate_for(
        &mut self,
        request: ResourceVector,
        owner: Option<VmId>,
    ) -> Result<SlotId, FabricError> {
        if request.is_zero() {
            return Err(FabricError::EmptyRequest);
        }
        let free = self
            .free
            .checked_sub(&request)
            .ok_or_else(|| FabricError::InsufficientResources(
                request.first_deficient(&self.free).expect("deficient class"),
            ))?;
        let id = SlotId(self.next_slot);
        self.next_slot += 1;
        self.free = free;
        self.slots.insert(
            id,
            RegionSlot {
                id,
                capacity: request,
                state: SlotState::Allocated(owner),
            },
        );
        Ok(id)
    }

    pub fn release(&mut self, id: SlotId) -> Result<ResourceVector, FabricError> {
        let slot = self.slots.get(&id).ok_or(FabricError::UnknownSlot(id))?;
        if matches!(slot.state, SlotState::Reconfiguring(_)) {
            return Err(FabricError::SlotBusy(id));
        }
        let slot = self.slots.remove(&id).expect("present");
        self.free += slot.capacity;
        Ok(slot.capacity)
    }

    pub fn set_reconfiguring(&mut self, id: SlotId, busy: bool) -> Result<(), FabricError> {
        let slot = self.slots.get_mut(&id).ok_or(FabricError::UnknownSlot(id))?;
        let owner = slot.state.owner();
        slot.state = if busy {
            SlotState::Reconfiguring(owner)
        } else {
            SlotState::Allocated(owner)
        };
        Ok(())
    }

    pub fn utilization(&self) -> Utilization {
        let used = self.allocated();
        let pct = |c: ResourceClass| {
            let total = self.config.total.get(c);
            if total == 0 {
                0.0
            } else {
                100.0 * used.get(c) as f64 / total as f64
            }
        };
        Utilization {
            lut: pct(ResourceClass::Lut),
            memory: pct(ResourceClass::Memory),
            io: pct(ResourceClass::Io),
            dsp: pct(ResourceClass::Dsp),
        }
    }

    /// `free + allocated == total` in every class.
    pub fn is_conserved(&self) -> bool {
        self.free + self.allocated() == self.config.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_fabric() -> Fabric {
        Fabric::new(FabricConfig::default()).unwrap()
    }

    #[test]
    fn default_totals_match_xczu7ev() {
        let f = default_fabric();
        assert_eq!(f.total().lut, 504_000);
        assert_eq!(f.total().dsp, 1_728);
        assert_eq!(f.total().io_pins, 464);
        assert_eq!(f.total().memory_bytes, 38_000_000);
    }

    #[test]
    fn oversized_core_footprint_is_rejected() {
        let cfg = FabricConfig {
            core_footprint: ResourceVector::new(600_000, 1, 1, 1),
            ..FabricConfig::default()
        };
        assert!(matches!(Fabric::new(cfg), Err(FabricError::InvalidConfig(_))));
    }

    #[test]
    fn zero_bitstream_is_rejected() {
        let cfg = FabricConfig {
            bitstream_total_bytes: 0,
            ..FabricConfig::default()
        };
        assert!(matches!(Fabric::new(cfg), Err(FabricError::InvalidConfig(_))));
    }

    #[test]
    fn design_utilization_row() {
        let mut f = default_fabric();
        f.allocate(XCZU7EV_DESIGN_UTILIZATION).unwrap();
        let u = f.utilization();
        assert!((u.lut - 30.0).abs() < 1e-9);
        assert!((u.memory - 30.0).abs() < 1e-9);
        // 139/464 and 518/1728 computed directly.
        assert!((u.io - 29.956_896_551_724_14).abs() < 1e-9);
        assert!((u.dsp - 29.976_851_851_851_85).abs() < 1e-9);
    }

    #[test]
    fn second_large_request_names_lut() {
        let mut f = default_fabric();
        f.allocate(XCZU7EV_DESIGN_UTILIZATION).unwrap();
        // 504,000 - 151,200 = 352,800 < 400,000
        assert_eq!(f.free().lut, 352_800);
        let err = f.allocate(ResourceVector::new(400_000, 0, 0, 0)).unwrap_err();
        assert_eq!(err, FabricError::InsufficientResources(ResourceClass::Lut));
    }

    #[test]
    fn whole_pool_allocation_empties_free() {
        let mut f = default_fabric();
        f.allocate(f.total()).unwrap();
        assert!(f.free().is_zero());
        assert!(f.is_conserved());
    }

    #[test]
    fn empty_fabric_is_idle() {
        assert_eq!(default_fabric().utilization(), Utilization::default());
    }

    #[test]
    fn empty_request_is_rejected() {
        assert_eq!(
            default_fabric().allocate(ResourceVector::ZERO),
            Err(FabricError::EmptyRequest)
        );
    }

    #[test]
    fn release_errors() {
        let mut f = default_fabric();
        assert_eq!(f.release(SlotId(9)), Err(FabricError::UnknownSlot(SlotId(9))));
        let s = f.allocate(ResourceVector::new(1, 1, 1, 1)).unwrap();
        f.set_reconfiguring(s, true).unwrap();
        assert_eq!(f.release(s), Err(FabricError::SlotBusy(s)));
        f.set_reconfiguring(s, false).unwrap();
        assert!(f.release(s).is_ok());
    }

    #[test]
    fn default_core_geometry() {
        let f = default_fabric();
        assert_eq!(f.config().core_footprint, ResourceVector::new(15_750, 1_187_500, 14, 54));
        assert_eq!(f.cores_for(&f.total().div_floor(8)), 4);
        assert_eq!(f.cores_for(&f.config().core_footprint), 1);
    }

    fn arb_request() -> impl Strategy<Value = ResourceVector> {
        (0u64..200_000, 0u64..15_000_000, 0u64..200, 0u64..700)
            .prop_map(|(a, b, c, d)| ResourceVector::new(a + 1, b, c, d))
    }

    proptest! {
        #[test]
        fn allocate_release_round_trip(reqs in prop::collection::vec(arb_request(), 1..12)) {
            let mut f = default_fabric();
            let before = f.free();
            let mut slots = Vec::new();
            for r in reqs {
                if let Ok(id) = f.allocate(r) {
                    slots.push(id);
                }
                prop_assert!(f.is_conserved());
            }
            for id in slots.into_iter().rev() {
                f.release(id).unwrap();
                prop_assert!(f.is_conserved());
            }
            prop_assert_eq!(f.free(), before);
        }
    }
}
