//! Paravirtualized I/O: per-VM descriptor rings over a shared link.
//!
//! The link is a latency-plus-bandwidth pipe. A transfer's bandwidth share
//! is fixed when it is submitted: the peak for the number of VMs with
//! traffic in flight, divided evenly among all in-flight transfers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::sim::{round_half_up, SimTime};
use crate::virt::VmId;

/// Bits per gibibit.
pub const GIBIBIT: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RingId(pub u32);

impl fmt::Display for RingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ring{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransferId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferDescriptor {
    pub vm: VmId,
    pub size: u64,
    pub direction: Direction,
    pub submitted_at: SimTime,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IoError {
    #[error("ring {0} is full")]
    Backpressure(RingId),
    #[error("ring {0} is closed")]
    RingClosed(RingId),
    #[error("unknown ring {0}")]
    UnknownRing(RingId),
    #[error("transfer size must be positive")]
    EmptyTransfer,
    #[error("invalid link model: {0}")]
    InvalidLink(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub latency: SimTime,
    /// Aggregate peak bandwidth in Gib/s keyed by active VM count. Counts
    /// between keys use the nearest key below.
    pub peak_gibs: BTreeMap<u32, f64>,
    pub ring_capacity: u32,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            latency: SimTime::from_micros(10),
            peak_gibs: BTreeMap::from([(1, 1.5), (2, 2.9), (4, 5.1)]),
            ring_capacity: 256,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.peak_gibs.is_empty() {
            return Err(IoError::InvalidLink("peak table is empty".into()));
        }
        if !self.peak_gibs.contains_key(&1) {
            return Err(IoError::InvalidLink("peak table needs an entry for 1 VM".into()));
        }
        if self.peak_gibs.values().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(IoError::InvalidLink("peak bandwidths must be positive".into()));
        }
        let vals: Vec<f64> = self.peak_gibs.values().copied().collect();
        if vals.windows(2).any(|w| w[1] < w[0]) {
            return Err(IoError::InvalidLink(
                "peak bandwidth must be non-decreasing in VM count".into(),
            ));
        }
        if self.ring_capacity == 0 {
            return Err(IoError::InvalidLink("ring capacity must be positive".into()));
        }
        Ok(())
    }

    /// Peak aggregate bandwidth in Gib/s with `active_vms` VMs transferring.
    pub fn peak_bw(&self, active_vms: u32) -> f64 {
        self.peak_gibs
            .range(..=active_vms.max(1))
            .next_back()
            .map(|(_, &b)| b)
            .expect("table has an entry for 1 VM")
    }

    /// Time to move `size` bytes at `gibs` once the pipe latency is paid.
    pub fn wire_time(size: u64, gibs: f64) -> SimTime {
        round_half_up(size as f64 * 8.0 * 1e9 / (gibs * GIBIBIT))
    }
}

/// Steady-state throughput in Gib/s of back-to-back `size`-byte transfers
/// over a pipe with the link's latency and the peak for `vm_count` VMs.
pub fn effective_throughput(link: &LinkModel, size: u64, vm_count: u32) -> f64 {
    let bits = size as f64 * 8.0;
    let peak = link.peak_bw(vm_count) * GIBIBIT;
    bits / (link.latency.as_secs_f64() + bits / peak) / GIBIBIT
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoRing {
    pub id: RingId,
    pub vm: VmId,
    pub capacity: u32,
    pub closed: bool,
    in_flight: BTreeSet<TransferId>,
    pub submitted: u64,
    pub completed: u64,
    pub backpressured: u64,
    pub drained: u64,
}

impl IoRing {
    pub fn occupancy(&self) -> u32 {
        self.in_flight.len() as u32
    }

    /// Every submission attempt is accounted for exactly once.
    pub fn is_conserved(&self) -> bool {
        self.submitted - self.completed - self.backpressured - self.drained
            == self.in_flight.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InFlight {
    pub id: TransferId,
    pub ring: RingId,
    pub desc: TransferDescriptor,
    pub completion: SimTime,
}

#[derive(Debug, Clone)]
pub struct IoDriver {
    link: LinkModel,
    rings: BTreeMap<RingId, IoRing>,
    in_flight: BTreeMap<TransferId, InFlight>,
    next_ring: u32,
    next_transfer: u64,
}

impl IoDriver {
    pub fn new(link: LinkModel) -> Result<Self, IoError> {
        link.validate()?;
        Ok(IoDriver {
            link,
            rings: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            next_ring: 0,
            next_transfer: 0,
        })
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn open_ring(&mut self, vm: VmId) -> RingId {
        self.open_ring_with_capacity(vm, self.link.ring_capacity)
    }

    pub fn open_ring_with_capacity(&mut self, vm: VmId, capacity: u32) -> RingId {
        let id = RingId(self.next_ring);
        self.next_ring += 1;
        self.rings.insert(
            id,
            IoRing {
                id,
                vm,
                capacity,
                closed: false,
                in_flight: BTreeSet::new(),
                submitted: 0,
                completed: 0,
                backpressured: 0,
                drained: 0,
            },
        );
        id
    }

    pub fn ring(&self, id: RingId) -> Option<&IoRing> {
        self.rings.get(&id)
    }

    pub fn rings(&self) -> impl Iterator<Item = &IoRing> {
        self.rings.values()
    }

    pub fn transfer(&self, id: TransferId) -> Option<&InFlight> {
        self.in_flight.get(&id)
    }

    pub fn in_flight_count(&self) -> usize {
        self.in_flight.len()
    }

    fn active_vms_with(&self, vm: VmId) -> u32 {
        let mut vms: BTreeSet<VmId> = self.in_flight.values().map(|t| t.desc.vm).collect();
        vms.insert(vm);
        vms.len() as u32
    }

    /// Bandwidth share a new transfer from `vm` would get right now.
    pub fn share_for(&self, vm: VmId) -> f64 {
        let concurrent = self.in_flight.len() as f64 + 1.0;
        self.link.peak_bw(self.active_vms_with(vm)) / concurrent
    }

    /// Queues a transfer. Data starts moving at `max(now, not_before)`, which
    /// lets callers hold transfers of a stalled VM.
    pub fn submit(
        &mut self,
        ring: RingId,
        desc: TransferDescriptor,
        not_before: SimTime,
    ) -> Result<InFlight, IoError> {
        if desc.size == 0 {
            return Err(IoError::EmptyTransfer);
        }
        let share = self.share_for(desc.vm);
        let r = self.rings.get_mut(&ring).ok_or(IoError::UnknownRing(ring))?;
        if r.closed {
            return Err(IoError::RingClosed(ring));
        }
        r.submitted += 1;
        if r.occupancy() >= r.capacity {
            r.backpressured += 1;
            return Err(IoError::Backpressure(ring));
        }
        let start = desc.submitted_at.max(not_before);
        let completion = start + self.link.latency + LinkModel::wire_time(desc.size, share);
        let id = TransferId(self.next_transfer);
        self.next_transfer += 1;
        r.in_flight.insert(id);
        let t = InFlight {
            id,
            ring,
            desc,
            completion,
        };
        self.in_flight.insert(id, t.clone());
        Ok(t)
    }

    pub fn complete(&mut self, id: TransferId) -> Option<InFlight> {
        let t = self.in_flight.remove(&id)?;
        let r = self.rings.get_mut(&t.ring).expect("ring outlives transfers");
        r.in_flight.remove(&id);
        r.completed += 1;
        Some(t)
    }

    /// Pushes a transfer's completion back by `delay`.
    pub fn delay(&mut self, id: TransferId, delay: SimTime) {
        if let Some(t) = self.in_flight.get_mut(&id) {
            t.completion += delay;
        }
    }

    /// Cancels everything in flight on `ring` and closes it.
    pub fn close_ring(&mut self, ring: RingId) -> Result<Vec<InFlight>, IoError> {
        let r = self.rings.get_mut(&ring).ok_or(IoError::UnknownRing(ring))?;
        r.closed = true;
        let ids: Vec<TransferId> = std::mem::take(&mut r.in_flight).into_iter().collect();
        r.drained += ids.len() as u64;
        Ok(ids
            .into_iter()
            .filter_map(|id| self.in_flight.remove(&id))
            .collect())
    }
}
