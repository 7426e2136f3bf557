//! Deterministic discrete-event simulator of a virtualized neuromorphic
//! fabric: partitioned FPGA resources, LIF neurocores, a hypervisor with full
//! and partial reconfiguration, a shared I/O link and a service scheduler.

pub mod bench;
pub mod fabric;
pub mod io;
pub mod metrics;
pub mod scenario;
pub mod sched;
pub mod sim;
pub mod snn;
pub mod system;
pub mod virt;

pub use sim::{Engine, SimTime};
pub use system::{System, SystemConfig};
