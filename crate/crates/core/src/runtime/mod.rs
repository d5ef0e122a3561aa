//! Multi-device serving over simulated accelerators.
//!
//! A network is split into contiguous sub-networks ([`partition`]), each
//! compiled and loaded onto a device ([`HostManager::add_network`]). Devices
//! are worker threads with FIFO queues; outputs are computed for real while
//! timing is tracked on a per-device virtual clock derived from the
//! configured throughput and bandwidth.
//!
//! Device fleet file:
//!
//! ```json
//! {"devices": [{"id": 0, "memory_capacity": 1048576, "throughput": 1e9, "bandwidth": 1e9}]}
//! ```
//!
//! Event log: one line per event, tab separated, sorted by virtual time:
//! `<seconds>\t<device>\t<sub-network>\t<event>`.

mod device;
mod host;
mod partition;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use device::{Completion, DeviceManager, DeviceStats};
pub use host::HostManager;
pub use partition::{partition, partition_with_free, Edge, PartitionDag, SubNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub id: usize,
    /// Bytes.
    pub memory_capacity: usize,
    /// Operations per second, for cost estimates.
    pub throughput: f64,
    /// Simulated transfer bandwidth in bytes per second.
    pub bandwidth: f64,
}

impl DeviceConfig {
    pub fn new(id: usize, memory_capacity: usize) -> Self {
        DeviceConfig { id, memory_capacity, throughput: 1e9, bandwidth: 1e9 }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.memory_capacity > 0
            && self.throughput.is_finite()
            && self.throughput > 0.0
            && self.bandwidth.is_finite()
            && self.bandwidth > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Runtime(format!("device {}: capacity, throughput and bandwidth must be positive", self.id)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub devices: Vec<DeviceConfig>,
}

impl FleetConfig {
    pub fn parse(text: &str) -> Result<Vec<DeviceConfig>> {
        let fleet: FleetConfig = serde_json::from_str(text)?;
        validate_fleet(&fleet.devices)?;
        Ok(fleet.devices)
    }

    pub fn to_text(devices: &[DeviceConfig]) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FleetConfig { devices: devices.to_vec() })? + "\n")
    }
}

pub(crate) fn validate_fleet(devices: &[DeviceConfig]) -> Result<()> {
    if devices.is_empty() {
        return Err(Error::Runtime("no devices".into()));
    }
    for (i, d) in devices.iter().enumerate() {
        d.validate()?;
        if devices[..i].iter().any(|o| o.id == d.id) {
            return Err(Error::Runtime(format!("duplicate device id {}", d.id)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub device: usize,
    pub subnetwork: String,
    pub event: String,
}

/// Shared, append-only trace of device events.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    pub fn record(&self, time: f64, device: usize, subnetwork: &str, event: &str) {
        self.events.lock().unwrap().push(Event {
            time,
            device,
            subnetwork: subnetwork.to_string(),
            event: event.to_string(),
        });
    }

    pub fn events(&self) -> Vec<Event> {
        let mut evs = self.events.lock().unwrap().clone();
        evs.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.device.cmp(&b.device)));
        evs
    }

    pub fn render(&self) -> String {
        self.events()
            .iter()
            .map(|e| format!("{:.9}\t{}\t{}\t{}\n", e.time, e.device, e.subnetwork, e.event))
            .collect()
    }
}
