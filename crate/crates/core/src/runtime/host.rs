use std::collections::BTreeMap;
use std::sync::mpsc::channel;
use std::sync::{Arc, Mutex};

use super::{partition_with_free, validate_fleet, DeviceConfig, DeviceManager, DeviceStats, EventLog, PartitionDag};
use crate::error::{Error, Result};
use crate::eval::Bindings;
use crate::graph::{FuncId, Module};
use crate::tensor::Tensor;

/// Entry point for serving: owns the devices and the networks loaded on them.
///
/// `execute` may be called from many threads at once. Each request keeps
/// its own intermediate tensors, so concurrent requests never share state
/// beyond the device queues.
pub struct HostManager {
    devices: Vec<DeviceManager>,
    networks: Mutex<BTreeMap<String, Arc<PartitionDag>>>,
    log: Arc<EventLog>,
}

impl HostManager {
    pub fn new(configs: &[DeviceConfig]) -> Result<Self> {
        validate_fleet(configs)?;
        let log = Arc::new(EventLog::default());
        let devices = configs.iter().map(|c| DeviceManager::new(c.clone(), log.clone())).collect::<Result<_>>()?;
        Ok(HostManager { devices, networks: Mutex::new(BTreeMap::new()), log })
    }

    pub fn devices(&self) -> &[DeviceManager] {
        &self.devices
    }

    fn device(&self, id: usize) -> &DeviceManager {
        self.devices.iter().find(|d| d.id() == id).expect("device id from this fleet")
    }

    fn key(network: &str, part: &str) -> String {
        format!("{network}/{part}")
    }

    /// Partition a lowered function over the free memory of the fleet and
    /// load every part and replica. On failure nothing stays loaded.
    pub fn add_network(&self, name: &str, m: &Module, f: FuncId) -> Result<Arc<PartitionDag>> {
        let mut nets = self.networks.lock().unwrap();
        if nets.contains_key(name) {
            return Err(Error::Runtime(format!("network `{name}` already exists")));
        }
        let configs: Vec<DeviceConfig> = self.devices.iter().map(|d| d.config().clone()).collect();
        let free: Vec<usize> = self.devices.iter().map(|d| d.free_bytes()).collect();
        let dag = Arc::new(partition_with_free(m, f, &configs, &free, name)?);
        self.provision(&dag)?;
        nets.insert(name.to_string(), dag.clone());
        Ok(dag)
    }

    /// Load each part on each of its devices, rolling back on failure.
    pub fn provision(&self, dag: &PartitionDag) -> Result<()> {
        let mut done: Vec<(usize, String)> = Vec::new();
        for p in &dag.parts {
            let key = Self::key(&dag.network, &p.name);
            for &d in &p.devices {
                if let Err(e) = self.device(d).load(&key, p.compiled.clone(), p.ops) {
                    for (d, k) in &done {
                        self.device(*d).unload(k);
                    }
                    return Err(e);
                }
                done.push((d, key.clone()));
            }
        }
        Ok(())
    }

    pub fn remove_network(&self, name: &str) -> Result<()> {
        let dag = self
            .networks
            .lock()
            .unwrap()
            .remove(name)
            .ok_or_else(|| Error::Runtime(format!("unknown network `{name}`")))?;
        for p in &dag.parts {
            for &d in &p.devices {
                self.device(d).unload(&Self::key(name, &p.name));
            }
        }
        Ok(())
    }

    pub fn network(&self, name: &str) -> Option<Arc<PartitionDag>> {
        self.networks.lock().unwrap().get(name).cloned()
    }

    /// Replica with the shortest queue; ties go to the one used least.
    fn pick(&self, devices: &[usize]) -> &DeviceManager {
        devices
            .iter()
            .map(|&d| self.device(d))
            .min_by_key(|d| (d.queue_depth(), d.submitted(), d.id()))
            .expect("every part has a device")
    }

    /// Run one request through `name`, dispatching each part once all the
    /// parts it depends on have finished.
    pub fn execute(&self, name: &str, inputs: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        let dag = self.network(name).ok_or_else(|| Error::Runtime(format!("unknown network `{name}`")))?;
        let n = dag.parts.len();
        // Tensor and the virtual time it became available.
        let mut store: BTreeMap<String, (Tensor, f64)> =
            inputs.iter().map(|(k, t)| (k.clone(), (t.clone(), 0.0))).collect();
        let mut outputs = BTreeMap::new();
        let mut submitted = vec![false; n];
        let mut remaining = n;
        let mut in_flight = 0;
        let (tx, rx) = channel();
        while remaining > 0 {
            for (i, p) in dag.parts.iter().enumerate() {
                if submitted[i] || p.inputs.keys().any(|k| dag.transfers.contains(k) && !store.contains_key(k)) {
                    continue;
                }
                let mut bindings = Bindings::new();
                let mut ready = 0.0f64;
                for k in p.inputs.keys() {
                    if let Some((t, at)) = store.get(k) {
                        bindings.insert(k.clone(), t.clone());
                        ready = ready.max(*at);
                    }
                }
                self.pick(&p.devices).submit(&Self::key(name, &p.name), bindings, ready, i, tx.clone());
                submitted[i] = true;
                in_flight += 1;
            }
            if in_flight == 0 {
                return Err(Error::Runtime(format!("network `{name}` has parts that can never run")));
            }
            let c = rx.recv().map_err(|_| Error::Runtime("device worker stopped".into()))?;
            in_flight -= 1;
            remaining -= 1;
            for (k, t) in c.result? {
                if dag.transfers.contains(&k) {
                    store.insert(k, (t, c.finish));
                } else {
                    outputs.insert(k, t);
                }
            }
        }
        Ok(outputs)
    }

    pub fn device_stats(&self) -> Vec<DeviceStats> {
        self.devices.iter().map(|d| d.stats()).collect()
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use crate::tensor::TensorType;

    /// x[4,64] -> matmul w0 -> relu -> matmul w1 -> relu -> out, heavy on
    /// the first matmul.
    fn mlp() -> (Module, FuncId) {
        let mut m = Module::new();
        let f = m.create_function("mlp").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[4, 64])).unwrap();
        let out = m.create_placeholder("out", TensorType::float(&[4, 8])).unwrap();
        let w0 = (0..64 * 64).map(|i| ((i * 7 % 13) as f32 - 6.0) / 16.0).collect();
        let w1 = (0..64 * 8).map(|i| ((i * 5 % 11) as f32 - 5.0) / 16.0).collect();
        let w0 = m.create_constant("w0", Tensor::from_f32(&[64, 64], w0).unwrap()).unwrap();
        let w1 = m.create_constant("w1", Tensor::from_f32(&[64, 8], w1).unwrap()).unwrap();
        let mut b = m.builder(f);
        let h = b.matmul(x.into(), w0.into());
        let h = b.relu(h);
        let y = b.matmul(h, w1.into());
        let y = b.relu(y);
        b.save(y, out);
        (m, f)
    }

    fn input(seed: usize) -> Bindings {
        let v = (0..256).map(|i| (((i + seed * 31) * 17 % 23) as f32 - 11.0) / 8.0).collect();
        Bindings::from([("x".to_string(), Tensor::from_f32(&[4, 64], v).unwrap())])
    }

    #[test]
    fn single_device_matches_evaluator() {
        let (m, f) = mlp();
        let host = HostManager::new(&[DeviceConfig::new(0, 1 << 20)]).unwrap();
        host.add_network("mlp", &m, f).unwrap();
        for s in 0..3 {
            let want = evaluate::<f32>(&m, f, &input(s)).unwrap().output_tensors();
            assert_eq!(host.execute("mlp", &input(s)).unwrap(), want);
        }
        assert!(host.execute("nope", &input(0)).is_err());
        let bad = Bindings::from([("x".to_string(), Tensor::zeros(TensorType::float(&[4, 63])))]);
        assert!(host.execute("mlp", &bad).is_err());
    }

    #[test]
    fn failed_provision_unloads_everything() {
        let (m, f) = mlp();
        let host = HostManager::new(&[DeviceConfig::new(0, 1 << 20)]).unwrap();
        let dag = host.add_network("a", &m, f).unwrap();
        let mut bigger = (*dag).clone();
        bigger.network = "b".into();
        // Fits once more but not twice.
        let spare = host.devices()[0].free_bytes();
        let fits = spare / dag.parts[0].footprint;
        for _ in 0..fits {
            bigger.parts.push(bigger.parts[0].clone());
            let i = bigger.parts.len() - 1;
            bigger.parts[i].name = format!("copy{i}");
        }
        let before = host.device_stats();
        let err = host.provision(&bigger).unwrap_err();
        assert!(matches!(err, Error::Provision { device: 0, .. }));
        assert_eq!(host.device_stats()[0].used, before[0].used);
        host.remove_network("a").unwrap();
        assert_eq!(host.device_stats()[0].used, 0);
    }

    #[test]
    fn replicas_share_sequential_load() {
        let (m, f) = mlp();
        let cfgs: Vec<_> = (0..4).map(|i| DeviceConfig::new(i, 1 << 20)).collect();
        let host = HostManager::new(&cfgs).unwrap();
        let dag = host.add_network("mlp", &m, f).unwrap();
        assert_eq!(dag.parts.len(), 1);
        // A single part is never above twice the mean, so replicate by hand.
        let mut rep = (*dag).clone();
        rep.network = "rep".into();
        rep.parts[0].devices = vec![0, 1];
        host.provision(&rep).unwrap();
        host.networks.lock().unwrap().insert("rep".into(), Arc::new(rep));
        for s in 0..8 {
            host.execute("rep", &input(s)).unwrap();
        }
        let runs: Vec<usize> = host.device_stats().iter().map(|d| d.runs).collect();
        assert!(runs[0] >= 1 && runs[1] >= 1, "{runs:?}");
    }
}
