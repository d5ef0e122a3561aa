use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::{DeviceConfig, EventLog};
use crate::error::{Error, Result};
use crate::eval::Bindings;
use crate::interp::CompiledFunction;
use crate::tensor::Tensor;

/// Result of one run on a device.
#[derive(Debug)]
pub struct Completion {
    /// Caller-chosen label echoed back.
    pub tag: usize,
    pub device: usize,
    pub result: Result<BTreeMap<String, Tensor>>,
    /// Virtual seconds.
    pub start: f64,
    pub finish: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceStats {
    pub id: usize,
    pub capacity: usize,
    pub used: usize,
    pub peak_used: usize,
    pub loaded: usize,
    pub runs: usize,
    pub queue_depth: usize,
    pub clock: f64,
}

struct Loaded {
    compiled: Arc<CompiledFunction>,
    ops: u64,
    bytes: usize,
}

#[derive(Default)]
struct Memory {
    loaded: BTreeMap<String, Loaded>,
    used: usize,
    peak: usize,
    loads: usize,
}

struct Shared {
    config: DeviceConfig,
    memory: Mutex<Memory>,
    queue: AtomicUsize,
    submitted: AtomicUsize,
    runs: AtomicUsize,
    clock: Mutex<f64>,
    log: Arc<EventLog>,
}

struct Job {
    key: String,
    inputs: Bindings,
    ready_at: f64,
    tag: usize,
    reply: Sender<Completion>,
}

/// One simulated accelerator: a worker thread draining a FIFO queue.
///
/// Loaded programs reserve their arena size against the device capacity.
/// Runs execute one at a time; each advances the device clock by the time
/// to move its inputs in, compute, and move its outputs back.
pub struct DeviceManager {
    shared: Arc<Shared>,
    tx: Option<Sender<Job>>,
    worker: Option<JoinHandle<()>>,
}

fn bytes_of(ts: &BTreeMap<String, Tensor>) -> usize {
    ts.values().map(|t| t.ty().size_bytes()).sum()
}

fn work(shared: Arc<Shared>, rx: Receiver<Job>) {
    let cfg = &shared.config;
    while let Ok(job) = rx.recv() {
        let found = shared
            .memory
            .lock()
            .unwrap()
            .loaded
            .get(&job.key)
            .map(|l| (l.compiled.clone(), l.ops));
        let mut clock = shared.clock.lock().unwrap();
        let start = clock.max(job.ready_at);
        let (result, finish) = match found {
            None => {
                shared.log.record(start, cfg.id, &job.key, "error unknown sub-network");
                (Err(Error::Runtime(format!("`{}` is not loaded on device {}", job.key, cfg.id))), start)
            }
            Some((compiled, ops)) => {
                shared.log.record(start, cfg.id, &job.key, "start");
                let result = compiled.run(&job.inputs);
                let moved = bytes_of(&job.inputs) + result.as_ref().map(bytes_of).unwrap_or(0);
                let finish = start + moved as f64 / cfg.bandwidth + ops as f64 / cfg.throughput;
                let event = if result.is_ok() { "finish" } else { "error" };
                shared.log.record(finish, cfg.id, &job.key, event);
                (result, finish)
            }
        };
        *clock = finish;
        drop(clock);
        shared.runs.fetch_add(1, Ordering::SeqCst);
        shared.queue.fetch_sub(1, Ordering::SeqCst);
        let _ = job.reply.send(Completion { tag: job.tag, device: cfg.id, result, start, finish });
    }
}

impl DeviceManager {
    pub fn new(config: DeviceConfig, log: Arc<EventLog>) -> Result<Self> {
        super::validate_fleet(std::slice::from_ref(&config))?;
        let shared = Arc::new(Shared {
            config,
            memory: Mutex::new(Memory::default()),
            queue: AtomicUsize::new(0),
            submitted: AtomicUsize::new(0),
            runs: AtomicUsize::new(0),
            clock: Mutex::new(0.0),
            log,
        });
        let (tx, rx) = channel();
        let worker_shared = shared.clone();
        let worker = std::thread::Builder::new()
            .name(format!("device-{}", shared.config.id))
            .spawn(move || work(worker_shared, rx))?;
        Ok(DeviceManager { shared, tx: Some(tx), worker: Some(worker) })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.shared.config
    }

    pub fn id(&self) -> usize {
        self.shared.config.id
    }

    pub fn free_bytes(&self) -> usize {
        self.shared.config.memory_capacity - self.shared.memory.lock().unwrap().used
    }

    /// Reserve memory for `compiled` under `key`. Fails without changing
    /// anything when it does not fit or the key is taken.
    pub fn load(&self, key: &str, compiled: Arc<CompiledFunction>, ops: u64) -> Result<()> {
        let id = self.id();
        let bytes = compiled.plan.arena_size;
        let mut mem = self.shared.memory.lock().unwrap();
        if mem.loaded.contains_key(key) {
            return Err(Error::Provision { device: id, msg: format!("`{key}` is already loaded") });
        }
        let cap = self.shared.config.memory_capacity;
        if mem.used + bytes > cap {
            return Err(Error::Provision {
                device: id,
                msg: format!("`{key}` needs {bytes} bytes, {} of {cap} free", cap - mem.used),
            });
        }
        mem.used += bytes;
        mem.peak = mem.peak.max(mem.used);
        mem.loads += 1;
        mem.loaded.insert(key.to_string(), Loaded { compiled, ops, bytes });
        let now = *self.shared.clock.lock().unwrap();
        self.shared.log.record(now, id, key, "load");
        Ok(())
    }

    /// Release a program; returns whether it was loaded.
    pub fn unload(&self, key: &str) -> bool {
        let mut mem = self.shared.memory.lock().unwrap();
        match mem.loaded.remove(key) {
            Some(l) => {
                mem.used -= l.bytes;
                drop(mem);
                let now = *self.shared.clock.lock().unwrap();
                self.shared.log.record(now, self.id(), key, "unload");
                true
            }
            None => false,
        }
    }

    pub fn is_loaded(&self, key: &str) -> bool {
        self.shared.memory.lock().unwrap().loaded.contains_key(key)
    }

    /// Number of successful loads so far.
    pub fn load_count(&self) -> usize {
        self.shared.memory.lock().unwrap().loads
    }

    pub fn queue_depth(&self) -> usize {
        self.shared.queue.load(Ordering::SeqCst)
    }

    /// Runs ever submitted, finished or not.
    pub fn submitted(&self) -> usize {
        self.shared.submitted.load(Ordering::SeqCst)
    }

    /// Queue a run. The outcome arrives on `reply` tagged with `tag`; the run
    /// does not start on the virtual clock before `ready_at`.
    pub fn submit(&self, key: &str, inputs: Bindings, ready_at: f64, tag: usize, reply: Sender<Completion>) {
        self.shared.queue.fetch_add(1, Ordering::SeqCst);
        self.shared.submitted.fetch_add(1, Ordering::SeqCst);
        let job = Job { key: key.to_string(), inputs, ready_at, tag, reply };
        self.tx.as_ref().expect("device running").send(job).expect("device worker alive");
    }

    /// Submit and wait.
    pub fn run(&self, key: &str, inputs: Bindings) -> Completion {
        let (tx, rx) = channel();
        self.submit(key, inputs, 0.0, 0, tx);
        rx.recv().expect("device worker replies")
    }

    pub fn stats(&self) -> DeviceStats {
        let mem = self.shared.memory.lock().unwrap();
        DeviceStats {
            id: self.id(),
            capacity: self.shared.config.memory_capacity,
            used: mem.used,
            peak_used: mem.peak,
            loaded: mem.loaded.len(),
            runs: self.shared.runs.load(Ordering::SeqCst),
            queue_depth: self.queue_depth(),
            clock: *self.shared.clock.lock().unwrap(),
        }
    }
}

impl Drop for DeviceManager {
    fn drop(&mut self) {
        drop(self.tx.take());
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
