use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use super::{validate_fleet, DeviceConfig};
use crate::error::{Error, Result};
use crate::graph::{verify_or_err, FuncId, Module, Node, NodeId, Op, Operand, Storage, StorageId};
use crate::interp::CompiledFunction;
use crate::lowering::Mode;
use crate::lowir::{schedule, IrProgram};
use crate::pipeline::{compile_prepared, CompileOptions};
use crate::tensor::TensorType;

/// Boundaries considered for a cut, counting back from where growth stopped.
const LOOKBACK: usize = 4;

/// One contiguous slice of the scheduled network, compiled for a device.
#[derive(Clone, Debug)]
pub struct SubNetwork {
    pub name: String,
    /// Nodes of the source function, in execution order.
    pub nodes: Vec<NodeId>,
    pub program: IrProgram,
    pub compiled: Arc<CompiledFunction>,
    /// Placeholders the part reads: network inputs and transfers.
    pub inputs: BTreeMap<String, TensorType>,
    /// Placeholders the part writes: network outputs and transfers.
    pub outputs: BTreeMap<String, TensorType>,
    /// Device bytes reserved when loaded.
    pub footprint: usize,
    pub ops: u64,
    /// Device ids holding a copy; the first is the primary.
    pub devices: Vec<usize>,
    /// Seconds of compute on the primary device.
    pub est_time: f64,
    /// Seconds moving transfer tensors in and out.
    pub comm_time: f64,
}

/// A tensor handed from one part to another.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub tensor: String,
    pub bytes: usize,
}

#[derive(Clone, Debug)]
pub struct PartitionDag {
    pub network: String,
    pub parts: Vec<SubNetwork>,
    pub edges: Vec<Edge>,
    /// Names of the placeholders introduced for transfers.
    pub transfers: BTreeSet<String>,
}

impl PartitionDag {
    /// Estimated critical-path seconds for one request, ignoring queueing.
    pub fn est_latency(&self) -> f64 {
        let mut finish = vec![0.0f64; self.parts.len()];
        for (i, p) in self.parts.iter().enumerate() {
            let ready = self.edges.iter().filter(|e| e.to == i).map(|e| finish[e.from]).fold(0.0, f64::max);
            finish[i] = ready + p.est_time + p.comm_time;
        }
        finish.into_iter().fold(0.0, f64::max)
    }

    /// Human-readable cost report, one line per part.
    pub fn report(&self) -> String {
        let mut s = format!("network {}: {} part(s)\n", self.network, self.parts.len());
        for p in &self.parts {
            let devs = p.devices.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                s,
                "{}\tdevices={}\tnodes={}\tbytes={}\tops={}\ttime={:.3e}s\tcomm={:.3e}s",
                p.name,
                devs,
                p.nodes.len(),
                p.footprint,
                p.ops,
                p.est_time,
                p.comm_time
            );
        }
        for e in &self.edges {
            let _ = writeln!(s, "p{} -> p{}\t{}\t{} bytes", e.from, e.to, e.tensor, e.bytes);
        }
        s
    }
}

/// Estimated arithmetic operations of a node.
fn node_ops(m: &Module, f: FuncId, n: NodeId) -> u64 {
    let node = m.function(f).node(n);
    let in_ty = |i: usize| node.inputs.get(i).and_then(|&o| m.operand_type(f, o).ok());
    let out = node.ty.as_ref().map(|t| t.num_elements()).or_else(|| in_ty(0).map(|t| t.num_elements())).unwrap_or(0);
    let ops = match node.op {
        Op::MatMul => match (in_ty(0), in_ty(1)) {
            (Some(a), Some(b)) if a.rank() == 2 && b.rank() == 2 => 2 * a.dims[0] * a.dims[1] * b.dims[1],
            _ => out,
        },
        Op::Convolution { kernel, .. } => match in_ty(0) {
            Some(x) if x.rank() == 4 => 2 * out * kernel * kernel * x.dims[3],
            _ => out,
        },
        _ => out,
    };
    ops as u64
}

struct Built {
    program: IrProgram,
    compiled: CompiledFunction,
    inputs: BTreeMap<String, TensorType>,
    outputs: BTreeMap<String, TensorType>,
}

struct Ctx<'a> {
    m: &'a Module,
    f: FuncId,
    order: Vec<NodeId>,
    /// Position of the last reader of each node result.
    last_read: BTreeMap<NodeId, usize>,
    xfer: BTreeMap<NodeId, String>,
}

impl Ctx<'_> {
    fn escapes(&self, n: NodeId, end: usize) -> bool {
        self.last_read.get(&n).is_some_and(|&p| p >= end)
    }

    fn crossing_bytes(&self, start: usize, end: usize) -> usize {
        self.order[start..end]
            .iter()
            .filter(|&&n| self.escapes(n, end))
            .filter_map(|&n| self.m.function(self.f).node(n).ty.as_ref())
            .map(|t| t.size_bytes())
            .sum()
    }

    /// Copy `order[start..end]` into a standalone module and compile it.
    fn build(&self, start: usize, end: usize) -> Result<Built> {
        let src = self.m.function(self.f);
        let mut sub = Module::new();
        let sf = sub.create_function(src.name())?;
        sub.function_mut(sf).differentiated = src.differentiated;
        let mut smap: BTreeMap<StorageId, StorageId> = BTreeMap::new();
        let mut nmap: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut outside: BTreeMap<NodeId, StorageId> = BTreeMap::new();
        for &n in &self.order[start..end] {
            let mut node = src.node(n).clone();
            let mut map = |op: Operand, sub: &mut Module| -> Result<Operand> {
                Ok(match op {
                    Operand::Storage(s) => {
                        if let Some(&t) = smap.get(&s) {
                            return Ok(Operand::Storage(t));
                        }
                        let t = match self.m.storage(s) {
                            Storage::Constant { name, tensor } => sub.create_constant(name, tensor.clone())?,
                            Storage::Placeholder { name, ty, trainable: true } => sub.create_trainable(name, ty.clone())?,
                            Storage::Placeholder { name, ty, .. } => sub.create_placeholder(name, ty.clone())?,
                        };
                        smap.insert(s, t);
                        Operand::Storage(t)
                    }
                    Operand::Node(p) => {
                        if let Some(&q) = nmap.get(&p) {
                            return Ok(Operand::Node(q));
                        }
                        if let Some(&t) = outside.get(&p) {
                            return Ok(Operand::Storage(t));
                        }
                        let ty = src.node(p).result_type()?.clone();
                        let t = sub.create_placeholder(&self.xfer[&p], ty)?;
                        outside.insert(p, t);
                        Operand::Storage(t)
                    }
                })
            };
            node.inputs = node.inputs.iter().map(|&o| map(o, &mut sub)).collect::<Result<_>>()?;
            node.predicate = node.predicate.map(|o| map(o, &mut sub)).transpose()?;
            let has_result = node.ty.is_some();
            let new = sub.function_mut(sf).add(node);
            nmap.insert(n, new);
            if has_result && self.escapes(n, end) {
                let ty = sub.function(sf).node(new).result_type()?.clone();
                let ph = sub.create_placeholder(&self.xfer[&n], ty)?;
                sub.function_mut(sf).add(Node::new(Op::Save, vec![Operand::Node(new), Operand::Storage(ph)], None));
            }
        }
        verify_or_err(&sub, sf)?;

        let mut inputs = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        for (_, node) in sub.function(sf).nodes() {
            for op in node.reads() {
                if let Some(Storage::Placeholder { name, ty, .. }) = op.storage().map(|s| sub.storage(s)) {
                    inputs.insert(name.clone(), ty.clone());
                }
            }
            if let Some(t) = node.save_target() {
                let st = sub.storage(t);
                outputs.insert(st.name().to_string(), st.ty().clone());
            }
        }
        let opts = CompileOptions { mode: Mode::Inference, passes: Vec::new(), optimize_ir: true, fuse: true };
        let art = compile_prepared(&sub, sf, &opts)?;
        Ok(Built { program: art.program, compiled: art.compiled, inputs, outputs })
    }
}

/// Split a lowered function across `devices`, all assumed empty.
pub fn partition(m: &Module, f: FuncId, devices: &[DeviceConfig]) -> Result<PartitionDag> {
    let free: Vec<usize> = devices.iter().map(|d| d.memory_capacity).collect();
    partition_with_free(m, f, devices, &free, m.function(f).name())
}

/// Greedy contiguous partitioning over the memory-minimizing schedule.
///
/// Each part grows on the device with the most free memory until the next
/// node would not fit, then the cut is moved back to whichever of the last
/// few boundaries sends the fewest bytes forward. Parts whose estimated time
/// is more than twice the mean get one replica where memory allows.
/// `free[i]` is what remains on `devices[i]`.
pub fn partition_with_free(
    m: &Module,
    f: FuncId,
    devices: &[DeviceConfig],
    free: &[usize],
    network: &str,
) -> Result<PartitionDag> {
    validate_fleet(devices)?;
    if free.len() != devices.len() {
        return Err(Error::Runtime("free-memory list does not match the fleet".into()));
    }
    verify_or_err(m, f)?;
    let func = m.function(f);
    let order = schedule(func)?;
    let mut last_read = BTreeMap::new();
    for (i, &n) in order.iter().enumerate() {
        for op in func.node(n).reads() {
            if let Some(p) = op.node() {
                last_read.insert(p, i);
            }
        }
    }
    let taken: BTreeSet<&str> = m.storages().map(|(_, s)| s.name()).collect();
    let xfer = order
        .iter()
        .map(|&n| {
            let mut name = format!("xfer.{}", n.0);
            while taken.contains(name.as_str()) {
                name.push('_');
            }
            (n, name)
        })
        .collect();
    let ctx = Ctx { m, f, order, last_read, xfer };
    let n = ctx.order.len();
    if n == 0 {
        return Err(Error::Unpartitionable(format!("`{}` has no nodes", func.name())));
    }

    let mut free = free.to_vec();
    let max_capacity = devices.iter().map(|d| d.memory_capacity).max().unwrap_or(0);
    let mut parts: Vec<SubNetwork> = Vec::new();
    let mut start = 0;
    while start < n {
        let dev = (0..devices.len()).max_by(|&a, &b| free[a].cmp(&free[b]).then(b.cmp(&a))).unwrap();
        let first = ctx.build(start, start + 1)?;
        if first.compiled.plan.arena_size > free[dev] {
            let need = first.compiled.plan.arena_size;
            let node = ctx.order[start];
            return Err(Error::Unpartitionable(if need > max_capacity {
                format!("node {node} needs {need} bytes, more than any device holds")
            } else {
                format!("node {node} needs {need} bytes but at most {} are free", free[dev])
            }));
        }
        let mut end = start + 1;
        let mut built = first;
        while end < n {
            let next = ctx.build(start, end + 1)?;
            if next.compiled.plan.arena_size > free[dev] {
                break;
            }
            built = next;
            end += 1;
        }
        if end < n {
            let lo = (start + 1).max(end + 1 - LOOKBACK.min(end));
            let best = (lo..=end)
                .min_by(|&a, &b| ctx.crossing_bytes(start, a).cmp(&ctx.crossing_bytes(start, b)).then(b.cmp(&a)))
                .unwrap();
            if best != end {
                built = ctx.build(start, best)?;
                end = best;
            }
        }
        let footprint = built.compiled.plan.arena_size;
        free[dev] -= footprint;
        let ops = ctx.order[start..end].iter().map(|&x| node_ops(m, f, x)).sum();
        parts.push(SubNetwork {
            name: format!("p{}", parts.len()),
            nodes: ctx.order[start..end].to_vec(),
            program: built.program,
            compiled: Arc::new(built.compiled),
            inputs: built.inputs,
            outputs: built.outputs,
            footprint,
            ops,
            devices: vec![devices[dev].id],
            est_time: 0.0,
            comm_time: 0.0,
        });
        start = end;
    }

    let transfers: BTreeSet<String> = ctx.xfer.values().cloned().collect();
    let mut edges = Vec::new();
    for (to, p) in parts.iter().enumerate() {
        for (name, ty) in &p.inputs {
            if !transfers.contains(name) {
                continue;
            }
            if let Some(from) = parts.iter().position(|q| q.outputs.contains_key(name)) {
                edges.push(Edge { from, to, tensor: name.clone(), bytes: ty.size_bytes() });
            }
        }
    }
    let index = |id: usize| devices.iter().position(|d| d.id == id).unwrap();
    for p in parts.iter_mut() {
        let d = &devices[index(p.devices[0])];
        let moved: usize = p
            .inputs
            .iter()
            .chain(&p.outputs)
            .filter(|(name, _)| transfers.contains(*name))
            .map(|(_, ty)| ty.size_bytes())
            .sum();
        p.est_time = p.ops as f64 / d.throughput;
        p.comm_time = moved as f64 / d.bandwidth;
    }

    let mean = parts.iter().map(|p| p.est_time).sum::<f64>() / parts.len() as f64;
    for p in parts.iter_mut() {
        if p.est_time <= 2.0 * mean {
            continue;
        }
        let spare = (0..devices.len())
            .filter(|&i| !p.devices.contains(&devices[i].id) && free[i] >= p.footprint)
            .max_by(|&a, &b| free[a].cmp(&free[b]).then(b.cmp(&a)));
        if let Some(i) = spare {
            free[i] -= p.footprint;
            p.devices.push(devices[i].id);
        }
    }

    Ok(PartitionDag { network: network.to_string(), parts, edges, transfers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Bindings};
    use crate::tensor::Tensor;

    /// x -> relu -> tanh -> relu -> out, each value 4 KiB.
    fn chain() -> (Module, FuncId) {
        let mut m = Module::new();
        let f = m.create_function("chain").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[32, 32])).unwrap();
        let out = m.create_placeholder("out", TensorType::float(&[32, 32])).unwrap();
        let mut b = m.builder(f);
        let a = b.relu(x.into());
        let t = b.tanh(a);
        let r = b.relu(t);
        b.save(r, out);
        (m, f)
    }

    fn input() -> Bindings {
        let v = (0..1024).map(|i| (i as f32 * 0.37).sin()).collect();
        Bindings::from([("x".to_string(), Tensor::from_f32(&[32, 32], v).unwrap())])
    }

    #[test]
    fn roomy_device_takes_everything() {
        let (m, f) = chain();
        let dag = partition(&m, f, &[DeviceConfig::new(0, 1 << 20)]).unwrap();
        assert_eq!(dag.parts.len(), 1);
        assert!(dag.edges.is_empty());
        let got = dag.parts[0].compiled.run(&input()).unwrap();
        let want = evaluate::<f32>(&m, f, &input()).unwrap().output_tensors();
        assert_eq!(got, want);
    }

    #[test]
    fn tight_devices_force_a_chain_of_parts() {
        let (m, f) = chain();
        let one = partition(&m, f, &[DeviceConfig::new(0, 1 << 20)]).unwrap();
        let cap = one.parts[0].footprint - 1;
        let devs: Vec<_> = (0..4).map(|i| DeviceConfig::new(i, cap)).collect();
        let dag = partition(&m, f, &devs).unwrap();
        assert!(dag.parts.len() >= 2);
        for p in &dag.parts {
            assert!(p.footprint <= cap);
        }
        assert_eq!(dag.edges.len(), dag.parts.len() - 1);
        assert!(dag.report().contains("p0 -> p1"));
    }

    #[test]
    fn oversized_node_is_reported() {
        let (m, f) = chain();
        let err = partition(&m, f, &[DeviceConfig::new(0, 1024), DeviceConfig::new(1, 2048)]).unwrap_err();
        assert!(matches!(err, Error::Unpartitionable(_)), "{err}");
    }
}
