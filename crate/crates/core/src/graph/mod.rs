//! The high-level, strongly-typed dataflow graph.
//!
//! A [`Module`] owns storage (constants and placeholders) and a list of
//! [`Function`]s. Function nodes live in an index-addressed table; a removed
//! node leaves a hole so that [`NodeId`]s stay stable for the lifetime of the
//! function.

mod builder;
mod dump;
mod kinds;
mod order;
mod verify;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorType};

pub use builder::Builder;
pub use dump::{dump, DumpFormat};
pub use kinds::{check_op, infer_shape, Arity, KindInfo};
pub use order::{dependencies, topological_order};
pub use verify::{verify, verify_or_err, Diagnostic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorageId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FuncId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// A node input: either another node of the same function or module storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Node(NodeId),
    Storage(StorageId),
}

impl Operand {
    pub fn node(self) -> Option<NodeId> {
        match self {
            Operand::Node(n) => Some(n),
            Operand::Storage(_) => None,
        }
    }

    pub fn storage(self) -> Option<StorageId> {
        match self {
            Operand::Storage(s) => Some(s),
            Operand::Node(_) => None,
        }
    }
}

impl From<NodeId> for Operand {
    fn from(n: NodeId) -> Self {
        Operand::Node(n)
    }
}

impl From<StorageId> for Operand {
    fn from(s: StorageId) -> Self {
        Operand::Storage(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Convolution,
    MaxPool,
    AvgPool,
    FullyConnected,
    MatMul,
    BroadcastAdd,
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Relu,
    Tanh,
    Sigmoid,
    SoftMax,
    Transpose,
    Reshape,
    Concat,
    Splat,
    BatchNormalization,
    Regression,
    SGD,
    Save,
    Quantize,
    Dequantize,
    RescaleQuantized,
    QuantizationProfile,
}

impl NodeKind {
    pub const ALL: [NodeKind; 28] = [
        NodeKind::Convolution,
        NodeKind::MaxPool,
        NodeKind::AvgPool,
        NodeKind::FullyConnected,
        NodeKind::MatMul,
        NodeKind::BroadcastAdd,
        NodeKind::Add,
        NodeKind::Sub,
        NodeKind::Mul,
        NodeKind::Div,
        NodeKind::Max,
        NodeKind::Min,
        NodeKind::Relu,
        NodeKind::Tanh,
        NodeKind::Sigmoid,
        NodeKind::SoftMax,
        NodeKind::Transpose,
        NodeKind::Reshape,
        NodeKind::Concat,
        NodeKind::Splat,
        NodeKind::BatchNormalization,
        NodeKind::Regression,
        NodeKind::SGD,
        NodeKind::Save,
        NodeKind::Quantize,
        NodeKind::Dequantize,
        NodeKind::RescaleQuantized,
        NodeKind::QuantizationProfile,
    ];

    pub fn name(self) -> &'static str {
        self.info().name
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operator kind plus its attributes.
///
/// Pooling and convolution use square windows with symmetric padding; the
/// activation layout is NHWC and filters are `[out, kh, kw, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Convolution { kernel: usize, stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize, pad: usize },
    AvgPool { kernel: usize, stride: usize, pad: usize },
    FullyConnected,
    MatMul,
    BroadcastAdd,
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Relu,
    Tanh,
    Sigmoid,
    SoftMax,
    Transpose { perm: Vec<usize> },
    Reshape { dims: Vec<usize> },
    Concat { axis: usize },
    Splat { value: f32 },
    BatchNormalization { epsilon: f32 },
    Regression,
    SGD { learning_rate: f32 },
    Save,
    Quantize,
    Dequantize,
    RescaleQuantized,
    QuantizationProfile { tensor: String },
}

impl Op {
    pub fn kind(&self) -> NodeKind {
        match self {
            Op::Convolution { .. } => NodeKind::Convolution,
            Op::MaxPool { .. } => NodeKind::MaxPool,
            Op::AvgPool { .. } => NodeKind::AvgPool,
            Op::FullyConnected => NodeKind::FullyConnected,
            Op::MatMul => NodeKind::MatMul,
            Op::BroadcastAdd => NodeKind::BroadcastAdd,
            Op::Add => NodeKind::Add,
            Op::Sub => NodeKind::Sub,
            Op::Mul => NodeKind::Mul,
            Op::Div => NodeKind::Div,
            Op::Max => NodeKind::Max,
            Op::Min => NodeKind::Min,
            Op::Relu => NodeKind::Relu,
            Op::Tanh => NodeKind::Tanh,
            Op::Sigmoid => NodeKind::Sigmoid,
            Op::SoftMax => NodeKind::SoftMax,
            Op::Transpose { .. } => NodeKind::Transpose,
            Op::Reshape { .. } => NodeKind::Reshape,
            Op::Concat { .. } => NodeKind::Concat,
            Op::Splat { .. } => NodeKind::Splat,
            Op::BatchNormalization { .. } => NodeKind::BatchNormalization,
            Op::Regression => NodeKind::Regression,
            Op::SGD { .. } => NodeKind::SGD,
            Op::Save => NodeKind::Save,
            Op::Quantize => NodeKind::Quantize,
            Op::Dequantize => NodeKind::Dequantize,
            Op::RescaleQuantized => NodeKind::RescaleQuantized,
            Op::QuantizationProfile { .. } => NodeKind::QuantizationProfile,
        }
    }

    /// Attribute text used by dumps; empty for attribute-free kinds.
    pub fn attr_string(&self) -> String {
        match self {
            Op::Convolution { kernel, stride, pad }
            | Op::MaxPool { kernel, stride, pad }
            | Op::AvgPool { kernel, stride, pad } => {
                format!("kernel={kernel}, stride={stride}, pad={pad}")
            }
            Op::Transpose { perm } => format!("perm={perm:?}"),
            Op::Reshape { dims } => format!("dims={dims:?}"),
            Op::Concat { axis } => format!("axis={axis}"),
            Op::Splat { value } => format!("value={value:?}"),
            Op::BatchNormalization { epsilon } => format!("epsilon={epsilon:?}"),
            Op::SGD { learning_rate } => format!("learning_rate={learning_rate:?}"),
            Op::QuantizationProfile { tensor } => format!("tensor={tensor}"),
            _ => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<Operand>,
    /// Result type; `None` for kinds without a result (Save, profiling).
    pub ty: Option<TensorType>,
    /// Optional Bool predicate of shape `[1]` or `[batch]`.
    pub predicate: Option<Operand>,
}

impl Node {
    pub fn new(op: Op, inputs: Vec<Operand>, ty: Option<TensorType>) -> Self {
        Node { op, inputs, ty, predicate: None }
    }

    pub fn kind(&self) -> NodeKind {
        self.op.kind()
    }

    /// Placeholder written by a Save node.
    pub fn save_target(&self) -> Option<StorageId> {
        match self.op {
            Op::Save => self.inputs.get(1).and_then(|o| o.storage()),
            _ => None,
        }
    }

    /// Operands read by this node, including its predicate.
    pub fn reads(&self) -> impl Iterator<Item = Operand> + '_ {
        let n = if self.op == Op::Save { 1.min(self.inputs.len()) } else { self.inputs.len() };
        self.inputs[..n].iter().copied().chain(self.predicate)
    }

    /// Every operand referenced, including a Save destination and the predicate.
    pub fn operands(&self) -> impl Iterator<Item = Operand> + '_ {
        self.inputs.iter().copied().chain(self.predicate)
    }

    pub fn result_type(&self) -> Result<&TensorType> {
        self.ty
            .as_ref()
            .ok_or_else(|| Error::Type(format!("{} produces no value", self.kind())))
    }

    /// Nodes that must be kept regardless of uses.
    pub fn is_root(&self) -> bool {
        matches!(self.op, Op::Save | Op::QuantizationProfile { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Constant { name: String, tensor: Tensor },
    Placeholder { name: String, ty: TensorType, trainable: bool },
}

impl Storage {
    pub fn name(&self) -> &str {
        match self {
            Storage::Constant { name, .. } | Storage::Placeholder { name, .. } => name,
        }
    }

    pub fn ty(&self) -> &TensorType {
        match self {
            Storage::Constant { tensor, .. } => tensor.ty(),
            Storage::Placeholder { ty, .. } => ty,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Storage::Constant { .. })
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, Storage::Placeholder { .. })
    }

    pub fn constant(&self) -> Option<&Tensor> {
        match self {
            Storage::Constant { tensor, .. } => Some(tensor),
            Storage::Placeholder { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Function {
    name: String,
    nodes: Vec<Option<Node>>,
    /// Set once the function carries gradient and SGD update nodes.
    pub differentiated: bool,
}

impl Function {
    pub fn new(name: impl Into<String>) -> Self {
        Function { name: name.into(), nodes: Vec::new(), differentiated: false }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Append a raw slot; `None` reproduces a removed id.
    pub(crate) fn push_slot(&mut self, node: Option<Node>) {
        self.nodes.push(node);
    }

    pub fn add(&mut self, node: Node) -> NodeId {
        self.nodes.push(Some(node));
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        self.try_node(id).unwrap_or_else(|| panic!("no live node {id} in {}", self.name))
    }

    pub fn try_node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0 as usize).and_then(|n| n.as_ref())
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        let name = &self.name;
        self.nodes
            .get_mut(id.0 as usize)
            .and_then(|n| n.as_mut())
            .unwrap_or_else(|| panic!("no live node {id} in {name}"))
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Node> {
        self.nodes.get_mut(id.0 as usize).and_then(|n| n.take())
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.try_node(id).is_some()
    }

    /// Live nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|n| (NodeId(i as u32), n)))
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes().map(|(id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One past the largest id ever handed out.
    pub fn id_bound(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes referencing `op` as an input or predicate, in id order.
    pub fn users(&self, op: Operand) -> Vec<NodeId> {
        self.nodes()
            .filter(|(_, n)| n.operands().any(|o| o == op))
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of input slots (plus predicates) referencing `op`.
    pub fn use_count(&self, op: Operand) -> usize {
        self.nodes().map(|(_, n)| n.operands().filter(|&o| o == op).count()).sum()
    }

    /// Rewrite every read of `old` into `new` without type checks.
    pub fn replace_uses(&mut self, old: Operand, new: Operand) {
        if old == new {
            return;
        }
        for node in self.nodes.iter_mut().flatten() {
            let n = if node.op == Op::Save { 1.min(node.inputs.len()) } else { node.inputs.len() };
            for inp in &mut node.inputs[..n] {
                if *inp == old {
                    *inp = new;
                }
            }
            if node.predicate == Some(old) {
                node.predicate = Some(new);
            }
        }
    }

    pub fn saves(&self) -> Vec<NodeId> {
        self.nodes().filter(|(_, n)| n.op == Op::Save).map(|(id, _)| id).collect()
    }

    /// Storage referenced by any node, deduplicated, in id order.
    pub fn referenced_storage(&self) -> BTreeSet<StorageId> {
        self.nodes().flat_map(|(_, n)| n.operands().filter_map(|o| o.storage())).collect()
    }

    /// Rename, used when cloning.
    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Drop trailing holes and renumber densely, returning the old-to-new map.
    pub fn compact(&mut self) -> Vec<Option<NodeId>> {
        let mut map = vec![None; self.nodes.len()];
        let mut next = 0u32;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.is_some() {
                map[i] = Some(NodeId(next));
                next += 1;
            }
        }
        let remap = |o: &mut Operand| {
            if let Operand::Node(n) = o {
                *n = map[n.0 as usize].expect("reference to removed node");
            }
        };
        let mut nodes: Vec<Option<Node>> = self.nodes.drain(..).flatten().map(Some).collect();
        for node in nodes.iter_mut().flatten() {
            node.inputs.iter_mut().for_each(remap);
            if let Some(p) = node.predicate.as_mut() {
                remap(p);
            }
        }
        self.nodes = nodes;
        map
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Module {
    storage: Vec<Option<Storage>>,
    functions: Vec<Function>,
    fresh: u64,
}

impl Module {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_fresh_storage_name(&self, name: &str) -> Result<()> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == '%' || c == '@') {
            return Err(Error::Type(format!("invalid storage name `{name}`")));
        }
        if self.storage_by_name(name).is_some() {
            return Err(Error::Type(format!("duplicate storage name `{name}`")));
        }
        Ok(())
    }

    pub fn create_placeholder(&mut self, name: &str, ty: TensorType) -> Result<StorageId> {
        self.check_fresh_storage_name(name)?;
        self.storage.push(Some(Storage::Placeholder { name: name.into(), ty, trainable: false }));
        Ok(StorageId(self.storage.len() as u32 - 1))
    }

    pub fn create_trainable(&mut self, name: &str, ty: TensorType) -> Result<StorageId> {
        self.check_fresh_storage_name(name)?;
        self.storage.push(Some(Storage::Placeholder { name: name.into(), ty, trainable: true }));
        Ok(StorageId(self.storage.len() as u32 - 1))
    }

    pub fn create_constant(&mut self, name: &str, tensor: Tensor) -> Result<StorageId> {
        self.check_fresh_storage_name(name)?;
        self.storage.push(Some(Storage::Constant { name: name.into(), tensor }));
        Ok(StorageId(self.storage.len() as u32 - 1))
    }

    pub(crate) fn storage_bound(&self) -> usize {
        self.storage.len()
    }

    /// Append a raw storage slot; `None` reproduces a removed id.
    pub(crate) fn push_storage_slot(&mut self, s: Option<Storage>) {
        self.storage.push(s);
    }

    pub(crate) fn fresh_counter(&self) -> u64 {
        self.fresh
    }

    pub(crate) fn set_fresh_counter(&mut self, v: u64) {
        self.fresh = v;
    }

    /// A storage name derived from `prefix` that is not yet taken.
    pub fn fresh_name(&mut self, prefix: &str) -> String {
        loop {
            let name = format!("{prefix}.{}", self.fresh);
            self.fresh += 1;
            if self.storage_by_name(&name).is_none() {
                return name;
            }
        }
    }

    /// Add a constant under a fresh name derived from `prefix`.
    pub fn add_constant(&mut self, prefix: &str, tensor: Tensor) -> StorageId {
        let name = self.fresh_name(prefix);
        self.create_constant(&name, tensor).expect("fresh name")
    }

    pub fn storage(&self, id: StorageId) -> &Storage {
        self.storage
            .get(id.0 as usize)
            .and_then(|s| s.as_ref())
            .unwrap_or_else(|| panic!("no storage #{}", id.0))
    }

    pub fn try_storage(&self, id: StorageId) -> Option<&Storage> {
        self.storage.get(id.0 as usize).and_then(|s| s.as_ref())
    }

    pub fn storage_mut(&mut self, id: StorageId) -> &mut Storage {
        self.storage
            .get_mut(id.0 as usize)
            .and_then(|s| s.as_mut())
            .unwrap_or_else(|| panic!("no storage #{}", id.0))
    }

    pub fn storage_by_name(&self, name: &str) -> Option<StorageId> {
        self.storages().find(|(_, s)| s.name() == name).map(|(id, _)| id)
    }

    pub fn storages(&self) -> impl Iterator<Item = (StorageId, &Storage)> + '_ {
        self.storage
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (StorageId(i as u32), s)))
    }

    pub fn placeholders(&self) -> impl Iterator<Item = (StorageId, &Storage)> + '_ {
        self.storages().filter(|(_, s)| s.is_placeholder())
    }

    pub fn constants(&self) -> impl Iterator<Item = (StorageId, &Storage)> + '_ {
        self.storages().filter(|(_, s)| s.is_constant())
    }

    pub fn remove_storage(&mut self, id: StorageId) -> Option<Storage> {
        self.storage.get_mut(id.0 as usize).and_then(|s| s.take())
    }

    /// Whether any function references the storage.
    pub fn storage_in_use(&self, id: StorageId) -> bool {
        self.functions.iter().any(|f| f.use_count(Operand::Storage(id)) > 0)
    }

    pub fn create_function(&mut self, name: &str) -> Result<FuncId> {
        if self.function_by_name(name).is_some() {
            return Err(Error::Type(format!("duplicate function name `{name}`")));
        }
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == ':') {
            return Err(Error::Type(format!("invalid function name `{name}`")));
        }
        self.functions.push(Function::new(name));
        Ok(FuncId(self.functions.len() as u32 - 1))
    }

    pub fn function(&self, id: FuncId) -> &Function {
        &self.functions[id.0 as usize]
    }

    pub fn function_mut(&mut self, id: FuncId) -> &mut Function {
        &mut self.functions[id.0 as usize]
    }

    pub fn function_by_name(&self, name: &str) -> Option<FuncId> {
        self.functions.iter().position(|f| f.name == name).map(|i| FuncId(i as u32))
    }

    pub fn functions(&self) -> impl Iterator<Item = (FuncId, &Function)> + '_ {
        self.functions.iter().enumerate().map(|(i, f)| (FuncId(i as u32), f))
    }

    /// Copy a function under a new name; the copy shares module storage.
    pub fn clone_function(&mut self, id: FuncId, name: &str) -> Result<FuncId> {
        let new = self.create_function(name)?;
        let mut f = self.function(id).clone();
        f.name = name.to_string();
        self.functions[new.0 as usize] = f;
        Ok(new)
    }

    /// Drop the most recently created function.
    pub fn remove_last_function(&mut self) -> Option<Function> {
        self.functions.pop()
    }

    pub fn builder(&mut self, f: FuncId) -> Builder<'_> {
        Builder::new(self, f)
    }

    /// Type of an operand in the context of function `f`.
    pub fn operand_type(&self, f: FuncId, op: Operand) -> Result<&TensorType> {
        match op {
            Operand::Storage(s) => self
                .try_storage(s)
                .map(|s| s.ty())
                .ok_or_else(|| Error::Type(format!("dangling storage #{}", s.0))),
            Operand::Node(n) => self
                .function(f)
                .try_node(n)
                .ok_or_else(|| Error::Type(format!("dangling node {n}")))?
                .result_type(),
        }
    }

    /// Human-readable operand name: `%id` for nodes, `@name` for storage.
    pub fn operand_name(&self, op: Operand) -> String {
        match op {
            Operand::Node(n) => n.to_string(),
            Operand::Storage(s) => match self.try_storage(s) {
                Some(st) => format!("@{}", st.name()),
                None => format!("@#{}", s.0),
            },
        }
    }

    /// Add a node, inferring its result type from the inputs.
    pub fn add_node(&mut self, f: FuncId, op: Op, inputs: Vec<Operand>) -> Result<NodeId> {
        let ty = {
            let tys = inputs
                .iter()
                .map(|&i| self.operand_type(f, i))
                .collect::<Result<Vec<_>>>()?;
            kinds::infer_type(&op, &tys).map_err(Error::Type)?
        };
        self.add_node_typed(f, op, inputs, ty)
    }

    /// Add a node with an explicit result type, checked against the kind's
    /// typing rule.
    pub fn add_node_typed(
        &mut self,
        f: FuncId,
        op: Op,
        inputs: Vec<Operand>,
        ty: Option<TensorType>,
    ) -> Result<NodeId> {
        let node = Node::new(op, inputs, ty);
        self.check_node(f, &node).map_err(Error::Type)?;
        Ok(self.function_mut(f).add(node))
    }

    pub(crate) fn check_node(&self, f: FuncId, node: &Node) -> std::result::Result<(), String> {
        let tys = node
            .inputs
            .iter()
            .map(|&i| self.operand_type(f, i).map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        kinds::check(self, node, &tys)
    }

    /// Replace every use of `old` with `new`; both must have identical types.
    pub fn replace_all_uses_with(&mut self, f: FuncId, old: NodeId, new: Operand) -> Result<()> {
        let old_ty = self.operand_type(f, Operand::Node(old))?;
        let new_ty = self.operand_type(f, new)?;
        if old_ty != new_ty {
            return Err(Error::Type(format!(
                "cannot replace {old} of type {old_ty} with {} of type {new_ty}",
                self.operand_name(new)
            )));
        }
        self.function_mut(f).replace_uses(Operand::Node(old), new);
        Ok(())
    }

    /// Drop storage no function references, returning how many were removed.
    pub fn remove_unused_constants(&mut self) -> usize {
        let used: BTreeSet<StorageId> =
            self.functions.iter().flat_map(|f| f.referenced_storage()).collect();
        let dead: Vec<StorageId> = self
            .constants()
            .map(|(id, _)| id)
            .filter(|id| !used.contains(id))
            .collect();
        for &id in &dead {
            self.remove_storage(id);
        }
        dead.len()
    }

    /// Renumber storage densely; returns the old-to-new map.
    pub fn compact_storage(&mut self) -> Vec<Option<StorageId>> {
        let mut map = vec![None; self.storage.len()];
        let mut next = 0u32;
        for (i, s) in self.storage.iter().enumerate() {
            if s.is_some() {
                map[i] = Some(StorageId(next));
                next += 1;
            }
        }
        self.storage = self.storage.drain(..).flatten().map(Some).collect();
        for f in &mut self.functions {
            for node in f.nodes.iter_mut().flatten() {
                for o in node.inputs.iter_mut().chain(node.predicate.as_mut()) {
                    if let Operand::Storage(s) = o {
                        *s = map[s.0 as usize].expect("reference to removed storage");
                    }
                }
            }
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorType;

    #[test]
    fn replace_all_uses_moves_every_consumer() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2, 2])).unwrap();
        let out1 = m.create_placeholder("o1", TensorType::float(&[2, 2])).unwrap();
        let out2 = m.create_placeholder("o2", TensorType::float(&[2, 2])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into());
        let t = b.tanh(r);
        let s = b.sigmoid(r);
        b.save(t, out1);
        b.save(s, out2);
        let r2 = b.tanh(x.into());
        let (r, r2) = (r.node().unwrap(), r2.node().unwrap());

        assert_eq!(m.function(f).use_count(r.into()), 2);
        m.replace_all_uses_with(f, r, r2.into()).unwrap();
        assert_eq!(m.function(f).use_count(r.into()), 0);
        assert_eq!(m.function(f).use_count(r2.into()), 2);

        let before = m.clone();
        m.replace_all_uses_with(f, r2, r2.into()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn replace_with_mismatched_type_is_refused() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2, 2])).unwrap();
        let y = m.create_placeholder("y", TensorType::float(&[2, 3])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into()).node().unwrap();
        let before = m.clone();
        assert!(m.replace_all_uses_with(f, r, y.into()).is_err());
        assert_eq!(m, before);
    }

    #[test]
    fn storage_names_are_unique() {
        let mut m = Module::new();
        m.create_placeholder("x", TensorType::float(&[1])).unwrap();
        assert!(m.create_placeholder("x", TensorType::float(&[1])).is_err());
        assert!(m.create_placeholder("has space", TensorType::float(&[1])).is_err());
        let a = m.fresh_name("x");
        let b = m.fresh_name("x");
        assert_ne!(a, b);
    }

    #[test]
    fn compact_renumbers_references() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let dead = b.tanh(x.into());
        let r = b.relu(x.into());
        b.save(r, o);
        m.function_mut(f).remove(dead.node().unwrap());
        m.function_mut(f).compact();
        let func = m.function(f);
        assert_eq!(func.len(), 2);
        assert_eq!(func.node(NodeId(1)).inputs[0], Operand::Node(NodeId(0)));
    }
}
