//! Profile-guided int8 quantization.
//!
//! The flow has two phases. [`instrument`] adds a QuantizationProfile
//! observer to every float tensor produced by a node, and [`run_profile`]
//! records the min/max each observer sees over a calibration set. Then
//! [`quantize_function`] rebuilds the function with quantizable nodes retyped
//! to int8, inserting Quantize and Dequantize nodes at island boundaries.
//! Only lowered kinds have int8 kernels, so both phases should see the
//! function after `pipeline::prepare`; a FullyConnected stays float.
//!
//! Tensors are identified across the two phases by
//! `<function>:<kind>:<topological index>:0`. Float placeholders are keyed
//! `Placeholder:<name>` and are recorded straight from the calibration
//! bindings.
//!
//! Profile text format, one entry per line, `#` starts a comment:
//!
//! ```text
//! <tensor name> <min> <max> <count>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::eval::{evaluate, Bindings};
use crate::graph::{topological_order, verify_or_err, FuncId, Module, NodeId, NodeKind, Op, Operand, StorageId};
use crate::tensor::{choose_quant_params, ElemKind, Tensor, TensorType};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeEntry {
    pub min: f32,
    pub max: f32,
    pub count: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RangeProfile {
    pub entries: BTreeMap<String, RangeEntry>,
}

impl RangeProfile {
    pub fn observe(&mut self, name: &str, min: f32, max: f32) {
        let e = self.entries.entry(name.to_string()).or_insert(RangeEntry { min, max, count: 0 });
        e.min = e.min.min(min);
        e.max = e.max.max(max);
        e.count += 1;
    }

    pub fn get(&self, name: &str) -> Result<&RangeEntry> {
        self.entries.get(name).ok_or_else(|| Error::MissingProfile(name.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# tensor min max count\n");
        for (k, e) in &self.entries {
            writeln!(s, "{k} {:?} {:?} {}", e.min, e.max, e.count).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = RangeProfile::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err("expected `name min max count`"));
            }
            let min: f32 = f[1].parse().map_err(|_| err("bad min"))?;
            let max: f32 = f[2].parse().map_err(|_| err("bad max"))?;
            let count: u64 = f[3].parse().map_err(|_| err("bad count"))?;
            if !(min <= max) || count == 0 {
                return Err(err("need min <= max and count >= 1"));
            }
            if p.entries.insert(f[0].to_string(), RangeEntry { min, max, count }).is_some() {
                return Err(err("duplicate tensor"));
            }
        }
        Ok(p)
    }
}

pub fn tensor_name(function: &str, kind: NodeKind, index: usize) -> String {
    format!("{function}:{kind}:{index}:0")
}

pub fn placeholder_tensor_name(name: &str) -> String {
    format!("Placeholder:{name}")
}

/// Add a profiling observer after every float-producing node. Returns a new
/// function named `<name>_profile`.
pub fn instrument(m: &mut Module, f: FuncId) -> Result<FuncId> {
    verify_or_err(m, f)?;
    let func = m.function(f);
    if func.nodes().any(|(_, n)| n.kind() == NodeKind::QuantizationProfile) {
        return Err(Error::Profile(format!("function `{}` is already instrumented", func.name())));
    }
    let order = topological_order(func)?;
    let fname = func.name().to_string();
    let g = m.clone_function(f, &format!("{fname}_profile"))?;
    for (i, id) in order.into_iter().enumerate() {
        let n = m.function(g).node(id);
        if n.ty.as_ref().is_some_and(|t| t.is_float()) {
            let name = tensor_name(&fname, n.kind(), i);
            m.add_node_typed(g, Op::QuantizationProfile { tensor: name }, vec![id.into()], None)?;
        }
    }
    verify_or_err(m, g)?;
    Ok(g)
}

/// Run the instrumented function over every sample and merge the ranges.
pub fn run_profile(m: &Module, f: FuncId, dataset: &[Bindings]) -> Result<RangeProfile> {
    if dataset.is_empty() {
        return Err(Error::Profile("empty calibration set".into()));
    }
    let mut p = RangeProfile::default();
    for sample in dataset {
        for (name, t) in sample {
            if let Some(v) = t.as_f32() {
                let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                p.observe(&placeholder_tensor_name(name), lo, hi);
            }
        }
        let ev = evaluate::<f32>(m, f, sample)?;
        for (name, (lo, hi)) in ev.observations {
            p.observe(&name, lo as f32, hi as f32);
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationSchema {
    /// Kinds kept in float.
    pub skip: BTreeSet<NodeKind>,
}

impl Default for QuantizationSchema {
    fn default() -> Self {
        QuantizationSchema { skip: [NodeKind::SoftMax].into() }
    }
}

/// Kinds with an int8 kernel.
pub fn has_int8_kernel(k: NodeKind) -> bool {
    use NodeKind::*;
    matches!(
        k,
        Convolution | MaxPool | AvgPool | MatMul | BroadcastAdd | Add | Sub | Mul | Div | Max | Min | Relu | Transpose | Reshape | Concat | Splat
    )
}

/// Kinds whose int8 output reuses the input's scale and offset.
fn inherits_params(k: NodeKind) -> bool {
    matches!(k, NodeKind::Transpose | NodeKind::Reshape | NodeKind::MaxPool)
}

#[derive(Clone, Debug)]
pub struct Quantized {
    pub func: FuncId,
    /// Profile tensor name of every int8 node in the new function that
    /// corresponds to a node of the original.
    pub names: BTreeMap<NodeId, String>,
}

struct Rebuild<'a> {
    m: &'a mut Module,
    g: FuncId,
    profile: &'a RangeProfile,
    /// Original operand to its value in the new function, in its native domain.
    native: BTreeMap<Operand, Operand>,
    as_int8: BTreeMap<Operand, Operand>,
    as_float: BTreeMap<Operand, Operand>,
    /// Profile name of each original float node.
    names: BTreeMap<NodeId, String>,
}

impl Rebuild<'_> {
    fn ty(&self, new: Operand) -> TensorType {
        self.m.operand_type(self.g, new).expect("resolved").clone()
    }

    fn range_params(&self, name: &str) -> Result<crate::tensor::QuantParams> {
        let e = self.profile.get(name)?;
        choose_quant_params(e.min, e.max)
    }

    fn int8(&mut self, old: Operand) -> Result<Operand> {
        if let Some(&v) = self.as_int8.get(&old) {
            return Ok(v);
        }
        let new = self.native[&old];
        let ty = self.ty(new);
        let v = if ty.is_quantized() {
            new
        } else {
            match old {
                Operand::Storage(s) if self.m.storage(s).is_constant() => self.quantize_constant(s)?,
                Operand::Storage(s) => {
                    let p = self.range_params(&placeholder_tensor_name(self.m.storage(s).name()))?;
                    let qt = TensorType::with_params(&ty.dims, p);
                    self.m.add_node_typed(self.g, Op::Quantize, vec![new], Some(qt))?.into()
                }
                Operand::Node(n) => {
                    let p = self.range_params(&self.names[&n])?;
                    let qt = TensorType::with_params(&ty.dims, p);
                    self.m.add_node_typed(self.g, Op::Quantize, vec![new], Some(qt))?.into()
                }
            }
        };
        self.as_int8.insert(old, v);
        Ok(v)
    }

    fn quantize_constant(&mut self, s: StorageId) -> Result<Operand> {
        let st = self.m.storage(s);
        let t = st.constant().expect("constant");
        let v = t.as_f32().expect("float constant");
        let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let qt = TensorType::with_params(t.dims(), choose_quant_params(lo, hi)?);
        let q = t.quantize(&qt)?;
        let prefix = format!("{}.q", st.name());
        Ok(self.m.add_constant(&prefix, q).into())
    }

    fn float(&mut self, old: Operand) -> Result<Operand> {
        if let Some(&v) = self.as_float.get(&old) {
            return Ok(v);
        }
        let new = self.native[&old];
        let v = if self.ty(new).is_quantized() {
            self.m.add_node(self.g, Op::Dequantize, vec![new])?.into()
        } else {
            new
        };
        self.as_float.insert(old, v);
        Ok(v)
    }
}

/// Rebuild `f` with int8 islands. The result is a new function named
/// `<name>_int8`; `f` is left untouched.
pub fn quantize_function(m: &mut Module, f: FuncId, profile: &RangeProfile, schema: &QuantizationSchema) -> Result<Quantized> {
    verify_or_err(m, f)?;
    let func = m.function(f).clone();
    if func.nodes().any(|(_, n)| n.kind() == NodeKind::QuantizationProfile) {
        return Err(Error::Profile("cannot quantize an instrumented function".into()));
    }
    let order = topological_order(&func)?;
    let g = m.create_function(&format!("{}_int8", func.name()))?;
    let mut rb = Rebuild {
        m,
        g,
        profile,
        native: BTreeMap::new(),
        as_int8: BTreeMap::new(),
        as_float: BTreeMap::new(),
        names: BTreeMap::new(),
    };
    for sid in func.referenced_storage() {
        rb.native.insert(sid.into(), sid.into());
    }
    let mut out_names = BTreeMap::new();
    let result = (|| -> Result<()> {
        for (i, &id) in order.iter().enumerate() {
            let node = func.node(id);
            let kind = node.kind();
            let name = tensor_name(func.name(), kind, i);
            if node.ty.as_ref().is_some_and(|t| t.is_float()) {
                rb.names.insert(id, name.clone());
            }
            let quantize = has_int8_kernel(kind)
                && !schema.skip.contains(&kind)
                && node.ty.as_ref().is_some_and(|t| t.is_float())
                && node.inputs.iter().all(|&o| rb.ty(rb.native[&o]).kind != ElemKind::Bool);
            let pred = node.predicate.map(|p| rb.native[&p]);
            let new_id = if quantize {
                let ins = node.inputs.iter().map(|&o| rb.int8(o)).collect::<Result<Vec<_>>>()?;
                let dims = &node.ty.as_ref().unwrap().dims;
                let ty = if inherits_params(kind) {
                    rb.ty(ins[0]).with_dims(dims)
                } else {
                    TensorType::with_params(dims, rb.range_params(&name)?)
                };
                let nid = rb.m.add_node_typed(g, node.op.clone(), ins, Some(ty))?;
                out_names.insert(nid, name);
                nid
            } else {
                let mut ins = Vec::with_capacity(node.inputs.len());
                for (pos, &o) in node.inputs.iter().enumerate() {
                    let is_save_dest = node.op == Op::Save && pos == 1;
                    let orig_ty = match o {
                        Operand::Storage(s) => rb.m.storage(s).ty().clone(),
                        Operand::Node(n) => func.node(n).ty.clone().expect("value"),
                    };
                    ins.push(if is_save_dest || !orig_ty.is_float() { rb.native[&o] } else { rb.float(o)? });
                }
                rb.m.add_node_typed(g, node.op.clone(), ins, node.ty.clone())?
            };
            rb.m.function_mut(g).node_mut(new_id).predicate = pred;
            rb.native.insert(id.into(), new_id.into());
        }
        Ok(())
    })();
    if let Err(e) = result {
        m.remove_last_function();
        return Err(e);
    }
    verify_or_err(m, g)?;
    Ok(Quantized { func: g, names: out_names })
}

/// Structural island check: int8 values only flow into int8 consumers,
/// Dequantize or Save of an int8 placeholder; float values only into float
/// consumers or Quantize. Returns one message per violation.
pub fn check_islands(m: &Module, f: FuncId) -> Vec<String> {
    let mut errs = Vec::new();
    for (id, n) in m.function(f).nodes() {
        let ins: Vec<TensorType> = n
            .inputs
            .iter()
            .filter_map(|&o| m.operand_type(f, o).ok().cloned())
            .collect();
        let kinds: Vec<ElemKind> = ins.iter().map(|t| t.kind).collect();
        let ok = match n.kind() {
            NodeKind::Quantize => kinds == [ElemKind::Float32],
            NodeKind::Dequantize => kinds == [ElemKind::Int8Q],
            NodeKind::QuantizationProfile => kinds == [ElemKind::Float32],
            NodeKind::Save => kinds.len() == 2 && kinds[0] == kinds[1],
            _ => {
                let out = n.ty.as_ref().map(|t| t.kind);
                kinds.iter().all(|&k| {
                    let domain = |k: ElemKind| matches!(k, ElemKind::Float32 | ElemKind::Int8Q);
                    !domain(k) || out.map_or(true, |o| !domain(o) || o == k)
                })
            }
        };
        if !ok {
            errs.push(format!("{id} ({}) mixes float and int8 operands without a conversion", n.kind()));
        }
    }
    errs
}

/// Quantize a float tensor with params chosen from its own range.
pub fn quantize_tensor(t: &Tensor) -> Result<Tensor> {
    let v = t.as_f32().ok_or_else(|| Error::Type("expected float tensor".into()))?;
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    t.quantize(&TensorType::with_params(t.dims(), choose_quant_params(lo, hi)?))
}
