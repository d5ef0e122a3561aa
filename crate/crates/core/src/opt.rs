//! Target-independent graph optimizations.
//!
//! Every pass rewrites a function in place and reports whether it changed
//! anything; [`optimize`] runs each pass of a pipeline to fixpoint and
//! verifies the function after each one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{eval_op, Value};
use crate::graph::{topological_order, verify, verify_or_err, FuncId, Module, NodeId, NodeKind, Op, Operand};
use crate::kernels::batchnorm_affine;
use crate::tensor::{choose_quant_params, TensorType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PassId {
    DCE,
    CSE,
    ConstantFold,
    TransposeElim,
    MergeBatchNormConv,
    MinimizeConversions,
    FoldRescale,
    NormalizeMaxScales,
}

impl PassId {
    pub const ALL: [PassId; 8] = [
        PassId::DCE,
        PassId::CSE,
        PassId::ConstantFold,
        PassId::TransposeElim,
        PassId::MergeBatchNormConv,
        PassId::MinimizeConversions,
        PassId::FoldRescale,
        PassId::NormalizeMaxScales,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PassId::DCE => "dce",
            PassId::CSE => "cse",
            PassId::ConstantFold => "constant-fold",
            PassId::TransposeElim => "transpose-elim",
            PassId::MergeBatchNormConv => "merge-bn-conv",
            PassId::MinimizeConversions => "minimize-conversions",
            PassId::FoldRescale => "fold-rescale",
            PassId::NormalizeMaxScales => "normalize-max-scales",
        }
    }

    fn run(self, m: &mut Module, f: FuncId) -> Result<bool> {
        match self {
            PassId::DCE => dce(m, f),
            PassId::CSE => cse(m, f),
            PassId::ConstantFold => constant_fold(m, f),
            PassId::TransposeElim => eliminate_transposes(m, f),
            PassId::MergeBatchNormConv => merge_batchnorm_conv(m, f),
            PassId::MinimizeConversions => minimize_conversions(m, f),
            PassId::FoldRescale => fold_rescale(m, f),
            PassId::NormalizeMaxScales => normalize_max_scales(m, f),
        }
    }
}

impl fmt::Display for PassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PassId::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Type(format!("unknown pass `{s}`")))
    }
}

/// Structural cleanups followed by the quantization folds and a final sweep.
pub const DEFAULT_PIPELINE: [PassId; 9] = [
    PassId::DCE,
    PassId::CSE,
    PassId::ConstantFold,
    PassId::TransposeElim,
    PassId::MergeBatchNormConv,
    PassId::MinimizeConversions,
    PassId::FoldRescale,
    PassId::NormalizeMaxScales,
    PassId::DCE,
];

const MAX_ITERATIONS: usize = 10_000;

pub fn optimize(m: &mut Module, f: FuncId, pipeline: &[PassId]) -> Result<()> {
    verify_or_err(m, f)?;
    for &pass in pipeline {
        let mut rounds = 0;
        while pass.run(m, f)? {
            rounds += 1;
            if rounds > MAX_ITERATIONS {
                return Err(Error::Pass { pass: pass.name().into(), diagnostics: vec![] });
            }
        }
        let diagnostics = verify(m, f);
        if !diagnostics.is_empty() {
            return Err(Error::Pass { pass: pass.name().into(), diagnostics });
        }
    }
    Ok(())
}

/// Remove `id` if nothing uses it, then its operands transitively.
fn remove_if_dead(m: &mut Module, f: FuncId, id: NodeId) {
    let mut stack = vec![id];
    while let Some(id) = stack.pop() {
        let func = m.function(f);
        let Some(node) = func.try_node(id) else { continue };
        if node.is_root() || func.use_count(id.into()) > 0 {
            continue;
        }
        let node = m.function_mut(f).remove(id).expect("live");
        stack.extend(node.operands().filter_map(|o| o.node()));
    }
}

fn replace(m: &mut Module, f: FuncId, old: NodeId, new: Operand) -> Result<()> {
    m.replace_all_uses_with(f, old, new)?;
    remove_if_dead(m, f, old);
    Ok(())
}

fn single_user(m: &Module, f: FuncId, id: NodeId) -> bool {
    m.function(f).use_count(id.into()) == 1
}

fn node_of(m: &Module, f: FuncId, o: Operand) -> Option<(NodeId, &crate::graph::Node)> {
    let id = o.node()?;
    Some((id, m.function(f).node(id)))
}

/// Remove nodes unreachable from Save and profiling nodes, then Constants no
/// function references.
pub fn dce(m: &mut Module, f: FuncId) -> Result<bool> {
    let func = m.function(f);
    let mut live = BTreeSet::new();
    let mut stack: Vec<NodeId> = func.nodes().filter(|(_, n)| n.is_root()).map(|(id, _)| id).collect();
    while let Some(id) = stack.pop() {
        if live.insert(id) {
            stack.extend(func.node(id).operands().filter_map(|o| o.node()));
        }
    }
    let dead: Vec<NodeId> = func.node_ids().into_iter().filter(|id| !live.contains(id)).collect();
    for &id in &dead {
        m.function_mut(f).remove(id);
    }
    let removed = m.remove_unused_constants();
    Ok(!dead.is_empty() || removed > 0)
}

/// Merge structurally identical nodes and Constants with identical contents.
pub fn cse(m: &mut Module, f: FuncId) -> Result<bool> {
    let mut changed = false;
    let mut by_content: BTreeMap<(String, Vec<u8>), Operand> = BTreeMap::new();
    for sid in m.function(f).referenced_storage() {
        let Some(t) = m.storage(sid).constant() else { continue };
        let key = (t.ty().to_string(), t.to_le_bytes());
        match by_content.get(&key) {
            Some(&first) => {
                m.function_mut(f).replace_uses(sid.into(), first);
                changed = true;
            }
            None => {
                by_content.insert(key, sid.into());
            }
        }
    }
    let mut seen: BTreeMap<String, NodeId> = BTreeMap::new();
    for id in topological_order(m.function(f))? {
        let n = m.function(f).node(id);
        if n.is_root() {
            continue;
        }
        let key = format!("{:?}|{:?}|{:?}|{:?}", n.op, n.inputs, n.ty, n.predicate);
        match seen.get(&key) {
            Some(&first) => {
                replace(m, f, id, first.into())?;
                changed = true;
            }
            None => {
                seen.insert(key, id);
            }
        }
    }
    Ok(changed)
}

fn constant_value(m: &Module, f: FuncId, o: Operand) -> Option<Value<f32>> {
    match o {
        Operand::Storage(s) => m.storage(s).constant().map(Value::from_tensor),
        Operand::Node(n) => {
            let node = m.function(f).node(n);
            match &node.op {
                Op::Splat { .. } if node.predicate.is_none() => {
                    eval_op(&node.op, node.ty.as_ref()?, &[], false).ok()
                }
                _ => None,
            }
        }
    }
}

/// Evaluate nodes whose inputs are all Constants or Splats into new Constants.
pub fn constant_fold(m: &mut Module, f: FuncId) -> Result<bool> {
    let differentiated = m.function(f).differentiated;
    for id in topological_order(m.function(f))? {
        let node = m.function(f).node(id).clone();
        if node.is_root() || node.inputs.is_empty() || node.predicate.is_some() {
            continue;
        }
        let Some(vals) = node.inputs.iter().map(|&o| constant_value(m, f, o)).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let refs: Vec<&Value<f32>> = vals.iter().collect();
        let v = eval_op(&node.op, node.result_type()?, &refs, differentiated)?;
        let c = m.add_constant("fold", v.to_tensor());
        replace(m, f, id, c.into())?;
        return Ok(true);
    }
    Ok(false)
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

/// Drop identity transposes, compose nested ones and fold transposed Constants.
pub fn eliminate_transposes(m: &mut Module, f: FuncId) -> Result<bool> {
    for id in m.function(f).node_ids() {
        let node = m.function(f).node(id).clone();
        let Op::Transpose { perm: q } = &node.op else { continue };
        if node.predicate.is_some() {
            continue;
        }
        let x = node.inputs[0];
        if is_identity(q) {
            replace(m, f, id, x)?;
            return Ok(true);
        }
        if let Some((_, inner)) = node_of(m, f, x) {
            if let (Op::Transpose { perm: p }, None) = (&inner.op, inner.predicate) {
                let r: Vec<usize> = q.iter().map(|&i| p[i]).collect();
                let src = inner.inputs[0];
                if is_identity(&r) {
                    replace(m, f, id, src)?;
                } else {
                    let t = m.add_node(f, Op::Transpose { perm: r }, vec![src])?;
                    replace(m, f, id, t.into())?;
                }
                return Ok(true);
            }
        }
        if let Some(v) = x.storage().and_then(|s| m.storage(s).constant()).map(Value::<f32>::from_tensor) {
            let t = eval_op(&node.op, node.result_type()?, &[&v], false)?;
            let c = m.add_constant("transposed", t.to_tensor());
            replace(m, f, id, c.into())?;
            return Ok(true);
        }
    }
    Ok(false)
}

/// Fold a BatchNormalization into the Convolution feeding it.
pub fn merge_batchnorm_conv(m: &mut Module, f: FuncId) -> Result<bool> {
    if m.function(f).differentiated {
        return Ok(false);
    }
    for id in m.function(f).node_ids() {
        let bn = m.function(f).node(id).clone();
        let Op::BatchNormalization { epsilon } = bn.op else { continue };
        let Some((cid, conv)) = node_of(m, f, bn.inputs[0]) else { continue };
        let conv = conv.clone();
        if !matches!(conv.op, Op::Convolution { .. })
            || bn.predicate.is_some()
            || conv.predicate.is_some()
            || !single_user(m, f, cid)
            || !conv.ty.as_ref().is_some_and(|t| t.is_float())
        {
            continue;
        }
        let consts = |o: &Operand| o.storage().and_then(|s| m.storage(s).constant()).and_then(|t| t.as_f32()).map(|v| v.to_vec());
        let (Some(filter), Some(bias)) = (consts(&conv.inputs[1]), consts(&conv.inputs[2])) else { continue };
        if m.function(f).use_count(conv.inputs[1]) != 1 || m.function(f).use_count(conv.inputs[2]) != 1 {
            continue;
        }
        let Some(stats) = bn.inputs[1..5].iter().map(consts).collect::<Option<Vec<_>>>() else { continue };
        let (scale, shift) = batchnorm_affine(&stats[0], &stats[1], &stats[2], &stats[3], epsilon);
        let per_out = filter.len() / scale.len();
        let new_filter: Vec<f32> = filter.iter().enumerate().map(|(i, w)| w * scale[i / per_out]).collect();
        let new_bias: Vec<f32> = bias.iter().zip(&scale).zip(&shift).map(|((b, s), t)| b * s + t).collect();
        let fty = m.operand_type(f, conv.inputs[1])?.clone();
        let bty = m.operand_type(f, conv.inputs[2])?.clone();
        let fc = m.add_constant("merged_filter", crate::Tensor::from_f32(&fty.dims, new_filter)?);
        let bc = m.add_constant("merged_bias", crate::Tensor::from_f32(&bty.dims, new_bias)?);
        let merged = m.add_node_typed(f, conv.op.clone(), vec![conv.inputs[0], fc.into(), bc.into()], conv.ty.clone())?;
        replace(m, f, id, merged.into())?;
        return Ok(true);
    }
    Ok(false)
}

fn is_conversion(k: NodeKind) -> bool {
    matches!(k, NodeKind::Quantize | NodeKind::Dequantize)
}

/// Number of Quantize and Dequantize nodes.
pub fn conversion_count(m: &Module, f: FuncId) -> usize {
    m.function(f).nodes().filter(|(_, n)| is_conversion(n.kind())).count()
}

/// Cancel conversion pairs and sink Dequantize below shape-only nodes.
pub fn minimize_conversions(m: &mut Module, f: FuncId) -> Result<bool> {
    for id in m.function(f).node_ids() {
        let node = m.function(f).node(id).clone();
        if node.predicate.is_some() {
            continue;
        }
        match &node.op {
            Op::Dequantize => {
                let Some((_, q)) = node_of(m, f, node.inputs[0]) else { continue };
                if q.op == Op::Quantize && q.predicate.is_none() {
                    let x = q.inputs[0];
                    if m.operand_type(f, x)? == node.result_type()? {
                        replace(m, f, id, x)?;
                        return Ok(true);
                    }
                }
            }
            Op::Quantize => {
                let Some((_, d)) = node_of(m, f, node.inputs[0]) else { continue };
                if d.op == Op::Dequantize && d.predicate.is_none() {
                    let y = d.inputs[0];
                    let ty = node.result_type()?.clone();
                    let new = if m.operand_type(f, y)? == &ty {
                        y
                    } else {
                        m.add_node_typed(f, Op::RescaleQuantized, vec![y], Some(ty))?.into()
                    };
                    replace(m, f, id, new)?;
                    return Ok(true);
                }
            }
            Op::Transpose { .. } | Op::Reshape { .. } => {
                let Some((did, d)) = node_of(m, f, node.inputs[0]) else { continue };
                if d.op != Op::Dequantize || d.predicate.is_some() || !single_user(m, f, did) {
                    continue;
                }
                let y = d.inputs[0];
                let yty = m.operand_type(f, y)?.clone();
                let shaped = yty.with_dims(&node.result_type()?.dims);
                let moved = m.add_node_typed(f, node.op.clone(), vec![y], Some(shaped))?;
                let deq = m.add_node(f, Op::Dequantize, vec![moved.into()])?;
                replace(m, f, id, deq.into())?;
                return Ok(true);
            }
            Op::Concat { .. } => {
                let mut srcs = Vec::new();
                for &o in &node.inputs {
                    match node_of(m, f, o) {
                        Some((did, d)) if d.op == Op::Dequantize && d.predicate.is_none() && single_user(m, f, did) => {
                            srcs.push(d.inputs[0])
                        }
                        _ => break,
                    }
                }
                if srcs.len() != node.inputs.len() {
                    continue;
                }
                let first = m.operand_type(f, srcs[0])?.clone();
                if srcs.iter().any(|&s| m.operand_type(f, s).ok().map(|t| t.quant) != Some(first.quant)) {
                    continue;
                }
                let ty = first.with_dims(&node.result_type()?.dims);
                let cat = m.add_node_typed(f, node.op.clone(), srcs, Some(ty))?;
                let deq = m.add_node(f, Op::Dequantize, vec![cat.into()])?;
                replace(m, f, id, deq.into())?;
                return Ok(true);
            }
            _ => {}
        }
    }
    Ok(false)
}

/// Kinds whose quantized kernels accept an arbitrary output scale, so a
/// following Rescale can be absorbed by retyping them.
fn absorbs_rescale(k: NodeKind) -> bool {
    matches!(
        k,
        NodeKind::Add | NodeKind::Sub | NodeKind::Mul | NodeKind::Div | NodeKind::BroadcastAdd | NodeKind::Quantize | NodeKind::Splat
    )
}

/// Number of RescaleQuantized nodes.
pub fn rescale_count(m: &Module, f: FuncId) -> usize {
    m.function(f).nodes().filter(|(_, n)| n.kind() == NodeKind::RescaleQuantized).count()
}

pub fn fold_rescale(m: &mut Module, f: FuncId) -> Result<bool> {
    for id in m.function(f).node_ids() {
        let node = m.function(f).node(id).clone();
        if node.op != Op::RescaleQuantized || node.predicate.is_some() {
            continue;
        }
        let x = node.inputs[0];
        let ty = node.result_type()?.clone();
        if m.operand_type(f, x)? == &ty {
            replace(m, f, id, x)?;
            return Ok(true);
        }
        let Some((pid, p)) = node_of(m, f, x) else { continue };
        let p = p.clone();
        if p.predicate.is_some() {
            continue;
        }
        if p.op == Op::RescaleQuantized {
            let r = m.add_node_typed(f, Op::RescaleQuantized, vec![p.inputs[0]], Some(ty))?;
            replace(m, f, id, r.into())?;
            return Ok(true);
        }
        if absorbs_rescale(p.kind()) && single_user(m, f, pid) {
            m.function_mut(f).node_mut(pid).ty = Some(ty);
            replace(m, f, id, x)?;
            return Ok(true);
        }
    }
    Ok(false)
}

/// Give both quantized operands of every Max/Min the same type so the kernel
/// compares raw int8 values.
pub fn normalize_max_scales(m: &mut Module, f: FuncId) -> Result<bool> {
    for id in m.function(f).node_ids() {
        let node = m.function(f).node(id).clone();
        if !matches!(node.op, Op::Max | Op::Min) {
            continue;
        }
        let (a, b) = (node.inputs[0], node.inputs[1]);
        let (ta, tb) = (m.operand_type(f, a)?.clone(), m.operand_type(f, b)?.clone());
        if !ta.is_quantized() || ta == tb {
            continue;
        }
        let splat_value = |o: Operand| match node_of(m, f, o) {
            Some((_, n)) if n.predicate.is_none() => match n.op {
                Op::Splat { value } => Some(value),
                _ => None,
            },
            _ => None,
        };
        let (new_a, new_b) = if let Some(v) = splat_value(b) {
            (a, m.add_node_typed(f, Op::Splat { value: v }, vec![], Some(ta.clone()))?.into())
        } else if let Some(v) = splat_value(a) {
            (m.add_node_typed(f, Op::Splat { value: v }, vec![], Some(tb.clone()))?.into(), b)
        } else {
            let (la, ha) = ta.params()?.real_range();
            let (lb, hb) = tb.params()?.real_range();
            let t = TensorType::with_params(&ta.dims, choose_quant_params(la.min(lb), ha.max(hb))?);
            let mut side = |o: Operand, ty: &TensorType| -> Result<Operand> {
                if ty == &t {
                    Ok(o)
                } else {
                    Ok(m.add_node_typed(f, Op::RescaleQuantized, vec![o], Some(t.clone()))?.into())
                }
            };
            (side(a, &ta)?, side(b, &tb)?)
        };
        let n = m.function_mut(f).node_mut(id);
        n.inputs = vec![new_a, new_b];
        for o in [a, b] {
            if let Some(old) = o.node() {
                remove_if_dead(m, f, old);
            }
        }
        return Ok(true);
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Bindings};
    use crate::tensor::Tensor;

    fn kinds(m: &Module, f: FuncId) -> Vec<NodeKind> {
        m.function(f).nodes().map(|(_, n)| n.kind()).collect()
    }

    #[test]
    fn empty_pipeline_is_noop() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into());
        let _dead = b.tanh(x.into());
        b.save(r, o);
        let before = m.clone();
        optimize(&mut m, f, &[]).unwrap();
        assert_eq!(before, m);
    }

    #[test]
    fn dce_removes_unused_constant_and_dead_nodes() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let c = m.create_constant("unused", Tensor::from_f32(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into());
        b.tanh(c.into());
        b.save(r, o);
        optimize(&mut m, f, &[PassId::DCE]).unwrap();
        assert!(m.storage_by_name("unused").is_none());
        assert_eq!(kinds(&m, f), [NodeKind::Relu, NodeKind::Save]);
    }

    #[test]
    fn transpose_pairs_cancel() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2, 3])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2, 3])).unwrap();
        let mut b = m.builder(f);
        let t1 = b.transpose(x.into(), &[1, 0]);
        let t2 = b.transpose(t1, &[1, 0]);
        b.save(t2, o);
        optimize(&mut m, f, &[PassId::TransposeElim]).unwrap();
        assert_eq!(kinds(&m, f), [NodeKind::Save]);
    }

    #[test]
    fn transposed_constant_is_folded() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let c = m.create_constant("c", Tensor::from_f32(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[3, 2])).unwrap();
        let mut b = m.builder(f);
        let t = b.transpose(c.into(), &[1, 0]);
        b.save(t, o);
        let before = evaluate::<f32>(&m, f, &Bindings::new()).unwrap().output_tensors();
        optimize(&mut m, f, &[PassId::TransposeElim]).unwrap();
        assert_eq!(kinds(&m, f), [NodeKind::Save]);
        assert_eq!(before, evaluate::<f32>(&m, f, &Bindings::new()).unwrap().output_tensors());
    }

    #[test]
    fn cse_merges_duplicates() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let a1 = b.tanh(x.into());
        let a2 = b.tanh(x.into());
        let s = b.add(a1, a2);
        b.save(s, o);
        optimize(&mut m, f, &[PassId::CSE]).unwrap();
        assert_eq!(kinds(&m, f).iter().filter(|&&k| k == NodeKind::Tanh).count(), 1);
    }

    #[test]
    fn rescale_folds() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let t0 = TensorType::int8q(&[4], 0.1, 0);
        let t1 = TensorType::int8q(&[4], 0.2, 3);
        let t2 = TensorType::int8q(&[4], 0.05, -1);
        let x = m.create_placeholder("x", t0.clone()).unwrap();
        let o = m.create_placeholder("o", t2.clone()).unwrap();
        let o2 = m.create_placeholder("o2", t0.clone()).unwrap();
        let mut b = m.builder(f);
        let r1 = b.rescale(x.into(), t1);
        let r2 = b.rescale(r1, t2);
        b.save(r2, o);
        let same = b.rescale(x.into(), t0);
        b.save(same, o2);
        optimize(&mut m, f, &[PassId::FoldRescale, PassId::DCE]).unwrap();
        assert_eq!(rescale_count(&m, f), 1);
    }

    #[test]
    fn max_with_splat_side_retypes_splat() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let tx = TensorType::int8q(&[4], 0.1, 0);
        let x = m.create_placeholder("x", tx.clone()).unwrap();
        let o = m.create_placeholder("o", tx.clone()).unwrap();
        let mut b = m.builder(f);
        let z = b.splat(TensorType::int8q(&[4], 0.3, 5), 0.0);
        let mx = b.node_typed(Op::Max, &[x.into(), z], tx.clone());
        b.save(mx, o);
        optimize(&mut m, f, &[PassId::NormalizeMaxScales]).unwrap();
        assert_eq!(rescale_count(&m, f), 0);
        let n = m.function(f).node(mx.node().unwrap());
        assert_eq!(m.operand_type(f, n.inputs[1]).unwrap(), &tx);
    }
}
