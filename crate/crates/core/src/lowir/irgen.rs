//! Translation of a scheduled, lowered function into instructions.

use std::collections::{BTreeMap, BTreeSet};

use super::{supported, ActivationVar, IRFunction, Instr, InstrOp, Mutability, Step, ValueRef, WeightVar};
use crate::error::{Error, Result};
use crate::graph::{FuncId, Module, NodeId, Op, Operand, StorageId};
use crate::tensor::Tensor;

/// An instruction program together with the constant payloads it declares.
#[derive(Clone, Debug, PartialEq)]
pub struct IrProgram {
    pub ir: IRFunction,
    pub constants: BTreeMap<String, Tensor>,
}

/// Generate instructions for `f` in the given node order.
///
/// Module storage becomes weights (constants immutable, placeholders
/// mutable). Each value-producing node allocates one activation, runs one
/// instruction and the activation is retired right after its last reader.
/// Save becomes a copy into its placeholder. With `training` set every
/// instruction is marked keep-alive and activations are retired only at the
/// end, so forward results stay around for the backward pass.
pub fn irgen(m: &Module, fid: FuncId, order: &[NodeId], training: bool) -> Result<IrProgram> {
    let f = m.function(fid);
    let mut ir = IRFunction::default();
    let mut constants = BTreeMap::new();
    let mut weight_of: BTreeMap<StorageId, u32> = BTreeMap::new();
    for sid in f.referenced_storage() {
        let st = m.storage(sid);
        let mutability = if st.is_constant() { Mutability::Constant } else { Mutability::Mutable };
        weight_of.insert(sid, ir.weights.len() as u32);
        ir.weights.push(WeightVar { name: st.name().to_string(), ty: st.ty().clone(), mutability });
        if let Some(t) = st.constant() {
            constants.insert(st.name().to_string(), t.clone());
        }
    }
    let mut taken: BTreeSet<String> = ir.weights.iter().map(|w| w.name.clone()).collect();
    let mut fresh = 0usize;
    let mut fresh_name = |taken: &mut BTreeSet<String>| loop {
        let n = format!("act{fresh}");
        fresh += 1;
        if taken.insert(n.clone()) {
            return n;
        }
    };

    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    if pos.len() != f.len() || order.iter().any(|id| !f.contains(*id)) {
        return Err(Error::Ir("order must list every node exactly once".into()));
    }
    let mut last_use: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (&id, &p) in &pos {
        for src in f.node(id).operands().filter_map(Operand::node) {
            let e = last_use.entry(src).or_insert(p);
            *e = (*e).max(p);
        }
    }
    let mut dies_after: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (&id, &p) in &pos {
        if f.node(id).ty.is_some() {
            dies_after.entry(last_use.get(&id).copied().unwrap_or(p)).or_default().push(id);
        }
    }

    let mut act_of: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut retire_at_end = Vec::new();
    for (p, &id) in order.iter().enumerate() {
        let node = f.node(id);
        let value = |o: Operand, act_of: &BTreeMap<NodeId, u32>| -> Result<ValueRef> {
            match o {
                Operand::Storage(s) => Ok(ValueRef::Weight(weight_of[&s])),
                Operand::Node(n) => act_of
                    .get(&n)
                    .map(|&a| ValueRef::Act(a))
                    .ok_or_else(|| Error::Ir(format!("{id} reads {n} before it is scheduled"))),
            }
        };
        let predicate = node.predicate.map(|o| value(o, &act_of)).transpose()?;
        let instr = match &node.op {
            Op::Save => {
                let dest = node.save_target().expect("save has a target");
                let src = value(node.inputs[0], &act_of)?;
                Instr::new(InstrOp::Copy, ValueRef::Weight(weight_of[&dest]), &[src])
            }
            op if !supported(op.kind()) => {
                return Err(Error::Ir(format!("{id}: {} has no instruction; lower the function first", op.kind())))
            }
            op => {
                let ins: Vec<ValueRef> = node.inputs.iter().map(|&o| value(o, &act_of)).collect::<Result<_>>()?;
                let a = ir.activations.len() as u32;
                ir.activations.push(ActivationVar { name: fresh_name(&mut taken), ty: node.result_type()?.clone() });
                act_of.insert(id, a);
                ir.program.push(Step::Alloc(a));
                Instr::new(InstrOp::Op(op.clone()), ValueRef::Act(a), &ins)
            }
        };
        ir.program.push(Step::Run(Instr { predicate, keep_alive: training, ..instr }));
        for dead in dies_after.get(&p).into_iter().flatten() {
            if let Some(&a) = act_of.get(dead) {
                if training {
                    retire_at_end.push(a);
                } else {
                    ir.program.push(Step::Dealloc(a));
                }
            }
        }
    }
    ir.program.extend(retire_at_end.into_iter().map(Step::Dealloc));
    ir.check()?;
    Ok(IrProgram { ir, constants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowir::dump_ir;
    use crate::tensor::TensorType;

    #[test]
    fn save_of_placeholder_is_one_copy() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[3])).unwrap();
        let o = m.create_placeholder("out", TensorType::float(&[3])).unwrap();
        let save = m.builder(f).save(x.into(), o);
        let p = irgen(&m, f, &[save], false).unwrap();
        assert!(p.ir.activations.is_empty());
        assert_eq!(p.ir.program.len(), 1);
        assert_eq!(p.ir.copy_count(), 1);
    }

    #[test]
    fn single_relu_matches_the_textbook_shape() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("in", TensorType::float(&[2, 3])).unwrap();
        let o = m.create_placeholder("out", TensorType::float(&[2, 3])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into());
        b.save(r, o);
        let order = crate::lowir::schedule(m.function(f)).unwrap();
        let p = irgen(&m, f, &order, false).unwrap();
        assert_eq!(
            dump_ir(&p.ir),
            "declare {\n  %in = mutable float<2 x 3>\n  %out = mutable float<2 x 3>\n}\n\
             program {\n  %act0 = alloc float<2 x 3>\n  relu @out %act0, @in %in\n  \
             copy @out %out, @in %act0\n  dealloc %act0\n}\n"
        );
    }

    #[test]
    fn unlowered_kind_is_rejected() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2, 3])).unwrap();
        let w = m.create_placeholder("w", TensorType::float(&[3, 4])).unwrap();
        let bias = m.create_placeholder("b", TensorType::float(&[4])).unwrap();
        let o = m.create_placeholder("out", TensorType::float(&[2, 4])).unwrap();
        let mut b = m.builder(f);
        let y = b.fully_connected(x.into(), w.into(), bias.into());
        b.save(y, o);
        let order = crate::lowir::naive_order(m.function(f)).unwrap();
        assert!(matches!(irgen(&m, f, &order, false), Err(Error::Ir(_))));
    }

    #[test]
    fn training_mode_keeps_everything_alive() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[4])).unwrap();
        let o = m.create_placeholder("out", TensorType::float(&[4])).unwrap();
        let mut b = m.builder(f);
        let a = b.tanh(x.into());
        let c = b.sigmoid(a);
        b.save(c, o);
        let order = crate::lowir::naive_order(m.function(f)).unwrap();
        let p = irgen(&m, f, &order, true).unwrap();
        assert!(p.ir.instrs().all(|i| i.keep_alive));
        let n = p.ir.program.len();
        assert!(matches!(p.ir.program[n - 1], Step::Dealloc(_)));
        assert!(matches!(p.ir.program[n - 2], Step::Dealloc(_)));
    }
}
