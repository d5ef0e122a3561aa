use std::collections::BTreeMap;
use std::fmt;

use super::{topological_order, FuncId, Module, NodeId, Operand};
use crate::error::{Error, Result};
use crate::tensor::ElemKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Check every node against its kind's typing rule. Never fails; an empty
/// list means the function is well formed.
pub fn verify(m: &Module, fid: FuncId) -> Vec<Diagnostic> {
    let f = m.function(fid);
    let mut diags = Vec::new();
    let mut push = |node: Option<NodeId>, message: String| diags.push(Diagnostic { node, message });

    let mut save_targets: BTreeMap<_, NodeId> = BTreeMap::new();
    for (id, node) in f.nodes() {
        let mut resolved = true;
        for op in node.operands() {
            let ok = match op {
                Operand::Node(n) => f.try_node(n).map(|n| n.ty.is_some()).unwrap_or(false),
                Operand::Storage(s) => m.try_storage(s).is_some(),
            };
            if !ok {
                push(Some(id), format!("operand {} does not resolve to a value", m.operand_name(op)));
                resolved = false;
            }
        }
        if !resolved {
            continue;
        }
        if let Err(msg) = m.check_node(fid, node) {
            push(Some(id), msg);
        }
        if let Some(p) = node.predicate {
            let pty = m.operand_type(fid, p).expect("resolved");
            let batch = node
                .ty
                .as_ref()
                .or_else(|| node.inputs.first().and_then(|&i| m.operand_type(fid, i).ok()))
                .map(|t| t.dims[0]);
            let shape_ok = pty.dims == [1] || Some(pty.dims.as_slice()) == batch.as_ref().map(std::slice::from_ref);
            if pty.kind != ElemKind::Bool || !shape_ok {
                push(Some(id), format!("predicate must be bool<1> or bool<batch>, got {pty}"));
            }
        }
        if let Some(t) = node.save_target() {
            if let Some(prev) = save_targets.insert(t, id) {
                push(
                    Some(id),
                    format!("placeholder {} already saved by {prev}", m.operand_name(t.into())),
                );
            }
        }
    }
    if let Err(e) = topological_order(f) {
        push(None, e.to_string());
    }
    diags
}

pub fn verify_or_err(m: &Module, f: FuncId) -> Result<()> {
    let diags = verify(m, f);
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::Verify(diags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Node, Op};
    use crate::tensor::{Tensor, TensorType};

    fn raw(m: &mut Module, f: FuncId, op: Op, inputs: Vec<Operand>, ty: TensorType) -> NodeId {
        m.function_mut(f).add(Node::new(op, inputs, Some(ty)))
    }

    #[test]
    fn well_typed_add_is_clean() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let a = m.create_placeholder("a", TensorType::float(&[2, 2])).unwrap();
        let b = m.create_placeholder("b", TensorType::float(&[2, 2])).unwrap();
        m.builder(f).add(a.into(), b.into());
        assert!(verify(&m, f).is_empty());
    }

    #[test]
    fn add_shape_mismatch_reports_one_diagnostic() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let a = m.create_placeholder("a", TensorType::float(&[2, 2])).unwrap();
        let b = m.create_placeholder("b", TensorType::float(&[2, 3])).unwrap();
        let n = raw(&mut m, f, Op::Add, vec![a.into(), b.into()], TensorType::float(&[2, 2]));
        let d = verify(&m, f);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].node, Some(n));
        assert!(d[0].message.contains("same type"));
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let a = m.create_placeholder("a", TensorType::float(&[2, 3])).unwrap();
        let b = m.create_placeholder("b", TensorType::float(&[4, 5])).unwrap();
        raw(&mut m, f, Op::MatMul, vec![a.into(), b.into()], TensorType::float(&[2, 5]));
        let d = verify(&m, f);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("inner"));
    }

    #[test]
    fn concat_and_quantized_rules() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let a = m.create_placeholder("a", TensorType::float(&[2, 3])).unwrap();
        let b = m.create_placeholder("b", TensorType::float(&[3, 3])).unwrap();
        let c = m.create_placeholder("c", TensorType::float(&[2, 4])).unwrap();
        raw(&mut m, f, Op::Concat { axis: 0 }, vec![a.into(), b.into()], TensorType::float(&[5, 3]));
        assert!(verify(&m, f).is_empty());
        raw(&mut m, f, Op::Concat { axis: 0 }, vec![a.into(), c.into()], TensorType::float(&[4, 3]));
        assert_eq!(verify(&m, f).len(), 1);

        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let a = m.create_placeholder("a", TensorType::float(&[2])).unwrap();
        raw(&mut m, f, Op::Quantize, vec![a.into()], TensorType::float(&[2]));
        assert_eq!(verify(&m, f).len(), 1);
    }

    #[test]
    fn save_rules() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let k = m.create_constant("k", Tensor::from_f32(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        m.function_mut(f).add(Node::new(Op::Save, vec![x.into(), k.into()], None));
        assert_eq!(verify(&m, f).len(), 1);

        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        m.builder(f).save(x.into(), o);
        m.builder(f).save(x.into(), o);
        assert_eq!(verify(&m, f).len(), 1);
    }

    #[test]
    fn predicate_must_be_bool_batch() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[4, 3])).unwrap();
        let p1 = m.create_placeholder("p1", TensorType::boolean(&[1])).unwrap();
        let p4 = m.create_placeholder("p4", TensorType::boolean(&[4])).unwrap();
        let p3 = m.create_placeholder("p3", TensorType::boolean(&[3])).unwrap();
        let mut b = m.builder(f);
        let r1 = b.relu(x.into());
        b.predicate(r1, p1.into());
        let r2 = b.relu(x.into());
        b.predicate(r2, p4.into());
        assert!(verify(&m, f).is_empty());
        let r3 = m.builder(f).relu(x.into());
        m.builder(f).predicate(r3, p3.into());
        assert_eq!(verify(&m, f).len(), 1);
        let r4 = m.builder(f).relu(x.into());
        m.builder(f).predicate(r4, x.into());
        assert_eq!(verify(&m, f).len(), 2);
    }

    #[test]
    fn dangling_reference() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        raw(&mut m, f, Op::Relu, vec![Operand::Node(NodeId(7))], TensorType::float(&[1]));
        assert!(!verify(&m, f).is_empty());
    }
}
