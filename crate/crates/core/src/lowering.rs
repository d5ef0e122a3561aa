//! Rewriting high-level operators into primitive linear-algebra nodes.
//!
//! | kind               | replacement                                   |
//! |--------------------|-----------------------------------------------|
//! | FullyConnected     | `BroadcastAdd(MatMul(x, w), b)`               |
//! | Relu               | `Max(x, Splat 0)`                             |
//! | BatchNormalization | `Add(Mul(x, scale), shift)` with folded constants |
//! | Regression         | prediction (inference) or `Sub(pred, expected)` once differentiated |
//! | SGD                | `Add(w, Mul(Splat −lr, g))`                    |

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{verify_or_err, FuncId, Module, NodeId, NodeKind, Op, Operand};
use crate::kernels::batchnorm_affine;
use crate::tensor::{Tensor, TensorType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training,
}

/// Lowering configuration. `keep` lists kinds the backend executes natively.
#[derive(Clone, Debug)]
pub struct LoweringOptions {
    pub mode: Mode,
    pub keep: BTreeSet<NodeKind>,
}

impl LoweringOptions {
    pub fn new(mode: Mode) -> Self {
        LoweringOptions { mode, keep: BTreeSet::new() }
    }

    pub fn keeping(mut self, kinds: impl IntoIterator<Item = NodeKind>) -> Self {
        self.keep.extend(kinds);
        self
    }

    pub fn should_lower(&self, kind: NodeKind) -> bool {
        kind.info().lowerable && !self.keep.contains(&kind)
    }
}

/// Lower every lowerable node of `f` in place, to fixpoint.
pub fn lower(m: &mut Module, f: FuncId, opts: &LoweringOptions) -> Result<()> {
    verify_or_err(m, f)?;
    let func = m.function(f);
    if opts.mode == Mode::Training && !func.differentiated && func.nodes().any(|(_, n)| n.kind() == NodeKind::Regression) {
        return Err(Error::Lowering(format!(
            "function `{}` must be differentiated before lowering for training",
            func.name()
        )));
    }
    let mut i = 0;
    while i < m.function(f).id_bound() {
        let id = NodeId(i as u32);
        i += 1;
        let Some(node) = m.function(f).try_node(id) else { continue };
        if !opts.should_lower(node.kind()) {
            continue;
        }
        let replacement = expand(m, f, id)?;
        m.replace_all_uses_with(f, id, replacement)
            .map_err(|e| Error::Lowering(format!("{id} ({}): {e}", m.function(f).node(id).kind())))?;
        m.function_mut(f).remove(id);
    }
    verify_or_err(m, f)
}

fn expand(m: &mut Module, f: FuncId, id: NodeId) -> Result<Operand> {
    let node = m.function(f).node(id).clone();
    let pred = node.predicate;
    let ins = &node.inputs;
    let ty = node.result_type()?.clone();
    let mut add = |m: &mut Module, op: Op, inputs: Vec<Operand>, ty: Option<TensorType>| -> Result<Operand> {
        let nid = match ty {
            Some(t) => m.add_node_typed(f, op, inputs, Some(t))?,
            None => m.add_node(f, op, inputs)?,
        };
        m.function_mut(f).node_mut(nid).predicate = pred;
        Ok(nid.into())
    };
    match &node.op {
        Op::FullyConnected => {
            let mm = add(m, Op::MatMul, vec![ins[0], ins[1]], Some(ty.clone()))?;
            add(m, Op::BroadcastAdd, vec![mm, ins[2]], Some(ty))
        }
        Op::Relu => {
            let xty = m.operand_type(f, ins[0])?.clone();
            let zero = add(m, Op::Splat { value: 0.0 }, vec![], Some(xty))?;
            add(m, Op::Max, vec![ins[0], zero], Some(ty))
        }
        Op::Regression => {
            if m.function(f).differentiated {
                add(m, Op::Sub, vec![ins[0], ins[1]], Some(ty))
            } else {
                Ok(ins[0])
            }
        }
        Op::SGD { learning_rate } => {
            let step = add(m, Op::Splat { value: -learning_rate }, vec![], Some(ty.clone()))?;
            let delta = add(m, Op::Mul, vec![step, ins[1]], Some(ty.clone()))?;
            add(m, Op::Add, vec![ins[0], delta], Some(ty))
        }
        Op::BatchNormalization { epsilon } => lower_batchnorm(m, f, id, *epsilon, &mut add),
        op => Err(Error::Lowering(format!("no lowering rule for {}", op.kind()))),
    }
}

type AddFn<'a> = dyn FnMut(&mut Module, Op, Vec<Operand>, Option<TensorType>) -> Result<Operand> + 'a;

fn lower_batchnorm(m: &mut Module, f: FuncId, id: NodeId, epsilon: f32, add: &mut AddFn) -> Result<Operand> {
    let node = m.function(f).node(id).clone();
    let mut params = Vec::new();
    for &o in &node.inputs[1..5] {
        let t = o
            .storage()
            .and_then(|s| m.storage(s).constant())
            .ok_or_else(|| {
                Error::Lowering(format!("{id}: batch normalization statistics must be Constants, got {}", m.operand_name(o)))
            })?;
        params.push(t.as_f32().expect("float statistics").to_vec());
    }
    let (scale, shift) = batchnorm_affine(&params[0], &params[1], &params[2], &params[3], epsilon);
    let ty = node.result_type()?.clone();
    let tile = |v: &[f32]| -> Vec<f32> { (0..ty.num_elements()).map(|i| v[i % v.len()]).collect() };
    let sc = m.add_constant("bn_scale", Tensor::from_f32(&ty.dims, tile(&scale))?);
    let sh = m.add_constant("bn_shift", Tensor::from_f32(&ty.dims, tile(&shift))?);
    let mul = add(m, Op::Mul, vec![node.inputs[0], sc.into()], Some(ty.clone()))?;
    add(m, Op::Add, vec![mul, sh.into()], Some(ty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Bindings};

    fn bind1(name: &str, dims: &[usize], v: Vec<f32>) -> Bindings {
        let mut b = Bindings::new();
        b.insert(name.into(), Tensor::from_f32(dims, v).unwrap());
        b
    }

    fn kinds(m: &Module, f: FuncId) -> Vec<NodeKind> {
        m.function(f).nodes().map(|(_, n)| n.kind()).collect()
    }

    #[test]
    fn fully_connected_becomes_matmul_and_broadcast_add() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2, 3])).unwrap();
        let w = m.create_constant("w", Tensor::from_f32(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let b = m.create_constant("b", Tensor::from_f32(&[2], vec![0.5, -0.5]).unwrap()).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2, 2])).unwrap();
        let mut bl = m.builder(f);
        let y = bl.fully_connected(x.into(), w.into(), b.into());
        bl.save(y, o);
        let bind = bind1("x", &[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]);
        let before = evaluate::<f32>(&m, f, &bind).unwrap().output_tensors();
        lower(&mut m, f, &LoweringOptions::new(Mode::Inference)).unwrap();
        assert_eq!(kinds(&m, f), [NodeKind::Save, NodeKind::MatMul, NodeKind::BroadcastAdd]);
        assert_eq!(before, evaluate::<f32>(&m, f, &bind).unwrap().output_tensors());
    }

    #[test]
    fn inference_regression_is_identity() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let t = m.create_placeholder("t", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let r = b.regression(x.into(), t.into());
        b.save(r, o);
        lower(&mut m, f, &LoweringOptions::new(Mode::Inference)).unwrap();
        assert_eq!(kinds(&m, f), [NodeKind::Save]);
        assert_eq!(m.function(f).nodes().next().unwrap().1.inputs[0], x.into());
    }

    #[test]
    fn training_lowering_requires_differentiation() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[2])).unwrap();
        let t = m.create_placeholder("t", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let r = b.regression(x.into(), t.into());
        b.save(r, o);
        assert!(matches!(lower(&mut m, f, &LoweringOptions::new(Mode::Training)), Err(Error::Lowering(_))));
    }

    #[test]
    fn relu_lowering_is_bitwise() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[6])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[6])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into());
        b.save(r, o);
        let bind = bind1("x", &[6], vec![-1.5, -0.0, 0.0, 1e-30, 2.5, -3e20]);
        let before = evaluate::<f32>(&m, f, &bind).unwrap().output_tensors();
        lower(&mut m, f, &LoweringOptions::new(Mode::Inference)).unwrap();
        let after = evaluate::<f32>(&m, f, &bind).unwrap().output_tensors();
        let bits = |t: &Tensor| t.as_f32().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before["o"]), bits(&after["o"]));
        assert!(!kinds(&m, f).contains(&NodeKind::Relu));
    }

    #[test]
    fn relu_can_be_kept() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[6])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[6])).unwrap();
        let mut b = m.builder(f);
        let r = b.relu(x.into());
        b.save(r, o);
        lower(&mut m, f, &LoweringOptions::new(Mode::Inference).keeping([NodeKind::Relu])).unwrap();
        assert!(kinds(&m, f).contains(&NodeKind::Relu));
    }

    fn sgd_graph(lr: f32) -> (Module, FuncId) {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let w = m.create_placeholder("w", TensorType::float(&[3])).unwrap();
        let g = m.create_placeholder("g", TensorType::float(&[3])).unwrap();
        let mut b = m.builder(f);
        let u = b.sgd(w.into(), g.into(), lr);
        b.save(u, w);
        (m, f)
    }

    #[test]
    fn sgd_lowering_examples() {
        let w = vec![0.25f32, -1.5, 3.0];
        for (lr, g, expect) in [
            (0.0, vec![9.0, 9.0, 9.0], w.clone()),
            (1.0, w.clone(), vec![0.0; 3]),
        ] {
            let (mut m, f) = sgd_graph(lr);
            lower(&mut m, f, &LoweringOptions::new(Mode::Training)).unwrap();
            let mut bind = bind1("w", &[3], w.clone());
            bind.insert("g".into(), Tensor::from_f32(&[3], g).unwrap());
            let out = evaluate::<f32>(&m, f, &bind).unwrap().output_tensors();
            assert_eq!(out["w"].as_f32().unwrap(), expect.as_slice());
            let ks: BTreeSet<_> = kinds(&m, f).into_iter().collect();
            assert!(ks.is_subset(&[NodeKind::Splat, NodeKind::Mul, NodeKind::Add, NodeKind::Sub, NodeKind::Save].into()));
        }
    }

    #[test]
    fn batchnorm_examples() {
        for (gamma, beta) in [(1.0f32, 0.0f32), (2.0, 3.0)] {
            let mut m = Module::new();
            let f = m.create_function("main").unwrap();
            let x = m.create_placeholder("x", TensorType::float(&[2, 2])).unwrap();
            let c = |m: &mut Module, n: &str, v: f32| m.create_constant(n, Tensor::from_f32(&[2], vec![v; 2]).unwrap()).unwrap();
            let (g, b, mu, var) = (c(&mut m, "g", gamma), c(&mut m, "b", beta), c(&mut m, "mu", 0.0), c(&mut m, "var", 1.0));
            let o = m.create_placeholder("o", TensorType::float(&[2, 2])).unwrap();
            let mut bl = m.builder(f);
            let y = bl.batch_norm(x.into(), g.into(), b.into(), mu.into(), var.into(), 0.0);
            bl.save(y, o);
            lower(&mut m, f, &LoweringOptions::new(Mode::Inference)).unwrap();
            let xs = vec![1.0, -2.0, 0.5, 4.0];
            let out = evaluate::<f32>(&m, f, &bind1("x", &[2, 2], xs.clone())).unwrap().output_tensors();
            let want: Vec<f32> = xs.iter().map(|v| gamma * v + beta).collect();
            assert_eq!(out["o"].as_f32().unwrap(), want.as_slice());
            for k in kinds(&m, f) {
                assert!(matches!(k, NodeKind::Mul | NodeKind::Add | NodeKind::Save), "{k}");
            }
        }
    }

    #[test]
    fn batchnorm_needs_constant_statistics() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[1, 2])).unwrap();
        let p = m.create_placeholder("p", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[1, 2])).unwrap();
        let mut bl = m.builder(f);
        let y = bl.batch_norm(x.into(), p.into(), p.into(), p.into(), p.into(), 1e-5);
        bl.save(y, o);
        assert!(matches!(lower(&mut m, f, &LoweringOptions::new(Mode::Inference)), Err(Error::Lowering(_))));
    }
}
