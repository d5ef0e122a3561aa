//! Reverse-mode differentiation of high-level functions.
//!
//! The loss is implied by the Regression nodes: `L = ½ Σ (pred − expected)²`,
//! so the gradient flowing out of a Regression is `pred − expected`. In a
//! differentiated function each Regression node evaluates to exactly that
//! difference, and the original consumers of the Regression are rewired to
//! its prediction input.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::eval::{evaluate_values, Data, Value};
use crate::graph::{topological_order, verify_or_err, FuncId, Module, NodeId, NodeKind, Op, Operand, StorageId};
use crate::tensor::TensorType;
use crate::Bindings;

#[derive(Clone, Debug, PartialEq)]
pub struct GradConfig {
    pub learning_rate: f32,
    /// Names of the Placeholders updated by SGD.
    pub trainables: BTreeSet<String>,
}

impl GradConfig {
    pub fn new<I, S>(learning_rate: f32, trainables: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        GradConfig { learning_rate, trainables: trainables.into_iter().map(Into::into).collect() }
    }
}

/// Output of [`differentiate`].
#[derive(Clone, Debug)]
pub struct Differentiated {
    pub func: FuncId,
    /// Gradient node for each trainable placeholder.
    pub grads: BTreeMap<String, Operand>,
    /// SGD update node for each trainable placeholder.
    pub updates: BTreeMap<String, Operand>,
}

struct Ctx<'a> {
    m: &'a mut Module,
    f: FuncId,
}

impl Ctx<'_> {
    fn ty(&self, o: Operand) -> TensorType {
        self.m.operand_type(self.f, o).expect("resolved operand").clone()
    }

    fn node(&mut self, op: Op, inputs: &[Operand]) -> Result<Operand> {
        Ok(self.m.add_node(self.f, op, inputs.to_vec())?.into())
    }

    fn splat(&mut self, ty: TensorType, value: f32) -> Result<Operand> {
        Ok(self.m.add_node_typed(self.f, Op::Splat { value }, vec![], Some(ty))?.into())
    }

    fn neg(&mut self, g: Operand) -> Result<Operand> {
        let z = self.splat(self.ty(g), 0.0)?;
        self.node(Op::Sub, &[z, g])
    }

    fn transpose2(&mut self, x: Operand) -> Result<Operand> {
        self.node(Op::Transpose { perm: vec![1, 0] }, &[x])
    }

    /// Sum `g` over the leading dimensions that were broadcast onto `b`.
    fn reduce_broadcast(&mut self, g: Operand, b_dims: &[usize]) -> Result<Operand> {
        let gd = self.ty(g).dims;
        let m: usize = b_dims.iter().product();
        let r: usize = gd[..gd.len() - b_dims.len()].iter().product();
        let ones = self.splat(TensorType::float(&[1, r]), 1.0)?;
        let g2 = self.node(Op::Reshape { dims: vec![r, m] }, &[g])?;
        let s = self.node(Op::MatMul, &[ones, g2])?;
        self.node(Op::Reshape { dims: b_dims.to_vec() }, &[s])
    }
}

/// Gradient contributions of node `id` to its inputs, given its output
/// gradient `g`. Entries are `(input position, contribution)`.
fn rule(cx: &mut Ctx, id: NodeId, g: Operand, wanted: &[bool]) -> Result<Vec<(usize, Operand)>> {
    let node = cx.m.function(cx.f).node(id).clone();
    let ins = &node.inputs;
    let mut out = Vec::new();
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    match &node.op {
        Op::Add => {
            out.push((0, g));
            out.push((1, g));
        }
        Op::Sub => {
            out.push((0, g));
            if want(1) {
                out.push((1, cx.neg(g)?));
            }
        }
        Op::Mul => {
            if want(0) {
                out.push((0, cx.node(Op::Mul, &[g, ins[1]])?));
            }
            if want(1) {
                out.push((1, cx.node(Op::Mul, &[g, ins[0]])?));
            }
        }
        Op::Div => {
            if want(0) {
                out.push((0, cx.node(Op::Div, &[g, ins[1]])?));
            }
            if want(1) {
                let ga = cx.node(Op::Mul, &[g, ins[0]])?;
                let bb = cx.node(Op::Mul, &[ins[1], ins[1]])?;
                let q = cx.node(Op::Div, &[ga, bb])?;
                out.push((1, cx.neg(q)?));
            }
        }
        Op::MatMul | Op::FullyConnected => {
            if want(0) {
                let wt = cx.transpose2(ins[1])?;
                out.push((0, cx.node(Op::MatMul, &[g, wt])?));
            }
            if want(1) {
                let xt = cx.transpose2(ins[0])?;
                out.push((1, cx.node(Op::MatMul, &[xt, g])?));
            }
            if want(2) {
                let bd = cx.ty(ins[2]).dims;
                out.push((2, cx.reduce_broadcast(g, &bd)?));
            }
        }
        Op::BroadcastAdd => {
            out.push((0, g));
            if want(1) {
                let bd = cx.ty(ins[1]).dims;
                out.push((1, cx.reduce_broadcast(g, &bd)?));
            }
        }
        Op::Relu => {
            // Step mask 1[x > 0] built from saturating arithmetic; x = 0 maps to 0.
            let ty = cx.ty(ins[0]);
            let big = cx.splat(ty.clone(), f32::MAX)?;
            let zero = cx.splat(ty.clone(), 0.0)?;
            let one = cx.splat(ty, 1.0)?;
            let scaled = cx.node(Op::Mul, &[ins[0], big])?;
            let pos = cx.node(Op::Max, &[scaled, zero])?;
            let mask = cx.node(Op::Min, &[pos, one])?;
            out.push((0, cx.node(Op::Mul, &[g, mask])?));
        }
        Op::Tanh => {
            let y: Operand = id.into();
            let one = cx.splat(cx.ty(y), 1.0)?;
            let yy = cx.node(Op::Mul, &[y, y])?;
            let d = cx.node(Op::Sub, &[one, yy])?;
            out.push((0, cx.node(Op::Mul, &[g, d])?));
        }
        Op::Sigmoid => {
            let y: Operand = id.into();
            let one = cx.splat(cx.ty(y), 1.0)?;
            let c = cx.node(Op::Sub, &[one, y])?;
            let d = cx.node(Op::Mul, &[y, c])?;
            out.push((0, cx.node(Op::Mul, &[g, d])?));
        }
        Op::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            out.push((0, cx.node(Op::Transpose { perm: inv }, &[g])?));
        }
        Op::Reshape { .. } => {
            let dims = cx.ty(ins[0]).dims;
            out.push((0, cx.node(Op::Reshape { dims }, &[g])?));
        }
        Op::Regression => {
            out.push((0, g));
            if want(1) {
                out.push((1, cx.neg(g)?));
            }
        }
        _ => {
            return Err(Error::UnsupportedGradient(format!(
                "{id} ({}) has no gradient rule",
                node.kind()
            )))
        }
    }
    Ok(out.into_iter().filter(|&(i, _)| want(i)).collect())
}

/// Build a training function from `f`: the forward computation, gradient
/// nodes for every trainable, and an SGD update saved back to each trainable.
///
/// The result is a new function named `<name>_grad`; `f` is not modified.
pub fn differentiate(m: &mut Module, f: FuncId, cfg: &GradConfig) -> Result<Differentiated> {
    verify_or_err(m, f)?;
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Gradient(format!("invalid learning rate {}", cfg.learning_rate)));
    }
    if cfg.trainables.is_empty() {
        return Err(Error::Gradient("no trainable placeholders".into()));
    }
    let mut trainables: BTreeMap<StorageId, String> = BTreeMap::new();
    for name in &cfg.trainables {
        let sid = m
            .storage_by_name(name)
            .filter(|&s| m.storage(s).is_placeholder())
            .ok_or_else(|| Error::Gradient(format!("`{name}` is not a placeholder")))?;
        if !m.storage(sid).ty().is_float() {
            return Err(Error::Gradient(format!("trainable `{name}` is not float")));
        }
        trainables.insert(sid, name.clone());
    }

    let name = format!("{}_grad", m.function(f).name());
    let g = m.clone_function(f, &name)?;
    let result = build_gradients(m, g, cfg, &trainables);
    if result.is_err() {
        m.remove_last_function();
    }
    result
}

fn build_gradients(
    m: &mut Module,
    g: FuncId,
    cfg: &GradConfig,
    trainables: &BTreeMap<StorageId, String>,
) -> Result<Differentiated> {
    let order = topological_order(m.function(g))?;
    let func = m.function(g);

    // Forward pass: which values depend on a trainable.
    let mut active: BTreeSet<Operand> = trainables.keys().map(|&s| s.into()).collect();
    for &id in &order {
        let n = func.node(id);
        if n.ty.is_some() && n.inputs.iter().any(|i| active.contains(i)) {
            active.insert(id.into());
        }
    }
    // Backward pass: which active values reach a loss.
    let losses: Vec<NodeId> = order
        .iter()
        .copied()
        .filter(|&id| func.node(id).kind() == NodeKind::Regression && active.contains(&id.into()))
        .collect();
    if losses.is_empty() {
        return Err(Error::Gradient("no Regression loss depends on a trainable".into()));
    }
    let mut needed: BTreeSet<Operand> = losses.iter().map(|&l| l.into()).collect();
    for &id in order.iter().rev() {
        if needed.contains(&id.into()) {
            for &i in &func.node(id).inputs {
                if active.contains(&i) {
                    needed.insert(i);
                }
            }
        }
    }
    for (&sid, name) in trainables {
        if !needed.contains(&sid.into()) {
            return Err(Error::Gradient(format!("trainable `{name}` does not reach a Regression loss")));
        }
        if func.saves().iter().any(|&s| func.node(s).save_target() == Some(sid)) {
            return Err(Error::Gradient(format!("trainable `{name}` is already saved")));
        }
    }
    for &id in &order {
        let n = func.node(id);
        if needed.contains(&id.into()) && n.predicate.is_some() {
            return Err(Error::UnsupportedGradient(format!("{id} ({}) is predicated", n.kind())));
        }
    }

    // Forward consumers of a loss see its prediction.
    for &l in &losses {
        let pred = m.function(g).node(l).inputs[0];
        m.replace_all_uses_with(g, l, pred)?;
    }
    m.function_mut(g).differentiated = true;

    let mut cx = Ctx { m, f: g };
    let mut adj: BTreeMap<Operand, Vec<Operand>> = BTreeMap::new();
    for &l in &losses {
        adj.entry(l.into()).or_default().push(l.into());
    }
    for &id in order.iter().rev() {
        let key: Operand = id.into();
        if !needed.contains(&key) {
            continue;
        }
        let grad = match adj.remove(&key) {
            Some(parts) => sum(&mut cx, &parts)?,
            None => continue,
        };
        let inputs = cx.m.function(g).node(id).inputs.clone();
        let wanted: Vec<bool> = inputs.iter().map(|i| needed.contains(i)).collect();
        for (pos, contrib) in rule(&mut cx, id, grad, &wanted)? {
            adj.entry(inputs[pos]).or_default().push(contrib);
        }
    }

    let mut grads = BTreeMap::new();
    let mut updates = BTreeMap::new();
    for (&sid, name) in trainables {
        let parts = adj.remove(&sid.into()).unwrap_or_default();
        let grad = sum(&mut cx, &parts)?;
        let upd = cx.node(Op::SGD { learning_rate: cfg.learning_rate }, &[sid.into(), grad])?;
        cx.m.add_node_typed(g, Op::Save, vec![upd, sid.into()], None)?;
        grads.insert(name.clone(), grad);
        updates.insert(name.clone(), upd);
    }
    verify_or_err(cx.m, g)?;
    Ok(Differentiated { func: g, grads, updates })
}

fn sum(cx: &mut Ctx, parts: &[Operand]) -> Result<Operand> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Gradient("empty gradient".into()))?;
    let mut acc = first;
    for &p in rest {
        acc = cx.node(Op::Add, &[acc, p])?;
    }
    Ok(acc)
}

/// `½ Σ (pred − expected)²` over every Regression node of `f`.
fn regression_loss(m: &Module, f: FuncId, ev: &crate::eval::Evaluation<f64>, bound: &BTreeMap<String, Value<f64>>) -> Result<f64> {
    let func = m.function(f);
    let get = |o: Operand| -> Result<Vec<f64>> {
        let v = match o {
            Operand::Node(n) => ev.values.get(&n).cloned(),
            Operand::Storage(s) => {
                let st = m.storage(s);
                match st.constant() {
                    Some(t) => Some(Value::from_tensor(t)),
                    None => bound.get(st.name()).cloned(),
                }
            }
        };
        let v = v.ok_or_else(|| Error::Gradient(format!("no value for {}", m.operand_name(o))))?;
        match v.data {
            Data::Float(x) => Ok(x),
            _ => Err(Error::Gradient("regression operands must be float".into())),
        }
    };
    let mut loss = 0.0;
    for (_, n) in func.nodes() {
        if n.kind() == NodeKind::Regression {
            let p = get(n.inputs[0])?;
            let e = get(n.inputs[1])?;
            loss += p.iter().zip(&e).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(loss)
}

/// Step used by [`gradient_check`] for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Compare symbolic gradients with central finite differences of the
/// regression loss, evaluated in `f64`. Returns the largest relative error
/// `|a − n| / max(|a|, |n|, 1e-6)` over every trainable element.
pub fn gradient_check(m: &Module, f: FuncId, cfg: &GradConfig, bindings: &Bindings) -> Result<f64> {
    for (_, st) in m.placeholders() {
        let read = m.function(f).nodes().any(|(_, n)| n.reads().any(|o| o.storage() == m.storage_by_name(st.name())));
        if read && !bindings.contains_key(st.name()) {
            return Err(Error::Binding(format!("placeholder `{}` is not bound", st.name())));
        }
    }
    let mut work = m.clone();
    let d = differentiate(&mut work, f, cfg)?;
    let bound: BTreeMap<String, Value<f64>> =
        bindings.iter().map(|(k, t)| (k.clone(), Value::from_tensor(t))).collect();
    let ev = evaluate_values::<f64>(&work, d.func, &bound)?;

    let mut worst = 0.0f64;
    for (name, grad) in &d.grads {
        let analytic = match grad {
            Operand::Node(n) => ev.values[n].floats()?.to_vec(),
            Operand::Storage(_) => unreachable!("gradients are nodes"),
        };
        let base = bound
            .get(name)
            .ok_or_else(|| Error::Binding(format!("trainable `{name}` is not bound")))?
            .clone();
        for (i, &a) in analytic.iter().enumerate() {
            let at = |delta: f64| -> Result<f64> {
                let mut b = bound.clone();
                let mut v = base.clone();
                if let Data::Float(x) = &mut v.data {
                    x[i] += delta;
                }
                b.insert(name.clone(), v);
                let e = evaluate_values::<f64>(m, f, &b)?;
                regression_loss(m, f, &e, &b)
            };
            let numeric = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use crate::graph::{dump, DumpFormat};
    use crate::tensor::Tensor;

    fn scalar_regression() -> (Module, FuncId) {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let a = m.create_trainable("A", TensorType::float(&[4])).unwrap();
        let t = m.create_placeholder("T", TensorType::float(&[4])).unwrap();
        let o = m.create_placeholder("out", TensorType::float(&[4])).unwrap();
        let mut b = m.builder(f);
        let r = b.regression(a.into(), t.into());
        b.save(r, o);
        (m, f)
    }

    fn bind(pairs: &[(&str, &[usize], Vec<f32>)]) -> Bindings {
        pairs.iter().map(|(n, d, v)| (n.to_string(), Tensor::from_f32(d, v.clone()).unwrap())).collect()
    }

    #[test]
    fn update_moves_toward_target() {
        let (mut m, f) = scalar_regression();
        let d = differentiate(&mut m, f, &GradConfig::new(0.5, ["A"])).unwrap();
        assert!(m.function(d.func).differentiated);
        assert!(!m.function(f).differentiated);
        let b = bind(&[("A", &[4], vec![1.0, -2.0, 3.0, 0.0]), ("T", &[4], vec![0.0, 0.0, 1.0, 5.0])]);
        let ev = evaluate::<f32>(&m, d.func, &b).unwrap();
        let a2 = ev.output_tensors()["A"].as_f32().unwrap().to_vec();
        for ((x, x2), t) in [1.0f32, -2.0, 3.0, 0.0].iter().zip(&a2).zip([0.0f32, 0.0, 1.0, 5.0]) {
            assert!((x2 - t).abs() < (x - t).abs());
        }
        // Inference output of the training function is still the prediction.
        assert_eq!(ev.output_tensors()["out"].as_f32().unwrap(), &[1.0, -2.0, 3.0, 0.0]);
    }

    #[test]
    fn original_function_untouched() {
        let (mut m, f) = scalar_regression();
        let before = dump(&m, f, DumpFormat::Text).unwrap();
        differentiate(&mut m, f, &GradConfig::new(0.1, ["A"])).unwrap();
        assert_eq!(before, dump(&m, f, DumpFormat::Text).unwrap());
    }

    #[test]
    fn constant_only_function_is_rejected() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let c = m.create_constant("c", Tensor::from_f32(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let t = m.create_placeholder("t", TensorType::float(&[2])).unwrap();
        let w = m.create_trainable("w", TensorType::float(&[2])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[2])).unwrap();
        let mut b = m.builder(f);
        let r = b.regression(c.into(), t.into());
        b.save(r, o);
        let _ = w;
        let n = m.functions().count();
        assert!(matches!(differentiate(&mut m, f, &GradConfig::new(0.1, ["w"])), Err(Error::Gradient(_))));
        assert_eq!(m.functions().count(), n);
    }

    #[test]
    fn missing_rule_names_the_node() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let w = m.create_trainable("w", TensorType::float(&[1, 4, 4, 1])).unwrap();
        let t = m.create_placeholder("t", TensorType::float(&[1, 2, 2, 1])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[1, 2, 2, 1])).unwrap();
        let mut b = m.builder(f);
        let p = b.max_pool(w.into(), 2, 2, 0);
        let r = b.regression(p, t.into());
        b.save(r, o);
        match differentiate(&mut m, f, &GradConfig::new(0.1, ["w"])) {
            Err(Error::UnsupportedGradient(msg)) => assert!(msg.contains("MaxPool"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_gradient_is_exact() {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[3, 2])).unwrap();
        let w = m.create_trainable("w", TensorType::float(&[2, 1])).unwrap();
        let y = m.create_placeholder("y", TensorType::float(&[3, 1])).unwrap();
        let o = m.create_placeholder("o", TensorType::float(&[3, 1])).unwrap();
        let mut b = m.builder(f);
        let p = b.matmul(x.into(), w.into());
        let r = b.regression(p, y.into());
        b.save(r, o);
        let bs = bind(&[
            ("x", &[3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]),
            ("w", &[2, 1], vec![0.3, -0.7]),
            ("y", &[3, 1], vec![1.0, 0.0, -1.0]),
        ]);
        let err = gradient_check(&m, f, &GradConfig::new(0.1, ["w"]), &bs).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn unbound_placeholder_in_check() {
        let (m, f) = scalar_regression();
        let bs = bind(&[("A", &[4], vec![0.0; 4])]);
        assert!(matches!(gradient_check(&m, f, &GradConfig::new(0.1, ["A"]), &bs), Err(Error::Binding(_))));
    }
}
