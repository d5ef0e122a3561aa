//! Generators and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use graphlower::graph::{Function, Storage};
use graphlower::interp::compile_with;
use graphlower::lowir::{allocate, parse_ir, IRFunction, Interval};
use graphlower::{Bindings, FuncId, Module, NodeId, Op, Operand, Tensor, TensorType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut TestRng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut TestRng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_f32(dims, rand_vec(rng, n, lo, hi)).unwrap()
}

/// Largest elementwise `|a - b| / max(|b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(floor)).fold(0.0, f64::max)
}

/// `max |a - b| / max |b|` over a whole tensor.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Equality of raw bytes, so NaN payloads and signed zeros count.
pub fn same_bits(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.ty() == tb.ty() && ta.to_le_bytes() == tb.to_le_bytes())
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

/// Placeholders read by `f`, bound to uniform values in [-1, 1).
pub fn random_bindings(m: &Module, f: FuncId, rng: &mut TestRng) -> Bindings {
    let mut out = Bindings::new();
    for (_, n) in m.function(f).nodes() {
        for op in n.reads() {
            if let Some(Storage::Placeholder { name, ty, .. }) = op.storage().map(|s| m.storage(s)) {
                if !out.contains_key(name) {
                    out.insert(name.clone(), rand_tensor(rng, &ty.dims, -1.0, 1.0));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fixed models.

pub struct CnnParams {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub fw: Vec<f32>,
    pub fb: Vec<f32>,
}

/// x[1,8,8,3] -> conv 3x3 (4) -> relu -> conv 3x3 (4) -> relu -> maxpool 2
/// -> reshape [1,64] -> fc (10) -> softmax -> `probs`.
pub fn cnn(seed: u64) -> (Module, FuncId, CnnParams) {
    let mut r = rng(seed);
    let p = CnnParams {
        w1: rand_vec(&mut r, 4 * 3 * 3 * 3, -0.5, 0.5),
        b1: rand_vec(&mut r, 4, -0.1, 0.1),
        w2: rand_vec(&mut r, 4 * 3 * 3 * 4, -0.5, 0.5),
        b2: rand_vec(&mut r, 4, -0.1, 0.1),
        fw: rand_vec(&mut r, 64 * 10, -0.5, 0.5),
        fb: rand_vec(&mut r, 10, -0.1, 0.1),
    };
    let mut m = Module::new();
    let f = m.create_function("cnn").unwrap();
    let x = m.create_placeholder("x", TensorType::float(&[1, 8, 8, 3])).unwrap();
    let out = m.create_placeholder("probs", TensorType::float(&[1, 10])).unwrap();
    let c = |m: &mut Module, name: &str, dims: &[usize], v: &[f32]| -> Operand {
        m.create_constant(name, Tensor::from_f32(dims, v.to_vec()).unwrap()).unwrap().into()
    };
    let w1 = c(&mut m, "w1", &[4, 3, 3, 3], &p.w1);
    let b1 = c(&mut m, "b1", &[4], &p.b1);
    let w2 = c(&mut m, "w2", &[4, 3, 3, 4], &p.w2);
    let b2 = c(&mut m, "b2", &[4], &p.b2);
    let fw = c(&mut m, "fw", &[64, 10], &p.fw);
    let fb = c(&mut m, "fb", &[10], &p.fb);
    let mut b = m.builder(f);
    let h = b.conv(x.into(), w1, b1, 3, 1, 1);
    let h = b.relu(h);
    let h = b.conv(h, w2, b2, 3, 1, 1);
    let h = b.relu(h);
    let h = b.max_pool(h, 2, 2, 0);
    let h = b.reshape(h, &[1, 64]);
    let h = b.fully_connected(h, fw, fb);
    let y = b.softmax(h);
    b.save(y, out);
    (m, f, p)
}

/// Straight-line f64 forward pass of [`cnn`], written from the layer
/// definitions without touching the library.
pub fn cnn_reference(p: &CnnParams, x: &[f32]) -> Vec<f64> {
    fn conv(x: &[f64], h: usize, w: usize, c: usize, wt: &[f32], bias: &[f32], o: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w * o];
        for y in 0..h {
            for xx in 0..w {
                for oc in 0..o {
                    let mut acc = bias[oc] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ic in 0..c {
                                let xv = x[(iy as usize * w + ix as usize) * c + ic];
                                acc += xv * wt[((oc * 3 + ky) * 3 + kx) * c + ic] as f64;
                            }
                        }
                    }
                    out[(y * w + xx) * o + oc] = acc;
                }
            }
        }
        out
    }
    let relu = |v: Vec<f64>| v.into_iter().map(|z| z.max(0.0)).collect::<Vec<_>>();
    let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let h = relu(conv(&x, 8, 8, 3, &p.w1, &p.b1, 4));
    let h = relu(conv(&h, 8, 8, 4, &p.w2, &p.b2, 4));
    let mut pooled = vec![0.0; 4 * 4 * 4];
    for y in 0..4 {
        for xx in 0..4 {
            for c in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(h[((2 * y + dy) * 8 + 2 * xx + dx) * 4 + c]);
                    }
                }
                pooled[(y * 4 + xx) * 4 + c] = best;
            }
        }
    }
    let logits: Vec<f64> = (0..10)
        .map(|j| p.fb[j] as f64 + (0..64).map(|i| pooled[i] * p.fw[i * 10 + j] as f64).sum::<f64>())
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Classifier x[batch,16] -> fc 32 -> relu -> fc 10 -> softmax -> `probs`.
pub fn mlp_classifier(seed: u64, batch: usize) -> (Module, FuncId) {
    let mut r = rng(seed);
    let mut m = Module::new();
    let f = m.create_function("mlp").unwrap();
    let x = m.create_placeholder("x", TensorType::float(&[batch, 16])).unwrap();
    let out = m.create_placeholder("probs", TensorType::float(&[batch, 10])).unwrap();
    let w1 = m.create_constant("w1", rand_tensor(&mut r, &[16, 32], -0.5, 0.5)).unwrap();
    let b1 = m.create_constant("b1", rand_tensor(&mut r, &[32], -0.1, 0.1)).unwrap();
    let w2 = m.create_constant("w2", rand_tensor(&mut r, &[32, 10], -0.5, 0.5)).unwrap();
    let b2 = m.create_constant("b2", rand_tensor(&mut r, &[10], -0.1, 0.1)).unwrap();
    let mut b = m.builder(f);
    let h = b.fully_connected(x.into(), w1.into(), b1.into());
    let h = b.relu(h);
    let y = b.fully_connected(h, w2.into(), b2.into());
    let p = b.softmax(y);
    b.save(p, out);
    (m, f)
}

/// Regression network x[4,8] -> fc 16 -> relu -> fc 3 -> regression on `y`,
/// with all four parameters trainable.
pub fn mlp_regression() -> (Module, FuncId) {
    let mut m = Module::new();
    let f = m.create_function("mlp").unwrap();
    let x = m.create_placeholder("x", TensorType::float(&[4, 8])).unwrap();
    let y = m.create_placeholder("y", TensorType::float(&[4, 3])).unwrap();
    let w1 = m.create_trainable("w1", TensorType::float(&[8, 16])).unwrap();
    let b1 = m.create_trainable("b1", TensorType::float(&[16])).unwrap();
    let w2 = m.create_trainable("w2", TensorType::float(&[16, 3])).unwrap();
    let b2 = m.create_trainable("b2", TensorType::float(&[3])).unwrap();
    let out = m.create_placeholder("pred", TensorType::float(&[4, 3])).unwrap();
    let mut b = m.builder(f);
    let h = b.fully_connected(x.into(), w1.into(), b1.into());
    let h = b.relu(h);
    let p = b.fully_connected(h, w2.into(), b2.into());
    let r = b.regression(p, y.into());
    b.save(r, out);
    (m, f)
}

// ---------------------------------------------------------------------------
// Random graphs over the supported kinds.

fn ty_of(m: &Module, f: FuncId, o: Operand) -> TensorType {
    m.operand_type(f, o).unwrap().clone()
}

fn konst(m: &mut Module, rng: &mut TestRng, dims: &[usize], lo: f32, hi: f32) -> Operand {
    let t = rand_tensor(rng, dims, lo, hi);
    m.add_constant("k", t).into()
}

fn node(m: &mut Module, f: FuncId, op: Op, ins: Vec<Operand>) -> Operand {
    m.add_node(f, op, ins).unwrap().into()
}

/// A random well-typed graph with `steps` operator nodes plus one or two
/// Saves. `training_kinds` allows Regression and SGD nodes.
pub fn random_graph(rng: &mut TestRng, steps: usize, training_kinds: bool) -> (Module, FuncId) {
    let mut m = Module::new();
    let f = m.create_function("g").unwrap();
    let mut pool: Vec<Operand> = Vec::new();
    for i in 0..rng.gen_range(1..=2) {
        let dims = [rng.gen_range(1..=3), rng.gen_range(2..=5)];
        pool.push(m.create_placeholder(&format!("in{i}"), TensorType::float(&dims)).unwrap().into());
    }
    if rng.gen_bool(0.3) {
        pool.push(m.create_placeholder("img", TensorType::float(&[1, 4, 4, 2])).unwrap().into());
    }
    let mut targets = 0;
    for _ in 0..steps {
        let x = *pool.choose(rng).unwrap();
        let t = ty_of(&m, f, x);
        let d = t.dims.clone();
        let v = if d.len() == 4 {
            let (h, w, c) = (d[1], d[2], d[3]);
            match rng.gen_range(0..6) {
                0 | 1 => {
                    let k = if h >= 3 && w >= 3 && rng.gen_bool(0.5) { 3 } else { 1 };
                    let pad = if k == 3 && rng.gen_bool(0.5) { 1 } else { 0 };
                    let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
                    let oc = rng.gen_range(1..=3);
                    let wt = konst(&mut m, rng, &[oc, k, k, c], -0.5, 0.5);
                    let bias = konst(&mut m, rng, &[oc], -0.1, 0.1);
                    node(&mut m, f, Op::Convolution { kernel: k, stride, pad }, vec![x, wt, bias])
                }
                2 if h >= 2 && w >= 2 => {
                    let op = if rng.gen_bool(0.5) { Op::MaxPool { kernel: 2, stride: 2, pad: 0 } } else { Op::AvgPool { kernel: 2, stride: 2, pad: 0 } };
                    node(&mut m, f, op, vec![x])
                }
                3 => node(&mut m, f, Op::Relu, vec![x]),
                4 => {
                    let stats: Vec<Operand> = (0..4)
                        .map(|i| if i == 3 { konst(&mut m, rng, &[c], 0.5, 2.0) } else { konst(&mut m, rng, &[c], -1.0, 1.0) })
                        .collect();
                    node(&mut m, f, Op::BatchNormalization { epsilon: 1e-5 }, [vec![x], stats].concat())
                }
                _ => node(&mut m, f, Op::Reshape { dims: vec![h, w * c] }, vec![x]),
            }
        } else {
            let (r, c) = (d[0], d[1]);
            let same: Vec<Operand> = pool.iter().copied().filter(|&o| ty_of(&m, f, o).dims == d).collect();
            let other = |m: &mut Module, rng: &mut TestRng| -> Operand {
                match rng.gen_range(0..3) {
                    0 => *same.choose(rng).unwrap(),
                    1 => konst(m, rng, &d, -1.0, 1.0),
                    _ => {
                        let op = Op::Splat { value: rng.gen_range(-2.0..2.0) };
                        m.add_node_typed(f, op, vec![], Some(TensorType::float(&d))).unwrap().into()
                    }
                }
            };
            let kinds = if training_kinds { 17 } else { 15 };
            match rng.gen_range(0..kinds) {
                0 | 1 => {
                    let n = rng.gen_range(2..=5);
                    let wt = konst(&mut m, rng, &[c, n], -0.6, 0.6);
                    let bias = konst(&mut m, rng, &[n], -0.2, 0.2);
                    node(&mut m, f, Op::FullyConnected, vec![x, wt, bias])
                }
                2 => {
                    let n = rng.gen_range(2..=5);
                    let wt = konst(&mut m, rng, &[c, n], -0.6, 0.6);
                    node(&mut m, f, Op::MatMul, vec![x, wt])
                }
                3 => {
                    let bias = konst(&mut m, rng, &[c], -1.0, 1.0);
                    node(&mut m, f, Op::BroadcastAdd, vec![x, bias])
                }
                4 | 5 => {
                    let y = if rng.gen_bool(0.5) { other(&mut m, rng) } else { *same.choose(rng).unwrap() };
                    let op = [Op::Add, Op::Sub, Op::Mul, Op::Max, Op::Min].choose(rng).unwrap().clone();
                    node(&mut m, f, op, vec![x, y])
                }
                6 => {
                    let den = konst(&mut m, rng, &d, 0.5, 2.0);
                    node(&mut m, f, Op::Div, vec![x, den])
                }
                7 | 8 => {
                    let op = [Op::Relu, Op::Tanh, Op::Sigmoid, Op::SoftMax].choose(rng).unwrap().clone();
                    node(&mut m, f, op, vec![x])
                }
                9 => node(&mut m, f, Op::Transpose { perm: vec![1, 0] }, vec![x]),
                10 => node(&mut m, f, Op::Reshape { dims: vec![c, r] }, vec![x]),
                11 => {
                    let y = other(&mut m, rng);
                    node(&mut m, f, Op::Concat { axis: rng.gen_range(0..2) }, vec![x, y])
                }
                12 => {
                    let stats: Vec<Operand> = (0..4)
                        .map(|i| if i == 3 { konst(&mut m, rng, &[c], 0.5, 2.0) } else { konst(&mut m, rng, &[c], -1.0, 1.0) })
                        .collect();
                    node(&mut m, f, Op::BatchNormalization { epsilon: 1e-5 }, [vec![x], stats].concat())
                }
                13 => {
                    let y = other(&mut m, rng);
                    node(&mut m, f, Op::Add, vec![x, y])
                }
                14 => node(&mut m, f, Op::Relu, vec![x]),
                15 => {
                    let tgt = m.create_placeholder(&format!("target{targets}"), t.clone()).unwrap();
                    targets += 1;
                    node(&mut m, f, Op::Regression, vec![x, tgt.into()])
                }
                _ => {
                    let g = other(&mut m, rng);
                    node(&mut m, f, Op::SGD { learning_rate: rng.gen_range(0.0..0.5) }, vec![x, g])
                }
            }
        };
        pool.push(v);
    }
    let last = *pool.last().unwrap();
    let mut saved = vec![last];
    if pool.len() > 2 && rng.gen_bool(0.5) {
        let o = pool[rng.gen_range(0..pool.len() - 1)];
        if o.node().is_some() {
            saved.push(o);
        }
    }
    for (i, o) in saved.into_iter().enumerate() {
        let ty = ty_of(&m, f, o);
        let dst = m.create_placeholder(&format!("out{i}"), ty).unwrap();
        m.add_node_typed(f, Op::Save, vec![o, dst.into()], None).unwrap();
    }
    (m, f)
}

// ---------------------------------------------------------------------------
// Scheduling.

/// A random DAG of at most `max_nodes` nodes with results of varied sizes.
pub fn random_dag(rng: &mut TestRng, max_nodes: usize) -> (Module, FuncId) {
    let mut m = Module::new();
    let f = m.create_function("dag").unwrap();
    let n = rng.gen_range(2..=max_nodes);
    let mut vals: Vec<Operand> = Vec::new();
    let mut count = 0;
    while count < n {
        let width = [1usize, 2, 4, 8, 16, 32][rng.gen_range(0..6)];
        let v = if vals.is_empty() || rng.gen_bool(0.2) {
            m.add_node_typed(f, Op::Splat { value: 1.0 }, vec![], Some(TensorType::float(&[1, width]))).unwrap().into()
        } else {
            let a = *vals.choose(rng).unwrap();
            let ta = ty_of(&m, f, a);
            match rng.gen_range(0..4) {
                0 => node(&mut m, f, Op::Tanh, vec![a]),
                1 => {
                    let w = konst(&mut m, rng, &[ta.dims[1], width], -1.0, 1.0);
                    node(&mut m, f, Op::MatMul, vec![a, w])
                }
                2 => {
                    let b = vals.iter().copied().filter(|&o| ty_of(&m, f, o) == ta).collect::<Vec<_>>();
                    let b = *b.choose(rng).unwrap();
                    node(&mut m, f, Op::Add, vec![a, b])
                }
                _ => {
                    let b = *vals.choose(rng).unwrap();
                    node(&mut m, f, Op::Concat { axis: 1 }, vec![a, b])
                }
            }
        };
        vals.push(v);
        count += 1;
    }
    (m, f)
}

/// Peak of `order` under the cost model: a result is live from its node
/// until its last reader has run; unread results die at once.
pub fn order_peak(f: &Function, order: &[NodeId]) -> usize {
    let size = |id: NodeId| f.node(id).ty.as_ref().map_or(0, |t| t.size_bytes());
    let readers = readers_of(f);
    let mut done = BTreeSet::new();
    let mut peak = 0;
    for &id in order {
        let live: usize = done
            .iter()
            .filter(|v| readers[*v].iter().any(|r| !done.contains(r)))
            .map(|&v| size(v))
            .sum();
        peak = peak.max(live + size(id));
        done.insert(id);
    }
    peak
}

fn readers_of(f: &Function) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
    let mut r: BTreeMap<NodeId, BTreeSet<NodeId>> = f.nodes().map(|(id, _)| (id, BTreeSet::new())).collect();
    for (id, n) in f.nodes() {
        for o in n.operands() {
            if let Some(src) = o.node() {
                r.get_mut(&src).unwrap().insert(id);
            }
        }
    }
    r
}

/// Minimum peak over every topological order, by dynamic programming over
/// the set of nodes already run.
pub fn exhaustive_peak(f: &Function) -> usize {
    let ids: Vec<NodeId> = f.node_ids();
    let n = ids.len();
    assert!(n <= 16);
    let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let size: Vec<usize> = ids.iter().map(|&id| f.node(id).ty.as_ref().map_or(0, |t| t.size_bytes())).collect();
    let mut deps = vec![0u32; n];
    let mut users = vec![0u32; n];
    for (i, &id) in ids.iter().enumerate() {
        for o in f.node(id).operands() {
            if let Some(src) = o.node() {
                deps[i] |= 1 << index[&src];
                users[index[&src]] |= 1 << i;
            }
        }
    }
    let full = (1u32 << n) - 1;
    let mut best = vec![usize::MAX; 1 << n];
    best[full as usize] = 0;
    for s in (0..full).rev() {
        let live: usize = (0..n).filter(|&v| s >> v & 1 == 1 && users[v] & !s != 0).map(|v| size[v]).sum();
        let mut b = usize::MAX;
        for v in 0..n {
            if s >> v & 1 == 0 && deps[v] & !s == 0 {
                let next = best[(s | 1 << v) as usize];
                if next != usize::MAX {
                    b = b.min((live + size[v]).max(next));
                }
            }
        }
        best[s as usize] = b;
    }
    best[0]
}

// ---------------------------------------------------------------------------
// Allocation.

pub fn random_intervals(rng: &mut TestRng, max: usize) -> Vec<Interval> {
    let n = rng.gen_range(1..=max);
    (0..n)
        .map(|_| {
            let start = rng.gen_range(0..12);
            Interval { start, end: start + rng.gen_range(0..6), size: rng.gen_range(1..=256) }
        })
        .collect()
}

/// No two buffers live at the same step share a byte.
pub fn plan_is_valid(iv: &[Interval], offsets: &[usize], arena: usize) -> bool {
    for i in 0..iv.len() {
        if offsets[i] + iv[i].size > arena {
            return false;
        }
        for j in i + 1..iv.len() {
            let time = iv[i].start <= iv[j].end && iv[j].start <= iv[i].end;
            let space = offsets[i] < offsets[j] + iv[j].size && offsets[j] < offsets[i] + iv[i].size;
            if time && space {
                return false;
            }
        }
    }
    true
}

/// Optimal arena with byte alignment. Some optimal packing is reproduced by
/// placing buffers in order of their optimal offsets, each at the lowest
/// free offset, so searching placement orders finds it.
pub fn brute_force_arena(iv: &[Interval]) -> usize {
    fn go(iv: &[Interval], placed: &mut Vec<(usize, usize)>, used: u32, top: usize, best: &mut usize) {
        if top >= *best {
            return;
        }
        if placed.len() == iv.len() {
            *best = top;
            return;
        }
        for i in 0..iv.len() {
            if used >> i & 1 == 1 {
                continue;
            }
            let mut blockers: Vec<(usize, usize)> = placed
                .iter()
                .filter(|&&(j, _)| iv[j].start <= iv[i].end && iv[i].start <= iv[j].end)
                .map(|&(j, off)| (off, off + iv[j].size))
                .collect();
            blockers.sort();
            let mut at = 0;
            for (s, e) in blockers {
                if at + iv[i].size <= s {
                    break;
                }
                at = at.max(e);
            }
            placed.push((i, at));
            go(iv, placed, used | 1 << i, top.max(at + iv[i].size), best);
            placed.pop();
        }
    }
    let mut best = usize::MAX;
    go(iv, &mut Vec::new(), 0, 0, &mut best);
    best
}

// ---------------------------------------------------------------------------
// Low-level programs.

pub struct Program {
    pub ir: IRFunction,
    pub constants: BTreeMap<String, Tensor>,
    pub inputs: Bindings,
}

pub fn run_program(p: &Program, ir: &IRFunction, fuse: bool) -> BTreeMap<String, Tensor> {
    let cf = compile_with(ir.clone(), allocate(ir), &p.constants, fuse).unwrap();
    let wanted = cf.input_types();
    let inputs: Bindings = p.inputs.iter().filter(|(k, _)| wanted.contains_key(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
    cf.run(&inputs).unwrap()
}

const UNARY: [&str; 3] = ["relu", "tanh", "sigmoid"];
const BINARY: [&str; 5] = ["add", "sub", "mul", "max", "min"];

/// A random straight-line program over float vectors with copies,
/// overwrites, in-place updates and early deallocation.
pub fn random_program(rng: &mut TestRng) -> Program {
    let n = rng.gen_range(1..=12);
    let ty = TensorType::float(&[n]);
    let (n_in, n_const, n_out) = (rng.gen_range(1..=3), rng.gen_range(0..=2), rng.gen_range(1..=3));
    let mut text = String::from("declare {\n");
    let mut constants = BTreeMap::new();
    let mut inputs = Bindings::new();
    // Values that may be read right now.
    let mut readable: Vec<String> = Vec::new();
    for i in 0..n_in {
        writeln!(text, "  %x{i} = mutable {ty}").unwrap();
        inputs.insert(format!("x{i}"), rand_tensor(rng, &[n], -2.0, 2.0));
        readable.push(format!("x{i}"));
    }
    for i in 0..n_const {
        writeln!(text, "  %c{i} = const {ty}").unwrap();
        constants.insert(format!("c{i}"), rand_tensor(rng, &[n], -2.0, 2.0));
        readable.push(format!("c{i}"));
    }
    for i in 0..n_out {
        writeln!(text, "  %y{i} = mutable {ty}").unwrap();
    }
    text.push_str("}\nprogram {\n");
    let mut fresh: Vec<String> = Vec::new();
    let mut live_acts: Vec<String> = Vec::new();
    let mut next = 0;
    let mut written_outs = BTreeSet::new();
    let emit = |text: &mut String, kind: &str, dst: &str, ins: &[String], keep: bool| {
        let q = if ins.iter().any(|s| s == dst) { "@inout" } else { "@out" };
        let mut line = format!("  {kind} {q} %{dst}");
        for s in ins {
            write!(line, ", @in %{s}").unwrap();
        }
        if keep {
            line.push_str(" keepalive");
        }
        writeln!(text, "{line}").unwrap();
    };
    for _ in 0..rng.gen_range(3..=20) {
        match rng.gen_range(0..10) {
            0 | 1 => {
                let a = format!("t{next}");
                next += 1;
                writeln!(text, "  %{a} = alloc {ty}").unwrap();
                fresh.push(a.clone());
                live_acts.push(a);
            }
            2 if !live_acts.is_empty() => {
                let a = live_acts.remove(rng.gen_range(0..live_acts.len()));
                writeln!(text, "  dealloc %{a}").unwrap();
                readable.retain(|r| *r != a);
                fresh.retain(|r| *r != a);
            }
            _ => {
                // Destination: a fresh act, a written act, or an output.
                let dst = match rng.gen_range(0..4) {
                    0 | 1 if !fresh.is_empty() => fresh.remove(rng.gen_range(0..fresh.len())),
                    2 => {
                        let written: Vec<&String> = readable.iter().filter(|r| r.starts_with('t')).collect();
                        match written.choose(rng) {
                            Some(s) => (*s).clone(),
                            None => continue,
                        }
                    }
                    _ => format!("y{}", rng.gen_range(0..n_out)),
                };
                let pick = |rng: &mut TestRng| readable.choose(rng).unwrap().clone();
                let keep = rng.gen_bool(0.1);
                match rng.gen_range(0..3) {
                    0 => {
                        let src = pick(rng);
                        if src == dst {
                            continue;
                        }
                        emit(&mut text, "copy", &dst, &[src], keep);
                    }
                    1 => emit(&mut text, UNARY.choose(rng).unwrap(), &dst, &[pick(rng)], keep),
                    _ => emit(&mut text, BINARY.choose(rng).unwrap(), &dst, &[pick(rng), pick(rng)], keep),
                }
                if dst.starts_with('y') {
                    written_outs.insert(dst.clone());
                }
                if !readable.contains(&dst) {
                    readable.push(dst);
                }
            }
        }
    }
    for i in 0..n_out {
        let y = format!("y{i}");
        if !written_outs.contains(&y) {
            let src = readable.iter().find(|r| **r != y).unwrap().clone();
            emit(&mut text, "copy", &y, &[src], false);
        }
    }
    for a in live_acts {
        writeln!(text, "  dealloc %{a}").unwrap();
    }
    text.push_str("}\n");
    let ir = parse_ir(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
    Program { ir, constants, inputs }
}

/// A chain of 2..=6 data-parallel instructions. Float chains mix unary,
/// binary and splat steps; some chains pass through int8 via quantize,
/// rescale and dequantize. Intermediates alternate between temporaries and
/// in-place updates of the output.
pub fn random_chain(rng: &mut TestRng) -> Program {
    let n = rng.gen_range(1..=64);
    let f = TensorType::float(&[n]);
    let len = rng.gen_range(2..=6);
    let mut constants = BTreeMap::new();
    let mut inputs = Bindings::new();
    inputs.insert("x".into(), rand_tensor(rng, &[n], -3.0, 3.0));
    inputs.insert("z".into(), rand_tensor(rng, &[n], -3.0, 3.0));
    constants.insert("c".into(), rand_tensor(rng, &[n], 0.5, 2.0));
    let q1 = TensorType::int8q(&[n], rng.gen_range(0.01..0.1), rng.gen_range(-20..20));
    let q2 = TensorType::int8q(&[n], rng.gen_range(0.01..0.1), rng.gen_range(-20..20));
    let mut decl = format!("declare {{\n  %x = mutable {f}\n  %z = mutable {f}\n  %c = const {f}\n  %y = mutable {f}\n}}\n");
    let mut body = String::new();
    let mut cur = ("x".to_string(), f.clone());
    let mut temps = Vec::new();
    for step in 0..len {
        let last = step + 1 == len;
        let float = cur.1.is_float();
        let (kind, out_ty, extra): (String, TensorType, Vec<String>) = if float {
            match rng.gen_range(0..8) {
                0..=2 => (UNARY.choose(rng).unwrap().to_string(), f.clone(), vec![]),
                3..=5 => {
                    let other = ["z", "c", "x"].choose(rng).unwrap().to_string();
                    let k = [BINARY.as_slice(), &["div"]].concat();
                    let k = k.choose(rng).unwrap().to_string();
                    let other = if k == "div" { "c".to_string() } else { other };
                    (k, f.clone(), vec![other])
                }
                6 if !last => ("quantize".into(), q1.clone(), vec![]),
                _ => ("splat".into(), f.clone(), vec![]),
            }
        } else if last || rng.gen_bool(0.5) {
            ("dequantize".into(), f.clone(), vec![])
        } else {
            let to = if cur.1 == q1 { q2.clone() } else { q1.clone() };
            ("rescalequantized".into(), to, vec![])
        };
        let dst = if last || (out_ty.is_float() && rng.gen_bool(0.3)) {
            "y".to_string()
        } else {
            let t = format!("t{step}");
            writeln!(body, "  %{t} = alloc {out_ty}").unwrap();
            temps.push(t.clone());
            t
        };
        let mut ins = vec![];
        if kind != "splat" {
            ins.push(cur.0.clone());
        }
        ins.extend(extra);
        let q = if ins.contains(&dst) { "@inout" } else { "@out" };
        let mut line = format!("  {kind} {q} %{dst}");
        for s in &ins {
            write!(line, ", @in %{s}").unwrap();
        }
        if kind == "splat" {
            write!(line, " {{value={:?}}}", rng.gen_range(-2.0f32..2.0)).unwrap();
        }
        writeln!(body, "{line}").unwrap();
        cur = (dst, out_ty);
    }
    for t in temps {
        writeln!(body, "  dealloc %{t}").unwrap();
    }
    decl.push_str("program {\n");
    decl.push_str(&body);
    decl.push_str("}\n");
    let ir = parse_ir(&decl).unwrap_or_else(|e| panic!("{e}\n{decl}"));
    Program { ir, constants, inputs }
}
