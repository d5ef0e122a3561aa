//! Arena-based reference execution of an instruction program.
//!
//! Every buffer lives at its planned offset in one byte arena per run.
//! Non-elementwise instructions decode their operands, call the same
//! [`eval_op`] the graph evaluator uses and encode the result back, so the
//! interpreter and the evaluator agree bit for bit. Runs of consecutive
//! elementwise instructions over same-shaped buffers are stacked into one
//! traversal that applies a small per-element program built from the same
//! scalar functions.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::eval::{eval_op, predicate_enabled, Bindings, Data, Value};
use crate::graph::Op;
use crate::kernels::{rescale_value, BinaryOp, UnaryOp};
use crate::lowir::{allocate, IRFunction, Instr, InstrOp, MemoryPlan, Mutability, ValueRef};
use crate::tensor::{ElemKind, QuantParams, Tensor, TensorType};

/// Byte written into the result of a skipped instruction in debug builds.
pub const SENTINEL: u8 = 0xA5;

#[derive(Clone, Debug, PartialEq)]
enum Micro {
    Copy,
    Binary(BinaryOp),
    Unary(UnaryOp),
    Splat(f32),
    Quantize,
    Dequantize,
    Rescale,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Slot {
    offset: usize,
    kind: ElemKind,
    params: Option<QuantParams>,
}

#[derive(Clone, Debug, PartialEq)]
struct MicroOp {
    op: Micro,
    out: Slot,
    ins: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq)]
enum Item {
    Single(usize),
    Fused { range: Range<usize>, len: usize, ops: Vec<MicroOp> },
}

/// A program bound to a memory plan, ready to run.
#[derive(Clone, Debug)]
pub struct CompiledFunction {
    pub ir: IRFunction,
    pub plan: MemoryPlan,
    /// Bytes of the constant region, preloaded into every arena.
    pub constant_image: Vec<u8>,
    code: Vec<Instr>,
    items: Vec<Item>,
    /// Mutable weights read before anything writes them.
    needs_binding: BTreeSet<u32>,
}

fn micro_of(instr: &Instr) -> Option<Micro> {
    Some(match &instr.op {
        InstrOp::Copy => Micro::Copy,
        InstrOp::Op(op) => match op {
            Op::Add => Micro::Binary(BinaryOp::Add),
            Op::Sub => Micro::Binary(BinaryOp::Sub),
            Op::Mul => Micro::Binary(BinaryOp::Mul),
            Op::Div => Micro::Binary(BinaryOp::Div),
            Op::Max => Micro::Binary(BinaryOp::Max),
            Op::Min => Micro::Binary(BinaryOp::Min),
            Op::Relu => Micro::Unary(UnaryOp::Relu),
            Op::Tanh => Micro::Unary(UnaryOp::Tanh),
            Op::Sigmoid => Micro::Unary(UnaryOp::Sigmoid),
            Op::Splat { value } => Micro::Splat(*value),
            Op::Quantize => Micro::Quantize,
            Op::Dequantize => Micro::Dequantize,
            Op::RescaleQuantized => Micro::Rescale,
            _ => return None,
        },
    })
}

/// Compile with operator stacking enabled.
pub fn compile(ir: IRFunction, plan: MemoryPlan, constants: &BTreeMap<String, Tensor>) -> Result<CompiledFunction> {
    compile_with(ir, plan, constants, true)
}

/// Plan memory for `ir` and compile it.
pub fn compile_planned(ir: IRFunction, constants: &BTreeMap<String, Tensor>, fuse: bool) -> Result<CompiledFunction> {
    let plan = allocate(&ir);
    compile_with(ir, plan, constants, fuse)
}

/// Compile, optionally stacking elementwise runs.
pub fn compile_with(
    ir: IRFunction,
    plan: MemoryPlan,
    constants: &BTreeMap<String, Tensor>,
    fuse: bool,
) -> Result<CompiledFunction> {
    ir.check()?;
    check_plan(&ir, &plan)?;
    let mut constant_image = vec![0u8; plan.constant_region.end];
    for (i, w) in ir.weights.iter().enumerate() {
        if w.mutability != Mutability::Constant {
            continue;
        }
        let t = constants
            .get(&w.name)
            .ok_or_else(|| Error::Exec(format!("no payload for constant `{}`", w.name)))?;
        if t.ty() != &w.ty {
            return Err(Error::Exec(format!("constant `{}` is {} but declared {}", w.name, t.ty(), w.ty)));
        }
        let off = plan.offset(ValueRef::Weight(i as u32));
        let bytes = t.to_le_bytes();
        constant_image[off..off + bytes.len()].copy_from_slice(&bytes);
    }

    let code: Vec<Instr> = ir.instrs().cloned().collect();
    let mut needs_binding = BTreeSet::new();
    let mut written = BTreeSet::new();
    for i in &code {
        for v in i.reads() {
            if let ValueRef::Weight(w) = v {
                if ir.weights[w as usize].mutability == Mutability::Mutable && !written.contains(&w) {
                    needs_binding.insert(w);
                }
            }
        }
        if let ValueRef::Weight(w) = i.output() {
            written.insert(w);
        }
    }

    let slot = |v: ValueRef| {
        let ty = ir.ty(v);
        Slot { offset: plan.offset(v), kind: ty.kind, params: ty.quant }
    };
    let range = |v: ValueRef| {
        let o = plan.offset(v);
        o..o + ir.ty(v).size_bytes()
    };
    let stackable = |i: &Instr| fuse && i.predicate.is_none() && micro_of(i).is_some();
    let mut items = Vec::new();
    let mut k = 0;
    while k < code.len() {
        if !stackable(&code[k]) {
            items.push(Item::Single(k));
            k += 1;
            continue;
        }
        let dims = &ir.ty(code[k].output()).dims;
        let mut ranges: Vec<Range<usize>> = Vec::new();
        let mut end = k;
        while end < code.len() && stackable(&code[end]) {
            let i = &code[end];
            if i.uses().any(|v| &ir.ty(v).dims != dims) {
                break;
            }
            // Buffers in one traversal must coincide exactly or not overlap.
            let mine: Vec<Range<usize>> = i.uses().map(range).collect();
            let all: Vec<&Range<usize>> = ranges.iter().chain(mine.iter()).collect();
            let clash = all.iter().enumerate().any(|(a, ra)| {
                all[a + 1..].iter().any(|rb| ra != rb && ra.start < rb.end && rb.start < ra.end)
            });
            if clash {
                break;
            }
            ranges.extend(mine);
            end += 1;
        }
        if end - k < 2 {
            items.push(Item::Single(k));
            k += 1;
            continue;
        }
        let ops = code[k..end]
            .iter()
            .map(|i| MicroOp { op: micro_of(i).unwrap(), out: slot(i.output()), ins: i.inputs().map(slot).collect() })
            .collect();
        items.push(Item::Fused { range: k..end, len: dims.iter().product(), ops });
        k = end;
    }
    Ok(CompiledFunction { ir, plan, constant_image, code, items, needs_binding })
}

/// Every buffer lies inside the arena, weights are disjoint and activations
/// with overlapping lifetimes occupy disjoint bytes.
pub fn check_plan(ir: &IRFunction, plan: &MemoryPlan) -> Result<()> {
    let mut spans = Vec::new();
    for (i, w) in ir.weights.iter().enumerate() {
        let v = ValueRef::Weight(i as u32);
        let off = *plan.offsets.get(&v).ok_or_else(|| Error::Exec(format!("no offset for %{}", w.name)))?;
        spans.push((v, off..off + w.ty.size_bytes(), 0..usize::MAX));
    }
    let lifetimes = ir.lifetimes();
    for (a, (s, e)) in lifetimes {
        let v = ValueRef::Act(a);
        let off = *plan.offsets.get(&v).ok_or_else(|| Error::Exec(format!("no offset for %{}", ir.name(v))))?;
        spans.push((v, off..off + ir.ty(v).size_bytes(), s..e + 1));
    }
    for (v, bytes, _) in &spans {
        if bytes.end > plan.arena_size {
            return Err(Error::Exec(format!("%{} lies outside the arena", ir.name(*v))));
        }
        if bytes.start % crate::lowir::ALIGNMENT != 0 {
            return Err(Error::Exec(format!("%{} is misaligned", ir.name(*v))));
        }
    }
    for (i, (va, ba, la)) in spans.iter().enumerate() {
        for (vb, bb, lb) in &spans[i + 1..] {
            let bytes = ba.start < bb.end && bb.start < ba.end;
            let live = la.start < lb.end && lb.start < la.end;
            if bytes && live {
                return Err(Error::Exec(format!("%{} and %{} share bytes while both live", ir.name(*va), ir.name(*vb))));
            }
        }
    }
    Ok(())
}

fn read_value(arena: &[u8], off: usize, ty: &TensorType) -> Value<f32> {
    let n = ty.num_elements();
    let data = match ty.kind {
        ElemKind::Float32 => Data::Float(
            arena[off..off + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        ElemKind::Int8Q => Data::Int8(arena[off..off + n].iter().map(|&b| b as i8).collect()),
        ElemKind::Int64Index => Data::Index(
            arena[off..off + 8 * n].chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        ElemKind::Bool => Data::Bool(arena[off..off + n].iter().map(|&b| b != 0).collect()),
    };
    Value { ty: ty.clone(), data }
}

fn write_value(arena: &mut [u8], off: usize, v: &Value<f32>) {
    match &v.data {
        Data::Float(xs) => {
            for (c, x) in arena[off..off + 4 * xs.len()].chunks_exact_mut(4).zip(xs) {
                c.copy_from_slice(&x.to_le_bytes());
            }
        }
        Data::Int8(xs) => {
            for (b, x) in arena[off..off + xs.len()].iter_mut().zip(xs) {
                *b = *x as u8;
            }
        }
        Data::Index(xs) => {
            for (c, x) in arena[off..off + 8 * xs.len()].chunks_exact_mut(8).zip(xs) {
                c.copy_from_slice(&x.to_le_bytes());
            }
        }
        Data::Bool(xs) => {
            for (b, x) in arena[off..off + xs.len()].iter_mut().zip(xs) {
                *b = *x as u8;
            }
        }
    }
}

#[inline]
fn f32_at(arena: &[u8], s: Slot, e: usize) -> f32 {
    let o = s.offset + 4 * e;
    f32::from_le_bytes(arena[o..o + 4].try_into().unwrap())
}

#[inline]
fn set_f32(arena: &mut [u8], s: Slot, e: usize, x: f32) {
    let o = s.offset + 4 * e;
    arena[o..o + 4].copy_from_slice(&x.to_le_bytes());
}

#[inline]
fn i8_at(arena: &[u8], s: Slot, e: usize) -> i8 {
    arena[s.offset + e] as i8
}

#[inline]
fn set_i8(arena: &mut [u8], s: Slot, e: usize, x: i8) {
    arena[s.offset + e] = x as u8;
}

fn params(s: Slot) -> QuantParams {
    s.params.expect("int8 slot carries params")
}

fn run_micro(arena: &mut [u8], op: &MicroOp, e: usize) {
    let out = op.out;
    let q = out.kind == ElemKind::Int8Q;
    match op.op {
        Micro::Copy => {
            let w = out.kind.size_bytes();
            let src = op.ins[0].offset + w * e;
            arena.copy_within(src..src + w, out.offset + w * e);
        }
        Micro::Binary(b) if q => {
            let (a, c) = (op.ins[0], op.ins[1]);
            let r = b.apply_q(i8_at(arena, a, e), params(a), i8_at(arena, c, e), params(c), params(out));
            set_i8(arena, out, e, r);
        }
        Micro::Binary(b) => {
            let r = b.apply(f32_at(arena, op.ins[0], e), f32_at(arena, op.ins[1], e));
            set_f32(arena, out, e, r);
        }
        Micro::Unary(u) if q => {
            let x = op.ins[0];
            set_i8(arena, out, e, u.apply_q(i8_at(arena, x, e), params(x), params(out)));
        }
        Micro::Unary(u) => set_f32(arena, out, e, u.apply(f32_at(arena, op.ins[0], e))),
        Micro::Splat(v) if q => set_i8(arena, out, e, params(out).quantize(v)),
        Micro::Splat(v) => set_f32(arena, out, e, v),
        Micro::Quantize => set_i8(arena, out, e, params(out).quantize(f32_at(arena, op.ins[0], e))),
        Micro::Dequantize => {
            let x = op.ins[0];
            set_f32(arena, out, e, params(x).dequantize::<f32>(i8_at(arena, x, e)))
        }
        Micro::Rescale => {
            let x = op.ins[0];
            set_i8(arena, out, e, rescale_value(i8_at(arena, x, e), params(x), params(out)))
        }
    }
}

impl CompiledFunction {
    /// Number of stacked groups and the instructions they cover.
    pub fn fused_groups(&self) -> Vec<Range<usize>> {
        self.items
            .iter()
            .filter_map(|it| match it {
                Item::Fused { range, .. } => Some(range.clone()),
                Item::Single(_) => None,
            })
            .collect()
    }

    /// Names of the mutable weights the program writes.
    pub fn output_names(&self) -> Vec<String> {
        self.ir.outputs().into_iter().map(|w| self.ir.weights[w as usize].name.clone()).collect()
    }

    /// Names and types of the mutable weights that must be bound.
    pub fn input_types(&self) -> BTreeMap<String, TensorType> {
        self.needs_binding
            .iter()
            .map(|&w| {
                let wv = &self.ir.weights[w as usize];
                (wv.name.clone(), wv.ty.clone())
            })
            .collect()
    }

    pub fn run(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        self.execute(bindings, false)
    }

    /// Run and then confirm the constant region is unchanged.
    pub fn run_guarded(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        self.execute(bindings, true)
    }

    fn execute(&self, bindings: &Bindings, guard: bool) -> Result<BTreeMap<String, Tensor>> {
        let ir = &self.ir;
        let mut arena = vec![0u8; self.plan.arena_size];
        arena[..self.constant_image.len()].copy_from_slice(&self.constant_image);
        for (i, w) in ir.weights.iter().enumerate() {
            if w.mutability != Mutability::Mutable {
                continue;
            }
            match bindings.get(&w.name) {
                Some(t) => {
                    if t.ty() != &w.ty {
                        return Err(Error::Binding(format!("`{}` is {} but bound to {}", w.name, w.ty, t.ty())));
                    }
                    let off = self.plan.offset(ValueRef::Weight(i as u32));
                    let bytes = t.to_le_bytes();
                    arena[off..off + bytes.len()].copy_from_slice(&bytes);
                }
                None if self.needs_binding.contains(&(i as u32)) => {
                    return Err(Error::Binding(format!("placeholder `{}` is not bound", w.name)));
                }
                None => {}
            }
        }
        for item in &self.items {
            match item {
                Item::Single(k) => self.step(&mut arena, &self.code[*k])?,
                Item::Fused { len, ops, .. } => {
                    for e in 0..*len {
                        for op in ops {
                            run_micro(&mut arena, op, e);
                        }
                    }
                }
            }
        }
        if guard && arena[..self.constant_image.len()] != self.constant_image[..] {
            return Err(Error::Exec("constant region was modified".into()));
        }
        let mut out = BTreeMap::new();
        for w in ir.outputs() {
            let v = ValueRef::Weight(w);
            let val = read_value(&arena, self.plan.offset(v), ir.ty(v));
            out.insert(ir.weights[w as usize].name.clone(), val.to_tensor());
        }
        Ok(out)
    }

    fn step(&self, arena: &mut [u8], i: &Instr) -> Result<()> {
        let ir = &self.ir;
        let out = i.output();
        let out_off = self.plan.offset(out);
        if let Some(p) = i.predicate {
            let pv = read_value(arena, self.plan.offset(p), ir.ty(p));
            if !predicate_enabled(&pv)? {
                // Skipped results are unspecified; weights keep their value.
                if cfg!(debug_assertions) && matches!(out, ValueRef::Act(_)) {
                    arena[out_off..out_off + ir.ty(out).size_bytes()].fill(SENTINEL);
                }
                return Ok(());
            }
        }
        match &i.op {
            InstrOp::Copy => {
                let src = self.plan.offset(i.args[1].value);
                let n = ir.ty(out).size_bytes();
                arena.copy_within(src..src + n, out_off);
            }
            InstrOp::Op(op) => {
                let ins: Vec<Value<f32>> =
                    i.inputs().map(|v| read_value(arena, self.plan.offset(v), ir.ty(v))).collect();
                let refs: Vec<&Value<f32>> = ins.iter().collect();
                let v = eval_op(op, ir.ty(out), &refs, false)
                    .map_err(|e| Error::Exec(format!("{}: {e}", i.op.name())))?;
                write_value(arena, out_off, &v);
            }
        }
        Ok(())
    }
}
