//! The low-level, address-based instruction IR.
//!
//! An [`IRFunction`] has a `declare` section of weights (module storage,
//! either constant or mutable) and a `program` section of steps. Activations
//! are introduced by `alloc` and retired by `dealloc`; those markers carry
//! no memory semantics, they only delimit lifetimes for the allocator.
//!
//! Text grammar:
//!
//! ```text
//! declare {
//!   %<name> = const <type>
//!   %<name> = mutable <type>
//! }
//! program {
//!   %<name> = alloc <type>
//!   <kind> @out %<v>, @in %<v>, ... [{<attrs>}] [if %<pred>] [keepalive]
//!   dealloc %<name>
//! }
//! ```
//!
//! The first operand of every instruction is the written buffer, qualified
//! `@out`, or `@inout` when the same buffer is also read. Remaining operands
//! are `@in`.

mod alloc;
mod irgen;
mod optimize;
pub(crate) mod parse;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write};

use crate::error::{Error, Result};
use crate::graph::{check_op, NodeKind, Op};
use crate::tensor::TensorType;

pub use alloc::{allocate, plan_intervals, Interval, MemoryPlan, ALIGNMENT};
pub use irgen::{irgen, IrProgram};
pub use optimize::optimize_ir;
pub use parse::parse_ir;
pub use schedule::{naive_order, peak_memory, schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mutability {
    Constant,
    Mutable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightVar {
    pub name: String,
    pub ty: TensorType,
    pub mutability: Mutability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationVar {
    pub name: String,
    pub ty: TensorType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueRef {
    Weight(u32),
    Act(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Qualifier {
    In,
    Out,
    InOut,
}

impl Qualifier {
    pub fn reads(self) -> bool {
        matches!(self, Qualifier::In | Qualifier::InOut)
    }

    pub fn writes(self) -> bool {
        matches!(self, Qualifier::Out | Qualifier::InOut)
    }

    fn as_str(self) -> &'static str {
        match self {
            Qualifier::In => "@in",
            Qualifier::Out => "@out",
            Qualifier::InOut => "@inout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arg {
    pub value: ValueRef,
    pub qual: Qualifier,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InstrOp {
    Copy,
    Op(Op),
}

impl InstrOp {
    pub fn name(&self) -> String {
        match self {
            InstrOp::Copy => "copy".into(),
            InstrOp::Op(op) => op.kind().name().to_ascii_lowercase(),
        }
    }

    /// Same-index elementwise semantics.
    pub fn is_data_parallel(&self) -> bool {
        match self {
            InstrOp::Copy => true,
            InstrOp::Op(op) => op.kind().info().data_parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instr {
    pub op: InstrOp,
    /// Written buffer first, then the read operands.
    pub args: Vec<Arg>,
    pub predicate: Option<ValueRef>,
    /// Set when compiling for training: the buffers touched must not be
    /// shared or shortened.
    pub keep_alive: bool,
}

impl Instr {
    pub fn new(op: InstrOp, out: ValueRef, ins: &[ValueRef]) -> Self {
        let qual = if ins.contains(&out) { Qualifier::InOut } else { Qualifier::Out };
        let mut args = vec![Arg { value: out, qual }];
        args.extend(ins.iter().map(|&v| Arg { value: v, qual: Qualifier::In }));
        Instr { op, args, predicate: None, keep_alive: false }
    }

    pub fn output(&self) -> ValueRef {
        self.args[0].value
    }

    pub fn inputs(&self) -> impl Iterator<Item = ValueRef> + '_ {
        self.args[1..].iter().map(|a| a.value)
    }

    /// Values read, including the predicate.
    pub fn reads(&self) -> impl Iterator<Item = ValueRef> + '_ {
        self.args.iter().filter(|a| a.qual.reads()).map(|a| a.value).chain(self.predicate)
    }

    pub fn writes(&self) -> impl Iterator<Item = ValueRef> + '_ {
        self.args.iter().filter(|a| a.qual.writes()).map(|a| a.value)
    }

    pub fn uses(&self) -> impl Iterator<Item = ValueRef> + '_ {
        self.args.iter().map(|a| a.value).chain(self.predicate)
    }

    pub(crate) fn rename(&mut self, from: ValueRef, to: ValueRef) {
        for a in &mut self.args {
            if a.value == from {
                a.value = to;
            }
        }
        if self.predicate == Some(from) {
            self.predicate = Some(to);
        }
        self.fix_qualifiers();
    }

    pub(crate) fn fix_qualifiers(&mut self) {
        let out = self.args[0].value;
        let aliased = self.args[1..].iter().any(|a| a.value == out);
        self.args[0].qual = if aliased { Qualifier::InOut } else { Qualifier::Out };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Alloc(u32),
    Dealloc(u32),
    Run(Instr),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IRFunction {
    pub weights: Vec<WeightVar>,
    pub activations: Vec<ActivationVar>,
    pub program: Vec<Step>,
}

impl IRFunction {
    pub fn ty(&self, v: ValueRef) -> &TensorType {
        match v {
            ValueRef::Weight(i) => &self.weights[i as usize].ty,
            ValueRef::Act(i) => &self.activations[i as usize].ty,
        }
    }

    pub fn name(&self, v: ValueRef) -> &str {
        match v {
            ValueRef::Weight(i) => &self.weights[i as usize].name,
            ValueRef::Act(i) => &self.activations[i as usize].name,
        }
    }

    pub fn weight_by_name(&self, name: &str) -> Option<u32> {
        self.weights.iter().position(|w| w.name == name).map(|i| i as u32)
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instr> + '_ {
        self.program.iter().filter_map(|s| match s {
            Step::Run(i) => Some(i),
            _ => None,
        })
    }

    pub fn copy_count(&self) -> usize {
        self.instrs().filter(|i| i.op == InstrOp::Copy).count()
    }

    /// Step index of each activation's alloc and dealloc.
    pub fn lifetimes(&self) -> BTreeMap<u32, (usize, usize)> {
        let mut starts = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (pos, s) in self.program.iter().enumerate() {
            match s {
                Step::Alloc(a) => {
                    starts.insert(*a, pos);
                }
                Step::Dealloc(a) => {
                    if let Some(&st) = starts.get(a) {
                        out.insert(*a, (st, pos));
                    }
                }
                Step::Run(_) => {}
            }
        }
        out
    }

    /// Σ over activations of the number of instructions between alloc and dealloc.
    pub fn lifetime_span_sum(&self) -> usize {
        let mut run_before = Vec::with_capacity(self.program.len() + 1);
        run_before.push(0usize);
        for s in &self.program {
            let n = run_before.last().unwrap() + matches!(s, Step::Run(_)) as usize;
            run_before.push(n);
        }
        self.lifetimes().values().map(|&(a, d)| run_before[d] - run_before[a]).sum()
    }

    /// Largest number of activation bytes live across any step.
    pub fn peak_live_bytes(&self) -> usize {
        let mut live = 0usize;
        let mut peak = 0usize;
        for s in &self.program {
            match s {
                Step::Alloc(a) => {
                    live += self.activations[*a as usize].ty.size_bytes();
                    peak = peak.max(live);
                }
                Step::Dealloc(a) => live -= self.activations[*a as usize].ty.size_bytes(),
                Step::Run(_) => {}
            }
        }
        peak
    }

    /// Mutable weights written by some instruction.
    pub fn outputs(&self) -> BTreeSet<u32> {
        self.instrs()
            .flat_map(|i| i.writes())
            .filter_map(|v| match v {
                ValueRef::Weight(w) => Some(w),
                _ => None,
            })
            .collect()
    }

    /// Mutable weights read by some instruction.
    pub fn inputs(&self) -> BTreeSet<u32> {
        self.instrs()
            .flat_map(|i| i.reads().collect::<Vec<_>>())
            .filter_map(|v| match v {
                ValueRef::Weight(w) if self.weights[w as usize].mutability == Mutability::Mutable => Some(w),
                _ => None,
            })
            .collect()
    }

    /// Check lifetimes, qualifiers and operand types.
    pub fn check(&self) -> Result<()> {
        let err = |pos: usize, msg: String| Err(Error::Ir(format!("step {pos}: {msg}")));
        let mut names = BTreeSet::new();
        for n in self.weights.iter().map(|w| &w.name).chain(self.activations.iter().map(|a| &a.name)) {
            if !names.insert(n) {
                return Err(Error::Ir(format!("duplicate value name `{n}`")));
            }
        }
        #[derive(PartialEq)]
        enum State {
            Unborn,
            Allocated,
            Written,
            Dead,
        }
        let mut state: Vec<State> = self.activations.iter().map(|_| State::Unborn).collect();
        for (pos, step) in self.program.iter().enumerate() {
            match step {
                Step::Alloc(a) => {
                    let Some(st) = state.get_mut(*a as usize) else { return err(pos, format!("unknown activation #{a}")) };
                    if *st != State::Unborn {
                        return err(pos, format!("activation %{} allocated twice", self.activations[*a as usize].name));
                    }
                    *st = State::Allocated;
                }
                Step::Dealloc(a) => {
                    let Some(st) = state.get_mut(*a as usize) else { return err(pos, format!("unknown activation #{a}")) };
                    if !matches!(*st, State::Allocated | State::Written) {
                        return err(pos, format!("dealloc of %{} outside its lifetime", self.activations[*a as usize].name));
                    }
                    *st = State::Dead;
                }
                Step::Run(ins) => {
                    if ins.args.is_empty() {
                        return err(pos, "instruction without operands".into());
                    }
                    for v in ins.uses() {
                        let ok = match v {
                            ValueRef::Weight(w) => (w as usize) < self.weights.len(),
                            ValueRef::Act(a) => (a as usize) < self.activations.len(),
                        };
                        if !ok {
                            return err(pos, "dangling operand".into());
                        }
                    }
                    for v in ins.reads() {
                        if let ValueRef::Act(a) = v {
                            if state[a as usize] != State::Written {
                                return err(pos, format!("read of %{} before it is written or after dealloc", self.name(v)));
                            }
                        }
                    }
                    for (i, a) in ins.args.iter().enumerate() {
                        let want_out = i == 0;
                        if a.qual.writes() != want_out {
                            return err(pos, "only the first operand may be written".into());
                        }
                    }
                    let out = ins.output();
                    let expected = if ins.inputs().any(|v| v == out) { Qualifier::InOut } else { Qualifier::Out };
                    if ins.args[0].qual != expected {
                        return err(pos, format!("output qualifier should be {}", expected.as_str()));
                    }
                    match out {
                        ValueRef::Weight(w) if self.weights[w as usize].mutability == Mutability::Constant => {
                            return err(pos, format!("write to constant %{}", self.name(out)));
                        }
                        ValueRef::Act(a) => {
                            if !matches!(state[a as usize], State::Allocated | State::Written) {
                                return err(pos, format!("write to %{} outside its lifetime", self.name(out)));
                            }
                            state[a as usize] = State::Written;
                        }
                        _ => {}
                    }
                    if let Some(p) = ins.predicate {
                        if self.ty(p).kind != crate::tensor::ElemKind::Bool {
                            return err(pos, "predicate must be bool".into());
                        }
                    }
                    let in_tys: Vec<&TensorType> = ins.inputs().map(|v| self.ty(v)).collect();
                    let out_ty = self.ty(out);
                    let res = match &ins.op {
                        InstrOp::Copy => {
                            if in_tys.len() == 1 && in_tys[0] == out_ty {
                                Ok(())
                            } else {
                                Err("copy needs one operand of the output type".to_string())
                            }
                        }
                        InstrOp::Op(op) => {
                            if !supported(op.kind()) {
                                Err(format!("{} is not an instruction kind", op.kind()))
                            } else {
                                check_op(op, Some(out_ty), &in_tys)
                            }
                        }
                    };
                    if let Err(e) = res {
                        return err(pos, e);
                    }
                }
            }
        }
        for (i, st) in state.iter().enumerate() {
            if *st != State::Dead {
                return Err(Error::Ir(format!("activation %{} is not allocated and retired exactly once", self.activations[i].name)));
            }
        }
        Ok(())
    }

    /// Drop activations no step references and renumber the rest.
    pub fn compact(&mut self) {
        let mut used = vec![false; self.activations.len()];
        for s in &self.program {
            match s {
                Step::Alloc(a) | Step::Dealloc(a) => used[*a as usize] = true,
                Step::Run(i) => {
                    for v in i.uses() {
                        if let ValueRef::Act(a) = v {
                            used[a as usize] = true;
                        }
                    }
                }
            }
        }
        let mut map = vec![u32::MAX; used.len()];
        let mut acts = Vec::new();
        for (i, a) in self.activations.drain(..).enumerate() {
            if used[i] {
                map[i] = acts.len() as u32;
                acts.push(a);
            }
        }
        self.activations = acts;
        let re = |v: &mut ValueRef| {
            if let ValueRef::Act(a) = v {
                *a = map[*a as usize];
            }
        };
        for s in &mut self.program {
            match s {
                Step::Alloc(a) | Step::Dealloc(a) => *a = map[*a as usize],
                Step::Run(i) => {
                    i.args.iter_mut().for_each(|a| re(&mut a.value));
                    if let Some(p) = i.predicate.as_mut() {
                        re(p);
                    }
                }
            }
        }
    }
}

/// Node kinds that exist as instructions.
pub fn supported(kind: NodeKind) -> bool {
    use NodeKind::*;
    !matches!(kind, FullyConnected | BatchNormalization | Regression | SGD | Save | QuantizationProfile)
}

impl fmt::Display for IRFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&dump_ir(self))
    }
}

/// Deterministic text form; see the module documentation for the grammar.
pub fn dump_ir(ir: &IRFunction) -> String {
    let mut s = String::from("declare {\n");
    for w in &ir.weights {
        let m = match w.mutability {
            Mutability::Constant => "const",
            Mutability::Mutable => "mutable",
        };
        writeln!(s, "  %{} = {m} {}", w.name, w.ty).unwrap();
    }
    s.push_str("}\nprogram {\n");
    for step in &ir.program {
        match step {
            Step::Alloc(a) => {
                let a = &ir.activations[*a as usize];
                writeln!(s, "  %{} = alloc {}", a.name, a.ty).unwrap();
            }
            Step::Dealloc(a) => writeln!(s, "  dealloc %{}", ir.activations[*a as usize].name).unwrap(),
            Step::Run(i) => {
                let args: Vec<String> =
                    i.args.iter().map(|a| format!("{} %{}", a.qual.as_str(), ir.name(a.value))).collect();
                write!(s, "  {} {}", i.op.name(), args.join(", ")).unwrap();
                if let InstrOp::Op(op) = &i.op {
                    let attrs = op.attr_string();
                    if !attrs.is_empty() {
                        write!(s, " {{{attrs}}}").unwrap();
                    }
                }
                if let Some(p) = i.predicate {
                    write!(s, " if %{}", ir.name(p)).unwrap();
                }
                if i.keep_alive {
                    s.push_str(" keepalive");
                }
                s.push('\n');
            }
        }
    }
    s.push_str("}\n");
    s
}
