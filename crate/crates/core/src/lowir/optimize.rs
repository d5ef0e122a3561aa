//! Copy elimination, in-place rewriting and lifetime shrinking.

use std::collections::BTreeSet;

use super::{IRFunction, Instr, InstrOp, Step, ValueRef};

/// Optimize a well-formed program.
///
/// Rewrites to a fixpoint, then re-places every alloc immediately before
/// the first use and every dealloc immediately after the last use.
/// Instructions marked keep-alive are never rewritten, so the buffers they
/// touch are never shared with another value.
pub fn optimize_ir(ir: &IRFunction) -> IRFunction {
    let mut code: Vec<Instr> = ir.instrs().cloned().collect();
    loop {
        let changed = forward_copy(ir, &mut code) || backward_copy(ir, &mut code) || in_place(ir, &mut code);
        if !changed {
            break;
        }
    }
    let mut out = IRFunction { weights: ir.weights.clone(), activations: ir.activations.clone(), program: Vec::new() };
    place_lifetimes(&mut out, code);
    out.compact();
    out
}

fn writes(i: &Instr, v: ValueRef) -> bool {
    i.writes().any(|w| w == v)
}

fn touches(i: &Instr, v: ValueRef) -> bool {
    i.uses().any(|u| u == v)
}

fn plain(i: &Instr) -> bool {
    i.predicate.is_none() && !i.keep_alive
}

fn pinned(code: &[Instr], v: ValueRef) -> bool {
    code.iter().any(|i| i.keep_alive && touches(i, v))
}

/// `copy t <- s` with `t` an activation written only there: later readers
/// of `t` read `s` instead, provided `s` does not change meanwhile.
fn forward_copy(_ir: &IRFunction, code: &mut Vec<Instr>) -> bool {
    for c in 0..code.len() {
        let i = &code[c];
        if i.op != InstrOp::Copy || !plain(i) {
            continue;
        }
        let (t, s) = (i.output(), i.args[1].value);
        if !matches!(t, ValueRef::Act(_)) || t == s || pinned(code, t) || pinned(code, s) {
            continue;
        }
        if code.iter().enumerate().any(|(k, j)| k != c && writes(j, t)) {
            continue;
        }
        let last = code.iter().rposition(|j| touches(j, t)).unwrap_or(c);
        if code[c + 1..=last].iter().any(|j| writes(j, s)) {
            continue;
        }
        for j in &mut code[c + 1..=last] {
            j.rename(t, s);
        }
        code.remove(c);
        return true;
    }
    false
}

/// `copy y <- t` with `t` an activation produced once at `w` and dead after
/// the copy: the producer writes `y` directly.
fn backward_copy(_ir: &IRFunction, code: &mut Vec<Instr>) -> bool {
    for c in 0..code.len() {
        let i = &code[c];
        if i.op != InstrOp::Copy || !plain(i) {
            continue;
        }
        let (y, t) = (i.output(), i.args[1].value);
        if !matches!(t, ValueRef::Act(_)) || t == y || pinned(code, t) || pinned(code, y) {
            continue;
        }
        let writers: Vec<usize> = (0..code.len()).filter(|&k| writes(&code[k], t)).collect();
        let [w] = writers[..] else { continue };
        if w >= c || !plain(&code[w]) || touches(&code[w], y) {
            continue;
        }
        if code[c + 1..].iter().any(|j| touches(j, t)) {
            continue;
        }
        if code[w + 1..c].iter().any(|j| touches(j, y)) {
            continue;
        }
        for j in &mut code[w..c] {
            j.rename(t, y);
        }
        code.remove(c);
        return true;
    }
    false
}

/// A data-parallel instruction whose input activation dies there writes
/// its result into that input.
fn in_place(ir: &IRFunction, code: &mut [Instr]) -> bool {
    for k in 0..code.len() {
        let i = &code[k];
        let InstrOp::Op(op) = &i.op else { continue };
        if !op.kind().info().data_parallel || !plain(i) || i.args[0].qual != super::Qualifier::Out {
            continue;
        }
        let o = i.output();
        if !matches!(o, ValueRef::Act(_)) || pinned(code, o) {
            continue;
        }
        // The result must be a fresh value: nothing wrote it before.
        if code[..k].iter().any(|j| touches(j, o)) {
            continue;
        }
        let candidates: BTreeSet<ValueRef> = i.inputs().collect();
        let pick = candidates.into_iter().find(|&a| {
            matches!(a, ValueRef::Act(_))
                && ir.ty(a) == ir.ty(o)
                && !pinned(code, a)
                && !code[k + 1..].iter().any(|j| touches(j, a))
        });
        let Some(a) = pick else { continue };
        for j in &mut code[k..] {
            j.rename(o, a);
        }
        return true;
    }
    false
}

fn place_lifetimes(ir: &mut IRFunction, code: Vec<Instr>) {
    let n = ir.activations.len();
    let mut first = vec![usize::MAX; n];
    let mut last = vec![0usize; n];
    for (k, i) in code.iter().enumerate() {
        for v in i.uses() {
            if let ValueRef::Act(a) = v {
                let a = a as usize;
                first[a] = first[a].min(k);
                last[a] = last[a].max(k);
            }
        }
    }
    for (k, i) in code.into_iter().enumerate() {
        ir.program.extend((0..n).filter(|&a| first[a] == k).map(|a| Step::Alloc(a as u32)));
        ir.program.push(Step::Run(i));
        ir.program.extend((0..n).filter(|&a| first[a] != usize::MAX && last[a] == k).map(|a| Step::Dealloc(a as u32)));
    }
}
