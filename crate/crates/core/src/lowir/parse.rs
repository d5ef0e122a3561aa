//! Parser for the text produced by [`super::dump_ir`].

use std::collections::BTreeMap;

use super::{ActivationVar, Arg, IRFunction, Instr, InstrOp, Mutability, Qualifier, Step, ValueRef, WeightVar};
use crate::error::{Error, Result};
use crate::graph::{NodeKind, Op};
use crate::tensor::TensorType;

pub(crate) struct Ctx {
    pub(crate) line: usize,
}

impl Ctx {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { line: self.line, msg: msg.into() })
    }
}

fn value_name(tok: &str) -> Option<&str> {
    tok.strip_prefix('%').filter(|s| !s.is_empty())
}

/// Parse the textual form back into an [`IRFunction`].
///
/// The result is checked with [`IRFunction::check`].
pub fn parse_ir(text: &str) -> Result<IRFunction> {
    let mut ir = IRFunction::default();
    let mut names: BTreeMap<String, ValueRef> = BTreeMap::new();
    #[derive(PartialEq)]
    enum Section {
        Before,
        Declare,
        Between,
        Program,
        After,
    }
    let mut section = Section::Before;
    let mut ctx = Ctx { line: 0 };
    for (i, raw) in text.lines().enumerate() {
        ctx.line = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match section {
            Section::Before | Section::Between => {
                let want = if section == Section::Before { "declare" } else { "program" };
                let rest = line.strip_prefix(want).map(str::trim);
                match rest {
                    Some("{") => {
                        section = if section == Section::Before { Section::Declare } else { Section::Program }
                    }
                    Some("{}") => {
                        section = if section == Section::Before { Section::Between } else { Section::After }
                    }
                    _ => return ctx.err(format!("expected `{want} {{`")),
                }
            }
            Section::Declare => {
                if line == "}" {
                    section = Section::Between;
                    continue;
                }
                let (lhs, rhs) = line.split_once('=').ok_or_else(|| Error::Parse { line: ctx.line, msg: "expected `%name = ...`".into() })?;
                let Some(name) = value_name(lhs.trim()) else { return ctx.err("expected a `%name`") };
                let rhs = rhs.trim();
                let (mutability, ty) = if let Some(t) = rhs.strip_prefix("const ") {
                    (Mutability::Constant, t)
                } else if let Some(t) = rhs.strip_prefix("mutable ") {
                    (Mutability::Mutable, t)
                } else {
                    return ctx.err("expected `const` or `mutable`");
                };
                let ty: TensorType = ty.parse().or_else(|e: Error| ctx.err(e.to_string()))?;
                let id = ValueRef::Weight(ir.weights.len() as u32);
                if names.insert(name.to_string(), id).is_some() {
                    return ctx.err(format!("duplicate name `{name}`"));
                }
                ir.weights.push(WeightVar { name: name.to_string(), ty, mutability });
            }
            Section::Program => {
                if line == "}" {
                    section = Section::After;
                    continue;
                }
                let step = parse_step(&ctx, line, &mut ir, &mut names)?;
                ir.program.push(step);
            }
            Section::After => return ctx.err("trailing text after program"),
        }
    }
    if section != Section::After {
        return Err(Error::Parse { line: ctx.line, msg: "unterminated input".into() });
    }
    ir.check()?;
    Ok(ir)
}

fn parse_step(ctx: &Ctx, line: &str, ir: &mut IRFunction, names: &mut BTreeMap<String, ValueRef>) -> Result<Step> {
    let lookup = |names: &BTreeMap<String, ValueRef>, tok: &str| -> Result<ValueRef> {
        let Some(n) = value_name(tok) else { return ctx.err(format!("expected a value, got `{tok}`")) };
        match names.get(n) {
            Some(&v) => Ok(v),
            None => ctx.err(format!("unknown value `%{n}`")),
        }
    };
    if let Some(rest) = line.strip_prefix("dealloc ") {
        return match lookup(names, rest.trim())? {
            ValueRef::Act(a) => Ok(Step::Dealloc(a)),
            ValueRef::Weight(_) => ctx.err("dealloc of a weight"),
        };
    }
    if let Some((lhs, rhs)) = line.split_once('=') {
        if let Some(ty) = rhs.trim().strip_prefix("alloc ") {
            let Some(name) = value_name(lhs.trim()) else { return ctx.err("expected a `%name`") };
            let ty: TensorType = ty.parse().or_else(|e: Error| ctx.err(e.to_string()))?;
            let a = ir.activations.len() as u32;
            if names.insert(name.to_string(), ValueRef::Act(a)).is_some() {
                return ctx.err(format!("duplicate name `{name}`"));
            }
            ir.activations.push(ActivationVar { name: name.to_string(), ty });
            return Ok(Step::Alloc(a));
        }
    }

    let (kind, mut rest) = line.split_once(' ').unwrap_or((line, ""));
    let mut keep_alive = false;
    if let Some(r) = rest.trim_end().strip_suffix("keepalive") {
        keep_alive = true;
        rest = r;
    }
    let mut predicate = None;
    if let Some(pos) = rest.rfind(" if %") {
        predicate = Some(lookup(names, rest[pos + 4..].trim())?);
        rest = &rest[..pos];
    }
    let mut attrs = None;
    if let Some(open) = rest.find('{') {
        let close = rest.rfind('}').filter(|&c| c > open);
        let Some(close) = close else { return ctx.err("unbalanced attribute braces") };
        attrs = Some(parse_attrs(ctx, &rest[open + 1..close])?);
        rest = &rest[..open];
    }
    let mut args = Vec::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (q, v) = part.split_once(' ').unwrap_or((part, ""));
        let qual = match q {
            "@in" => Qualifier::In,
            "@out" => Qualifier::Out,
            "@inout" => Qualifier::InOut,
            _ => return ctx.err(format!("bad qualifier `{q}`")),
        };
        args.push(Arg { value: lookup(names, v.trim())?, qual });
    }
    let op = if kind == "copy" {
        if attrs.is_some() {
            return ctx.err("copy takes no attributes");
        }
        InstrOp::Copy
    } else {
        let Some(k) = NodeKind::ALL.iter().find(|k| k.name().eq_ignore_ascii_case(kind)) else {
            return ctx.err(format!("unknown instruction `{kind}`"));
        };
        InstrOp::Op(build_op(ctx, *k, attrs.unwrap_or_default())?)
    };
    Ok(Step::Run(Instr { op, args, predicate, keep_alive }))
}

pub(crate) fn parse_attrs(ctx: &Ctx, s: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = s.as_bytes();
    let mut push = |piece: &str| -> Result<()> {
        let piece = piece.trim();
        if piece.is_empty() {
            return Ok(());
        }
        let Some((k, v)) = piece.split_once('=') else { return ctx.err(format!("bad attribute `{piece}`")) };
        out.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    };
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' => depth += 1,
            b']' => depth -= 1,
            b',' if depth == 0 => {
                push(&s[start..i])?;
                start = i + 1;
            }
            _ => {}
        }
    }
    push(&s[start..])?;
    Ok(out)
}

pub(crate) fn build_op(ctx: &Ctx, kind: NodeKind, mut attrs: BTreeMap<String, String>) -> Result<Op> {
    let mut take = |key: &str| -> Result<String> {
        match attrs.remove(key) {
            Some(v) => Ok(v),
            None => ctx.err(format!("{kind} needs attribute `{key}`")),
        }
    };
    let num = |v: String| -> Result<usize> { v.parse().or_else(|_| ctx.err(format!("bad integer `{v}`"))) };
    let float = |v: String| -> Result<f32> { v.parse().or_else(|_| ctx.err(format!("bad number `{v}`"))) };
    let list = |v: String| -> Result<Vec<usize>> {
        let inner = v.strip_prefix('[').and_then(|r| r.strip_suffix(']'));
        let Some(inner) = inner else { return ctx.err(format!("bad list `{v}`")) };
        inner.split(',').map(str::trim).filter(|p| !p.is_empty()).map(|p| num(p.to_string())).collect()
    };
    use NodeKind as K;
    let op = match kind {
        K::Convolution | K::MaxPool | K::AvgPool => {
            let (kernel, stride, pad) = (num(take("kernel")?)?, num(take("stride")?)?, num(take("pad")?)?);
            match kind {
                K::Convolution => Op::Convolution { kernel, stride, pad },
                K::MaxPool => Op::MaxPool { kernel, stride, pad },
                _ => Op::AvgPool { kernel, stride, pad },
            }
        }
        K::Transpose => Op::Transpose { perm: list(take("perm")?)? },
        K::Reshape => Op::Reshape { dims: list(take("dims")?)? },
        K::Concat => Op::Concat { axis: num(take("axis")?)? },
        K::Splat => Op::Splat { value: float(take("value")?)? },
        K::BatchNormalization => Op::BatchNormalization { epsilon: float(take("epsilon")?)? },
        K::SGD => Op::SGD { learning_rate: float(take("learning_rate")?)? },
        K::QuantizationProfile => Op::QuantizationProfile { tensor: take("tensor")? },
        K::FullyConnected => Op::FullyConnected,
        K::MatMul => Op::MatMul,
        K::BroadcastAdd => Op::BroadcastAdd,
        K::Add => Op::Add,
        K::Sub => Op::Sub,
        K::Mul => Op::Mul,
        K::Div => Op::Div,
        K::Max => Op::Max,
        K::Min => Op::Min,
        K::Relu => Op::Relu,
        K::Tanh => Op::Tanh,
        K::Sigmoid => Op::Sigmoid,
        K::SoftMax => Op::SoftMax,
        K::Regression => Op::Regression,
        K::Save => Op::Save,
        K::Quantize => Op::Quantize,
        K::Dequantize => Op::Dequantize,
        K::RescaleQuantized => Op::RescaleQuantized,
    };
    if let Some(k) = attrs.keys().next() {
        return ctx.err(format!("unexpected attribute `{k}` on {kind}"));
    }
    Ok(op)
}
