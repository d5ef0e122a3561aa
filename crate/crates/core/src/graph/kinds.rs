//! Static per-kind table: arity, flags and typing rules.

use super::{Module, Node, NodeKind, Op};
use crate::tensor::{ElemKind, TensorType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KindInfo {
    pub name: &'static str,
    pub arity: Arity,
    /// One output element depends only on the same-index input elements.
    pub data_parallel: bool,
    pub has_gradient: bool,
    /// Replaced by simpler kinds during node lowering.
    pub lowerable: bool,
    pub has_result: bool,
}

const fn info(
    name: &'static str,
    arity: Arity,
    data_parallel: bool,
    has_gradient: bool,
    lowerable: bool,
    has_result: bool,
) -> KindInfo {
    KindInfo { name, arity, data_parallel, has_gradient, lowerable, has_result }
}

use Arity::*;

impl NodeKind {
    pub fn info(self) -> &'static KindInfo {
        const CONV: KindInfo = info("Convolution", Exactly(3), false, false, false, true);
        const MAXPOOL: KindInfo = info("MaxPool", Exactly(1), false, false, false, true);
        const AVGPOOL: KindInfo = info("AvgPool", Exactly(1), false, false, false, true);
        const FC: KindInfo = info("FullyConnected", Exactly(3), false, true, true, true);
        const MATMUL: KindInfo = info("MatMul", Exactly(2), false, true, false, true);
        const BADD: KindInfo = info("BroadcastAdd", Exactly(2), false, true, false, true);
        const ADD: KindInfo = info("Add", Exactly(2), true, true, false, true);
        const SUB: KindInfo = info("Sub", Exactly(2), true, true, false, true);
        const MUL: KindInfo = info("Mul", Exactly(2), true, true, false, true);
        const DIV: KindInfo = info("Div", Exactly(2), true, true, false, true);
        const MAX: KindInfo = info("Max", Exactly(2), true, false, false, true);
        const MIN: KindInfo = info("Min", Exactly(2), true, false, false, true);
        const RELU: KindInfo = info("Relu", Exactly(1), true, true, true, true);
        const TANH: KindInfo = info("Tanh", Exactly(1), true, true, false, true);
        const SIGMOID: KindInfo = info("Sigmoid", Exactly(1), true, true, false, true);
        const SOFTMAX: KindInfo = info("SoftMax", Exactly(1), false, false, false, true);
        const TRANSPOSE: KindInfo = info("Transpose", Exactly(1), false, true, false, true);
        const RESHAPE: KindInfo = info("Reshape", Exactly(1), false, true, false, true);
        const CONCAT: KindInfo = info("Concat", AtLeast(1), false, false, false, true);
        const SPLAT: KindInfo = info("Splat", Exactly(0), true, true, false, true);
        const BN: KindInfo = info("BatchNormalization", Exactly(5), false, false, true, true);
        const REGRESSION: KindInfo = info("Regression", Exactly(2), false, true, true, true);
        const SGD: KindInfo = info("SGD", Exactly(2), false, false, true, true);
        const SAVE: KindInfo = info("Save", Exactly(2), false, false, false, false);
        const QUANTIZE: KindInfo = info("Quantize", Exactly(1), true, false, false, true);
        const DEQUANTIZE: KindInfo = info("Dequantize", Exactly(1), true, false, false, true);
        const RESCALE: KindInfo = info("RescaleQuantized", Exactly(1), true, false, false, true);
        const PROFILE: KindInfo = info("QuantizationProfile", Exactly(1), false, false, false, false);
        match self {
            NodeKind::Convolution => &CONV,
            NodeKind::MaxPool => &MAXPOOL,
            NodeKind::AvgPool => &AVGPOOL,
            NodeKind::FullyConnected => &FC,
            NodeKind::MatMul => &MATMUL,
            NodeKind::BroadcastAdd => &BADD,
            NodeKind::Add => &ADD,
            NodeKind::Sub => &SUB,
            NodeKind::Mul => &MUL,
            NodeKind::Div => &DIV,
            NodeKind::Max => &MAX,
            NodeKind::Min => &MIN,
            NodeKind::Relu => &RELU,
            NodeKind::Tanh => &TANH,
            NodeKind::Sigmoid => &SIGMOID,
            NodeKind::SoftMax => &SOFTMAX,
            NodeKind::Transpose => &TRANSPOSE,
            NodeKind::Reshape => &RESHAPE,
            NodeKind::Concat => &CONCAT,
            NodeKind::Splat => &SPLAT,
            NodeKind::BatchNormalization => &BN,
            NodeKind::Regression => &REGRESSION,
            NodeKind::SGD => &SGD,
            NodeKind::Save => &SAVE,
            NodeKind::Quantize => &QUANTIZE,
            NodeKind::Dequantize => &DEQUANTIZE,
            NodeKind::RescaleQuantized => &RESCALE,
            NodeKind::QuantizationProfile => &PROFILE,
        }
    }
}

/// What a kind's typing rule says about the result.
enum Expect {
    NoResult,
    /// Result kind and dims are forced; Int8Q params are free.
    Shape(ElemKind, Vec<usize>),
    /// Any float or int8 type (Splat).
    Free,
}

fn numeric(t: &TensorType) -> Result<(), String> {
    match t.kind {
        ElemKind::Float32 | ElemKind::Int8Q => Ok(()),
        k => Err(format!("expected a float or int8 operand, got {k:?}")),
    }
}

fn float(t: &TensorType) -> Result<(), String> {
    if t.is_float() {
        Ok(())
    } else {
        Err(format!("expected a float operand, got {t}"))
    }
}

fn same_kind(a: &TensorType, b: &TensorType) -> Result<(), String> {
    if a.kind == b.kind {
        Ok(())
    } else {
        Err(format!("element kinds differ: {a} vs {b}"))
    }
}

/// Operands of an elementwise op: same kind and dims, and exactly equal
/// types unless quantized.
fn same_type(a: &TensorType, b: &TensorType) -> Result<(), String> {
    same_kind(a, b)?;
    if a.dims != b.dims {
        return Err(format!("operands must have the same type: {a} vs {b}"));
    }
    Ok(())
}

pub(crate) fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, String> {
    if kernel == 0 || stride == 0 {
        return Err("kernel and stride must be positive".into());
    }
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(format!("kernel {kernel} larger than padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

fn expect(op: &Op, tys: &[&TensorType]) -> Result<Expect, String> {
    let kind = op.kind();
    if !kind.info().arity.accepts(tys.len()) {
        return Err(format!("{kind} takes {:?} operands, got {}", kind.info().arity, tys.len()));
    }
    let shape = |t: &TensorType, dims: Vec<usize>| Ok(Expect::Shape(t.kind, dims));
    match op {
        Op::Convolution { kernel, stride, pad } => {
            let (x, w, b) = (tys[0], tys[1], tys[2]);
            numeric(x)?;
            same_kind(x, w)?;
            same_kind(x, b)?;
            if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
                return Err("convolution expects NHWC input, [O,K,K,C] filter, [O] bias".into());
            }
            if w.dims[1] != *kernel || w.dims[2] != *kernel || w.dims[3] != x.dims[3] {
                return Err(format!("filter {w} does not match kernel {kernel} over {x}"));
            }
            if b.dims[0] != w.dims[0] {
                return Err(format!("bias {b} does not match filter {w}"));
            }
            let oh = window_out(x.dims[1], *kernel, *stride, *pad)?;
            let ow = window_out(x.dims[2], *kernel, *stride, *pad)?;
            shape(x, vec![x.dims[0], oh, ow, w.dims[0]])
        }
        Op::MaxPool { kernel, stride, pad } | Op::AvgPool { kernel, stride, pad } => {
            let x = tys[0];
            numeric(x)?;
            if x.rank() != 4 {
                return Err(format!("pooling expects NHWC input, got {x}"));
            }
            if pad >= kernel {
                return Err(format!("pooling pad {pad} must be smaller than kernel {kernel}"));
            }
            let oh = window_out(x.dims[1], *kernel, *stride, *pad)?;
            let ow = window_out(x.dims[2], *kernel, *stride, *pad)?;
            shape(x, vec![x.dims[0], oh, ow, x.dims[3]])
        }
        Op::FullyConnected => {
            let (x, w, b) = (tys[0], tys[1], tys[2]);
            float(x)?;
            float(w)?;
            float(b)?;
            if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
                return Err("fully connected expects [N,K] x [K,M] + [M]".into());
            }
            if x.dims[1] != w.dims[0] || b.dims[0] != w.dims[1] {
                return Err(format!("fully connected inner dimensions disagree: {x}, {w}, {b}"));
            }
            shape(x, vec![x.dims[0], w.dims[1]])
        }
        Op::MatMul => {
            let (a, b) = (tys[0], tys[1]);
            numeric(a)?;
            same_kind(a, b)?;
            if a.rank() != 2 || b.rank() != 2 {
                return Err("matmul expects rank-2 operands".into());
            }
            if a.dims[1] != b.dims[0] {
                return Err(format!("matmul inner dimensions disagree: {a} x {b}"));
            }
            shape(a, vec![a.dims[0], b.dims[1]])
        }
        Op::BroadcastAdd => {
            let (a, b) = (tys[0], tys[1]);
            numeric(a)?;
            same_kind(a, b)?;
            if b.rank() > a.rank() || a.dims[a.rank() - b.rank()..] != b.dims[..] {
                return Err(format!("{b} does not broadcast over {a}"));
            }
            shape(a, a.dims.clone())
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Max | Op::Min => {
            numeric(tys[0])?;
            same_type(tys[0], tys[1])?;
            shape(tys[0], tys[0].dims.clone())
        }
        Op::Relu => {
            numeric(tys[0])?;
            shape(tys[0], tys[0].dims.clone())
        }
        Op::Tanh | Op::Sigmoid | Op::SoftMax => {
            float(tys[0])?;
            shape(tys[0], tys[0].dims.clone())
        }
        Op::Transpose { perm } => {
            let x = tys[0];
            let mut seen = vec![false; x.rank()];
            if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(format!("{perm:?} is not a permutation of rank {}", x.rank()));
            }
            shape(x, perm.iter().map(|&p| x.dims[p]).collect())
        }
        Op::Reshape { dims } => {
            let x = tys[0];
            if dims.is_empty() || dims.iter().any(|&d| d == 0) || dims.iter().product::<usize>() != x.num_elements() {
                return Err(format!("cannot reshape {x} to {dims:?}"));
            }
            shape(x, dims.clone())
        }
        Op::Concat { axis } => {
            let x = tys[0];
            if *axis >= x.rank() {
                return Err(format!("axis {axis} out of range for {x}"));
            }
            let mut dims = x.dims.clone();
            dims[*axis] = 0;
            for t in tys {
                same_kind(x, t)?;
                if t.rank() != x.rank()
                    || t.dims.iter().zip(&x.dims).enumerate().any(|(i, (a, b))| i != *axis && a != b)
                {
                    return Err(format!("concat operands disagree off axis {axis}: {x} vs {t}"));
                }
                dims[*axis] += t.dims[*axis];
            }
            shape(x, dims)
        }
        Op::Splat { value } => {
            if !value.is_finite() {
                return Err(format!("splat value must be finite, got {value}"));
            }
            Ok(Expect::Free)
        }
        Op::BatchNormalization { epsilon } => {
            let x = tys[0];
            float(x)?;
            let c = *x.dims.last().unwrap();
            for t in &tys[1..] {
                float(t)?;
                if t.dims != [c] {
                    return Err(format!("batchnorm parameter {t} does not match channels of {x}"));
                }
            }
            if !(*epsilon >= 0.0) {
                return Err("batchnorm epsilon must be non-negative".into());
            }
            shape(x, x.dims.clone())
        }
        Op::Regression => {
            float(tys[0])?;
            same_type(tys[0], tys[1])?;
            shape(tys[0], tys[0].dims.clone())
        }
        Op::SGD { learning_rate } => {
            float(tys[0])?;
            same_type(tys[0], tys[1])?;
            if !learning_rate.is_finite() || *learning_rate < 0.0 {
                return Err(format!("invalid learning rate {learning_rate}"));
            }
            shape(tys[0], tys[0].dims.clone())
        }
        Op::Save => {
            if tys[0] != tys[1] {
                return Err(format!("save source {} and destination {} differ", tys[0], tys[1]));
            }
            Ok(Expect::NoResult)
        }
        Op::Quantize => {
            float(tys[0])?;
            Ok(Expect::Shape(ElemKind::Int8Q, tys[0].dims.clone()))
        }
        Op::Dequantize => {
            if !tys[0].is_quantized() {
                return Err(format!("dequantize expects an int8 operand, got {}", tys[0]));
            }
            Ok(Expect::Shape(ElemKind::Float32, tys[0].dims.clone()))
        }
        Op::RescaleQuantized => {
            if !tys[0].is_quantized() {
                return Err(format!("rescale expects an int8 operand, got {}", tys[0]));
            }
            Ok(Expect::Shape(ElemKind::Int8Q, tys[0].dims.clone()))
        }
        Op::QuantizationProfile { tensor } => {
            float(tys[0])?;
            if tensor.is_empty() || tensor.chars().any(char::is_whitespace) {
                return Err(format!("invalid profile tensor name `{tensor}`"));
            }
            Ok(Expect::NoResult)
        }
    }
}

/// Result element kind and dims forced by the typing rule, if any.
pub fn infer_shape(op: &Op, tys: &[&TensorType]) -> Result<Option<(ElemKind, Vec<usize>)>, String> {
    match expect(op, tys)? {
        Expect::NoResult | Expect::Free => Ok(None),
        Expect::Shape(k, d) => Ok(Some((k, d))),
    }
}

/// Infer a full result type. Int8 results inherit the first operand's params.
pub(crate) fn infer_type(op: &Op, tys: &[&TensorType]) -> Result<Option<TensorType>, String> {
    match expect(op, tys)? {
        Expect::NoResult => Ok(None),
        Expect::Free => Err(format!("{} requires an explicit result type", op.kind())),
        Expect::Shape(kind, dims) => {
            let quant = match kind {
                ElemKind::Int8Q => match tys.first().and_then(|t| t.quant) {
                    Some(q) if tys[0].is_quantized() => Some(q),
                    _ => return Err(format!("{} requires an explicit quantized result type", op.kind())),
                },
                _ => None,
            };
            TensorType::new(kind, &dims, quant).map(Some).map_err(|e| e.to_string())
        }
    }
}

/// Check a node's declared result type against its kind's rule.
pub(crate) fn check(m: &Module, node: &Node, tys: &[&TensorType]) -> Result<(), String> {
    check_op(&node.op, node.ty.as_ref(), tys)?;
    if node.op == Op::Save {
        match node.inputs[1].storage().and_then(|s| m.try_storage(s)) {
            Some(s) if s.is_placeholder() => {}
            _ => return Err("save must write into a placeholder".into()),
        }
    }
    Ok(())
}

/// Check a result type against the kind's rule, without graph context.
pub fn check_op(op: &Op, ty: Option<&TensorType>, tys: &[&TensorType]) -> Result<(), String> {
    let expected = expect(op, tys)?;
    match (expected, ty) {
        (Expect::NoResult, None) => {}
        (Expect::NoResult, Some(t)) => return Err(format!("{} must not produce a value, declared {t}", op.kind())),
        (_, None) => return Err(format!("{} must declare a result type", op.kind())),
        (Expect::Free, Some(t)) => numeric(t)?,
        (Expect::Shape(kind, dims), Some(t)) => {
            if t.kind != kind || t.dims != dims {
                let want = if kind == ElemKind::Int8Q {
                    format!("i8<{dims:?}>")
                } else {
                    TensorType::new(kind, &dims, None).map(|t| t.to_string()).unwrap_or_default()
                };
                return Err(format!("{} result declared {t}, rule requires {want}", op.kind()));
            }
        }
    }
    Ok(())
}
