use super::{FuncId, Module, NodeId, Op, Operand, StorageId};
use crate::tensor::TensorType;

/// Convenience front end for constructing functions by hand.
///
/// Every method panics when the operands violate the kind's typing rule;
/// use [`Module::add_node`] for a fallible interface.
pub struct Builder<'m> {
    m: &'m mut Module,
    f: FuncId,
}

impl<'m> Builder<'m> {
    pub(super) fn new(m: &'m mut Module, f: FuncId) -> Self {
        Builder { m, f }
    }

    pub fn module(&mut self) -> &mut Module {
        self.m
    }

    pub fn func(&self) -> FuncId {
        self.f
    }

    pub fn ty(&self, op: Operand) -> TensorType {
        self.m.operand_type(self.f, op).expect("operand has a type").clone()
    }

    pub fn node(&mut self, op: Op, inputs: &[Operand]) -> Operand {
        let kind = op.kind();
        match self.m.add_node(self.f, op, inputs.to_vec()) {
            Ok(id) => Operand::Node(id),
            Err(e) => panic!("cannot build {kind}: {e}"),
        }
    }

    pub fn node_typed(&mut self, op: Op, inputs: &[Operand], ty: TensorType) -> Operand {
        let kind = op.kind();
        match self.m.add_node_typed(self.f, op, inputs.to_vec(), Some(ty)) {
            Ok(id) => Operand::Node(id),
            Err(e) => panic!("cannot build {kind}: {e}"),
        }
    }

    pub fn conv(&mut self, x: Operand, filter: Operand, bias: Operand, kernel: usize, stride: usize, pad: usize) -> Operand {
        self.node(Op::Convolution { kernel, stride, pad }, &[x, filter, bias])
    }

    pub fn max_pool(&mut self, x: Operand, kernel: usize, stride: usize, pad: usize) -> Operand {
        self.node(Op::MaxPool { kernel, stride, pad }, &[x])
    }

    pub fn avg_pool(&mut self, x: Operand, kernel: usize, stride: usize, pad: usize) -> Operand {
        self.node(Op::AvgPool { kernel, stride, pad }, &[x])
    }

    pub fn fully_connected(&mut self, x: Operand, w: Operand, b: Operand) -> Operand {
        self.node(Op::FullyConnected, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::MatMul, &[a, b])
    }

    pub fn broadcast_add(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::BroadcastAdd, &[a, b])
    }

    pub fn add(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::Div, &[a, b])
    }

    pub fn max(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::Max, &[a, b])
    }

    pub fn min(&mut self, a: Operand, b: Operand) -> Operand {
        self.node(Op::Min, &[a, b])
    }

    pub fn relu(&mut self, x: Operand) -> Operand {
        self.node(Op::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Operand) -> Operand {
        self.node(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Operand) -> Operand {
        self.node(Op::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Operand) -> Operand {
        self.node(Op::SoftMax, &[x])
    }

    pub fn transpose(&mut self, x: Operand, perm: &[usize]) -> Operand {
        self.node(Op::Transpose { perm: perm.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Operand, dims: &[usize]) -> Operand {
        self.node(Op::Reshape { dims: dims.to_vec() }, &[x])
    }

    pub fn concat(&mut self, xs: &[Operand], axis: usize) -> Operand {
        self.node(Op::Concat { axis }, xs)
    }

    pub fn splat(&mut self, ty: TensorType, value: f32) -> Operand {
        self.node_typed(Op::Splat { value }, &[], ty)
    }

    pub fn batch_norm(
        &mut self,
        x: Operand,
        gamma: Operand,
        beta: Operand,
        mean: Operand,
        var: Operand,
        epsilon: f32,
    ) -> Operand {
        self.node(Op::BatchNormalization { epsilon }, &[x, gamma, beta, mean, var])
    }

    pub fn regression(&mut self, prediction: Operand, expected: Operand) -> Operand {
        self.node(Op::Regression, &[prediction, expected])
    }

    pub fn sgd(&mut self, weight: Operand, grad: Operand, learning_rate: f32) -> Operand {
        self.node(Op::SGD { learning_rate }, &[weight, grad])
    }

    pub fn save(&mut self, value: Operand, dest: StorageId) -> NodeId {
        match self.m.add_node_typed(self.f, Op::Save, vec![value, dest.into()], None) {
            Ok(id) => id,
            Err(e) => panic!("cannot build Save: {e}"),
        }
    }

    pub fn quantize(&mut self, x: Operand, ty: TensorType) -> Operand {
        self.node_typed(Op::Quantize, &[x], ty)
    }

    pub fn dequantize(&mut self, x: Operand) -> Operand {
        self.node(Op::Dequantize, &[x])
    }

    pub fn rescale(&mut self, x: Operand, ty: TensorType) -> Operand {
        self.node_typed(Op::RescaleQuantized, &[x], ty)
    }

    pub fn profile(&mut self, x: Operand, tensor: &str) -> NodeId {
        let op = Op::QuantizationProfile { tensor: tensor.to_string() };
        match self.m.add_node_typed(self.f, op, vec![x], None) {
            Ok(id) => id,
            Err(e) => panic!("cannot build QuantizationProfile: {e}"),
        }
    }

    /// Attach a Bool predicate to an existing node.
    pub fn predicate(&mut self, node: Operand, pred: Operand) {
        let id = node.node().expect("predicates attach to nodes");
        self.m.function_mut(self.f).node_mut(id).predicate = Some(pred);
    }
}
