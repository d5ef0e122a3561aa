//! A two-level graph compiler and runtime for neural networks.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod format;
pub mod graph;
pub mod interp;
pub mod kernels;
pub mod lowering;
pub mod lowir;
pub mod opt;
pub mod pipeline;
pub mod quantize;
pub mod runtime;
pub mod scalar;
pub mod tensor;

pub use autodiff::{differentiate, gradient_check, Differentiated, GradConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_values, Bindings, Evaluation};
pub use lowering::{lower, LoweringOptions, Mode};
pub use graph::{FuncId, Function, Module, Node, NodeId, NodeKind, Op, Operand, StorageId};
pub use opt::{optimize, PassId, DEFAULT_PIPELINE};
pub use pipeline::{compile_function, CompileOptions};
pub use runtime::{DeviceConfig, HostManager};
pub use quantize::{instrument, quantize_function, run_profile, QuantizationSchema, RangeProfile};
pub use scalar::Scalar;
pub use tensor::{choose_quant_params, ElemKind, QuantParams, Tensor, TensorType};

pub type Value32 = eval::Value<f32>;
pub type Value64 = eval::Value<f64>;
pub type Evaluation32 = eval::Evaluation<f32>;
pub type Evaluation64 = eval::Evaluation<f64>;
