//! Typed tensors and the int8 affine quantization arithmetic.
//!
//! A quantized value `q` represents the real number `(q - offset) * scale`.
//! Quantization rounds half away from zero and saturates to `[-128, 127]`.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width substituted for a degenerate (`rmin == rmax`) profiled range.
pub const DEGENERATE_RANGE_WIDTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemKind {
    Float32,
    Int8Q,
    Int64Index,
    Bool,
}

impl ElemKind {
    pub fn size_bytes(self) -> usize {
        match self {
            ElemKind::Float32 => 4,
            ElemKind::Int8Q => 1,
            ElemKind::Int64Index => 8,
            ElemKind::Bool => 1,
        }
    }

    /// Short name used by the textual dumps.
    pub fn short_name(self) -> &'static str {
        match self {
            ElemKind::Float32 => "float",
            ElemKind::Int8Q => "i8",
            ElemKind::Int64Index => "index",
            ElemKind::Bool => "bool",
        }
    }

    pub fn from_short_name(s: &str) -> Option<ElemKind> {
        Some(match s {
            "float" => ElemKind::Float32,
            "i8" => ElemKind::Int8Q,
            "index" => ElemKind::Int64Index,
            "bool" => ElemKind::Bool,
            _ => return None,
        })
    }
}

/// Scale and offset of an `Int8Q` type. Compared bitwise.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub offset: i32,
}

impl QuantParams {
    pub fn new(scale: f32, offset: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Type(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(QuantParams { scale, offset })
    }

    /// Real value of a stored int8.
    #[inline]
    pub fn dequantize<F: Scalar>(&self, q: i8) -> F {
        F::from_f64(q as f64 - self.offset as f64) * F::from_f32(self.scale)
    }

    /// Nearest representable int8, saturating.
    #[inline]
    pub fn quantize<F: Scalar>(&self, x: F) -> i8 {
        let r = (x / F::from_f32(self.scale)).round();
        let v = r.as_f64() + self.offset as f64;
        v.clamp(-128.0, 127.0) as i8
    }

    /// Smallest and largest representable real values.
    pub fn real_range(&self) -> (f32, f32) {
        (self.dequantize::<f32>(-128), self.dequantize::<f32>(127))
    }
}

impl PartialEq for QuantParams {
    fn eq(&self, other: &Self) -> bool {
        self.scale.to_bits() == other.scale.to_bits() && self.offset == other.offset
    }
}

impl Eq for QuantParams {}

impl Hash for QuantParams {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.scale.to_bits().hash(state);
        self.offset.hash(state);
    }
}

/// Choose int8 parameters covering `[rmin, rmax]`, widened to include zero.
pub fn choose_quant_params(rmin: f32, rmax: f32) -> Result<QuantParams> {
    if !rmin.is_finite() || !rmax.is_finite() {
        return Err(Error::Profile(format!("non-finite range [{rmin}, {rmax}]")));
    }
    if rmin > rmax {
        return Err(Error::Profile(format!("inverted range [{rmin}, {rmax}]")));
    }
    let lo = (rmin as f64).min(0.0);
    let hi = (rmax as f64).max(0.0);
    let width = (hi - lo).max(DEGENERATE_RANGE_WIDTH);
    let scale = (width / 255.0) as f32;
    let offset = (-128.0 - lo / scale as f64).round();
    let offset = offset.clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    QuantParams::new(scale, offset)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorType {
    pub kind: ElemKind,
    pub dims: Vec<usize>,
    pub quant: Option<QuantParams>,
}

impl TensorType {
    pub fn new(kind: ElemKind, dims: &[usize], quant: Option<QuantParams>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Type(format!("invalid dims {dims:?}")));
        }
        if (kind == ElemKind::Int8Q) != quant.is_some() {
            return Err(Error::Type(format!(
                "scale/offset must be present exactly for Int8Q, got {kind:?}"
            )));
        }
        if let Some(q) = quant {
            QuantParams::new(q.scale, q.offset)?;
        }
        Ok(TensorType { kind, dims: dims.to_vec(), quant })
    }

    pub fn float(dims: &[usize]) -> Self {
        Self::new(ElemKind::Float32, dims, None).expect("valid float dims")
    }

    pub fn int8q(dims: &[usize], scale: f32, offset: i32) -> Self {
        Self::new(ElemKind::Int8Q, dims, Some(QuantParams { scale, offset })).expect("valid int8 type")
    }

    pub fn with_params(dims: &[usize], params: QuantParams) -> Self {
        Self::int8q(dims, params.scale, params.offset)
    }

    pub fn index(dims: &[usize]) -> Self {
        Self::new(ElemKind::Int64Index, dims, None).expect("valid index dims")
    }

    pub fn boolean(dims: &[usize]) -> Self {
        Self::new(ElemKind::Bool, dims, None).expect("valid bool dims")
    }

    pub fn num_elements(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn size_bytes(&self) -> usize {
        self.num_elements() * self.kind.size_bytes()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_float(&self) -> bool {
        self.kind == ElemKind::Float32
    }

    pub fn is_quantized(&self) -> bool {
        self.kind == ElemKind::Int8Q
    }

    /// Same element kind and parameters, new shape.
    pub fn with_dims(&self, dims: &[usize]) -> Self {
        TensorType { kind: self.kind, dims: dims.to_vec(), quant: self.quant }
    }

    pub fn params(&self) -> Result<QuantParams> {
        self.quant
            .ok_or_else(|| Error::Type(format!("{self} is not a quantized type")))
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.short_name())?;
        if let Some(q) = self.quant {
            write!(f, "[{:?},{}]", q.scale, q.offset)?;
        }
        f.write_str("<")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(" x ")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str(">")
    }
}

impl std::str::FromStr for TensorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Type(format!("malformed type `{s}`"));
        let s = s.trim();
        let lt = s.find('<').ok_or_else(bad)?;
        if !s.ends_with('>') {
            return Err(bad());
        }
        let head = &s[..lt];
        let (kind_str, quant) = match head.find('[') {
            Some(b) => {
                let inner = head[b..].strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
                let (sc, off) = inner.split_once(',').ok_or_else(bad)?;
                let scale: f32 = sc.trim().parse().map_err(|_| bad())?;
                let offset: i32 = off.trim().parse().map_err(|_| bad())?;
                (&head[..b], Some(QuantParams { scale, offset }))
            }
            None => (head, None),
        };
        let kind = ElemKind::from_short_name(kind_str.trim()).ok_or_else(bad)?;
        let dims = s[lt + 1..s.len() - 1]
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        TensorType::new(kind, &dims, quant)
    }
}

/// Row-major strides of a shape.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

pub fn flat_index(dims: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), idx.len());
    let mut flat = 0;
    for (d, i) in dims.iter().zip(idx) {
        debug_assert!(i < d);
        flat = flat * d + i;
    }
    flat
}

pub fn unravel_index(dims: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        idx[k] = flat % dims[k];
        flat /= dims[k];
    }
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> ElemKind {
        match self {
            TensorData::F32(_) => ElemKind::Float32,
            TensorData::I8(_) => ElemKind::Int8Q,
            TensorData::I64(_) => ElemKind::Int64Index,
            TensorData::Bool(_) => ElemKind::Bool,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    ty: TensorType,
    data: TensorData,
}

impl Tensor {
    pub fn new(ty: TensorType, data: TensorData) -> Result<Self> {
        if data.kind() != ty.kind {
            return Err(Error::Type(format!("data kind {:?} does not match {ty}", data.kind())));
        }
        if data.len() != ty.num_elements() {
            return Err(Error::Type(format!(
                "data length {} does not match {ty}",
                data.len()
            )));
        }
        Ok(Tensor { ty, data })
    }

    pub fn zeros(ty: TensorType) -> Self {
        let n = ty.num_elements();
        let data = match ty.kind {
            ElemKind::Float32 => TensorData::F32(vec![0.0; n]),
            ElemKind::Int8Q => TensorData::I8(vec![0; n]),
            ElemKind::Int64Index => TensorData::I64(vec![0; n]),
            ElemKind::Bool => TensorData::Bool(vec![false; n]),
        };
        Tensor { ty, data }
    }

    pub fn from_f32(dims: &[usize], values: Vec<f32>) -> Result<Self> {
        Tensor::new(TensorType::new(ElemKind::Float32, dims, None)?, TensorData::F32(values))
    }

    pub fn from_i8(ty: TensorType, values: Vec<i8>) -> Result<Self> {
        Tensor::new(ty, TensorData::I8(values))
    }

    pub fn from_bool(dims: &[usize], values: Vec<bool>) -> Result<Self> {
        Tensor::new(TensorType::new(ElemKind::Bool, dims, None)?, TensorData::Bool(values))
    }

    pub fn ty(&self) -> &TensorType {
        &self.ty
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn dims(&self) -> &[usize] {
        &self.ty.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<&[bool]> {
        match &self.data {
            TensorData::Bool(v) => Some(v),
            _ => None,
        }
    }

    /// Element at a multi-index, widened to f64 (dequantized for Int8Q).
    pub fn get_f64(&self, idx: &[usize]) -> f64 {
        let i = flat_index(&self.ty.dims, idx);
        self.real_at(i)
    }

    /// Real value of the element at a flat index.
    pub fn real_at(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[i] as f64,
            TensorData::I8(v) => self.ty.quant.expect("int8 tensor carries params").dequantize::<f64>(v[i]),
            TensorData::I64(v) => v[i] as f64,
            TensorData::Bool(v) => v[i] as u8 as f64,
        }
    }

    /// Real values of every element; quantized tensors are dequantized.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.real_at(i)).collect()
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let ty = self.ty.with_dims(dims);
        if ty.num_elements() != self.len() {
            return Err(Error::Type(format!("cannot reshape {} to {dims:?}", self.ty)));
        }
        self.ty = ty;
        Ok(self)
    }

    /// Quantize a float tensor into the given Int8Q type.
    pub fn quantize(&self, ty: &TensorType) -> Result<Tensor> {
        let params = ty.params()?;
        let src = self
            .as_f32()
            .ok_or_else(|| Error::Type(format!("cannot quantize {}", self.ty)))?;
        let q = src.iter().map(|&x| params.quantize(x)).collect();
        Tensor::new(ty.with_dims(&self.ty.dims), TensorData::I8(q))
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        let params = self.ty.params()?;
        let src = self.as_i8().expect("quantized tensor holds i8");
        let v = src.iter().map(|&q| params.dequantize::<f32>(q)).collect();
        Tensor::from_f32(&self.ty.dims, v)
    }

    /// Little-endian raw element bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.ty.size_bytes());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Bool(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
        out
    }

    pub fn from_le_bytes(ty: TensorType, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != ty.size_bytes() {
            return Err(Error::Type(format!(
                "{} bytes cannot hold {ty} ({} bytes)",
                bytes.len(),
                ty.size_bytes()
            )));
        }
        let data = match ty.kind {
            ElemKind::Float32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ElemKind::Int8Q => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            ElemKind::Int64Index => TensorData::I64(
                bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            ElemKind::Bool => {
                if let Some(b) = bytes.iter().find(|&&b| b > 1) {
                    return Err(Error::Type(format!("bool byte out of range: {b}")));
                }
                TensorData::Bool(bytes.iter().map(|&b| b == 1).collect())
            }
        };
        Tensor::new(ty, data)
    }
}

/// Dequantize one stored value under an `Int8Q` type.
pub fn dequantize_value(q: i8, ty: &TensorType) -> Result<f32> {
    Ok(ty.params()?.dequantize::<f32>(q))
}

/// Quantize one real value under an `Int8Q` type.
pub fn quantize_value(f: f32, ty: &TensorType) -> Result<i8> {
    Ok(ty.params()?.quantize(f))
}
