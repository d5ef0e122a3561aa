//! Reference kernels shared by the graph evaluator and the interpreter.
//!
//! Float kernels are generic over [`Scalar`]. Int8 kernels accumulate products
//! in `i32`, then convert the accumulator to real units and requantize into
//! the output parameters. Elementwise kernels are plain loops over the scalar
//! functions in this module, so a fused traversal that calls the same scalar
//! functions produces bit-identical results.

use crate::scalar::Scalar;
use crate::tensor::QuantParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl BinaryOp {
    #[inline]
    pub fn apply<F: Scalar>(self, a: F, b: F) -> F {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => a.max(b),
            BinaryOp::Min => a.min(b),
        }
    }

    /// Int8 version: compares raw values when all three types agree,
    /// otherwise computes in real units and requantizes.
    #[inline]
    pub fn apply_q(self, a: i8, pa: QuantParams, b: i8, pb: QuantParams, po: QuantParams) -> i8 {
        match self {
            BinaryOp::Max | BinaryOp::Min if pa == pb => {
                let raw = if self == BinaryOp::Max { a.max(b) } else { a.min(b) };
                if pa == po {
                    raw
                } else {
                    rescale_value(raw, pa, po)
                }
            }
            _ => po.quantize(self.apply::<f32>(pa.dequantize(a), pb.dequantize(b))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
}

impl UnaryOp {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            UnaryOp::Relu => x.max(F::zero()),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => F::one() / (F::one() + (-x).exp()),
        }
    }

    #[inline]
    pub fn apply_q(self, x: i8, px: QuantParams, po: QuantParams) -> i8 {
        po.quantize(self.apply::<f32>(px.dequantize(x)))
    }
}

#[inline]
pub fn rescale_value(q: i8, from: QuantParams, to: QuantParams) -> i8 {
    to.quantize(from.dequantize::<f32>(q))
}

pub fn binary<F: Scalar>(op: BinaryOp, a: &[F], b: &[F], out: &mut [F]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = op.apply(x, y);
    }
}

pub fn binary_q(op: BinaryOp, a: &[i8], pa: QuantParams, b: &[i8], pb: QuantParams, out: &mut [i8], po: QuantParams) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = op.apply_q(x, pa, y, pb, po);
    }
}

pub fn unary<F: Scalar>(op: UnaryOp, x: &[F], out: &mut [F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = op.apply(v);
    }
}

pub fn unary_q(op: UnaryOp, x: &[i8], px: QuantParams, out: &mut [i8], po: QuantParams) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = op.apply_q(v, px, po);
    }
}

pub fn quantize<F: Scalar>(x: &[F], p: QuantParams, out: &mut [i8]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = p.quantize(v);
    }
}

pub fn dequantize<F: Scalar>(x: &[i8], p: QuantParams, out: &mut [F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = p.dequantize(v);
    }
}

pub fn rescale(x: &[i8], from: QuantParams, out: &mut [i8], to: QuantParams) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = rescale_value(v, from, to);
    }
}

/// `[n,k] x [k,m]`, accumulating each output in ascending `k`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for j in 0..m {
            let mut acc = F::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_q(
    a: &[i8],
    pa: QuantParams,
    b: &[i8],
    pb: QuantParams,
    out: &mut [i8],
    po: QuantParams,
    n: usize,
    k: usize,
    m: usize,
) {
    let real = pa.scale * pb.scale;
    for i in 0..n {
        for j in 0..m {
            let mut acc: i32 = 0;
            for p in 0..k {
                let x = (a[i * k + p] as i32).saturating_sub(pa.offset);
                let y = (b[p * m + j] as i32).saturating_sub(pb.offset);
                acc = acc.wrapping_add(x * y);
            }
            out[i * m + j] = po.quantize(acc as f32 * real);
        }
    }
}

/// `out[i] = a[i] + b[i mod len(b)]`; `b`'s shape is a suffix of `a`'s.
pub fn broadcast_add<F: Scalar>(a: &[F], b: &[F], out: &mut [F]) {
    let w = b.len();
    for (i, (o, &x)) in out.iter_mut().zip(a).enumerate() {
        *o = x + b[i % w];
    }
}

pub fn broadcast_add_q(a: &[i8], pa: QuantParams, b: &[i8], pb: QuantParams, out: &mut [i8], po: QuantParams) {
    let w = b.len();
    for (i, (o, &x)) in out.iter_mut().zip(a).enumerate() {
        *o = BinaryOp::Add.apply_q(x, pa, b[i % w], pb, po);
    }
}

/// Geometry of an NHWC window operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(in_dims: &[usize], kernel: usize, stride: usize, pad: usize) -> Self {
        let out = |s: usize| (s + 2 * pad - kernel) / stride + 1;
        Window {
            n: in_dims[0],
            h: in_dims[1],
            w: in_dims[2],
            c: in_dims[3],
            kernel,
            stride,
            pad,
            out_h: out(in_dims[1]),
            out_w: out(in_dims[2]),
        }
    }

    /// Input coordinates covered by output `(oy, ox)`, skipping padding.
    #[inline]
    fn taps(&self, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let k = self.kernel;
        (0..k).flat_map(move |ky| (0..k).map(move |kx| (ky, kx))).filter_map(move |(ky, kx)| {
            let y = (oy * self.stride + ky).checked_sub(self.pad)?;
            let x = (ox * self.stride + kx).checked_sub(self.pad)?;
            (y < self.h && x < self.w).then_some((ky, kx, y, x))
        })
    }
}

/// Direct NHWC convolution with a `[out, k, k, in]` filter.
pub fn conv2d<F: Scalar>(x: &[F], filter: &[F], bias: &[F], out: &mut [F], win: Window, out_c: usize) {
    let (k, c) = (win.kernel, win.c);
    for b in 0..win.n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let obase = ((b * win.out_h + oy) * win.out_w + ox) * out_c;
                for o in 0..out_c {
                    let mut acc = F::zero();
                    for (ky, kx, y, xx) in win.taps(oy, ox) {
                        let xbase = ((b * win.h + y) * win.w + xx) * c;
                        let fbase = ((o * k + ky) * k + kx) * c;
                        for ci in 0..c {
                            acc = acc + x[xbase + ci] * filter[fbase + ci];
                        }
                    }
                    out[obase + o] = acc + bias[o];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_q(
    x: &[i8],
    px: QuantParams,
    filter: &[i8],
    pf: QuantParams,
    bias: &[i8],
    pb: QuantParams,
    out: &mut [i8],
    po: QuantParams,
    win: Window,
    out_c: usize,
) {
    let (k, c) = (win.kernel, win.c);
    let real = px.scale * pf.scale;
    for b in 0..win.n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let obase = ((b * win.out_h + oy) * win.out_w + ox) * out_c;
                for o in 0..out_c {
                    let mut acc: i32 = 0;
                    for (ky, kx, y, xx) in win.taps(oy, ox) {
                        let xbase = ((b * win.h + y) * win.w + xx) * c;
                        let fbase = ((o * k + ky) * k + kx) * c;
                        for ci in 0..c {
                            let a = (x[xbase + ci] as i32).saturating_sub(px.offset);
                            let w = (filter[fbase + ci] as i32).saturating_sub(pf.offset);
                            acc = acc.wrapping_add(a * w);
                        }
                    }
                    let v = acc as f32 * real + pb.dequantize::<f32>(bias[o]);
                    out[obase + o] = po.quantize(v);
                }
            }
        }
    }
}

/// Max over each window; padded positions are ignored.
pub fn max_pool<F: Scalar>(x: &[F], out: &mut [F], win: Window) {
    pool(x, out, win, |taps| taps.fold(F::neg_infinity(), F::max))
}

/// Average over each window; padded positions count as zeros.
pub fn avg_pool<F: Scalar>(x: &[F], out: &mut [F], win: Window) {
    let area = F::from_f64((win.kernel * win.kernel) as f64);
    pool(x, out, win, |taps| taps.fold(F::zero(), |a, v| a + v) / area)
}

fn pool<T: Copy, R>(x: &[T], out: &mut [T], win: Window, reduce: R)
where
    R: Fn(&mut dyn Iterator<Item = T>) -> T,
{
    let c = win.c;
    for b in 0..win.n {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let obase = ((b * win.out_h + oy) * win.out_w + ox) * c;
                for ch in 0..c {
                    let mut it = win.taps(oy, ox).map(|(_, _, y, xx)| x[((b * win.h + y) * win.w + xx) * c + ch]);
                    out[obase + ch] = reduce(&mut it);
                }
            }
        }
    }
}

pub fn max_pool_q(x: &[i8], px: QuantParams, out: &mut [i8], po: QuantParams, win: Window) {
    pool(x, out, win, |taps| taps.fold(i8::MIN, i8::max));
    if px != po {
        for v in out.iter_mut() {
            *v = rescale_value(*v, px, po);
        }
    }
}

pub fn avg_pool_q(x: &[i8], px: QuantParams, out: &mut [i8], po: QuantParams, win: Window) {
    let mut real = vec![0f32; x.len()];
    dequantize(x, px, &mut real);
    let mut tmp = vec![0f32; out.len()];
    avg_pool(&real, &mut tmp, win);
    quantize(&tmp, po, out);
}

/// Softmax over the innermost dimension.
pub fn softmax<F: Scalar>(x: &[F], out: &mut [F], row: usize) {
    for (xs, os) in x.chunks(row).zip(out.chunks_mut(row)) {
        let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - m).exp();
            sum = sum + *o;
        }
        for o in os.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// `out.dims[i] = in.dims[perm[i]]`.
pub fn transpose<T: Copy>(x: &[T], dims: &[usize], perm: &[usize], out: &mut [T]) {
    let in_strides = crate::tensor::strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; out_dims.len()];
    for o in out.iter_mut() {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        *o = x[src];
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < out_dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Concatenate along `axis`; `parts` carry each input's dims.
pub fn concat<T: Copy>(parts: &[(&[T], &[usize])], axis: usize, out: &mut [T]) {
    let outer: usize = parts[0].1[..axis].iter().product();
    let mut pos = 0;
    for o in 0..outer {
        for (data, dims) in parts {
            let chunk: usize = dims[axis..].iter().product();
            out[pos..pos + chunk].copy_from_slice(&data[o * chunk..(o + 1) * chunk]);
            pos += chunk;
        }
    }
}

/// Per-channel affine form of inference batch normalization:
/// `scale = gamma / sqrt(var + eps)`, `shift = beta - mean * scale`.
pub fn batchnorm_affine<F: Scalar>(gamma: &[F], beta: &[F], mean: &[F], var: &[F], epsilon: F) -> (Vec<F>, Vec<F>) {
    let scale: Vec<F> = gamma.iter().zip(var).map(|(&g, &v)| g / (v + epsilon).sqrt()).collect();
    let shift = beta.iter().zip(mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
    (scale, shift)
}

/// `out = x * scale[c] + shift[c]` over the innermost (channel) dimension.
pub fn batchnorm<F: Scalar>(x: &[F], scale: &[F], shift: &[F], out: &mut [F]) {
    let c = scale.len();
    for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = v * scale[i % c] + shift[i % c];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let x = vec![3.0f32; 5];
        let mut out = vec![0.0; 5];
        softmax(&x, &mut out, 5);
        for v in &out {
            assert!((v - 0.2).abs() < 1e-6);
        }
        assert!((out.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_window_max_pool() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let mut out = [0.0f32];
        max_pool(&x, &mut out, Window::new(&[1, 2, 2, 1], 2, 2, 0));
        assert_eq!(out, [4.0]);
    }

    #[test]
    fn identity_matmul() {
        let id = [1.0f32, 0.0, 0.0, 1.0];
        let x = [1.5f32, -2.0, 3.0, 0.25, 7.0, 8.0];
        let mut out = [0.0f32; 6];
        matmul(&id, &x, &mut out, 2, 2, 3);
        assert_eq!(out, x);
    }

    #[test]
    fn transpose_2d() {
        let x = [1, 2, 3, 4, 5, 6];
        let mut out = [0; 6];
        transpose(&x, &[2, 3], &[1, 0], &mut out);
        assert_eq!(out, [1, 4, 2, 5, 3, 6]);
    }

    #[test]
    fn concat_inner_axis() {
        let a = [1, 2, 3, 4];
        let b = [9, 8];
        let mut out = [0; 6];
        concat(&[(&a[..], &[2, 2][..]), (&b[..], &[2, 1][..])], 1, &mut out);
        assert_eq!(out, [1, 2, 9, 3, 4, 8]);
    }

    #[test]
    fn quantized_max_same_params_is_raw() {
        let p = QuantParams { scale: 0.1, offset: 3 };
        assert_eq!(BinaryOp::Max.apply_q(-5, p, 7, p, p), 7);
        assert_eq!(BinaryOp::Min.apply_q(-5, p, 7, p, p), -5);
    }

    #[test]
    fn relu_matches_max_with_zero() {
        for &v in &[-1.5f32, -0.0, 0.0, 2.0, f32::MIN_POSITIVE] {
            assert_eq!(UnaryOp::Relu.apply(v).to_bits(), BinaryOp::Max.apply(v, 0.0).to_bits());
        }
    }
}
