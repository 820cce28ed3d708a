//! Forward and backward kernels on plain [`FeatureMap`]s.
//!
//! Every backward function takes the upstream gradient with the layout of the
//! forward output and returns gradients with the layout of the forward inputs.

use crate::error::{Error, Result};
use crate::tensor::parallel::map_items;
use crate::tensor::{FeatureMap, ParamTensor};

/// Output extent of a padded cross-correlation, or `None` if it is empty.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Ceil-mode pooling extent; the last window always starts inside the input.
pub fn pool_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    if input <= kernel {
        1
    } else {
        (input - kernel).div_ceil(stride) + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &FeatureMap, weight: &ParamTensor, bias: &ParamTensor, stride: usize, pad: usize) -> Result<Self> {
        let [_, c, h, w] = input.shape();
        let &[c_out, c_in, kh, kw] = weight.shape.as_slice() else {
            return Err(Error::shape("conv2d", format!("weight rank {}", weight.shape.len())));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", "only square kernels are supported"));
        }
        if c != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {c_in}"),
            ));
        }
        if bias.shape != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", bias.shape),
            ));
        }
        let (Some(oh), Some(ow)) = (conv_out_size(h, kh, stride, pad), conv_out_size(w, kh, stride, pad)) else {
            return Err(Error::shape(
                "conv2d",
                format!("non-positive output size for {h}x{w}, k={kh}, pad={pad}"),
            ));
        };
        Ok(Self {
            c_in,
            c_out,
            k: kh,
            stride,
            pad,
            h,
            w,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeometry, item: &[f64], cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c_in {
        let plane = &item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], item: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c_in {
        let plane = &mut item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)`, all row-major unless the
/// strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation with square kernels, zero padding and a per-channel bias.
pub fn conv2d(
    input: &FeatureMap,
    weight: &ParamTensor,
    bias: &ParamTensor,
    stride: usize,
    pad: usize,
) -> Result<FeatureMap> {
    let g = ConvGeometry::new(input, weight, bias, stride, pad)?;
    let batch = input.batch();
    let (rows, n) = (g.rows(), g.cols());
    let out_item = g.c_out * n;
    let items = map_items(batch, |b| {
        let x = input.item(b);
        let mut cols = Vec::new();
        let src: &[f64] = if g.is_pointwise() {
            x
        } else {
            cols.resize(rows * n, 0.0);
            im2col(&g, x, &mut cols);
            &cols
        };
        let mut dst = vec![0.0; out_item];
        for (co, row) in dst.chunks_mut(n).enumerate() {
            row.fill(bias.values[co]);
        }
        gemm(
            g.c_out,
            rows,
            n,
            &weight.values,
            (rows as isize, 1),
            src,
            (n as isize, 1),
            1.0,
            &mut dst,
        );
        dst
    });
    FeatureMap::from_vec([batch, g.c_out, g.oh, g.ow], items.concat())
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &FeatureMap,
    weight: &ParamTensor,
    bias: &ParamTensor,
    stride: usize,
    pad: usize,
    grad_out: &[f64],
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>)> {
    let g = ConvGeometry::new(input, weight, bias, stride, pad)?;
    let batch = input.batch();
    let (rows, n) = (g.rows(), g.cols());
    let out_item = g.c_out * n;
    if grad_out.len() != batch * out_item {
        return Err(Error::shape("conv2d backward", "upstream gradient length"));
    }
    let in_item = g.c_in * g.h * g.w;
    // Per-item partial weight gradients are summed afterwards in batch order.
    let items = map_items(batch, |b| {
        let gy = &grad_out[b * out_item..(b + 1) * out_item];
        let x = input.item(b);
        let mut cols = Vec::new();
        let src: &[f64] = if g.is_pointwise() {
            x
        } else {
            cols.resize(rows * n, 0.0);
            im2col(&g, x, &mut cols);
            &cols
        };
        let mut gw = vec![0.0; weight.len()];
        gemm(
            g.c_out,
            n,
            rows,
            gy,
            (n as isize, 1),
            src,
            (1, n as isize),
            0.0,
            &mut gw,
        );
        let mut gx = vec![0.0; in_item];
        if g.is_pointwise() {
            gemm(
                rows,
                g.c_out,
                n,
                &weight.values,
                (1, rows as isize),
                gy,
                (n as isize, 1),
                0.0,
                &mut gx,
            );
        } else {
            let mut grad_cols = vec![0.0; rows * n];
            gemm(
                rows,
                g.c_out,
                n,
                &weight.values,
                (1, rows as isize),
                gy,
                (n as isize, 1),
                0.0,
                &mut grad_cols,
            );
            col2im(&g, &grad_cols, &mut gx);
        }
        (gx, gw)
    });
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; g.c_out];
    let mut grad_in = Vec::with_capacity(batch * in_item);
    for (b, (gx, gw)) in items.into_iter().enumerate() {
        let gy = &grad_out[b * out_item..(b + 1) * out_item];
        for (co, row) in gy.chunks(n).enumerate() {
            grad_b[co] += row.iter().sum::<f64>();
        }
        for (acc, v) in grad_w.iter_mut().zip(&gw) {
            *acc += v;
        }
        grad_in.extend_from_slice(&gx);
    }
    Ok((FeatureMap::from_vec(input.shape(), grad_in)?, grad_w, grad_b))
}

/// Ceil-mode max pooling. Also returns, per output element, the flat input
/// index that won (first occurrence on ties).
pub fn maxpool2d(input: &FeatureMap, k: usize, stride: usize) -> Result<(FeatureMap, Vec<usize>)> {
    let [b, c, h, w] = input.shape();
    if h == 0 || w == 0 || k == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d", format!("empty spatial dims {h}x{w}")));
    }
    let (oh, ow) = (pool_out_size(h, k, stride), pool_out_size(w, k, stride));
    let mut out = FeatureMap::zeros([b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + k).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + k).min(w);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = base + y * w + x;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &[f64]) -> FeatureMap {
    let mut grad = FeatureMap::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &d) in argmax.iter().zip(grad_out) {
        g[i] += d;
    }
    grad
}

/// Source taps for one output coordinate of a 2x half-pixel-centred
/// interpolation: `(lower index, upper index, weight of upper)`.
fn upsample_taps(input: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * input)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling, align-corners-false convention.
pub fn bilinear_upsample2x(input: &FeatureMap) -> Result<FeatureMap> {
    let [b, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_upsample2x", "empty spatial dims"));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = FeatureMap::zeros([b, c, oh, ow]);
    let src = input.data();
    for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bottom = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample2x_backward(input_shape: [usize; 4], grad_out: &[f64]) -> FeatureMap {
    let [_, _, h, w] = input_shape;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = FeatureMap::zeros(input_shape);
    for (plane, dst) in grad.data_mut().chunks_mut(h * w).enumerate() {
        let g = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let d = g[oy * ow + ox];
                dst[y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += d * (1.0 - ly) * lx;
                dst[y1 * w + x0] += d * ly * (1.0 - lx);
                dst[y1 * w + x1] += d * ly * lx;
            }
        }
    }
    grad
}

/// Keeps the top-left `height x width` window of every plane.
pub fn crop(input: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    let [b, c, h, w] = input.shape();
    if height > h || width > w || height == 0 || width == 0 {
        return Err(Error::shape("crop", format!("{height}x{width} from {h}x{w}")));
    }
    let mut out = FeatureMap::zeros([b, c, height, width]);
    let src = input.data();
    for (plane, dst) in out.data_mut().chunks_mut(height * width).enumerate() {
        for y in 0..height {
            let s = plane * h * w + y * w;
            dst[y * width..(y + 1) * width].copy_from_slice(&src[s..s + width]);
        }
    }
    Ok(out)
}

pub fn crop_backward(input_shape: [usize; 4], height: usize, width: usize, grad_out: &[f64]) -> FeatureMap {
    let [_, _, h, w] = input_shape;
    let mut grad = FeatureMap::zeros(input_shape);
    for (plane, dst) in grad.data_mut().chunks_mut(h * w).enumerate() {
        for y in 0..height {
            let s = plane * height * width + y * width;
            dst[y * w..y * w + width].copy_from_slice(&grad_out[s..s + width]);
        }
    }
    grad
}

/// Per-channel spatial mean, shape `(b, c, 1, 1)`.
pub fn global_avg_pool(input: &FeatureMap) -> Result<FeatureMap> {
    let [b, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial dims"));
    }
    let inv = 1.0 / (h * w) as f64;
    let data = input
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    FeatureMap::from_vec([b, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &[f64]) -> FeatureMap {
    let [_, _, h, w] = input_shape;
    let inv = 1.0 / (h * w) as f64;
    let mut grad = FeatureMap::zeros(input_shape);
    for (dst, &g) in grad.data_mut().chunks_mut(h * w).zip(grad_out) {
        dst.fill(g * inv);
    }
    grad
}

/// Affine map of each flattened batch item; weight is `(c_out, c_in)`.
pub fn fully_connected(input: &FeatureMap, weight: &ParamTensor, bias: &ParamTensor) -> Result<FeatureMap> {
    let &[c_out, c_in] = weight.shape.as_slice() else {
        return Err(Error::shape(
            "fully_connected",
            format!("weight rank {}", weight.shape.len()),
        ));
    };
    let b = input.batch();
    let per_item = input.len() / b.max(1);
    if per_item != c_in {
        return Err(Error::shape(
            "fully_connected",
            format!("input length {per_item}, weight expects {c_in}"),
        ));
    }
    if bias.shape != [c_out] {
        return Err(Error::shape("fully_connected", format!("bias shape {:?}", bias.shape)));
    }
    let mut out = FeatureMap::zeros([b, c_out, 1, 1]);
    for (bi, dst) in out.data_mut().chunks_mut(c_out).enumerate() {
        let x = input.item(bi);
        for (o, d) in dst.iter_mut().enumerate() {
            let row = &weight.values[o * c_in..(o + 1) * c_in];
            *d = bias.values[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }
    Ok(out)
}

pub fn fully_connected_backward(
    input: &FeatureMap,
    weight: &ParamTensor,
    grad_out: &[f64],
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let (c_out, c_in) = (weight.shape[0], weight.shape[1]);
    let mut grad_in = FeatureMap::zeros(input.shape());
    let mut grad_w = vec![0.0; c_out * c_in];
    let mut grad_b = vec![0.0; c_out];
    for bi in 0..input.batch() {
        let x = input.item(bi);
        let gy = &grad_out[bi * c_out..(bi + 1) * c_out];
        let gx = &mut grad_in.data_mut()[bi * c_in..(bi + 1) * c_in];
        for (o, &g) in gy.iter().enumerate() {
            grad_b[o] += g;
            let row = &weight.values[o * c_in..(o + 1) * c_in];
            let grow = &mut grad_w[o * c_in..(o + 1) * c_in];
            for i in 0..c_in {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Largest double below one; keeps the logistic strictly inside (0, 1).
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_CEIL)
}

pub fn sigmoid(input: &FeatureMap) -> FeatureMap {
    map(input, sigmoid_scalar)
}

/// Backward from the forward *output*.
pub fn sigmoid_backward(output: &FeatureMap, grad_out: &[f64]) -> FeatureMap {
    zip_map(output, grad_out, |s, g| g * s * (1.0 - s))
}

pub fn relu(input: &FeatureMap) -> FeatureMap {
    map(input, |v| v.max(0.0))
}

pub fn relu_backward(input: &FeatureMap, grad_out: &[f64]) -> FeatureMap {
    zip_map(input, grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

fn map(input: &FeatureMap, f: impl Fn(f64) -> f64) -> FeatureMap {
    let data = input.data().iter().map(|&v| f(v)).collect();
    FeatureMap::from_vec(input.shape(), data).expect("same shape")
}

fn zip_map(input: &FeatureMap, other: &[f64], f: impl Fn(f64, f64) -> f64) -> FeatureMap {
    let data = input.data().iter().zip(other).map(|(&a, &b)| f(a, b)).collect();
    FeatureMap::from_vec(input.shape(), data).expect("same shape")
}

/// Channel-axis concatenation preserving input order.
pub fn concat_channels(inputs: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let [b, _, h, w] = first.shape();
    let mut total = 0;
    for m in inputs {
        let [mb, mc, mh, mw] = m.shape();
        if (mb, mh, mw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", m.shape(), first.shape()),
            ));
        }
        total += mc;
    }
    let mut data = Vec::with_capacity(b * total * h * w);
    for bi in 0..b {
        for m in inputs {
            data.extend_from_slice(m.item(bi));
        }
    }
    FeatureMap::from_vec([b, total, h, w], data)
}

/// Splits an output gradient back into per-input channel ranges.
pub fn concat_channels_backward(input_shapes: &[[usize; 4]], grad_out: &[f64]) -> Vec<FeatureMap> {
    let mut grads: Vec<FeatureMap> = input_shapes.iter().map(|&s| FeatureMap::zeros(s)).collect();
    let Some(&[b, _, h, w]) = input_shapes.first() else {
        return grads;
    };
    let plane = h * w;
    let mut offset = 0;
    for bi in 0..b {
        for g in grads.iter_mut() {
            let n = g.channels() * plane;
            g.data_mut()[bi * n..(bi + 1) * n].copy_from_slice(&grad_out[offset..offset + n]);
            offset += n;
        }
    }
    grads
}

/// `out(b,c,i,j) = input(b,c,i,j) * scale(b,c)`; `scale` is `(b, c, 1, 1)`,
/// or `(b, 1, 1, 1)` to apply one scalar per batch item.
pub fn broadcast_scale(input: &FeatureMap, scale: &FeatureMap) -> Result<FeatureMap> {
    let [b, c, h, w] = input.shape();
    let [sb, sc, sh, sw] = scale.shape();
    if sb != b || sh != 1 || sw != 1 || (sc != c && sc != 1) {
        return Err(Error::shape(
            "scale",
            format!("scale {:?} for input {:?}", scale.shape(), input.shape()),
        ));
    }
    let plane = h * w;
    let mut out = input.clone();
    out.clear_grad();
    for bi in 0..b {
        for ci in 0..c {
            let s = scale.data()[bi * sc + if sc == 1 { 0 } else { ci }];
            let start = (bi * c + ci) * plane;
            out.data_mut()[start..start + plane].iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(out)
}

pub fn broadcast_scale_backward(input: &FeatureMap, scale: &FeatureMap, grad_out: &[f64]) -> (FeatureMap, FeatureMap) {
    let [b, c, h, w] = input.shape();
    let sc = scale.channels();
    let plane = h * w;
    let mut grad_in = FeatureMap::zeros(input.shape());
    let mut grad_scale = FeatureMap::zeros(scale.shape());
    for bi in 0..b {
        for ci in 0..c {
            let si = bi * sc + if sc == 1 { 0 } else { ci };
            let s = scale.data()[si];
            let start = (bi * c + ci) * plane;
            let g = &grad_out[start..start + plane];
            let x = &input.data()[start..start + plane];
            grad_scale.data_mut()[si] += g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>();
            grad_in.data_mut()[start..start + plane]
                .iter_mut()
                .zip(g)
                .for_each(|(d, g)| *d = g * s);
        }
    }
    (grad_in, grad_scale)
}

/// Per-channel scaling, `scale` shaped `(b, c, 1, 1)`.
pub fn channel_scale(input: &FeatureMap, scale: &FeatureMap) -> Result<FeatureMap> {
    if scale.channels() != input.channels() {
        return Err(Error::shape(
            "channel_scale",
            format!("{} scales for {} channels", scale.channels(), input.channels()),
        ));
    }
    broadcast_scale(input, scale)
}

/// One scalar per batch item, `scale` shaped `(b, 1, 1, 1)`.
pub fn scalar_scale(input: &FeatureMap, scale: &FeatureMap) -> Result<FeatureMap> {
    if scale.channels() != 1 {
        return Err(Error::shape(
            "scalar_scale",
            format!("scale has {} channels", scale.channels()),
        ));
    }
    broadcast_scale(input, scale)
}

pub fn add(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(zip_map(a, b.data(), |x, y| x + y))
}
