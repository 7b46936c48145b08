//! Forward and backward kernels for the layer types of the U-Net.
//!
//! Weight layouts:
//! - convolution: `[out][in][k][k]`, valid (unpadded), stride 1
//! - transposed 2x2 convolution: `[in][out][2][2]`, stride 2

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::TensorGrid;
use crate::error::{Error, Result};
use crate::math;

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn conv_forward(
    input: &TensorGrid,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Result<TensorGrid> {
    let (cin, h, w) = input.shape();
    if weight.len() != cout * cin * k * k || bias.len() != cout {
        return Err(Error::shape(cout * cin * k * k, weight.len()));
    }
    if h < k || w < k {
        return Err(Error::param("input", "smaller than the convolution kernel"));
    }
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = TensorGrid::zeros(cout, ho, wo);
    for o in 0..cout {
        let plane = out.channel_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = input.channel(i);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..ho {
                        let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                        axpy(wv, row, &mut plane[y * wo..(y + 1) * wo]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns the gradient with respect to the input and accumulates weight and
/// bias gradients.
pub fn conv_backward(
    input: &TensorGrid,
    weight: &[f64],
    grad_out: &TensorGrid,
    k: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> TensorGrid {
    let (cin, h, w) = input.shape();
    let (cout, ho, wo) = grad_out.shape();
    let mut grad_in = TensorGrid::zeros(cin, h, w);
    for o in 0..cout {
        let g = grad_out.channel(o);
        grad_bias[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = input.channel(i);
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in 0..ho {
                        let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                        acc += dot(row, &g[y * wo..(y + 1) * wo]);
                    }
                    grad_weight[widx] += acc;
                    let wv = weight[widx];
                    if wv == 0.0 {
                        continue;
                    }
                    let gi = grad_in.channel_mut(i);
                    for y in 0..ho {
                        let dst = &mut gi[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                        axpy(wv, &g[y * wo..(y + 1) * wo], dst);
                    }
                }
            }
        }
    }
    grad_in
}

pub fn relu_forward(x: &mut TensorGrid) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(output: &TensorGrid, grad: &mut TensorGrid) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Also returns the flat argmax index of every
/// output cell.
pub fn maxpool_forward(input: &TensorGrid) -> Result<(TensorGrid, Vec<usize>)> {
    let (c, h, w) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::param("input", "pooling requires even extents"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = TensorGrid::zeros(c, ho, wo);
    let mut arg = vec![0usize; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    let v = input.data()[idx];
                    if v > best {
                        best = v;
                        bi = idx;
                    }
                }
                out.set(ch, y, x, best);
                arg[(ch * ho + y) * wo + x] = bi;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward(input_shape: (usize, usize, usize), argmax: &[usize], grad_out: &TensorGrid) -> TensorGrid {
    let (c, h, w) = input_shape;
    let mut g = TensorGrid::zeros(c, h, w);
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i] += v;
    }
    g
}

/// 2x2 transposed convolution with stride 2: doubles the spatial extent.
pub fn upconv_forward(input: &TensorGrid, weight: &[f64], bias: &[f64], cout: usize) -> Result<TensorGrid> {
    let (cin, h, w) = input.shape();
    if weight.len() != cin * cout * 4 || bias.len() != cout {
        return Err(Error::shape(cin * cout * 4, weight.len()));
    }
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = TensorGrid::zeros(cout, ho, wo);
    for o in 0..cout {
        let plane = out.channel_mut(o);
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = input.channel(i);
            let wb = (i * cout + o) * 4;
            let (w00, w01, w10, w11) = (weight[wb], weight[wb + 1], weight[wb + 2], weight[wb + 3]);
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    let base = 2 * y * wo + 2 * x;
                    plane[base] += w00 * v;
                    plane[base + 1] += w01 * v;
                    plane[base + wo] += w10 * v;
                    plane[base + wo + 1] += w11 * v;
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv_backward(
    input: &TensorGrid,
    weight: &[f64],
    grad_out: &TensorGrid,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> TensorGrid {
    let (cin, h, w) = input.shape();
    let (cout, _, wo) = grad_out.shape();
    let mut grad_in = TensorGrid::zeros(cin, h, w);
    for o in 0..cout {
        let g = grad_out.channel(o);
        grad_bias[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = input.channel(i);
            let wb = (i * cout + o) * 4;
            let (w00, w01, w10, w11) = (weight[wb], weight[wb + 1], weight[wb + 2], weight[wb + 3]);
            let mut acc = [0.0f64; 4];
            let gi = grad_in.channel_mut(i);
            for y in 0..h {
                for x in 0..w {
                    let base = 2 * y * wo + 2 * x;
                    let (g00, g01, g10, g11) = (g[base], g[base + 1], g[base + wo], g[base + wo + 1]);
                    let v = src[y * w + x];
                    acc[0] += v * g00;
                    acc[1] += v * g01;
                    acc[2] += v * g10;
                    acc[3] += v * g11;
                    gi[y * w + x] += w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11;
                }
            }
            for (t, a) in acc.iter().enumerate() {
                grad_weight[wb + t] += a;
            }
        }
    }
    grad_in
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat(a: &TensorGrid, b: &TensorGrid) -> Result<TensorGrid> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape((a.height(), a.width()), (b.height(), b.width())));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(TensorGrid::from_raw(a.channels() + b.channels(), a.height(), a.width(), data))
}

/// Split a concatenation gradient back into its two parts.
pub fn split(g: &TensorGrid, first_channels: usize) -> (TensorGrid, TensorGrid) {
    let (c, h, w) = g.shape();
    let p = h * w;
    let a = TensorGrid::from_raw(first_channels, h, w, g.data()[..first_channels * p].to_vec());
    let b = TensorGrid::from_raw(c - first_channels, h, w, g.data()[first_channels * p..].to_vec());
    (a, b)
}

/// Scatter a gradient of a center crop back to the uncropped extent.
pub fn uncrop(g: &TensorGrid, full: (usize, usize, usize)) -> TensorGrid {
    let (c, h, w) = full;
    let (oy, ox) = ((h - g.height()) / 2, (w - g.width()) / 2);
    let mut out = TensorGrid::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..g.height() {
            for x in 0..g.width() {
                out.set(ch, oy + y, ox + x, g.get(ch, y, x));
            }
        }
    }
    out
}

pub const BN_EPS: f64 = 1e-5;

/// Saved quantities of a batch-normalization forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: TensorGrid,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel normalization over the spatial extent using the statistics of
/// the current sample.
pub fn batchnorm_forward_train(x: &TensorGrid, gamma: &[f64], beta: &[f64]) -> (TensorGrid, BatchNormCache) {
    let (c, h, w) = x.shape();
    let n = (h * w) as f64;
    let mut y = TensorGrid::zeros(c, h, w);
    let mut xhat = TensorGrid::zeros(c, h, w);
    let (mut means, mut vars, mut invs) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    for ch in 0..c {
        let src = x.channel(ch);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / math::sqrt(var + BN_EPS);
        for (i, &v) in src.iter().enumerate() {
            let xh = (v - mean) * inv;
            xhat.channel_mut(ch)[i] = xh;
            y.channel_mut(ch)[i] = gamma[ch] * xh + beta[ch];
        }
        means[ch] = mean;
        vars[ch] = var;
        invs[ch] = inv;
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std: invs,
            mean: means,
            var: vars,
        },
    )
}

/// Normalization with fixed (running) statistics.
pub fn batchnorm_forward_eval(
    x: &TensorGrid,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> TensorGrid {
    let mut y = x.clone();
    for ch in 0..x.channels() {
        let inv = 1.0 / math::sqrt(var[ch] + BN_EPS);
        for v in y.channel_mut(ch) {
            *v = gamma[ch] * (*v - mean[ch]) * inv + beta[ch];
        }
    }
    y
}

pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    grad_out: &TensorGrid,
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> TensorGrid {
    let (c, h, w) = grad_out.shape();
    let n = (h * w) as f64;
    let mut gx = TensorGrid::zeros(c, h, w);
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let xh = cache.xhat.channel(ch);
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        grad_beta[ch] += sum_g;
        grad_gamma[ch] += sum_gx;
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        for (i, out) in gx.channel_mut(ch).iter_mut().enumerate() {
            *out = scale * (n * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    gx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + math::exp(-z))
    } else {
        let e = math::exp(z);
        e / (1.0 + e)
    }
}
