//! Forward and backward kernels. Every backward takes the cached forward
//! quantities explicitly; nothing here owns parameters.

use super::{gemm, FeatureMap};

/// Unfolds 3×3 same-padded patches into a `(cin·9) × (h·w)` matrix.
fn im2col3(input: &FeatureMap, cols: &mut [f64]) {
    let (cin, h, w) = input.shape();
    let hw = h * w;
    debug_assert_eq!(cols.len(), cin * 9 * hw);
    for ci in 0..cin {
        let src = input.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => out.copy_from_slice(src_row),
                        _ => {
                            out[..w - 1].copy_from_slice(&src_row[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the input grid.
fn col2im3(cols: &[f64], cin: usize, h: usize, w: usize) -> FeatureMap {
    let hw = h * w;
    let mut out = FeatureMap::zeros(cin, h, w);
    let data = out.data_mut();
    for ci in 0..cin {
        let dst = &mut data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let g = &row[y * w..(y + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&g[1..]).for_each(|(a, b)| *a += b),
                        1 => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        _ => d[1..].iter_mut().zip(&g[..w - 1]).for_each(|(a, b)| *a += b),
                    }
                }
            }
        }
    }
    out
}

/// 3×3 stride-1 same-padded convolution followed by ReLU.
/// `weight` is `[cout][cin][3][3]`.
pub fn conv3x3_relu(input: &FeatureMap, weight: &[f64], bias: &[f64], cout: usize) -> FeatureMap {
    let (cin, h, w) = input.shape();
    let hw = h * w;
    let k = cin * 9;
    debug_assert_eq!(weight.len(), cout * k);
    let mut cols = vec![0.0; k * hw];
    im2col3(input, &mut cols);
    let mut out = vec![0.0; cout * hw];
    for (co, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, k, hw, weight, (k, 1), &cols, (hw, 1), 1.0, &mut out, (hw, 1));
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    FeatureMap::new(cout, h, w, out)
}

pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<FeatureMap>,
}

/// Backward of [`conv3x3_relu`]. `output` is the post-ReLU forward output;
/// `d_output` the gradient with respect to it.
pub fn conv3x3_relu_backward(
    input: &FeatureMap,
    output: &FeatureMap,
    d_output: &FeatureMap,
    weight: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let (cin, h, w) = input.shape();
    let cout = output.channels();
    let hw = h * w;
    let k = cin * 9;
    let dz: Vec<f64> = d_output
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
        .collect();
    let bias: Vec<f64> = dz.chunks_exact(hw).map(|r| r.iter().sum()).collect();
    let mut cols = vec![0.0; k * hw];
    im2col3(input, &mut cols);
    let mut dw = vec![0.0; cout * k];
    // dW = dZ · colsᵀ
    gemm(cout, hw, k, &dz, (hw, 1), &cols, (1, hw), 0.0, &mut dw, (k, 1));
    let input_grad = need_input_grad.then(|| {
        // dcols = Wᵀ · dZ, reusing the cols buffer
        gemm(k, cout, hw, weight, (1, k), &dz, (hw, 1), 0.0, &mut cols, (hw, 1));
        col2im3(&cols, cin, h, w)
    });
    ConvGrads {
        weight: dw,
        bias,
        input: input_grad,
    }
}

/// 2×2 stride-2 max pooling (floor on odd sizes). Returns the flat input
/// index of each selected maximum; ties go to the first in scan order.
pub fn max_pool2(input: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let data = input.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = base + 2 * y * w + 2 * x;
                let mut best = data[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if data[i] > best {
                        best = data[i];
                        best_i = i;
                    }
                }
                out.push(best);
                idx.push(best_i as u32);
            }
        }
    }
    (FeatureMap::new(c, oh, ow, out), idx)
}

pub fn max_pool2_backward(d_output: &FeatureMap, argmax: &[u32], input_shape: (usize, usize, usize)) -> FeatureMap {
    let (c, h, w) = input_shape;
    let mut d = FeatureMap::zeros(c, h, w);
    let dd = d.data_mut();
    for (&i, &g) in argmax.iter().zip(d_output.data()) {
        dd[i as usize] += g;
    }
    d
}

/// Pointwise (1×1) convolution: `out = W · x + b` with `W` as `cout × cin`.
pub fn conv1x1(input: &FeatureMap, weight: &[f64], bias: &[f64], cout: usize) -> FeatureMap {
    let (cin, h, w) = input.shape();
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for (co, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, cin, hw, weight, (cin, 1), input.data(), (hw, 1), 1.0, &mut out, (hw, 1));
    FeatureMap::new(cout, h, w, out)
}

/// Backward of [`conv1x1`] given the gradient of its (pre-activation) output.
pub fn conv1x1_backward(input: &FeatureMap, d_output: &FeatureMap, weight: &[f64]) -> ConvGrads {
    let (cin, h, w) = input.shape();
    let cout = d_output.channels();
    let hw = h * w;
    let bias: Vec<f64> = d_output.data().chunks_exact(hw).map(|r| r.iter().sum()).collect();
    let mut dw = vec![0.0; cout * cin];
    gemm(cout, hw, cin, d_output.data(), (hw, 1), input.data(), (1, hw), 0.0, &mut dw, (cin, 1));
    let mut dx = vec![0.0; cin * hw];
    gemm(cin, cout, hw, weight, (1, cin), d_output.data(), (hw, 1), 0.0, &mut dx, (hw, 1));
    ConvGrads {
        weight: dw,
        bias,
        input: Some(FeatureMap::new(cin, h, w, dx)),
    }
}

/// Fully connected layer `y = W x + b`, `W` as `out × in`.
pub fn dense(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Returns `(dW, db, dx)` for [`dense`].
pub fn dense_backward(x: &[f64], dy: &[f64], weight: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_in = x.len();
    let mut dw = Vec::with_capacity(dy.len() * n_in);
    for &g in dy {
        dw.extend(x.iter().map(|v| g * v));
    }
    let mut dx = vec![0.0; n_in];
    for (o, &g) in dy.iter().enumerate() {
        for (d, w) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
            *d += g * w;
        }
    }
    (dw, dy.to_vec(), dx)
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const BN_EPS: f64 = 1e-3;

/// Cached quantities of a training-mode batch normalization.
pub struct BatchNormCache {
    pub normalized: Vec<FeatureMap>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance per channel.
    pub var: Vec<f64>,
}

/// Normalizes each channel with statistics over batch and spatial positions.
pub fn batch_norm_train(xs: &[FeatureMap], gamma: &[f64], beta: &[f64]) -> (Vec<FeatureMap>, BatchNormCache) {
    let (c, h, w) = xs[0].shape();
    let p = h * w;
    let n = (xs.len() * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let m = xs.iter().map(|x| x.channel(ch).iter().sum::<f64>()).sum::<f64>() / n;
        let v = xs
            .iter()
            .map(|x| x.channel(ch).iter().map(|v| (v - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        mean[ch] = m;
        var[ch] = v;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = Vec::with_capacity(xs.len());
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xh = Vec::with_capacity(c * p);
        let mut y = Vec::with_capacity(c * p);
        for ch in 0..c {
            for &v in x.channel(ch) {
                let z = (v - mean[ch]) * inv_std[ch];
                xh.push(z);
                y.push(gamma[ch] * z + beta[ch]);
            }
        }
        normalized.push(FeatureMap::new(c, h, w, xh));
        ys.push(FeatureMap::new(c, h, w, y));
    }
    (
        ys,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

pub fn batch_norm_eval(x: &FeatureMap, gamma: &[f64], beta: &[f64], running_mean: &[f64], running_var: &[f64]) -> FeatureMap {
    let (c, h, w) = x.shape();
    let mut y = Vec::with_capacity(x.data().len());
    for ch in 0..c {
        let s = gamma[ch] / (running_var[ch] + BN_EPS).sqrt();
        let m = running_mean[ch];
        y.extend(x.channel(ch).iter().map(|v| (v - m) * s + beta[ch]));
    }
    FeatureMap::new(c, h, w, y)
}

/// Returns `(dxs, dgamma, dbeta)`.
pub fn batch_norm_backward(dys: &[FeatureMap], cache: &BatchNormCache, gamma: &[f64]) -> (Vec<FeatureMap>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = dys[0].shape();
    let n = (dys.len() * h * w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (dy, xh) in dys.iter().zip(&cache.normalized) {
        for ch in 0..c {
            for (g, z) in dy.channel(ch).iter().zip(xh.channel(ch)) {
                dgamma[ch] += g * z;
                dbeta[ch] += g;
            }
        }
    }
    let dxs = dys
        .iter()
        .zip(&cache.normalized)
        .map(|(dy, xh)| {
            let mut dx = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / n;
                dx.extend(
                    dy.channel(ch)
                        .iter()
                        .zip(xh.channel(ch))
                        .map(|(g, z)| k * (n * g - dbeta[ch] - z * dgamma[ch])),
                );
            }
            FeatureMap::new(c, h, w, dx)
        })
        .collect();
    (dxs, dgamma, dbeta)
}

/// Gate-weighted global average pooling rescaled by the pooled gate:
/// `out[c] = mean_p(f[c,p]·g[p]) / mean_p(g[p])`.
pub fn attention_pool(features: &FeatureMap, gate: &[f64]) -> Vec<f64> {
    let p = features.plane_len();
    debug_assert_eq!(gate.len(), p);
    let denom = gate.iter().sum::<f64>() / p as f64;
    (0..features.channels())
        .map(|c| {
            let num = features.channel(c).iter().zip(gate).map(|(f, g)| f * g).sum::<f64>() / p as f64;
            num / denom
        })
        .collect()
}

/// Returns `(d_features, d_gate)` for [`attention_pool`].
pub fn attention_pool_backward(features: &FeatureMap, gate: &[f64], pooled: &[f64], d_pooled: &[f64]) -> (FeatureMap, Vec<f64>) {
    let (c, h, w) = features.shape();
    let p = h * w;
    let sum_gate: f64 = gate.iter().sum();
    let mut df = Vec::with_capacity(c * p);
    let mut dg = vec![0.0; p];
    for ch in 0..c {
        let k = d_pooled[ch] / sum_gate;
        df.extend(gate.iter().map(|g| k * g));
        for (d, f) in dg.iter_mut().zip(features.channel(ch)) {
            *d += k * (f - pooled[ch]);
        }
    }
    (FeatureMap::new(c, h, w, df), dg)
}
