//! Layer kernels: forward and backward passes for the layer vocabulary.
//!
//! Kernels are pure functions over [`Tensor`]s so the network module can
//! compose them in both `f32` (training) and `f64` (gradient oracles).
//! Randomized layers draw one value per element regardless of the data, so
//! a seeded stream consumes the same number of draws on every path.

use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Randomized leaky ReLU slope bounds for negative inputs (train mode).
pub const RRELU_LO: f64 = 1.0 / 8.0;
pub const RRELU_HI: f64 = 1.0 / 3.0;

/// Fixed negative slope used in eval mode: midpoint of the train range.
pub const RRELU_EVAL_SLOPE: f64 = (RRELU_LO + RRELU_HI) / 2.0;

pub const BN_EPS: f64 = 1e-5;

/// EMA factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

fn dims4<T: Real>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn dims2<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected 2-d tensor, got {:?}", s);
    (s[0], s[1])
}

/// Output spatial size for a window of `k` over `n` inputs with the given
/// stride and symmetric zero padding.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, ci, h, w) = dims4(input);
    let (co, wci, kh, kw) = dims4(weight);
    assert_eq!(ci, wci, "conv input channels mismatch");
    let oh = conv_out_dim(h, kh, stride, pad).expect("validated conv geometry");
    let ow = conv_out_dim(w, kw, stride, pad).expect("validated conv geometry");

    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    for bi in 0..b {
        for oc in 0..co {
            let out_base = (bi * co + oc) * oh * ow;
            od[out_base..out_base + oh * ow].fill(bd[oc]);
            for ic in 0..ci {
                let in_base = (bi * ci + ic) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                od[out_row + ox] =
                                    od[out_row + ox] + wv * x[in_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: returns (d_input, d_weight, d_bias).
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, ci, h, w) = dims4(input);
    let (co, _, kh, kw) = dims4(weight);
    let (_, _, oh, ow) = dims4(grad_out);

    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[co]);

    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let dx = d_input.data_mut();
    let dw = d_weight.data_mut();
    let db = d_bias.data_mut();

    for bi in 0..b {
        for oc in 0..co {
            let out_base = (bi * co + oc) * oh * ow;
            let mut bias_acc = T::zero();
            for v in &g[out_base..out_base + oh * ow] {
                bias_acc = bias_acc + *v;
            }
            db[oc] = db[oc] + bias_acc;

            for ic in 0..ci {
                let in_base = (bi * ci + ic) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let mut w_acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let gv = g[out_row + ox];
                                w_acc = w_acc + gv * x[in_row + ix as usize];
                                dx[in_row + ix as usize] =
                                    dx[in_row + ix as usize] + gv * wv;
                            }
                        }
                        dw[widx] = dw[widx] + w_acc;
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Max pooling; returns the pooled tensor and the flat input index of each
/// window maximum (ties take the first element in row-major scan order).
pub fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> (Tensor<T>, Vec<usize>) {
    let (b, c, h, w) = dims4(input);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;

    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0usize; b * c * oh * ow];
    let x = input.data();
    let od = out.data_mut();

    for bi in 0..b {
        for ch in 0..c {
            let in_base = (bi * c + ch) * h * w;
            let out_base = (bi * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = in_base + (oy * stride) * w + ox * stride;
                    let mut best = x[best_idx];
                    for ky in 0..k {
                        let row = in_base + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            let v = x[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    od[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d_input = Tensor::zeros(input_shape);
    let dx = d_input.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        dx[idx] = dx[idx] + *g;
    }
    d_input
}

pub fn fc_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, n) = dims2(input);
    let (o, wn) = dims2(weight);
    assert_eq!(n, wn, "fc input width mismatch");

    let mut out = Tensor::zeros(&[b, o]);
    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    for bi in 0..b {
        let xrow = &x[bi * n..(bi + 1) * n];
        for oi in 0..o {
            let wrow = &wd[oi * n..(oi + 1) * n];
            let mut acc = bd[oi];
            for i in 0..n {
                acc = acc + wrow[i] * xrow[i];
            }
            od[bi * o + oi] = acc;
        }
    }
    out
}

/// Gradients of a fully connected layer: returns (d_input, d_weight, d_bias).
pub fn fc_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, n) = dims2(input);
    let (o, _) = dims2(weight);

    let mut d_input = Tensor::zeros(&[b, n]);
    let mut d_weight = Tensor::zeros(&[o, n]);
    let mut d_bias = Tensor::zeros(&[o]);

    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let dx = d_input.data_mut();
    let dw = d_weight.data_mut();
    let db = d_bias.data_mut();

    for bi in 0..b {
        let xrow = &x[bi * n..(bi + 1) * n];
        let dxrow = &mut dx[bi * n..(bi + 1) * n];
        for oi in 0..o {
            let gv = g[bi * o + oi];
            db[oi] = db[oi] + gv;
            let wrow = &wd[oi * n..(oi + 1) * n];
            let dwrow = &mut dw[oi * n..(oi + 1) * n];
            for i in 0..n {
                dwrow[i] = dwrow[i] + gv * xrow[i];
                dxrow[i] = dxrow[i] + gv * wrow[i];
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Batch-norm activations viewed as (outer, channels, inner): conv maps use
/// inner = h*w, fully connected maps use inner = 1.
#[derive(Clone, Copy)]
pub struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn of<T: Real>(t: &Tensor<T>) -> BnLayout {
        let s = t.shape();
        match s.len() {
            2 => BnLayout {
                outer: s[0],
                channels: s[1],
                inner: 1,
            },
            4 => BnLayout {
                outer: s[0],
                channels: s[1],
                inner: s[2] * s[3],
            },
            _ => panic!("batch norm expects 2-d or 4-d input, got {:?}", s),
        }
    }

    /// Number of elements reduced per channel.
    pub fn reduce_count(&self) -> usize {
        self.outer * self.inner
    }
}

pub struct BnTrainOut<T: Real> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased (1/N) batch variance, the value folded into running stats.
    pub batch_var: Vec<T>,
}

pub fn bn_forward_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> BnTrainOut<T> {
    let layout = BnLayout::of(input);
    let (b, c, m) = (layout.outer, layout.channels, layout.inner);
    let n = layout.reduce_count();
    let n_t = T::from_f64(n as f64);
    let eps = T::from_f64(BN_EPS);

    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];

    for ch in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * m;
            for i in 0..m {
                acc = acc + x[base + i];
            }
        }
        mean[ch] = acc / n_t;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut acc = T::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * m;
            for i in 0..m {
                let d = x[base + i] - mu;
                acc = acc + d * d;
            }
        }
        var[ch] = acc / n_t;
    }

    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    {
        let xh = xhat.data_mut();
        let od = out.data_mut();
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * m;
                let mu = mean[ch];
                let istd = inv_std[ch];
                let (ga, be) = (gd[ch], bd[ch]);
                for i in 0..m {
                    let h = (x[base + i] - mu) * istd;
                    xh[base + i] = h;
                    od[base + i] = ga * h + be;
                }
            }
        }
    }

    BnTrainOut {
        output: out,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    }
}

pub fn bn_forward_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Tensor<T> {
    let layout = BnLayout::of(input);
    let (b, c, m) = (layout.outer, layout.channels, layout.inner);
    let eps = T::from_f64(BN_EPS);

    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let od = out.data_mut();
    let gd = gamma.data();
    let bd = beta.data();
    let rm = running_mean.data();
    let rv = running_var.data();

    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * m;
            let istd = T::one() / (rv[ch] + eps).sqrt();
            let (mu, ga, be) = (rm[ch], gd[ch], bd[ch]);
            for i in 0..m {
                od[base + i] = ga * (x[base + i] - mu) * istd + be;
            }
        }
    }
    out
}

/// Backward through train-mode batch statistics; returns (d_input, d_gamma, d_beta).
pub fn bn_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let layout = BnLayout::of(xhat);
    let (b, c, m) = (layout.outer, layout.channels, layout.inner);
    let n_t = T::from_f64(layout.reduce_count() as f64);

    let xh = xhat.data();
    let g = grad_out.data();
    let gd = gamma.data();

    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * m;
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for i in 0..m {
                s1 = s1 + g[base + i];
                s2 = s2 + g[base + i] * xh[base + i];
            }
            sum_dy[ch] = sum_dy[ch] + s1;
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + s2;
        }
    }

    let mut d_input = Tensor::zeros(xhat.shape());
    {
        let dx = d_input.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * m;
                let scale = gd[ch] * inv_std[ch];
                let mean_dy = sum_dy[ch] / n_t;
                let mean_dy_xhat = sum_dy_xhat[ch] / n_t;
                for i in 0..m {
                    dx[base + i] =
                        scale * (g[base + i] - mean_dy - xh[base + i] * mean_dy_xhat);
                }
            }
        }
    }

    let d_gamma = Tensor::from_vec(&[c], sum_dy_xhat);
    let d_beta = Tensor::from_vec(&[c], sum_dy);
    (d_input, d_gamma, d_beta)
}

/// Per-element multipliers for randomized leaky ReLU in train mode.
///
/// A slope is drawn for every element (not just negative ones) so the rng
/// stream advances by exactly `input.len()` draws.
pub fn rrelu_multipliers_train<T: Real, R: Rng>(input: &Tensor<T>, rng: &mut R) -> Vec<T> {
    input
        .data()
        .iter()
        .map(|&v| {
            let slope = RRELU_LO + rng.gen::<f64>() * (RRELU_HI - RRELU_LO);
            if v >= T::zero() {
                T::one()
            } else {
                T::from_f64(slope)
            }
        })
        .collect()
}

/// Per-element multipliers for randomized leaky ReLU in eval mode (fixed
/// midpoint slope, no rng draws).
pub fn rrelu_multipliers_eval<T: Real>(input: &Tensor<T>) -> Vec<T> {
    let slope = T::from_f64(RRELU_EVAL_SLOPE);
    input
        .data()
        .iter()
        .map(|&v| if v >= T::zero() { T::one() } else { slope })
        .collect()
}

/// Inverted-dropout multipliers: kept elements scale by 1/(1-p) so eval mode
/// needs no rescale. p = 1 zeroes everything.
pub fn dropout_multipliers<T: Real, R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    if p >= 1.0 {
        return vec![T::zero(); len];
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect()
}

pub fn apply_multipliers<T: Real>(t: &mut Tensor<T>, mult: &[T]) {
    for (v, m) in t.data_mut().iter_mut().zip(mult) {
        *v = *v * *m;
    }
}
