//! Forward and backward kernels for the primitive layers.
//!
//! Convolutions use the same-padding convention: `pad = (k - 1) / 2` with odd
//! kernels, so `out = (in - 1) / stride + 1`. Parallel loops split the output
//! buffer into disjoint per-plane chunks with a fixed accumulation order
//! inside each chunk, which keeps results bit-identical regardless of thread
//! count.

use crate::parallel::for_each_chunk;
use crate::tensor::Tensor;

use super::{BN_EPS, BN_MOMENTUM};

/// Valid output range `[lo, hi)` so that `o * stride + tap_offset` stays
/// inside `[0, limit)`.
#[inline]
fn tap_range(tap_offset: isize, stride: usize, limit: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if tap_offset < 0 { (-tap_offset + s - 1) / s } else { 0 };
    let hi = ((limit as isize - 1 - tap_offset) / s + 1).clamp(0, out_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, groups: usize) -> Tensor {
    let [n, cin, h, win] = x.shape();
    let [cout, cin_g, k, _] = w.shape();
    debug_assert_eq!(cin / groups, cin_g);
    let pad = ((k - 1) / 2) as isize;
    let ho = (h - 1) / stride + 1;
    let wo = (win - 1) / stride + 1;
    let ocg = cout / groups;

    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.map(|t| t.data());

    for_each_chunk(out.data_mut(), ho * wo, |plane, chunk| {
        let bi = plane / cout;
        let oc = plane % cout;
        let g = oc / ocg;
        let base_ic = g * cin_g;
        if let Some(d) = bd {
            chunk.fill(d[oc]);
        }
        for icl in 0..cin_g {
            let xplane = (bi * cin + base_ic + icl) * h * win;
            let wbase = (oc * cin_g + icl) * k * k;
            for kh in 0..k {
                let dy = kh as isize - pad;
                let (oh_lo, oh_hi) = tap_range(dy, stride, h, ho);
                for kw in 0..k {
                    let wv = wd[wbase + kh * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kw as isize - pad;
                    let (ow_lo, ow_hi) = tap_range(dx, stride, win, wo);
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * stride) as isize + dy;
                        let xrow = xplane + ih as usize * win;
                        let orow = oh * wo;
                        for ow in ow_lo..ow_hi {
                            let iw = (ow * stride) as isize + dx;
                            chunk[orow + ow] += wv * xd[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    groups: usize,
    has_bias: bool,
    go: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, cin, h, win] = x.shape();
    let [cout, cin_g, k, _] = w.shape();
    let [_, _, ho, wo] = go.shape();
    let pad = ((k - 1) / 2) as isize;
    let ocg = cout / groups;
    let xd = x.data();
    let wd = w.data();
    let gd = go.data();

    // weight grads: one worker per output channel
    let mut gw = Tensor::zeros(w.shape());
    for_each_chunk(gw.data_mut(), cin_g * k * k, |oc, chunk| {
        let g = oc / ocg;
        let base_ic = g * cin_g;
        for bi in 0..n {
            let gplane = (bi * cout + oc) * ho * wo;
            for icl in 0..cin_g {
                let xplane = (bi * cin + base_ic + icl) * h * win;
                for kh in 0..k {
                    let dy = kh as isize - pad;
                    let (oh_lo, oh_hi) = tap_range(dy, stride, h, ho);
                    for kw in 0..k {
                        let dx = kw as isize - pad;
                        let (ow_lo, ow_hi) = tap_range(dx, stride, win, wo);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * stride) as isize + dy;
                            let xrow = xplane + ih as usize * win;
                            let grow = gplane + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let iw = (ow * stride) as isize + dx;
                                acc += gd[grow + ow] * xd[xrow + iw as usize];
                            }
                        }
                        chunk[(icl * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });

    let gb = if has_bias {
        let mut gb = Tensor::zeros([cout, 1, 1, 1]);
        for_each_chunk(gb.data_mut(), 1, |oc, chunk| {
            let mut acc = 0.0;
            for bi in 0..n {
                let gplane = (bi * cout + oc) * ho * wo;
                for i in 0..ho * wo {
                    acc += gd[gplane + i];
                }
            }
            chunk[0] = acc;
        });
        Some(gb)
    } else {
        None
    };

    // input grads: one worker per (batch, in-channel) plane
    let mut gx = Tensor::zeros(x.shape());
    for_each_chunk(gx.data_mut(), h * win, |plane, chunk| {
        let bi = plane / cin;
        let ic = plane % cin;
        let g = ic / cin_g;
        let icl = ic % cin_g;
        for ocl in 0..ocg {
            let oc = g * ocg + ocl;
            let gplane = (bi * cout + oc) * ho * wo;
            let wbase = (oc * cin_g + icl) * k * k;
            for kh in 0..k {
                let dy = kh as isize - pad;
                let (oh_lo, oh_hi) = tap_range(dy, stride, h, ho);
                for kw in 0..k {
                    let wv = wd[wbase + kh * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kw as isize - pad;
                    let (ow_lo, ow_hi) = tap_range(dx, stride, win, wo);
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * stride) as isize + dy;
                        let xrow = ih as usize * win;
                        let grow = gplane + oh * wo;
                        for ow in ow_lo..ow_hi {
                            let iw = (ow * stride) as isize + dx;
                            chunk[xrow + iw as usize] += gd[grow + ow] * wv;
                        }
                    }
                }
            }
        }
    });

    (gx, gw, gb)
}

/// Per-channel batch statistics produced during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn bn_forward_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, BnStats) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..n {
            let plane = (bi * c + ch) * h * w;
            for i in 0..h * w {
                s += xd[plane + i];
            }
        }
        let m = s / count;
        let mut v = 0.0;
        for bi in 0..n {
            let plane = (bi * c + ch) * h * w;
            for i in 0..h * w {
                let d = xd[plane + i] - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let y = bn_apply(x, gamma, beta, &mean, &var);
    (y, BnStats { mean, var })
}

pub fn bn_forward_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, rm: &Tensor, rv: &Tensor) -> Tensor {
    bn_apply(x, gamma, beta, rm.data(), rv.data())
}

fn bn_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let [_, c, h, w] = x.shape();
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut y = Tensor::zeros(x.shape());
    for_each_chunk(y.data_mut(), h * w, |plane, chunk| {
        let ch = plane % c;
        let scale = gd[ch] / (var[ch] + BN_EPS).sqrt();
        let shift = bd[ch] - mean[ch] * scale;
        let base = plane * h * w;
        for i in 0..h * w {
            chunk[i] = xd[base + i] * scale + shift;
        }
    });
    y
}

pub fn bn_backward_train(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    go: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let xd = x.data();
    let gd = go.data();
    let gm = gamma.data();

    let mut ggamma = Tensor::zeros([c, 1, 1, 1]);
    let mut gbeta = Tensor::zeros([c, 1, 1, 1]);
    // per-channel reductions first
    let sums: Vec<(f64, f64)> = crate::parallel::map_indices(c, |ch| {
        let istd = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
        let mut sg = 0.0; // sum of grad
        let mut sgx = 0.0; // sum of grad * xhat
        for bi in 0..n {
            let plane = (bi * c + ch) * h * w;
            for i in 0..h * w {
                let g = gd[plane + i];
                sg += g;
                sgx += g * (xd[plane + i] - stats.mean[ch]) * istd;
            }
        }
        (sg, sgx)
    });
    for ch in 0..c {
        ggamma.data_mut()[ch] = sums[ch].1;
        gbeta.data_mut()[ch] = sums[ch].0;
    }

    let mut gx = Tensor::zeros(x.shape());
    for_each_chunk(gx.data_mut(), h * w, |plane, chunk| {
        let ch = plane % c;
        let istd = 1.0 / (stats.var[ch] + BN_EPS).sqrt();
        let (sg, sgx) = sums[ch];
        let base = plane * h * w;
        for i in 0..h * w {
            let xhat = (xd[base + i] - stats.mean[ch]) * istd;
            chunk[i] = gm[ch] * istd * (gd[base + i] - sg / count - xhat * sgx / count);
        }
    });
    (gx, ggamma, gbeta)
}

pub fn bn_backward_eval(x: &Tensor, gamma: &Tensor, rm: &Tensor, rv: &Tensor, go: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let xd = x.data();
    let gd = go.data();
    let gm = gamma.data();
    let mut ggamma = Tensor::zeros([c, 1, 1, 1]);
    let mut gbeta = Tensor::zeros([c, 1, 1, 1]);
    let mut gx = Tensor::zeros(x.shape());
    for ch in 0..c {
        let istd = 1.0 / (rv.data()[ch] + BN_EPS).sqrt();
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for bi in 0..n {
            let plane = (bi * c + ch) * h * w;
            for i in 0..h * w {
                let g = gd[plane + i];
                sg += g;
                sgx += g * (xd[plane + i] - rm.data()[ch]) * istd;
                gx.data_mut()[plane + i] = g * gm[ch] * istd;
            }
        }
        ggamma.data_mut()[ch] = sgx;
        gbeta.data_mut()[ch] = sg;
    }
    (gx, ggamma, gbeta)
}

/// Running-statistics update after a training-mode pass.
pub fn bn_update_running(rm: &mut Tensor, rv: &mut Tensor, stats: &BnStats) {
    for (r, m) in rm.data_mut().iter_mut().zip(stats.mean.iter()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
    }
    for (r, v) in rv.data_mut().iter_mut().zip(stats.var.iter()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v *= sigmoid(*v);
    }
    y
}

pub fn silu_backward(x: &Tensor, go: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x.shape());
    for ((g, xv), out) in go.data().iter().zip(x.data()).zip(gx.data_mut()) {
        let s = sigmoid(*xv);
        *out = g * s * (1.0 + xv * (1.0 - s));
    }
    gx
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = sigmoid(*v);
    }
    y
}

pub fn sigmoid_backward(y: &Tensor, go: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(y.shape());
    for ((g, yv), out) in go.data().iter().zip(y.data()).zip(gx.data_mut()) {
        *out = g * yv * (1.0 - yv);
    }
    gx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 1, 1]);
    let inv = 1.0 / (h * w) as f64;
    for bi in 0..n {
        for ch in 0..c {
            let plane = (bi * c + ch) * h * w;
            let mut s = 0.0;
            for i in 0..h * w {
                s += x.data()[plane + i];
            }
            *y.at_mut(bi, ch, 0, 0) = s * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward(in_shape: [usize; 4], go: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape;
    let inv = 1.0 / (h * w) as f64;
    let mut gx = Tensor::zeros(in_shape);
    for bi in 0..n {
        for ch in 0..c {
            let g = go.at(bi, ch, 0, 0) * inv;
            let plane = (bi * c + ch) * h * w;
            for i in 0..h * w {
                gx.data_mut()[plane + i] = g;
            }
        }
    }
    gx
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let feat = c * h * wd;
    let [out, fin, _, _] = w.shape();
    debug_assert_eq!(feat, fin);
    let mut y = Tensor::zeros([n, out, 1, 1]);
    for bi in 0..n {
        for o in 0..out {
            let mut acc = b.map_or(0.0, |t| t.data()[o]);
            let wrow = o * fin;
            let xrow = bi * feat;
            for f in 0..feat {
                acc += w.data()[wrow + f] * x.data()[xrow + f];
            }
            *y.at_mut(bi, o, 0, 0) = acc;
        }
    }
    y
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    go: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, c, h, wd] = x.shape();
    let feat = c * h * wd;
    let [out, _, _, _] = w.shape();
    let mut gw = Tensor::zeros(w.shape());
    let mut gx = Tensor::zeros(x.shape());
    let mut gb = if has_bias { Some(Tensor::zeros([out, 1, 1, 1])) } else { None };
    for bi in 0..n {
        for o in 0..out {
            let g = go.at(bi, o, 0, 0);
            if let Some(gb) = gb.as_mut() {
                gb.data_mut()[o] += g;
            }
            let wrow = o * feat;
            let xrow = bi * feat;
            for f in 0..feat {
                gw.data_mut()[wrow + f] += g * x.data()[xrow + f];
                gx.data_mut()[xrow + f] += g * w.data()[wrow + f];
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_same_padding_shapes() {
        let x = Tensor::filled([1, 2, 5, 5], 1.0);
        let w = Tensor::filled([3, 2, 3, 3], 0.5);
        let y = conv2d_forward(&x, &w, None, 1, 1);
        assert_eq!(y.shape(), [1, 3, 5, 5]);
        // interior pixel sees all 2*9 taps
        assert!((y.at(0, 0, 2, 2) - 9.0).abs() < 1e-12);
        // corner sees 2*4 taps
        assert!((y.at(0, 0, 0, 0) - 4.0).abs() < 1e-12);
        let y2 = conv2d_forward(&x, &w, None, 2, 1);
        assert_eq!(y2.shape(), [1, 3, 3, 3]);
    }

    #[test]
    fn depthwise_groups() {
        let x = Tensor::from_vec([1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
        let w = Tensor::from_vec([2, 1, 1, 1], vec![10.0, 100.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 2);
        assert_eq!(y.data(), &[20.0, 300.0]);
    }

    #[test]
    fn bn_train_normalizes() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::filled([1, 1, 1, 1], 1.0);
        let beta = Tensor::zeros([1, 1, 1, 1]);
        let (y, stats) = bn_forward_train(&x, &gamma, &beta);
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn gap_means() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.data(), &[3.0]);
    }
}
