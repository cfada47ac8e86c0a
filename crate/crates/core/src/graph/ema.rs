//! Grouped efficient multi-scale attention.
//!
//! Channels are split into `g` contiguous groups processed independently (the
//! shared 1x1/3x3 weights are reused across groups). Per batch-group:
//!
//! 1. pool along each spatial axis, fuse the two pooled descriptors through a
//!    shared 1x1 transform and gate the group input with the two sigmoid maps;
//! 2. normalize the gated tensor per channel (group-norm with one channel per
//!    norm group) — the 1x1 branch;
//! 3. run a 3x3 convolution over the raw group input — the 3x3 branch;
//! 4. cross-aggregate: softmax over each branch's pooled channel descriptor
//!    weighs the *other* branch's spatial map, and the summed map gates the
//!    group input through a final sigmoid.
//!
//! The 3x3 branch uses edge-replication padding so a spatially uniform input
//! stays uniform through the block.

use crate::parallel::map_indices;
use crate::tensor::Tensor;

use super::kernels::sigmoid;
use super::GN_EPS;

/// Saved intermediates for the backward pass, laid out per batch-group in
/// iteration order.
#[derive(Debug, Clone)]
pub struct EmaCtx {
    gate_h: Vec<f64>,   // bg * cpg * h
    gate_w: Vec<f64>,   // bg * cpg * w
    cat: Vec<f64>,      // bg * cpg * (h+w)
    gn_mean: Vec<f64>,  // bg * cpg
    gn_var: Vec<f64>,   // bg * cpg
    xhat: Vec<f64>,     // bg * cpg * h * w
    x1: Vec<f64>,       // bg * cpg * h * w
    x2: Vec<f64>,       // bg * cpg * h * w
    t1: Vec<f64>,       // bg * cpg
    t2: Vec<f64>,       // bg * cpg
    attn: Vec<f64>,     // bg * h * w (sigmoid of the aggregated map)
}

pub struct EmaParams<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w3: &'a Tensor,
    pub b3: &'a Tensor,
    pub gn_gamma: &'a Tensor,
    pub gn_beta: &'a Tensor,
}

struct BgForward {
    y: Vec<f64>,
    gate_h: Vec<f64>,
    gate_w: Vec<f64>,
    cat: Vec<f64>,
    gn_mean: Vec<f64>,
    gn_var: Vec<f64>,
    xhat: Vec<f64>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    attn: Vec<f64>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// 3x3 convolution with replicate padding over one group slab, shared weights.
fn conv3_replicate(xg: &[f64], w3: &[f64], b3: &[f64], cpg: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; cpg * h * w];
    for oc in 0..cpg {
        for oh in 0..h {
            for ow in 0..w {
                let mut acc = b3[oc];
                for ic in 0..cpg {
                    let wbase = (oc * cpg + ic) * 9;
                    for kh in 0..3 {
                        let ih = (oh as isize + kh as isize - 1).clamp(0, h as isize - 1) as usize;
                        for kw in 0..3 {
                            let iw = (ow as isize + kw as isize - 1).clamp(0, w as isize - 1) as usize;
                            acc += w3[wbase + kh * 3 + kw] * xg[(ic * h + ih) * w + iw];
                        }
                    }
                }
                out[(oc * h + oh) * w + ow] = acc;
            }
        }
    }
    out
}

pub fn forward(x: &Tensor, groups: usize, p: &EmaParams) -> (Tensor, EmaCtx) {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let bg_total = n * groups;
    let hw = h * w;
    let xd = x.data();
    let w1 = p.w1.data();
    let b1 = p.b1.data();
    let w3 = p.w3.data();
    let b3 = p.b3.data();
    let gamma = p.gn_gamma.data();
    let beta = p.gn_beta.data();

    let results: Vec<BgForward> = map_indices(bg_total, |bg| {
        let base = bg * cpg * hw; // group slab is contiguous in NCHW
        let xg = &xd[base..base + cpg * hw];

        // axis pooling
        let mut cat = vec![0.0; cpg * (h + w)];
        for ch in 0..cpg {
            for hh in 0..h {
                let mut s = 0.0;
                for ww in 0..w {
                    s += xg[(ch * h + hh) * w + ww];
                }
                cat[ch * (h + w) + hh] = s / w as f64;
            }
            for ww in 0..w {
                let mut s = 0.0;
                for hh in 0..h {
                    s += xg[(ch * h + hh) * w + ww];
                }
                cat[ch * (h + w) + h + ww] = s / h as f64;
            }
        }

        // shared 1x1 fuse + split into the two gates
        let mut gate_h = vec![0.0; cpg * h];
        let mut gate_w = vec![0.0; cpg * w];
        for oc in 0..cpg {
            for t in 0..h + w {
                let mut acc = b1[oc];
                for ic in 0..cpg {
                    acc += w1[oc * cpg + ic] * cat[ic * (h + w) + t];
                }
                if t < h {
                    gate_h[oc * h + t] = sigmoid(acc);
                } else {
                    gate_w[oc * w + (t - h)] = sigmoid(acc);
                }
            }
        }

        // gated input, then per-channel normalization -> x1
        let mut xhat = vec![0.0; cpg * hw];
        let mut x1 = vec![0.0; cpg * hw];
        let mut gn_mean = vec![0.0; cpg];
        let mut gn_var = vec![0.0; cpg];
        for ch in 0..cpg {
            let mut gated = vec![0.0; hw];
            for hh in 0..h {
                let gh = gate_h[ch * h + hh];
                for ww in 0..w {
                    gated[hh * w + ww] = xg[(ch * h + hh) * w + ww] * gh * gate_w[ch * w + ww];
                }
            }
            let mean: f64 = gated.iter().sum::<f64>() / hw as f64;
            let var: f64 = gated.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            gn_mean[ch] = mean;
            gn_var[ch] = var;
            for i in 0..hw {
                let xh = (gated[i] - mean) * istd;
                xhat[ch * hw + i] = xh;
                x1[ch * hw + i] = gamma[ch] * xh + beta[ch];
            }
        }

        // 3x3 branch
        let x2 = conv3_replicate(xg, w3, b3, cpg, h, w);

        // cross-spatial aggregation
        let s1: Vec<f64> = (0..cpg)
            .map(|ch| x1[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let s2: Vec<f64> = (0..cpg)
            .map(|ch| x2[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let t1 = softmax(&s1);
        let t2 = softmax(&s2);

        let mut attn = vec![0.0; hw];
        for i in 0..hw {
            let mut a = 0.0;
            for ch in 0..cpg {
                a += t1[ch] * x2[ch * hw + i] + t2[ch] * x1[ch * hw + i];
            }
            attn[i] = sigmoid(a);
        }

        let mut y = vec![0.0; cpg * hw];
        for ch in 0..cpg {
            for i in 0..hw {
                y[ch * hw + i] = xg[ch * hw + i] * attn[i];
            }
        }

        BgForward { y, gate_h, gate_w, cat, gn_mean, gn_var, xhat, x1, x2, t1, t2, attn }
    });

    let mut out = Tensor::zeros(x.shape());
    let mut ctx = EmaCtx {
        gate_h: Vec::with_capacity(bg_total * cpg * h),
        gate_w: Vec::with_capacity(bg_total * cpg * w),
        cat: Vec::with_capacity(bg_total * cpg * (h + w)),
        gn_mean: Vec::with_capacity(bg_total * cpg),
        gn_var: Vec::with_capacity(bg_total * cpg),
        xhat: Vec::with_capacity(bg_total * cpg * hw),
        x1: Vec::with_capacity(bg_total * cpg * hw),
        x2: Vec::with_capacity(bg_total * cpg * hw),
        t1: Vec::with_capacity(bg_total * cpg),
        t2: Vec::with_capacity(bg_total * cpg),
        attn: Vec::with_capacity(bg_total * hw),
    };
    for (bg, r) in results.into_iter().enumerate() {
        out.data_mut()[bg * cpg * hw..(bg + 1) * cpg * hw].copy_from_slice(&r.y);
        ctx.gate_h.extend_from_slice(&r.gate_h);
        ctx.gate_w.extend_from_slice(&r.gate_w);
        ctx.cat.extend_from_slice(&r.cat);
        ctx.gn_mean.extend_from_slice(&r.gn_mean);
        ctx.gn_var.extend_from_slice(&r.gn_var);
        ctx.xhat.extend_from_slice(&r.xhat);
        ctx.x1.extend_from_slice(&r.x1);
        ctx.x2.extend_from_slice(&r.x2);
        ctx.t1.extend_from_slice(&r.t1);
        ctx.t2.extend_from_slice(&r.t2);
        ctx.attn.extend_from_slice(&r.attn);
    }
    (out, ctx)
}

pub struct EmaGrads {
    pub gx: Tensor,
    pub gw1: Tensor,
    pub gb1: Tensor,
    pub gw3: Tensor,
    pub gb3: Tensor,
    pub ggamma: Tensor,
    pub gbeta: Tensor,
}

struct BgBackward {
    gx: Vec<f64>,
    gw1: Vec<f64>,
    gb1: Vec<f64>,
    gw3: Vec<f64>,
    gb3: Vec<f64>,
    ggamma: Vec<f64>,
    gbeta: Vec<f64>,
}

pub fn backward(x: &Tensor, groups: usize, p: &EmaParams, ctx: &EmaCtx, go: &Tensor) -> EmaGrads {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let bg_total = n * groups;
    let hw = h * w;
    let xd = x.data();
    let gd = go.data();
    let w1 = p.w1.data();
    let w3 = p.w3.data();
    let gamma = p.gn_gamma.data();

    let results: Vec<BgBackward> = map_indices(bg_total, |bg| {
        let base = bg * cpg * hw;
        let xg = &xd[base..base + cpg * hw];
        let gy = &gd[base..base + cpg * hw];
        let gate_h = &ctx.gate_h[bg * cpg * h..(bg + 1) * cpg * h];
        let gate_w = &ctx.gate_w[bg * cpg * w..(bg + 1) * cpg * w];
        let cat = &ctx.cat[bg * cpg * (h + w)..(bg + 1) * cpg * (h + w)];
        let gn_var = &ctx.gn_var[bg * cpg..(bg + 1) * cpg];
        let xhat = &ctx.xhat[base..base + cpg * hw];
        let x1 = &ctx.x1[base..base + cpg * hw];
        let x2 = &ctx.x2[base..base + cpg * hw];
        let t1 = &ctx.t1[bg * cpg..(bg + 1) * cpg];
        let t2 = &ctx.t2[bg * cpg..(bg + 1) * cpg];
        let attn = &ctx.attn[bg * hw..(bg + 1) * hw];

        let mut gx = vec![0.0; cpg * hw];
        // direct path and attention-logit grad
        let mut ga = vec![0.0; hw];
        for ch in 0..cpg {
            for i in 0..hw {
                let g = gy[ch * hw + i];
                gx[ch * hw + i] += g * attn[i];
                ga[i] += g * xg[ch * hw + i];
            }
        }
        for i in 0..hw {
            ga[i] *= attn[i] * (1.0 - attn[i]);
        }

        // branch grads through the aggregation
        let mut gt1 = vec![0.0; cpg];
        let mut gt2 = vec![0.0; cpg];
        let mut gx1 = vec![0.0; cpg * hw];
        let mut gx2 = vec![0.0; cpg * hw];
        for ch in 0..cpg {
            for i in 0..hw {
                gt1[ch] += ga[i] * x2[ch * hw + i];
                gt2[ch] += ga[i] * x1[ch * hw + i];
                gx2[ch * hw + i] = ga[i] * t1[ch];
                gx1[ch * hw + i] = ga[i] * t2[ch];
            }
        }
        // softmax backward, then spatial-mean backward
        let dot1: f64 = (0..cpg).map(|ch| t1[ch] * gt1[ch]).sum();
        let dot2: f64 = (0..cpg).map(|ch| t2[ch] * gt2[ch]).sum();
        for ch in 0..cpg {
            let gs1 = t1[ch] * (gt1[ch] - dot1) / hw as f64;
            let gs2 = t2[ch] * (gt2[ch] - dot2) / hw as f64;
            for i in 0..hw {
                gx1[ch * hw + i] += gs1;
                gx2[ch * hw + i] += gs2;
            }
        }

        // 3x3 branch backward (replicate padding)
        let mut gw3 = vec![0.0; cpg * cpg * 9];
        let mut gb3 = vec![0.0; cpg];
        for oc in 0..cpg {
            for oh in 0..h {
                for ow in 0..w {
                    let g = gx2[(oc * h + oh) * w + ow];
                    if g == 0.0 {
                        continue;
                    }
                    gb3[oc] += g;
                    for ic in 0..cpg {
                        let wbase = (oc * cpg + ic) * 9;
                        for kh in 0..3 {
                            let ih = (oh as isize + kh as isize - 1).clamp(0, h as isize - 1) as usize;
                            for kw in 0..3 {
                                let iw = (ow as isize + kw as isize - 1).clamp(0, w as isize - 1) as usize;
                                gw3[wbase + kh * 3 + kw] += g * xg[(ic * h + ih) * w + iw];
                                gx[(ic * h + ih) * w + iw] += g * w3[wbase + kh * 3 + kw];
                            }
                        }
                    }
                }
            }
        }

        // normalization backward -> gated grad
        let mut ggamma = vec![0.0; cpg];
        let mut gbeta = vec![0.0; cpg];
        let mut g_gated = vec![0.0; cpg * hw];
        for ch in 0..cpg {
            let istd = 1.0 / (gn_var[ch] + GN_EPS).sqrt();
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for i in 0..hw {
                let g = gx1[ch * hw + i];
                sg += g;
                sgx += g * xhat[ch * hw + i];
            }
            ggamma[ch] = sgx;
            gbeta[ch] = sg;
            for i in 0..hw {
                let g = gx1[ch * hw + i];
                g_gated[ch * hw + i] =
                    gamma[ch] * istd * (g - sg / hw as f64 - xhat[ch * hw + i] * sgx / hw as f64);
            }
        }

        // gating backward
        let mut g_gate_h = vec![0.0; cpg * h];
        let mut g_gate_w = vec![0.0; cpg * w];
        for ch in 0..cpg {
            for hh in 0..h {
                let gh = gate_h[ch * h + hh];
                for ww in 0..w {
                    let gw_ = gate_w[ch * w + ww];
                    let g = g_gated[ch * hw + hh * w + ww];
                    let xv = xg[(ch * h + hh) * w + ww];
                    gx[(ch * h + hh) * w + ww] += g * gh * gw_;
                    g_gate_h[ch * h + hh] += g * xv * gw_;
                    g_gate_w[ch * w + ww] += g * xv * gh;
                }
            }
        }

        // through the sigmoids into the shared 1x1 transform
        let mut gu = vec![0.0; cpg * (h + w)];
        for ch in 0..cpg {
            for hh in 0..h {
                let s = gate_h[ch * h + hh];
                gu[ch * (h + w) + hh] = g_gate_h[ch * h + hh] * s * (1.0 - s);
            }
            for ww in 0..w {
                let s = gate_w[ch * w + ww];
                gu[ch * (h + w) + h + ww] = g_gate_w[ch * w + ww] * s * (1.0 - s);
            }
        }
        let mut gw1 = vec![0.0; cpg * cpg];
        let mut gb1 = vec![0.0; cpg];
        let mut gcat = vec![0.0; cpg * (h + w)];
        for oc in 0..cpg {
            for t in 0..h + w {
                let g = gu[oc * (h + w) + t];
                if g == 0.0 {
                    continue;
                }
                gb1[oc] += g;
                for ic in 0..cpg {
                    gw1[oc * cpg + ic] += g * cat[ic * (h + w) + t];
                    gcat[ic * (h + w) + t] += g * w1[oc * cpg + ic];
                }
            }
        }

        // pooling backward
        for ch in 0..cpg {
            for hh in 0..h {
                let g = gcat[ch * (h + w) + hh] / w as f64;
                for ww in 0..w {
                    gx[(ch * h + hh) * w + ww] += g;
                }
            }
            for ww in 0..w {
                let g = gcat[ch * (h + w) + h + ww] / h as f64;
                for hh in 0..h {
                    gx[(ch * h + hh) * w + ww] += g;
                }
            }
        }

        BgBackward { gx, gw1, gb1, gw3, gb3, ggamma, gbeta }
    });

    let mut gx = Tensor::zeros(x.shape());
    let mut gw1 = Tensor::zeros(p.w1.shape());
    let mut gb1 = Tensor::zeros(p.b1.shape());
    let mut gw3 = Tensor::zeros(p.w3.shape());
    let mut gb3 = Tensor::zeros(p.b3.shape());
    let mut ggamma = Tensor::zeros(p.gn_gamma.shape());
    let mut gbeta = Tensor::zeros(p.gn_beta.shape());
    for (bg, r) in results.into_iter().enumerate() {
        gx.data_mut()[bg * cpg * hw..(bg + 1) * cpg * hw].copy_from_slice(&r.gx);
        for (a, b) in gw1.data_mut().iter_mut().zip(r.gw1.iter()) {
            *a += *b;
        }
        for (a, b) in gb1.data_mut().iter_mut().zip(r.gb1.iter()) {
            *a += *b;
        }
        for (a, b) in gw3.data_mut().iter_mut().zip(r.gw3.iter()) {
            *a += *b;
        }
        for (a, b) in gb3.data_mut().iter_mut().zip(r.gb3.iter()) {
            *a += *b;
        }
        for (a, b) in ggamma.data_mut().iter_mut().zip(r.ggamma.iter()) {
            *a += *b;
        }
        for (a, b) in gbeta.data_mut().iter_mut().zip(r.gbeta.iter()) {
            *a += *b;
        }
    }
    EmaGrads { gx, gw1, gb1, gw3, gb3, ggamma, gbeta }
}
