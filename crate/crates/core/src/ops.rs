//! Forward and backward kernels for every differentiable operation the
//! networks use.
//!
//! Conventions:
//! - conv2d is cross-correlation (no kernel flip), zero padding, kernel
//!   layout OIHW, kernel sizes {1,3}, strides {1,2};
//! - conv_transpose2d supports the single configuration the architecture
//!   needs: kernel 1x1, stride 2, kernel layout IOHW, output exactly
//!   (2H, 2W) with zeros (plus bias) at odd rows/columns;
//! - batchnorm uses biased batch variance and updates running statistics
//!   as `r <- (1-momentum)*r + momentum*batch`;
//! - all inner products accumulate in f64 even for f32 tensors, and every
//!   output element is produced by exactly one task with a fixed summation
//!   order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Inclusive output-index range `[lo, hi]` such that
/// `0 <= o*stride + k - pad < in_extent` for every `o` in the range.
#[inline]
fn out_range(out_extent: usize, in_extent: usize, stride: usize, pad: usize, k: usize) -> Option<(usize, usize)> {
    let s = stride as i64;
    let num_lo = pad as i64 - k as i64;
    let lo = (num_lo + s - 1).div_euclid(s).max(0);
    let hi = (in_extent as i64 - 1 + pad as i64 - k as i64)
        .div_euclid(s)
        .min(out_extent as i64 - 1);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

fn check_conv_args(kh: usize, kw: usize, stride: usize) -> Result<()> {
    if !(kh == kw && (kh == 1 || kh == 3)) {
        return Err(Error::config(format!(
            "conv2d supports square kernels of size 1 or 3, got {kh}x{kw}"
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    Ok(())
}

pub fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::config(format!(
            "conv2d input {h}x{w} with pad {pad} smaller than kernel {k}"
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// 2-d cross-correlation. `x: [N,Cin,H,W]`, `kernel: [Cout,Cin,kh,kw]`,
/// `bias: [Cout]` -> `[N,Cout,H',W']`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let [n, cin, h, w] = x.dims4()?;
    let [cout, kcin, kh, kw] = kernel.dims4()?;
    check_conv_args(kh, kw, stride)?;
    if kcin != cin {
        return Err(Error::config(format!(
            "conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if bias.dims1()? != cout {
        return Err(Error::config(format!(
            "conv2d bias has {} entries, kernel has {cout} output channels",
            bias.numel()
        )));
    }
    let (oh, ow) = conv2d_out_dims(h, w, kh, stride, pad)?;

    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(chunk, plane)| {
            let ni = chunk / cout;
            let co = chunk % cout;
            let mut acc = vec![bd[co].to_f64(); oh * ow];
            for ci in 0..cin {
                let xp = &xd[(ni * cin + ci) * h * w..][..h * w];
                for ki in 0..kh {
                    let Some((oh_lo, oh_hi)) = out_range(oh, h, stride, pad, ki) else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some((ow_lo, ow_hi)) = out_range(ow, w, stride, pad, kj) else {
                            continue;
                        };
                        let wv = kd[((co * cin + ci) * kh + ki) * kw + kj].to_f64();
                        for oi in oh_lo..=oh_hi {
                            let ih = oi * stride + ki - pad;
                            let xrow = ih * w;
                            let orow = oi * ow;
                            for oj in ow_lo..=ow_hi {
                                let iw = oj * stride + kj - pad;
                                acc[orow + oj] += wv * xp[xrow + iw].to_f64();
                            }
                        }
                    }
                }
            }
            for (o, a) in plane.iter_mut().zip(&acc) {
                *o = E::from_f64(*a);
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    pad: usize,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [n, cin, h, w] = x.dims4()?;
    let [cout, _, kh, kw] = kernel.dims4()?;
    let [dn, dc, oh, ow] = dy.dims4()?;
    if dn != n || dc != cout {
        return Err(Error::integrity(format!(
            "conv2d backward: upstream shape {:?} does not match output [{n},{cout},..]",
            dy.shape()
        )));
    }
    let xd = x.data();
    let kd = kernel.data();
    let dyd = dy.data();

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(chunk, plane)| {
            let ni = chunk / cin;
            let ci = chunk % cin;
            let mut acc = vec![0.0f64; h * w];
            for co in 0..cout {
                let dyp = &dyd[(ni * cout + co) * oh * ow..][..oh * ow];
                for ki in 0..kh {
                    let Some((oh_lo, oh_hi)) = out_range(oh, h, stride, pad, ki) else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some((ow_lo, ow_hi)) = out_range(ow, w, stride, pad, kj) else {
                            continue;
                        };
                        let wv = kd[((co * cin + ci) * kh + ki) * kw + kj].to_f64();
                        for oi in oh_lo..=oh_hi {
                            let ih = oi * stride + ki - pad;
                            let xrow = ih * w;
                            let orow = oi * ow;
                            for oj in ow_lo..=ow_hi {
                                let iw = oj * stride + kj - pad;
                                acc[xrow + iw] += wv * dyp[orow + oj].to_f64();
                            }
                        }
                    }
                }
            }
            for (o, a) in plane.iter_mut().zip(&acc) {
                *o = E::from_f64(*a);
            }
        });

    // One task per output channel owns its kernel slice and bias entry.
    let per_co: Vec<(Vec<f64>, f64)> = (0..cout)
        .into_par_iter()
        .map(|co| {
            let mut dk = vec![0.0f64; cin * kh * kw];
            let mut db = 0.0f64;
            for ni in 0..n {
                let dyp = &dyd[(ni * cout + co) * oh * ow..][..oh * ow];
                for v in dyp {
                    db += v.to_f64();
                }
                for ci in 0..cin {
                    let xp = &xd[(ni * cin + ci) * h * w..][..h * w];
                    for ki in 0..kh {
                        let Some((oh_lo, oh_hi)) = out_range(oh, h, stride, pad, ki) else {
                            continue;
                        };
                        for kj in 0..kw {
                            let Some((ow_lo, ow_hi)) = out_range(ow, w, stride, pad, kj) else {
                                continue;
                            };
                            let mut acc = 0.0f64;
                            for oi in oh_lo..=oh_hi {
                                let ih = oi * stride + ki - pad;
                                let xrow = ih * w;
                                let orow = oi * ow;
                                for oj in ow_lo..=ow_hi {
                                    let iw = oj * stride + kj - pad;
                                    acc += xp[xrow + iw].to_f64() * dyp[orow + oj].to_f64();
                                }
                            }
                            dk[(ci * kh + ki) * kw + kj] += acc;
                        }
                    }
                }
            }
            (dk, db)
        })
        .collect();

    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dbias = Tensor::zeros(&[cout]);
    for (co, (dk, db)) in per_co.into_iter().enumerate() {
        let dst = &mut dkernel.data_mut()[co * cin * kh * kw..][..cin * kh * kw];
        for (o, v) in dst.iter_mut().zip(&dk) {
            *o = E::from_f64(*v);
        }
        dbias.data_mut()[co] = E::from_f64(db);
    }
    Ok((dx, dkernel, dbias))
}

fn check_convt_kernel<E: Element>(x: &Tensor<E>, kernel: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    let [n, cin, h, w] = x.dims4()?;
    let [kcin, cout, kh, kw] = kernel.dims4()?;
    if kh != 1 || kw != 1 {
        return Err(Error::config(format!(
            "conv_transpose2d supports only kernel 1x1 stride 2, got kernel {kh}x{kw}"
        )));
    }
    if kcin != cin {
        return Err(Error::config(format!(
            "conv_transpose2d channel mismatch: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    let _ = (n, w);
    Ok((n, cin, cout, h))
}

/// Transposed convolution, kernel 1x1 stride 2. `x: [N,Cin,H,W]`,
/// `kernel: [Cin,Cout,1,1]`, `bias: [Cout]` -> `[N,Cout,2H,2W]` with
/// `out[n,co,2i,2j] = sum_ci x[n,ci,i,j] * k[ci,co] + b[co]` and plain bias
/// at every other position.
pub fn conv_transpose2d_s2<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let [n, cin, h, w] = x.dims4()?;
    let (_, _, cout, _) = check_convt_kernel(x, kernel)?;
    if bias.dims1()? != cout {
        return Err(Error::config(format!(
            "conv_transpose2d bias has {} entries, expected {cout}",
            bias.numel()
        )));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(chunk, plane)| {
            let ni = chunk / cout;
            let co = chunk % cout;
            let b = bd[co].to_f64();
            let mut acc = vec![b; oh * ow];
            for ci in 0..cin {
                let wv = kd[ci * cout + co].to_f64();
                let xp = &xd[(ni * cin + ci) * h * w..][..h * w];
                for i in 0..h {
                    let orow = 2 * i * ow;
                    let xrow = i * w;
                    for j in 0..w {
                        acc[orow + 2 * j] += wv * xp[xrow + j].to_f64();
                    }
                }
            }
            for (o, a) in plane.iter_mut().zip(&acc) {
                *o = E::from_f64(*a);
            }
        });
    Ok(out)
}

pub fn conv_transpose2d_s2_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [n, cin, h, w] = x.dims4()?;
    let (_, _, cout, _) = check_convt_kernel(x, kernel)?;
    let [dn, dc, oh, ow] = dy.dims4()?;
    if dn != n || dc != cout || oh != 2 * h || ow != 2 * w {
        return Err(Error::integrity(format!(
            "conv_transpose2d backward: upstream shape {:?} does not match output [{n},{cout},{},{}]",
            dy.shape(),
            2 * h,
            2 * w
        )));
    }
    let xd = x.data();
    let kd = kernel.data();
    let dyd = dy.data();

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(chunk, plane)| {
            let ni = chunk / cin;
            let ci = chunk % cin;
            let mut acc = vec![0.0f64; h * w];
            for co in 0..cout {
                let wv = kd[ci * cout + co].to_f64();
                let dyp = &dyd[(ni * cout + co) * oh * ow..][..oh * ow];
                for i in 0..h {
                    let orow = 2 * i * ow;
                    let xrow = i * w;
                    for j in 0..w {
                        acc[xrow + j] += wv * dyp[orow + 2 * j].to_f64();
                    }
                }
            }
            for (o, a) in plane.iter_mut().zip(&acc) {
                *o = E::from_f64(*a);
            }
        });

    let per_ci: Vec<Vec<f64>> = (0..cin)
        .into_par_iter()
        .map(|ci| {
            let mut row = vec![0.0f64; cout];
            for ni in 0..n {
                let xp = &xd[(ni * cin + ci) * h * w..][..h * w];
                for co in 0..cout {
                    let dyp = &dyd[(ni * cout + co) * oh * ow..][..oh * ow];
                    let mut acc = 0.0f64;
                    for i in 0..h {
                        let orow = 2 * i * ow;
                        let xrow = i * w;
                        for j in 0..w {
                            acc += xp[xrow + j].to_f64() * dyp[orow + 2 * j].to_f64();
                        }
                    }
                    row[co] += acc;
                }
            }
            row
        })
        .collect();
    let mut dkernel = Tensor::zeros(kernel.shape());
    for (ci, row) in per_ci.into_iter().enumerate() {
        for (co, v) in row.into_iter().enumerate() {
            dkernel.data_mut()[ci * cout + co] = E::from_f64(v);
        }
    }

    // Bias reaches every output position, so its gradient sums all of dy.
    let mut dbias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let dyp = &dyd[(ni * cout + co) * oh * ow..][..oh * ow];
            for v in dyp {
                acc += v.to_f64();
            }
        }
        dbias.data_mut()[co] = E::from_f64(acc);
    }
    Ok((dx, dkernel, dbias))
}

/// Per-channel statistics saved by the batchnorm forward pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check_bn_shapes<E: Element>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    let c = dims[1];
    if gamma.dims1()? != c || beta.dims1()? != c {
        return Err(Error::config(format!(
            "batchnorm parameter length ({} gamma, {} beta) does not match {c} channels",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(dims)
}

fn bn_apply<E: Element>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>, stats: &BnStats) -> Tensor<E> {
    let [n, c, h, w] = x.dims4().unwrap();
    let plane = h * w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for ci in 0..c {
        let g = gd[ci].to_f64();
        let b = bd[ci].to_f64();
        let m = stats.mean[ci];
        let is = stats.inv_std[ci];
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                let v = (xd[off + i].to_f64() - m) * is;
                od[off + i] = E::from_f64(g * v + b);
            }
        }
    }
    out
}

/// Training-mode batchnorm: normalizes with per-channel batch statistics over
/// (N, H, W) and returns them for the backward pass and the running update.
pub fn batchnorm2d_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, BnStats)> {
    let [n, c, h, w] = check_bn_shapes(x, gamma, beta)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                s += xd[off + i].to_f64();
            }
        }
        let mu = s / m;
        let mut v = 0.0f64;
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                let d = xd[off + i].to_f64() - mu;
                v += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = v / m; // biased
    }
    let inv_std = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let stats = BnStats { mean, var, inv_std };
    Ok((bn_apply(x, gamma, beta, &stats), stats))
}

/// Inference-mode batchnorm using running statistics.
pub fn batchnorm2d_infer<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, BnStats)> {
    let [_, c, _, _] = check_bn_shapes(x, gamma, beta)?;
    if running_mean.dims1()? != c || running_var.dims1()? != c {
        return Err(Error::config(format!(
            "batchnorm running statistics length does not match {c} channels"
        )));
    }
    let mean: Vec<f64> = running_mean.data().iter().map(|v| v.to_f64()).collect();
    let var: Vec<f64> = running_var.data().iter().map(|v| v.to_f64()).collect();
    let inv_std = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let stats = BnStats { mean, var, inv_std };
    Ok((bn_apply(x, gamma, beta, &stats), stats))
}

/// In-place running-statistics update: `r <- (1-momentum)*r + momentum*batch`.
pub fn update_running_stats<E: Element>(
    running_mean: &mut Tensor<E>,
    running_var: &mut Tensor<E>,
    stats: &BnStats,
    momentum: f64,
) {
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = E::from_f64((1.0 - momentum) * r.to_f64() + momentum * b);
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = E::from_f64((1.0 - momentum) * r.to_f64() + momentum * b);
    }
}

/// Batchnorm gradients. In training mode the batch statistics depend on the
/// input, so
/// `dx = gamma*inv_std*(dy - mean(dy) - xhat*mean(dy*xhat))`;
/// in inference mode the statistics are constants and `dx = gamma*inv_std*dy`.
pub fn batchnorm2d_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &BnStats,
    train: bool,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [n, c, h, w] = x.dims4()?;
    if !dy.same_shape(x) {
        return Err(Error::integrity(format!(
            "batchnorm backward: upstream shape {:?} does not match input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let xd = x.data();
    let dyd = dy.data();
    let gd = gamma.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mu = stats.mean[ci];
        let is = stats.inv_std[ci];
        let g = gd[ci].to_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                let dyv = dyd[off + i].to_f64();
                let xhat = (xd[off + i].to_f64() - mu) * is;
                sum_dy += dyv;
                sum_dy_xhat += dyv * xhat;
            }
        }
        dgamma.data_mut()[ci] = E::from_f64(sum_dy_xhat);
        dbeta.data_mut()[ci] = E::from_f64(sum_dy);
        let dxd = dx.data_mut();
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for i in 0..plane {
                let dyv = dyd[off + i].to_f64();
                let v = if train {
                    let xhat = (xd[off + i].to_f64() - mu) * is;
                    g * is * (dyv - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * is * dyv
                };
                dxd[off + i] = E::from_f64(v);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v.to_f64() > 0.0 { v } else { E::ZERO })
}

/// ReLU gradient gates on the saved input; subgradient 0 at exactly 0.
pub fn relu_backward<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    debug_assert!(x.same_shape(dy));
    let mut out = Tensor::zeros(x.shape());
    for ((o, &xv), &dv) in out.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        if xv.to_f64() > 0.0 {
            *o = dv;
        }
    }
    out
}

/// Per-voxel softmax over the channel axis with max subtraction.
pub fn softmax_channel<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = x.dims4()?;
    if c < 2 {
        return Err(Error::config(format!("softmax needs at least 2 channels, got {c}")));
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for ni in 0..n {
        let base = ni * c * plane;
        for i in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(xd[base + ci * plane + i].to_f64());
            }
            let mut z = 0.0f64;
            for ci in 0..c {
                z += (xd[base + ci * plane + i].to_f64() - mx).exp();
            }
            for ci in 0..c {
                let e = (xd[base + ci * plane + i].to_f64() - mx).exp();
                od[base + ci * plane + i] = E::from_f64(e / z);
            }
        }
    }
    Ok(out)
}

/// Softmax vector-Jacobian product given the forward probabilities:
/// `dx_c = p_c * (dy_c - sum_k dy_k p_k)` per voxel.
pub fn softmax_channel_backward<E: Element>(probs: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = probs.dims4()?;
    if !dy.same_shape(probs) {
        return Err(Error::integrity(format!(
            "softmax backward: upstream shape {:?} does not match {:?}",
            dy.shape(),
            probs.shape()
        )));
    }
    let plane = h * w;
    let pd = probs.data();
    let dyd = dy.data();
    let mut out = Tensor::zeros(probs.shape());
    let od = out.data_mut();
    for ni in 0..n {
        let base = ni * c * plane;
        for i in 0..plane {
            let mut dot = 0.0f64;
            for ci in 0..c {
                dot += dyd[base + ci * plane + i].to_f64() * pd[base + ci * plane + i].to_f64();
            }
            for ci in 0..c {
                let p = pd[base + ci * plane + i].to_f64();
                od[base + ci * plane + i] =
                    E::from_f64(p * (dyd[base + ci * plane + i].to_f64() - dot));
            }
        }
    }
    Ok(out)
}

/// Channel concatenation: `a: [N,Ca,H,W]`, `b: [N,Cb,H,W]` -> `[N,Ca+Cb,H,W]`.
pub fn concat_channels<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let [na, ca, ha, wa] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if na != nb || ha != hb || wa != wb {
        return Err(Error::config(format!(
            "concat mismatch: {:?} vs {:?} (batch/spatial dims must agree)",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let mut out = Tensor::zeros(&[na, ca + cb, ha, wa]);
    let od = out.data_mut();
    for ni in 0..na {
        let src_a = &a.data()[ni * ca * plane..][..ca * plane];
        let src_b = &b.data()[ni * cb * plane..][..cb * plane];
        let dst = &mut od[ni * (ca + cb) * plane..][..(ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(src_a);
        dst[ca * plane..].copy_from_slice(src_b);
    }
    Ok(out)
}

/// Exact inverse split of [`concat_channels`].
pub fn concat_channels_backward<E: Element>(
    ca: usize,
    cb: usize,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let [n, c, h, w] = dy.dims4()?;
    if c != ca + cb {
        return Err(Error::integrity(format!(
            "concat backward: upstream has {c} channels, expected {ca}+{cb}"
        )));
    }
    let plane = h * w;
    let mut da = Tensor::zeros(&[n, ca, h, w]);
    let mut db = Tensor::zeros(&[n, cb, h, w]);
    for ni in 0..n {
        let src = &dy.data()[ni * c * plane..][..c * plane];
        da.data_mut()[ni * ca * plane..][..ca * plane].copy_from_slice(&src[..ca * plane]);
        db.data_mut()[ni * cb * plane..][..cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    Ok((da, db))
}

/// 2x2 max reduction with stride 2. Returns the pooled tensor and, per output
/// element, the flat within-plane input index of the maximum (first occurrence
/// wins ties) for the backward scatter.
pub fn maxpool2<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "maxpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let od = out.data_mut();
    for pc in 0..n * c {
        let xp = &xd[pc * h * w..][..h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best_idx = (2 * oi) * w + 2 * oj;
                let mut best = xp[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oi + di) * w + 2 * oj + dj;
                    if xp[idx] > best {
                        best = xp[idx];
                        best_idx = idx;
                    }
                }
                od[pc * oh * ow + oi * ow + oj] = best;
                argmax[pc * oh * ow + oi * ow + oj] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<E: Element>(
    in_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<E>,
) -> Result<Tensor<E>> {
    let [n, c, oh, ow] = dy.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    if argmax.len() != n * c * oh * ow || h != 2 * oh || w != 2 * ow {
        return Err(Error::integrity(
            "maxpool backward: upstream does not match saved forward context".to_string(),
        ));
    }
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for pc in 0..n * c {
        let dyp = &dy.data()[pc * oh * ow..][..oh * ow];
        let amp = &argmax[pc * oh * ow..][..oh * ow];
        let base = pc * h * w;
        for (i, &a) in amp.iter().enumerate() {
            let dst = base + a as usize;
            dxd[dst] = E::from_f64(dxd[dst].to_f64() + dyp[i].to_f64());
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(&shape, data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let x = t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t4([1, 1, 1, 1], &[1.0]);
        let b = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_3x3_pad1_sums_neighbourhood() {
        let x = t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t4([1, 1, 3, 3], &[1.0; 9]);
        let b = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv2d_zero_kernel_zero_bias_gives_zero() {
        let x = t4([2, 3, 4, 4], &vec![1.5; 2 * 3 * 16]);
        let k = Tensor::zeros(&[5, 3, 3, 3]);
        let b = Tensor::zeros(&[5]);
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_bad_kernel_and_stride() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), &b, 1, 2).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), &b, 3, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &b, 1, 1).is_err());
    }

    #[test]
    fn conv_transpose_scatters_on_even_grid() {
        let x = t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t4([1, 1, 1, 1], &[1.0]);
        let b = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        let y = conv_transpose2d_s2(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let mut expect = vec![0.0; 16];
        expect[0] = 1.0;
        expect[2] = 2.0;
        expect[8] = 3.0;
        expect[10] = 4.0;
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn conv_transpose_zero_weight_fills_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let k = Tensor::zeros(&[2, 4, 1, 1]);
        let b = Tensor::from_f64_slice(&[4], &[7.0, 7.0, 7.0, 7.0]).unwrap();
        let y = conv_transpose2d_s2(&x, &k, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv_transpose_rejects_wide_kernels() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let k = Tensor::zeros(&[2, 4, 3, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(conv_transpose2d_s2(&x, &k, &b).is_err());
    }

    #[test]
    fn batchnorm_constant_input_zeros_out() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 3.25);
        let g = Tensor::from_f64_slice(&[1], &[1.0]).unwrap();
        let b = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        let (y, _) = batchnorm2d_train(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_beta_shifts_constant_input() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 3.0);
        let g = Tensor::from_f64_slice(&[1], &[1.0]).unwrap();
        let b = Tensor::from_f64_slice(&[1], &[5.0]).unwrap();
        let (y, _) = batchnorm2d_train(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_hand_case_two_values() {
        // batch {1,3}: mu = 2, biased var = 1 -> output {-1,+1} at eps 0
        let x = Tensor::from_f64_slice(&[2, 1, 1, 1], &[1.0, 3.0]).unwrap();
        let g = Tensor::from_f64_slice(&[1], &[1.0]).unwrap();
        let b = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        let (y, stats) = batchnorm2d_train(&x, &g, &b, 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let g = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(batchnorm2d_train(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn relu_and_its_gate() {
        let x = Tensor::from_f64_slice(&[1, 1, 1, 2], &[-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let dy = Tensor::from_f64_slice(&[1, 1, 1, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&x, &dy).data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let x = Tensor::from_f64_slice(&[1, 2, 1, 1], &[0.0, 0.0]).unwrap();
        let p = softmax_channel(&x).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let x = Tensor::from_f64_slice(&[1, 2, 1, 1], &[2.0_f64.ln(), 0.0]).unwrap();
        let p = softmax_channel(&x).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_f64_slice(&[1, 3, 1, 1], &[0.3, -1.2, 2.0]).unwrap();
        let shifted = x.map(|v| v + 17.5);
        let a = softmax_channel(&x).unwrap();
        let b = softmax_channel(&shifted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_places_channels_and_splits_back() {
        let a = Tensor::from_f64_slice(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64_slice(&[1, 1, 1, 2], &[3.0, 4.0]).unwrap();
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let (da, db) = concat_channels_backward(1, 1, &y).unwrap();
        assert_eq!(da.data(), a.data());
        assert_eq!(db.data(), b.data());
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = Tensor::from_f64_slice(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let empty = Tensor::<f64>::zeros(&[1, 0, 1, 2]);
        let y = concat_channels(&a, &empty).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 2]);
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 1, 3, 2]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn maxpool_takes_window_max_and_routes_gradient() {
        let x = t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, argmax) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);
        let dy = Tensor::from_f64_slice(&[1, 1, 1, 1], &[5.0]).unwrap();
        let dx = maxpool2_backward(&[1, 1, 2, 2], &argmax, &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn stride2_conv_samples_even_positions() {
        // 1x1 kernel, stride 2: output picks x[2i, 2j] exactly
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = t4([1, 1, 4, 4], &vals);
        let k = t4([1, 1, 1, 1], &[1.0]);
        let b = Tensor::from_f64_slice(&[1], &[0.0]).unwrap();
        let y = conv2d(&x, &k, &b, 2, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }
}
