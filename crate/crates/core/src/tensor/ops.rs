//! Forward and backward kernels for the differentiable primitives.
//!
//! Every kernel here is a pure function of its inputs. The tape in
//! [`crate::autodiff`] pairs each forward with its backward.

use crate::error::{dim_err, Error, Result};
use crate::tensor::NdArray;

/// Sentinel in gather index maps: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// d/dx silu(x) = σ(x)(1 + x(1 − σ(x)))
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `aᵀ × b` for `a: [k,m]`, `b: [k,n]` → `[m,n]`.
pub fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a × bᵀ` for `a: [m,k]`, `b: [n,k]` → `[m,n]`.
pub fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn spatial_len(x: &NdArray) -> usize {
    x.shape()[1..].iter().product()
}

pub fn pointwise_conv(x: &NdArray, kernel: &NdArray, bias: Option<&NdArray>) -> Result<NdArray> {
    if x.rank() < 1 || kernel.rank() != 2 {
        return dim_err(format!(
            "pointwise_conv: input {:?}, kernel {:?}",
            x.shape(),
            kernel.shape()
        ));
    }
    let (d_out, d_in) = (kernel.dim(0), kernel.dim(1));
    if x.dim(0) != d_in {
        return dim_err(format!(
            "pointwise_conv: kernel expects {d_in} input channels, input has {}",
            x.dim(0)
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return dim_err(format!("pointwise_conv: bias {:?} for {d_out} outputs", b.shape()));
        }
    }
    let hw = spatial_len(x);
    let mut out = vec![0.0; d_out * hw];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(hw.max(1)).enumerate() {
            chunk.fill(b.data()[o]);
        }
    }
    matmul_raw(kernel.data(), x.data(), d_out, d_in, hw, &mut out);
    let mut shape = x.shape().to_vec();
    shape[0] = d_out;
    NdArray::new(&shape, out)
}

/// Gradients of [`pointwise_conv`] with respect to input, kernel and bias.
pub fn pointwise_conv_backward(
    x: &NdArray,
    kernel: &NdArray,
    grad: &NdArray,
) -> (NdArray, NdArray, NdArray) {
    let (d_out, d_in) = (kernel.dim(0), kernel.dim(1));
    let hw = spatial_len(x);
    let mut gx = vec![0.0; d_in * hw];
    matmul_tn_raw(kernel.data(), grad.data(), d_out, d_in, hw, &mut gx);
    let mut gk = vec![0.0; d_out * d_in];
    matmul_nt_raw(grad.data(), x.data(), d_out, hw, d_in, &mut gk);
    let gb: Vec<f64> = grad.data().chunks(hw.max(1)).map(|c| c.iter().sum()).collect();
    (
        NdArray::new(x.shape(), gx).unwrap(),
        NdArray::new(kernel.shape(), gk).unwrap(),
        NdArray::new(&[d_out], gb).unwrap(),
    )
}

fn check_dilated(x: &NdArray, kernel: &NdArray, dilation: usize) -> Result<(usize, usize, usize, usize)> {
    if dilation == 0 {
        return Err(Error::Parameter("dilation must be at least 1".into()));
    }
    x.expect_rank(3, "dilated_conv3x3 input")?;
    if kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3 || kernel.dim(1) != x.dim(0) {
        return dim_err(format!(
            "dilated_conv3x3: kernel {:?} does not fit input {:?}",
            kernel.shape(),
            x.shape()
        ));
    }
    Ok((kernel.dim(0), x.dim(0), x.dim(1), x.dim(2)))
}

/// 3×3 cross-correlation with taps `dilation` apart and zero padding of
/// `dilation` on every side, so the output keeps the input's spatial size.
pub fn dilated_conv3x3(x: &NdArray, kernel: &NdArray, dilation: usize) -> Result<NdArray> {
    let (c_out, c_in, h, w) = check_dilated(x, kernel, dilation)?;
    let d = dilation as isize;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for c in 0..c_in {
            let plane = &x.data()[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = kernel.at(&[o, c, ky, kx]);
                    if k == 0.0 {
                        continue;
                    }
                    let dy = (ky as isize - 1) * d;
                    let dx = (kx as isize - 1) * d;
                    for i in 0..h {
                        let si = i as isize + dy;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dx;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            out[(o * h + i) * w + j] += k * plane[si as usize * w + sj as usize];
                        }
                    }
                }
            }
        }
    }
    NdArray::new(&[c_out, h, w], out)
}

pub fn dilated_conv3x3_backward(
    x: &NdArray,
    kernel: &NdArray,
    dilation: usize,
    grad: &NdArray,
) -> (NdArray, NdArray) {
    let (c_out, c_in, h, w) = check_dilated(x, kernel, dilation).expect("validated in forward");
    let d = dilation as isize;
    let mut gx = NdArray::zeros(x.shape());
    let mut gk = NdArray::zeros(kernel.shape());
    for o in 0..c_out {
        let g = &grad.data()[o * h * w..(o + 1) * h * w];
        for c in 0..c_in {
            let plane = &x.data()[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = kernel.at(&[o, c, ky, kx]);
                    let dy = (ky as isize - 1) * d;
                    let dx = (kx as isize - 1) * d;
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i as isize + dy;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dx;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let src = si as usize * w + sj as usize;
                            let gv = g[i * w + j];
                            acc += gv * plane[src];
                            gx.data_mut()[c * h * w + src] += k * gv;
                        }
                    }
                    let off = gk.offset(&[o, c, ky, kx]);
                    gk.data_mut()[off] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// Per-group statistics saved by the group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub normalized: NdArray,
    pub rstd: Vec<f64>,
}

pub fn group_norm(
    x: &NdArray,
    groups: usize,
    scale: &NdArray,
    shift: &NdArray,
    eps: f64,
) -> Result<(NdArray, GroupNormCache)> {
    if x.rank() < 1 || groups == 0 {
        return dim_err("group_norm needs a channel axis and at least one group");
    }
    let c = x.dim(0);
    if !c.is_multiple_of(groups) {
        return dim_err(format!("group_norm: {c} channels not divisible by {groups} groups"));
    }
    if scale.shape() != [c] || shift.shape() != [c] {
        return dim_err(format!("group_norm: affine parameters must have shape [{c}]"));
    }
    let rest = spatial_len(x);
    let per_group = (c / groups) * rest;
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * per_group..(g + 1) * per_group;
        let vals = &x.data()[span.clone()];
        let n = per_group as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        rstds.push(rstd);
        for (k, &v) in vals.iter().enumerate() {
            let idx = span.start + k;
            let ch = idx / rest.max(1);
            let z = (v - mean) * rstd;
            normalized[idx] = z;
            out[idx] = z * scale.data()[ch] + shift.data()[ch];
        }
    }
    Ok((
        NdArray::new(x.shape(), out)?,
        GroupNormCache { normalized: NdArray::new(x.shape(), normalized)?, rstd: rstds },
    ))
}

/// Returns gradients for input, scale and shift.
pub fn group_norm_backward(
    cache: &GroupNormCache,
    groups: usize,
    scale: &NdArray,
    grad: &NdArray,
) -> (NdArray, NdArray, NdArray) {
    let xhat = &cache.normalized;
    let c = xhat.dim(0);
    let rest = spatial_len(xhat);
    let per_group = (c / groups) * rest;
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    let mut gx = vec![0.0; xhat.len()];
    for (idx, (&g, &z)) in grad.data().iter().zip(xhat.data()).enumerate() {
        let ch = idx / rest.max(1);
        gscale[ch] += g * z;
        gshift[ch] += g;
    }
    for grp in 0..groups {
        let span = grp * per_group..(grp + 1) * per_group;
        let n = per_group as f64;
        let mut sum_gz = 0.0;
        let mut sum_g = 0.0;
        for idx in span.clone() {
            let ch = idx / rest.max(1);
            let gz = grad.data()[idx] * scale.data()[ch];
            sum_g += gz;
            sum_gz += gz * xhat.data()[idx];
        }
        let rstd = cache.rstd[grp];
        for idx in span {
            let ch = idx / rest.max(1);
            let gz = grad.data()[idx] * scale.data()[ch];
            gx[idx] = rstd * (gz - sum_g / n - xhat.data()[idx] * sum_gz / n);
        }
    }
    (
        NdArray::new(xhat.shape(), gx).unwrap(),
        NdArray::new(&[c], gscale).unwrap(),
        NdArray::new(&[c], gshift).unwrap(),
    )
}

pub fn silu(x: &NdArray) -> NdArray {
    x.map(silu_scalar)
}

pub fn sigmoid(x: &NdArray) -> NdArray {
    x.map(sigmoid_scalar)
}

pub fn softplus(x: &NdArray) -> NdArray {
    x.map(softplus_scalar)
}

fn check_chw(x: &NdArray, what: &str) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, what)?;
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

/// 2×2 average pooling, stride 2. Odd extents are padded on the high side;
/// padded cells are excluded from the divisor so constant maps stay constant.
pub fn avg_pool2x2(x: &NdArray) -> Result<NdArray> {
    let (c, h, w) = check_chw(x, "avg_pool2x2")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for si in 2 * i..(2 * i + 2).min(h) {
                    for sj in 2 * j..(2 * j + 2).min(w) {
                        acc += x.data()[(ch * h + si) * w + sj];
                        cnt += 1;
                    }
                }
                out[(ch * oh + i) * ow + j] = acc / cnt as f64;
            }
        }
    }
    NdArray::new(&[c, oh, ow], out)
}

pub fn avg_pool2x2_backward(input_shape: &[usize], grad: &NdArray) -> NdArray {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut gx = NdArray::zeros(input_shape);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let rows = 2 * i..(2 * i + 2).min(h);
                let cols = 2 * j..(2 * j + 2).min(w);
                let cnt = rows.len() * cols.len();
                let g = grad.data()[(ch * oh + i) * ow + j] / cnt as f64;
                for si in rows {
                    for sj in cols.clone() {
                        gx.data_mut()[(ch * h + si) * w + sj] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Mean over all spatial positions: `[C,H,W] → [C,1,1]`.
pub fn global_avg_pool(x: &NdArray) -> Result<NdArray> {
    let (c, h, w) = check_chw(x, "global_avg_pool")?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    NdArray::new(&[c, 1, 1], data)
}

/// Max over all spatial positions, returning the winning flat index per
/// channel (first occurrence on ties).
pub fn global_max_pool(x: &NdArray) -> Result<(NdArray, Vec<usize>)> {
    let (c, h, w) = check_chw(x, "global_max_pool")?;
    let mut vals = Vec::with_capacity(c);
    let mut arg = Vec::with_capacity(c);
    for (ch, plane) in x.data().chunks(h * w).enumerate() {
        let (best, v) = argmax(plane);
        vals.push(v);
        arg.push(ch * h * w + best);
    }
    Ok((NdArray::new(&[c, 1, 1], vals)?, arg))
}

/// Mean across channels: `[C,H,W] → [1,H,W]`.
pub fn channel_mean(x: &NdArray) -> Result<NdArray> {
    let (c, h, w) = check_chw(x, "channel_mean")?;
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for plane in x.data().chunks(hw) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    NdArray::new(&[1, h, w], out)
}

/// Max across channels with the flat source index of each winner.
pub fn channel_max(x: &NdArray) -> Result<(NdArray, Vec<usize>)> {
    let (c, h, w) = check_chw(x, "channel_max")?;
    let hw = h * w;
    let mut out = vec![f64::NEG_INFINITY; hw];
    let mut arg = vec![0usize; hw];
    for ch in 0..c {
        for p in 0..hw {
            let v = x.data()[ch * hw + p];
            if v > out[p] || ch == 0 {
                out[p] = v;
                arg[p] = ch * hw + p;
            }
        }
    }
    Ok((NdArray::new(&[1, h, w], out)?, arg))
}

fn argmax(vals: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in vals.iter().enumerate() {
        if v > bv || i == 0 {
            best = i;
            bv = v;
        }
    }
    (best, bv)
}

/// Index map for nearest-neighbour upsampling by `factor`, cropped to
/// `(out_h, out_w)`.
pub fn upsample_index(c: usize, h: usize, w: usize, factor: usize, out_h: usize, out_w: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for i in 0..out_h {
            for j in 0..out_w {
                let (si, sj) = (i / factor, j / factor);
                if si < h && sj < w {
                    idx.push(((ch * h + si) * w + sj) as u32);
                } else {
                    idx.push(GATHER_ZERO);
                }
            }
        }
    }
    idx
}

pub fn upsample_nearest(x: &NdArray, factor: usize) -> Result<NdArray> {
    let (c, h, w) = check_chw(x, "upsample_nearest")?;
    if factor == 0 {
        return Err(Error::Parameter("upsample factor must be at least 1".into()));
    }
    let idx = upsample_index(c, h, w, factor, h * factor, w * factor);
    gather(x, &[c, h * factor, w * factor], &idx)
}

/// `out[i] = x[index[i]]`, or zero where the index is [`GATHER_ZERO`].
pub fn gather(x: &NdArray, out_shape: &[usize], index: &[u32]) -> Result<NdArray> {
    let n: usize = out_shape.iter().product();
    if n != index.len() {
        return dim_err(format!("gather: index has {} entries for shape {out_shape:?}", index.len()));
    }
    let src = x.data();
    let data = index
        .iter()
        .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
        .collect();
    NdArray::new(out_shape, data)
}

pub fn gather_backward(input_shape: &[usize], index: &[u32], grad: &NdArray) -> NdArray {
    let mut gx = NdArray::zeros(input_shape);
    let dst = gx.data_mut();
    for (&i, &g) in index.iter().zip(grad.data()) {
        if i != GATHER_ZERO {
            dst[i as usize] += g;
        }
    }
    gx
}

/// Numerically stable log-softmax of one logit vector.
pub fn log_softmax_row(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3×4
        let mut c = vec![0.0; 8];
        matmul_raw(&a, &b, 2, 3, 4, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        let at = NdArray::new(&[2, 3], a.clone()).unwrap().transpose2().unwrap();
        let mut c2 = vec![0.0; 8];
        matmul_tn_raw(at.data(), &b, 3, 2, 4, &mut c2);
        assert_eq!(c, c2);
        let bt = NdArray::new(&[3, 4], b).unwrap().transpose2().unwrap();
        let mut c3 = vec![0.0; 8];
        matmul_nt_raw(&a, bt.data(), 2, 3, 4, &mut c3);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn avg_pool_keeps_constants_on_odd_maps() {
        let x = NdArray::full(&[2, 5, 3], 1.25);
        let y = avg_pool2x2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn upsample_then_pool_roundtrip() {
        let x = NdArray::from_fn(&[1, 2, 2], |i| i as f64);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), &[1, 4, 4]);
        assert_eq!(avg_pool2x2(&up).unwrap(), x);
    }

    #[test]
    fn group_norm_of_zero_is_shift() {
        let x = NdArray::zeros(&[4, 2, 2]);
        let (y, _) = group_norm(&x, 2, &NdArray::full(&[4], 3.0), &NdArray::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(silu(&y), y);
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let x = NdArray::from_fn(&[4, 3, 3], |i| ((i * 7) % 11) as f64);
        let (y, _) = group_norm(&x, 2, &NdArray::full(&[4], 1.0), &NdArray::zeros(&[4]), 0.0).unwrap();
        for g in y.data().chunks(18) {
            let m = g.iter().sum::<f64>() / 18.0;
            let v = g.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_statistics_match_brute_force() {
        let x = NdArray::from_fn(&[3, 4, 5], |i| ((i * 37) % 17) as f64 - 8.0);
        let avg = global_avg_pool(&x).unwrap();
        let (max, _) = global_max_pool(&x).unwrap();
        for c in 0..3 {
            let s = &x.data()[c * 20..(c + 1) * 20];
            assert!((avg.data()[c] - s.iter().sum::<f64>() / 20.0).abs() < 1e-14);
            assert_eq!(max.data()[c], s.iter().copied().fold(f64::MIN, f64::max));
        }
        let two = NdArray::new(&[2, 1, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(channel_mean(&two).unwrap().data(), &[3.0]);
        assert_eq!(channel_max(&two).unwrap().0.data(), &[4.0]);
    }

    #[test]
    fn dilated_conv_identity_kernel() {
        let x = NdArray::from_fn(&[1, 5, 5], |i| i as f64);
        let mut k = NdArray::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(dilated_conv3x3(&x, &k, 2).unwrap(), x);
        assert!(dilated_conv3x3(&x, &k, 0).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut out = [0.0; 3];
        log_softmax_row(&[1000.0, 1000.0, 1000.0], &mut out);
        for v in out {
            assert!((v + 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_activations() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus_scalar(800.0), 800.0);
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
    }
}
