//! Slice-level numeric kernels and their adjoints.
//!
//! These are the raw loops behind the tape operations. Maps are `C×H×W`
//! row-major; matrices are row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub const LEAKY_SLOPE: f64 = 0.2;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

/// Adjoints of [`matmul`]: returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = a[i * k + p];
            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    (da, db)
}

/// Full 2-D convolution with zero "same" padding.
/// `x: [cin×h×w]`, `weight: [cout×cin×k×k]`, output `[cout×h×w]`.
pub fn conv2d(x: &[f64], weight: &[f64], cin: usize, cout: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..cin {
            let plane = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(&mut out[o * h * w..(o + 1) * h * w], plane, wv, h, w, ky as isize - pad, kx as isize - pad);
                }
            }
        }
    }
    out
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; cin * h * w];
    let mut dw = vec![0.0; weight.len()];
    for o in 0..cout {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let plane = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (dy, dxo) = (ky as isize - pad, kx as isize - pad);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    dw[widx] += shifted_dot(gplane, plane, h, w, dy, dxo);
                    accumulate_shifted(&mut dx[i * h * w..(i + 1) * h * w], gplane, weight[widx], h, w, -dy, -dxo);
                }
            }
        }
    }
    (dx, dw)
}

/// Per-channel convolution with zero "same" padding.
/// `x: [c×h×w]`, `kernel: [c×k×k]`.
pub fn depthwise_conv2d(x: &[f64], kernel: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let kv = kernel[(ch * k + ky) * k + kx];
                if kv == 0.0 {
                    continue;
                }
                accumulate_shifted(&mut out[ch * h * w..(ch + 1) * h * w], plane, kv, h, w, ky as isize - pad, kx as isize - pad);
            }
        }
    }
    out
}

pub fn depthwise_conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; c * h * w];
    let mut dk = vec![0.0; kernel.len()];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let gplane = &g[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (dy, dxo) = (ky as isize - pad, kx as isize - pad);
                let kidx = (ch * k + ky) * k + kx;
                dk[kidx] += shifted_dot(gplane, plane, h, w, dy, dxo);
                accumulate_shifted(&mut dx[ch * h * w..(ch + 1) * h * w], gplane, kernel[kidx], h, w, -dy, -dxo);
            }
        }
    }
    (dx, dk)
}

// out[y][x] += scale * src[y + dy][x + dx] for in-bounds source pixels.
fn accumulate_shifted(out: &mut [f64], src: &[f64], scale: f64, h: usize, w: usize, dy: isize, dx: isize) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o += scale * s;
        }
    }
}

// sum_y,x g[y][x] * src[y + dy][x + dx]
fn shifted_dot(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let grow = &g[y * w + x0..y * w + x1];
        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

// Output coordinates whose shifted source coordinate lies in 0..n.
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// 2×2 block mean. `h` and `w` must be even.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                let s = p[r0 + 2 * xx] + p[r0 + 2 * xx + 1] + p[r1 + 2 * xx] + p[r1 + 2 * xx + 1];
                out.push(s * 0.25);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[(ch * h + y) * w + xx] = 0.25 * g[(ch * oh + y / 2) * ow + xx / 2];
            }
        }
    }
    dx
}

/// 2×2 block maximum, used to carry masks down UNet levels.
pub fn max_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let (r0, r1) = (2 * y * w, (2 * y + 1) * w);
                let m = p[r0 + 2 * xx].max(p[r0 + 2 * xx + 1]).max(p[r1 + 2 * xx]).max(p[r1 + 2 * xx + 1]);
                out.push(m);
            }
        }
    }
    out
}

/// Source taps `(i0, i1, frac)` for each output coordinate of a bilinear
/// resize from `n_in` to `n_out` samples with half-pixel centers
/// (`align_corners = false`); the sample is `(1-frac)·v[i0] + frac·v[i1]`.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(src) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of a `[c×h×w]` map to `[c×oh×ow]`.
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
                let bot = (1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                d[y1 * w + x0] += gv * fy * (1.0 - fx);
                d[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        math::exp(x)
    } else {
        math::ln1p(math::exp(x))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization of an `[l×c]` matrix. Returns the output and
/// the per-row `(mean, 1/std)` needed by the backward pass.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], l: usize, c: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut out = Vec::with_capacity(l * c);
    let mut stats = Vec::with_capacity(l);
    for row in x.chunks_exact(c).take(l) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gain[j] + bias[j]);
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Adjoints of [`layer_norm`]: `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    x: &[f64],
    gain: &[f64],
    stats: &[(f64, f64)],
    g: &[f64],
    l: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; l * c];
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for t in 0..l {
        let (mean, rstd) = stats[t];
        let row = &x[t * c..(t + 1) * c];
        let grow = &g[t * c..(t + 1) * c];
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gain[j];
            dgain[j] += grow[j] * xhat[j];
            dbias[j] += grow[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / c as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            dx[t * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgain, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct nested-loop convolution used as an oracle.
    fn conv_reference(x: &[f64], k: &[f64], h: usize, w: usize, ks: usize) -> Vec<f64> {
        let p = (ks / 2) as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for ky in 0..ks as isize {
                    for kx in 0..ks as isize {
                        let (sy, sx) = (y + ky - p, xx + kx - p);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += k[(ky * ks as isize + kx) as usize] * x[(sy * w as isize + sx) as usize];
                        }
                    }
                }
                out[(y * w as isize + xx) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn depthwise_matches_nested_loops() {
        let x: Vec<f64> = (0..25).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let k: Vec<f64> = (0..9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let got = depthwise_conv2d(&x, &k, 1, 5, 5, 3);
        let want = conv_reference(&x, &k, 5, 5, 3);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn bilinear_half_equals_block_mean() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = resize_bilinear(&x, 1, 8, 8, 4, 4);
        let b = avg_pool2(&x, 1, 8, 8);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = vec![0.3; 2 * 3 * 5];
        let y = resize_bilinear(&x, 2, 3, 5, 6, 10);
        assert!(y.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746...
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
    }
}
