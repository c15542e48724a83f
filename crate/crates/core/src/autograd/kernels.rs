//! Value-level kernels for the pointwise, pooling, softmax and resampling ops.
//! Each forward has a matching backward that maps an output gradient to an
//! input gradient.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Gradient passes where the input is strictly positive.
pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2x2 non-overlapping max pool. Also returns, per output element, the flat
/// input index it was taken from; ties go to the first window element in
/// row-major order.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!(
            "maxpool2 needs even spatial dims, got {}x{}",
            h,
            w
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad[idx] += g;
    }
    grad
}

/// Softmax across the channel axis of a `[C, H, W]` tensor, stabilized by
/// the per-pixel channel maximum.
pub fn softmax_channels_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if c == 0 {
        return Err(shape_err!("softmax over zero channels"));
    }
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(src[ch * plane + p]);
        }
        let mut total = 0.0;
        for ch in 0..c {
            let e = (src[ch * plane + p] - m).exp();
            out[ch * plane + p] = e;
            total += e;
        }
        for ch in 0..c {
            out[ch * plane + p] /= total;
        }
    }
    Tensor::new(x.shape(), out)
}

/// `dx_c = y_c * (dy_c - sum_k y_k dy_k)` at every pixel.
pub fn softmax_channels_backward(y: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = y.dims3().expect("rank 3");
    let plane = h * w;
    let y = y.data();
    let mut grad = vec![0.0; y.len()];
    for p in 0..plane {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += y[ch * plane + p] * grad_out[ch * plane + p];
        }
        for ch in 0..c {
            let i = ch * plane + p;
            grad[i] = y[i] * (grad_out[i] - dot);
        }
    }
    grad
}

/// Align-corners source coordinate for output index `t`: the integer base
/// cell and the fractional blend weight toward the next cell.
fn source_coord(t: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    if dst == 1 || src == 1 {
        return (0, 0, 0.0);
    }
    let s = (t * (src - 1)) as f64 / (dst - 1) as f64;
    let lo = (s.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

fn check_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear upsample to empty size {}x{}", out_h, out_w));
    }
    if h == 0 || w == 0 || out_h < h || out_w < w {
        return Err(shape_err!(
            "bilinear upsample needs target >= source, got {}x{} -> {}x{}",
            h,
            w,
            out_h,
            out_w
        ));
    }
    Ok((c, h, w))
}

pub fn bilinear_upsample_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = check_upsample(x, out_h, out_w)?;
    let rows: Vec<_> = (0..out_h).map(|t| source_coord(t, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|t| source_coord(t, w, out_w)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                let bottom = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn bilinear_upsample_backward(
    input_shape: &[usize],
    out_h: usize,
    out_w: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let rows: Vec<_> = (0..out_h).map(|t| source_coord(t, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|t| source_coord(t, w, out_w)).collect();
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut grad[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (ty, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (tx, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = go[ty * out_w + tx];
                plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                plane[y0 * w + x1] += (1.0 - fy) * fx * g;
                plane[y1 * w + x0] += fy * (1.0 - fx) * g;
                plane[y1 * w + x1] += fy * fx * g;
            }
        }
    }
    grad
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
