//! 2-D cross-correlation lowered to a matrix product through an im2col buffer.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, k_cin, kh, kw) = kernel.dims4()?;
        if k_cin != c_in {
            return Err(shape_err!(
                "conv2d input {:?} has {} channels but kernel {:?} expects {}",
                input.shape(),
                c_in,
                kernel.shape(),
                k_cin
            ));
        }
        if bias.shape() != [c_out] {
            return Err(shape_err!(
                "conv2d bias {:?} does not match kernel {:?}",
                bias.shape(),
                kernel.shape()
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(shape_err!(
                "conv2d kernel {:?} does not fit padded input {}x{}",
                kernel.shape(),
                ph,
                pw
            ));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err!(
                "conv2d stride {} does not tile padded input {}x{} with kernel {}x{}",
                stride,
                ph,
                pw,
                kh,
                kw
            ));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `[C_in*kH*kW, H'*W']` matrix.
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m x n] = a * b` with arbitrary strides; `c` is row-major and overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size `a`, `b` and `c` to cover every index reachable
    // through the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass. Returns the output and the im2col buffer needed by backward.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>, ConvGeom)> {
    let g = ConvGeom::new(input, kernel, bias, stride, pad)?;
    let cols = im2col(input.data(), &g);
    let (k, p) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; g.c_out * p];
    gemm(
        g.c_out,
        k,
        p,
        kernel.data(),
        k as isize,
        1,
        &cols,
        p as isize,
        1,
        &mut out,
    );
    for (o, b) in bias.data().iter().enumerate() {
        for v in &mut out[o * p..(o + 1) * p] {
            *v += b;
        }
    }
    let out = Tensor::new(&[g.c_out, g.out_h, g.out_w], out)?;
    Ok((out, cols, g))
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(g: &ConvGeom, cols: &[f64], kernel: &[f64], grad_out: &[f64]) -> ConvGrads {
    let (k, p) = (g.patch_len(), g.out_len());

    let mut d_kernel = vec![0.0; g.c_out * k];
    gemm(
        g.c_out,
        p,
        k,
        grad_out,
        p as isize,
        1,
        cols,
        1,
        p as isize,
        &mut d_kernel,
    );

    let mut d_cols = vec![0.0; k * p];
    gemm(
        k,
        g.c_out,
        p,
        kernel,
        1,
        k as isize,
        grad_out,
        p as isize,
        1,
        &mut d_cols,
    );

    let d_bias = grad_out.chunks(p).map(|row| row.iter().sum()).collect();

    ConvGrads {
        input: col2im(&d_cols, g),
        kernel: d_kernel,
        bias: d_bias,
    }
}
