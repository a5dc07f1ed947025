//! Raw per-image compute kernels for the layer implementations.
//!
//! Convolution goes through im2col so the inner loops are plain matrix
//! products. Everything works on flat row-major f64 slices; batching and
//! parallel dispatch live in the layer code in `nn`.

use crate::tensor::matmul_into;

/// Spatial geometry of one convolution or pooling application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        None
    } else {
        Some((span - kernel) / stride + 1)
    }
}

/// Unrolls one C x H x W image into a (C*k*k) x (oh*ow) column matrix,
/// zero-padding out-of-bounds taps.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let k = g.kernel;
    let patch = g.oh * g.ow;
    debug_assert_eq!(img.len(), g.in_ch * g.h * g.w);
    debug_assert_eq!(col.len(), g.in_ch * k * k * patch);
    for c in 0..g.in_ch {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * patch;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the image layout.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let k = g.kernel;
    let patch = g.oh * g.ow;
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * patch;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += col[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for one image: out = W_mat * col + bias.
pub(crate) fn conv_forward_image(
    img: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeom,
    col: &mut [f64],
    out: &mut [f64],
) {
    let patch = g.oh * g.ow;
    let kk = g.in_ch * g.kernel * g.kernel;
    im2col(img, g, col);
    out.fill(0.0);
    matmul_into(weight, col, out, g.out_ch, kk, patch);
    for f in 0..g.out_ch {
        let b = bias[f];
        for v in &mut out[f * patch..(f + 1) * patch] {
            *v += b;
        }
    }
}

/// Backward convolution for one image. Returns the weight and bias gradient
/// contributions of this image and writes the input gradient to `dimg`.
pub(crate) fn conv_backward_image(
    img: &[f64],
    weight_t: &[f64], // (C*k*k) x F
    dout: &[f64],
    g: &ConvGeom,
    scratch: &mut ConvScratch,
    dimg: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let patch = g.oh * g.ow;
    let kk = g.in_ch * g.kernel * g.kernel;

    im2col(img, g, &mut scratch.col);
    // col^T, so the dW product runs over contiguous rows
    for r in 0..kk {
        for p in 0..patch {
            scratch.col_t[p * kk + r] = scratch.col[r * patch + p];
        }
    }

    let mut dweight = vec![0.0; g.out_ch * kk];
    matmul_into(dout, &scratch.col_t, &mut dweight, g.out_ch, patch, kk);

    let mut dbias = vec![0.0; g.out_ch];
    for f in 0..g.out_ch {
        dbias[f] = dout[f * patch..(f + 1) * patch].iter().sum();
    }

    scratch.dcol.fill(0.0);
    matmul_into(weight_t, dout, &mut scratch.dcol, kk, g.out_ch, patch);
    dimg.fill(0.0);
    col2im_add(&scratch.dcol, g, dimg);

    (dweight, dbias)
}

/// Per-thread buffers for the conv backward pass.
pub(crate) struct ConvScratch {
    pub col: Vec<f64>,
    pub col_t: Vec<f64>,
    pub dcol: Vec<f64>,
}

impl ConvScratch {
    pub fn new(g: &ConvGeom) -> Self {
        let n = g.in_ch * g.kernel * g.kernel * g.oh * g.ow;
        ConvScratch {
            col: vec![0.0; n],
            col_t: vec![0.0; n],
            dcol: vec![0.0; n],
        }
    }
}

/// Max-pool forward for one image; records the flat argmax index (within the
/// image) per output cell. Ties go to the first maximum in row-major window
/// order, which keeps backward routing deterministic.
pub(crate) fn pool_forward_image(
    img: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    let iy = oy * stride + ky;
                    for kx in 0..window {
                        let ix = ox * stride + kx;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = c * h * w + iy * w + ix;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}
