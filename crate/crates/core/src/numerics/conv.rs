use crate::error::{PcpError, Result};
use crate::tensor::Tensor;

use super::gemm;

/// Spatial bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out_h = conv_output_size(in_h, kh, stride, pad)?;
        let out_w = conv_output_size(in_w, kw, stride, pad)?;
        Ok(ConvGeometry {
            in_channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the im2col matrix: `c * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent `(size + 2 pad - k) / stride + 1`, rejected unless the division is exact.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(PcpError::Shape("stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if k == 0 || padded < k {
        return Err(PcpError::Shape(format!(
            "kernel extent {k} does not fit padded input extent {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(PcpError::Shape(format!(
            "(input {size} + 2*pad {pad} - kernel {k}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds one image `[c, h, w]` into a `[c*kh*kw, out_h*out_w]` column matrix.
pub fn im2col(image: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let positions = g.out_positions();
    let mut cols = vec![0.0f32; g.patch_len() * positions];
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
pub fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let positions = g.out_positions();
    let mut image = vec![0.0f64; g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            image[(c * g.in_h + iy as usize) * g.in_w + ix as usize] +=
                                src[oy * g.out_w + ox] as f64;
                        }
                    }
                }
            }
        }
    }
    image.into_iter().map(|v| v as f32).collect()
}

/// Writes the receptive-field patch of output position `(oy, ox)` into `out`
/// (length `c*kh*kw`, channel-major, zero padded).
pub fn patch_at(image: &[f32], g: &ConvGeometry, oy: usize, ox: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), g.patch_len());
    for c in 0..g.in_channels {
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            for kx in 0..g.kw {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                let v = if iy >= 0 && iy < g.in_h as isize && ix >= 0 && ix < g.in_w as isize {
                    image[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                } else {
                    0.0
                };
                out[(c * g.kh + ky) * g.kw + kx] = v;
            }
        }
    }
}

/// Cross-correlation of `input [N,c,H,W]` with `weights [n,c,kh,kw]` plus bias.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (batch, c, h, w) = input.dims4()?;
    let (n, wc, kh, kw) = weights.dims4()?;
    if wc != c {
        return Err(PcpError::Shape(format!(
            "input has {c} channels but weights {:?} expect {wc}",
            weights.shape()
        )));
    }
    if bias.len() != n {
        return Err(PcpError::Shape(format!(
            "bias has {} entries for {n} output channels",
            bias.len()
        )));
    }
    let g = ConvGeometry::new(c, h, w, kh, kw, stride, pad)?;
    let positions = g.out_positions();
    let image_len = c * h * w;
    let mut out = Vec::with_capacity(batch * n * positions);
    for b in 0..batch {
        let cols = im2col(&input.data()[b * image_len..(b + 1) * image_len], &g);
        let mut y = gemm(weights.data(), &cols, n, g.patch_len(), positions);
        for (o, chunk) in y.chunks_mut(positions).enumerate() {
            let bo = bias[o];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        out.extend_from_slice(&y);
    }
    Tensor::new(vec![batch, n, g.out_h, g.out_w], out)
}
