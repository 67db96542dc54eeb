//! 2-D convolution (im2col + GEMM) and bilinear resampling.

use std::sync::Arc;

use super::linalg::{gemm, Mat};
use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dOptions {
    /// Stride 1, padding 1: shape-preserving for 3x3 kernels.
    pub const SAME3: Conv2dOptions = Conv2dOptions {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: Conv2dOptions = Conv2dOptions {
        stride: 1,
        padding: 0,
    };
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[C_in, H, W]` into `[C_in*k*k, Ho*Wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * plane;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: accumulates columns back into an image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * plane;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`
    /// weights and optional `[C_out]` bias, zero padding.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, opts: Conv2dOptions) -> Result<Tensor> {
        let (b, c_in, h, w) = self.dims4()?;
        let (c_out, wc_in, k, k2) = weight.dims4()?;
        if wc_in != c_in {
            return Err(shape_err!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            ));
        }
        if k != k2 {
            return Err(shape_err!("conv2d: non-square kernel {k}x{k2}"));
        }
        if let Some(bias) = bias {
            if bias.shape() != [c_out] {
                return Err(shape_err!("conv2d: bias {:?} is not [{c_out}]", bias.shape()));
            }
        }
        if opts.stride == 0 || h + 2 * opts.padding < k || w + 2 * opts.padding < k {
            return Err(shape_err!(
                "conv2d: {h}x{w} input too small for kernel {k} with padding {}",
                opts.padding
            ));
        }
        let geo = Geometry {
            c_in,
            h,
            w,
            k,
            stride: opts.stride,
            pad: opts.padding,
            ho: (h + 2 * opts.padding - k) / opts.stride + 1,
            wo: (w + 2 * opts.padding - k) / opts.stride + 1,
        };
        let (rows, plane) = (geo.col_rows(), geo.out_plane());
        let x = self.data_arc();
        let wt = weight.data_arc();
        let mut out = vec![0.0; b * c_out * plane];
        let mut cols = vec![0.0; rows * plane];
        for bi in 0..b {
            geo.im2col(&x[bi * c_in * h * w..(bi + 1) * c_in * h * w], &mut cols);
            let dst = &mut out[bi * c_out * plane..(bi + 1) * c_out * plane];
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                    chunk.fill(bias.data()[co]);
                }
            }
            gemm(Mat::new(&wt, c_out, rows), Mat::new(&cols, rows, plane), 1.0, dst);
        }
        let shape = vec![b, c_out, geo.ho, geo.wo];
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            inputs.push(bias.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op("conv2d", shape, Arc::new(out), inputs, move |g| {
            let img = c_in * h * w;
            let mut dx = vec![0.0; b * img];
            let mut dw = vec![0.0; c_out * rows];
            let mut cols = vec![0.0; rows * plane];
            let mut dcols = vec![0.0; rows * plane];
            for bi in 0..b {
                let gb = &g[bi * c_out * plane..(bi + 1) * c_out * plane];
                geo.im2col(&x[bi * img..(bi + 1) * img], &mut cols);
                gemm(Mat::new(gb, c_out, plane), Mat::t(&cols, rows, plane), 1.0, &mut dw);
                gemm(Mat::t(&wt, c_out, rows), Mat::new(gb, c_out, plane), 0.0, &mut dcols);
                geo.col2im(&dcols, &mut dx[bi * img..(bi + 1) * img]);
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![0.0; c_out];
                for (i, chunk) in g.chunks_exact(plane).enumerate() {
                    db[i % c_out] += chunk.iter().sum::<f64>();
                }
                grads.push(Some(db));
            }
            grads
        }))
    }

    /// Shape-preserving 3x3 convolution (stride 1, padding 1).
    pub fn conv3x3(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, k, _) = weight.dims4()?;
        if k != 3 {
            return Err(shape_err!("conv3x3: kernel is {k}x{k}"));
        }
        self.conv2d(weight, bias, Conv2dOptions::SAME3)
    }

    /// Bilinear resampling of `[B, C, H, W]` to `[B, C, out_h, out_w]` with
    /// half-pixel centres (the `align_corners = false` convention).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("bilinear_resize: empty target {out_h}x{out_w}"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let ys = Arc::new(taps(h, out_h));
        let xs = Arc::new(taps(w, out_w));
        let x = self.data();
        let mut out = vec![0.0; b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], lx);
                    let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], lx);
                    dst[oy * out_w + ox] = lerp(top, bot, ly);
                }
            }
        }
        Ok(Tensor::from_op(
            "bilinear_resize",
            vec![b, c, out_h, out_w],
            Arc::new(out),
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let go = gp[oy * out_w + ox];
                            let (top, bot) = (go * (1.0 - ly), go * ly);
                            dst[y0 * w + x0] += top * (1.0 - lx);
                            dst[y0 * w + x1] += top * lx;
                            dst[y1 * w + x0] += bot * (1.0 - lx);
                            dst[y1 * w + x1] += bot * lx;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// For each output index: the two source indices and the interpolation weight.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
