//! 2-D convolution (cross-correlation, no kernel flip) via im2col.
//!
//! The column matrix of each image has one row per `(cin, ky, kx)` triple in
//! that order and one column per output pixel, so every output element is a
//! sequential sum in channel-major, row, column order. Parallelism is only
//! ever across images or output channels, never inside a reduction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output side length, or `None` if the window does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [batch, in_channels, height, width] = input.dims4("conv2d input")?;
    let [out_channels, w_in, kernel_h, kernel_w] = weight.dims4("conv2d weight")?;
    if w_in != in_channels {
        return Err(Error::dim(
            "conv2d",
            format!(
                "weight with {in_channels} input channels to match input {:?}",
                input.shape()
            ),
            format!("weight {:?}", weight.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::Input("conv2d stride must be at least 1".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [out_channels] {
            return Err(Error::dim(
                "conv2d bias",
                format!("[{out_channels}]"),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let (out_h, out_w) = match (
        conv_out_len(height, kernel_h, stride, pad),
        conv_out_len(width, kernel_w, stride, pad),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} fitting padded input (pad {pad})"),
                format!("input {:?}", input.shape()),
            ))
        }
    };
    Ok(ConvGeometry {
        batch,
        in_channels,
        height,
        width,
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        pad,
        out_h,
        out_w,
    })
}

fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// `out[co, p] = sum_k weight[co, k] * col[k, p] (+ bias[co])`, k ascending.
fn project<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
    col: &[T],
    out: &mut [T],
) {
    let k_len = g.patch_len();
    let p = g.out_pixels();
    for co in 0..g.out_channels {
        let dst = &mut out[co * p..(co + 1) * p];
        dst.fill(T::zero());
        let w_row = &weight[co * k_len..(co + 1) * k_len];
        for (k, &w) in w_row.iter().enumerate() {
            let src = &col[k * p..(k + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        if let Some(b) = bias {
            let b = b[co];
            for d in dst.iter_mut() {
                *d += b;
            }
        }
    }
}

fn run_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    keep_cols: bool,
) -> (Tensor<T>, Vec<T>) {
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_pixels();
    let col_len = g.patch_len() * g.out_pixels();
    let mut out = vec![T::zero(); g.batch * out_len];
    let bias = bias.map(|b| b.data());
    let cols = if keep_cols {
        let mut cols = vec![T::zero(); g.batch * col_len];
        out.par_chunks_mut(out_len)
            .zip(cols.par_chunks_mut(col_len))
            .enumerate()
            .for_each(|(b, (o, col))| {
                im2col(g, &input.data()[b * in_len..(b + 1) * in_len], col);
                project(g, weight.data(), bias, col, o);
            });
        cols
    } else {
        out.par_chunks_mut(out_len).enumerate().for_each_init(
            || vec![T::zero(); col_len],
            |col, (b, o)| {
                im2col(g, &input.data()[b * in_len..(b + 1) * in_len], col);
                project(g, weight.data(), bias, col, o);
            },
        );
        Vec::new()
    };
    let shape = [g.batch, g.out_channels, g.out_h, g.out_w];
    (
        Tensor::from_vec(shape.to_vec(), out).expect("conv output shape"),
        cols,
    )
}

/// Stateless forward pass, used for inference.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, stride, pad)?;
    let (out, _) = run_forward(&g, input, weight, bias, false);
    out.ensure_finite("conv2d_forward")?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Debug)]
struct Conv2dCache<T> {
    geometry: ConvGeometry,
    weight: Tensor<T>,
    cols: Vec<T>,
    has_bias: bool,
}

/// Convolution layer state for one training pass: forward stores the column
/// matrices that backward consumes.
#[derive(Debug)]
pub struct Conv2d<T = f32> {
    stride: usize,
    pad: usize,
    cache: Option<Conv2dCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let g = geometry(input, weight, bias, self.stride, self.pad)?;
        let (out, cols) = run_forward(&g, input, weight, bias, true);
        out.ensure_finite("conv2d_forward")?;
        self.cache = Some(Conv2dCache {
            geometry: g,
            weight: weight.clone(),
            cols,
            has_bias: bias.is_some(),
        });
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Conv2dGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("conv2d_backward called before forward".into()))?;
        let g = &cache.geometry;
        let expected = [g.batch, g.out_channels, g.out_h, g.out_w];
        if grad_out.shape() != expected {
            return Err(Error::dim(
                "conv2d_backward",
                format!("{expected:?}"),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let k_len = g.patch_len();
        let p = g.out_pixels();
        let out_len = g.out_channels * p;
        let col_len = k_len * p;
        let in_len = g.in_channels * g.height * g.width;
        let go = grad_out.data();
        let cols = &cache.cols;

        let mut grad_w = vec![T::zero(); g.out_channels * k_len];
        grad_w
            .par_chunks_mut(k_len)
            .enumerate()
            .for_each(|(co, row)| {
                for b in 0..g.batch {
                    let gy = &go[b * out_len + co * p..b * out_len + (co + 1) * p];
                    let col = &cols[b * col_len..(b + 1) * col_len];
                    for (k, r) in row.iter_mut().enumerate() {
                        let c = &col[k * p..(k + 1) * p];
                        let mut acc = T::zero();
                        for (&a, &x) in gy.iter().zip(c) {
                            acc += a * x;
                        }
                        *r += acc;
                    }
                }
            });

        let grad_b = cache.has_bias.then(|| {
            let data = (0..g.out_channels)
                .map(|co| {
                    let mut acc = T::zero();
                    for b in 0..g.batch {
                        let gy = &go[b * out_len + co * p..b * out_len + (co + 1) * p];
                        for &v in gy {
                            acc += v;
                        }
                    }
                    acc
                })
                .collect();
            Tensor::from_vec(vec![g.out_channels], data).expect("bias grad shape")
        });

        let w = cache.weight.data();
        let mut grad_in = vec![T::zero(); g.batch * in_len];
        grad_in.par_chunks_mut(in_len).enumerate().for_each_init(
            || vec![T::zero(); col_len],
            |gcol, (b, gx)| {
                gcol.fill(T::zero());
                let gy = &go[b * out_len..(b + 1) * out_len];
                for co in 0..g.out_channels {
                    let gy_row = &gy[co * p..(co + 1) * p];
                    let w_row = &w[co * k_len..(co + 1) * k_len];
                    for (k, &wv) in w_row.iter().enumerate() {
                        let dst = &mut gcol[k * p..(k + 1) * p];
                        for (d, &s) in dst.iter_mut().zip(gy_row) {
                            *d += wv * s;
                        }
                    }
                }
                col2im(g, gcol, gx);
            },
        );

        let grads = Conv2dGrads {
            input: Tensor::from_vec(vec![g.batch, g.in_channels, g.height, g.width], grad_in)?,
            weight: Tensor::from_vec(cache.weight.shape().to_vec(), grad_w)?,
            bias: grad_b,
        };
        grads.input.ensure_finite("conv2d_backward")?;
        grads.weight.ensure_finite("conv2d_backward")?;
        Ok(grads)
    }
}
