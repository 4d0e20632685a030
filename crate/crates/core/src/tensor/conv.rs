//! 2-D convolution (cross-correlation, no bias) via im2col + GEMM.
//!
//! Work is split per sample so the output of every sample is produced by a
//! single task; weight gradients are accumulated sample by sample in order,
//! which keeps results bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

/// `floor((input + 2·pad − kernel) / stride) + 1`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Config(format!(
            "non-positive output size: input {input}, kernel {kernel}, pad {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

struct Plan {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Plan {
    fn new<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_c, h, w] = input.dims4("conv2d input")?;
        let [out_c, w_in, kh, kw] = weights.dims4("conv2d weights")?;
        if w_in != in_c || kh != kw {
            return Err(Error::dim("conv2d", input.shape(), weights.shape()));
        }
        let oh = conv_output_size(h, kh, stride, pad)?;
        let ow = conv_output_size(w, kw, stride, pad)?;
        Ok(Self {
            batch,
            in_c,
            h,
            w,
            out_c,
            k: kh,
            oh,
            ow,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        for c in 0..self.in_c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
                                T::ZERO
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        for c in 0..self.in_c {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let plan = Plan::new(input, weights, stride, pad)?;
    let in_len = plan.in_c * plan.h * plan.w;
    let out_len = plan.out_c * plan.positions();
    let mut out = Tensor::zeros(&[plan.batch, plan.out_c, plan.oh, plan.ow]);
    let w = weights.data();
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || vec![T::ZERO; plan.patch() * plan.positions()],
            |cols, (y, x)| {
                let cols: &[T] = if plan.is_pointwise() {
                    x
                } else {
                    plan.im2col(x, cols);
                    cols
                };
                matmul(plan.out_c, plan.patch(), plan.positions(), w, false, cols, false, T::ZERO, y);
            },
        );
    Ok(out)
}

fn check_grad_output<T: Scalar>(plan: &Plan, grad_output: &Tensor<T>) -> Result<()> {
    let expected = [plan.batch, plan.out_c, plan.oh, plan.ow];
    if grad_output.shape() != expected {
        return Err(Error::dim("conv2d_backward", grad_output.shape(), &expected));
    }
    Ok(())
}

fn grad_input_impl<T: Scalar>(plan: &Plan, weights: &Tensor<T>, grad_output: &Tensor<T>) -> Tensor<T> {
    let in_len = plan.in_c * plan.h * plan.w;
    let out_len = plan.out_c * plan.positions();
    let mut gx = Tensor::zeros(&[plan.batch, plan.in_c, plan.h, plan.w]);
    let w = weights.data();
    gx.data_mut()
        .par_chunks_mut(in_len)
        .zip(grad_output.data().par_chunks(out_len))
        .for_each_init(
            || vec![T::ZERO; plan.patch() * plan.positions()],
            |cols, (gx_s, gy_s)| {
                if plan.is_pointwise() {
                    matmul(plan.patch(), plan.out_c, plan.positions(), w, true, gy_s, false, T::ZERO, gx_s);
                } else {
                    matmul(plan.patch(), plan.out_c, plan.positions(), w, true, gy_s, false, T::ZERO, cols);
                    plan.col2im(cols, gx_s);
                }
            },
        );
    gx
}

fn grad_weights_impl<T: Scalar>(plan: &Plan, input: &Tensor<T>, grad_output: &Tensor<T>) -> Tensor<T> {
    let in_len = plan.in_c * plan.h * plan.w;
    let out_len = plan.out_c * plan.positions();
    let mut gw = Tensor::zeros(&[plan.out_c, plan.in_c, plan.k, plan.k]);
    let mut cols = vec![T::ZERO; plan.patch() * plan.positions()];
    for (x, gy) in input.data().chunks(in_len).zip(grad_output.data().chunks(out_len)) {
        let cols: &[T] = if plan.is_pointwise() {
            x
        } else {
            plan.im2col(x, &mut cols);
            &cols
        };
        matmul(plan.out_c, plan.positions(), plan.patch(), gy, false, cols, true, T::ONE, gw.data_mut());
    }
    gw
}

/// Gradients of `sum(conv(input, weights) ⊙ grad_output)` w.r.t. input and weights.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let plan = Plan::new(input, weights, stride, pad)?;
    check_grad_output(&plan, grad_output)?;
    Ok((
        grad_input_impl(&plan, weights, grad_output),
        grad_weights_impl(&plan, input, grad_output),
    ))
}

/// Input gradient only; used when the weights are frozen.
pub fn conv2d_backward_input<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let plan = Plan::new(input, weights, stride, pad)?;
    check_grad_output(&plan, grad_output)?;
    Ok(grad_input_impl(&plan, weights, grad_output))
}
