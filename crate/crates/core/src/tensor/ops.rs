//! Stateless forward/backward kernels on channels-first `C x H x W` tensors.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; odd padding goes after (bottom/right).
    Same,
    Valid,
}

/// Resolved sliding-window geometry along both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
    }
}

impl Window {
    pub fn new(
        op: &'static str,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::shape(op, "kernel and stride must be positive"));
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::shape(op, "empty spatial input"));
        }
        if stride > in_h || stride > in_w {
            return Err(Error::shape(
                op,
                format!("stride {stride} exceeds input {in_h}x{in_w}"),
            ));
        }
        let (out_h, pad_top) = axis(in_h, kh, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("kernel height {kh} exceeds input {in_h}")))?;
        let (out_w, pad_left) = axis(in_w, kw, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("kernel width {kw} exceeds input {in_w}")))?;
        Ok(Window {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate for output `(oy, ox)` and kernel tap `(ky, kx)`, or
    /// `None` when it falls in the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let x = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y as usize >= self.in_h || x as usize >= self.in_w {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub(crate) fn chw(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected C x H x W input, got {s:?}"))),
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, win: &Window) -> Vec<T> {
    let p = win.out_h * win.out_w;
    let mut cols = vec![T::zero(); c * win.kh * win.kw * p];
    let plane = win.in_h * win.in_w;
    for ci in 0..c {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..win.out_h {
                    for ox in 0..win.out_w {
                        if let Some((y, xx)) = win.source(oy, ox, ky, kx) {
                            dst[oy * win.out_w + ox] = x[ci * plane + y * win.in_w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, win: &Window) -> Vec<T> {
    let p = win.out_h * win.out_w;
    let plane = win.in_h * win.in_w;
    let mut x = vec![T::zero(); c * plane];
    for ci in 0..c {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..win.out_h {
                    for ox in 0..win.out_w {
                        if let Some((y, xx)) = win.source(oy, ox, ky, kx) {
                            x[ci * plane + y * win.in_w + xx] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// State kept by [`conv2d_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub cols: Vec<T>,
    pub window: Window,
    pub in_channels: usize,
}

/// Cross-correlation of `x` (`C x H x W`) with `weight` (`O x C x kh x kw`).
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (c, h, w) = chw("conv2d", x)?;
    let (o, kc, kh, kw) = match *weight.shape() {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        ref s => return Err(Error::shape("conv2d", format!("weight shape {s:?} is not 4-d"))),
    };
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c} != kernel channels {kc}"),
        ));
    }
    if bias.len() != o {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != output channels {o}", bias.len()),
        ));
    }
    let win = Window::new("conv2d", h, w, kh, kw, stride, padding)?;
    let cols = im2col(x.data(), c, &win);
    let p = win.out_h * win.out_w;
    let mut out = vec![T::zero(); o * p];
    T::gemm(o, c * kh * kw, p, weight.data(), false, &cols, false, &mut out, false);
    for (oc, b) in bias.data().iter().enumerate() {
        out[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += *b);
    }
    Ok((
        Tensor::from_vec(&[o, win.out_h, win.out_w], out)?,
        ConvCache {
            cols,
            window: win,
            in_channels: c,
        },
    ))
}

/// Returns `dx`; accumulates into `dweight` and `dbias`.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let win = &cache.window;
    let c = cache.in_channels;
    let o = weight.shape()[0];
    let ckk = c * win.kh * win.kw;
    let p = win.out_h * win.out_w;
    let g = dout.data();
    T::gemm(o, p, ckk, g, false, &cache.cols, true, dweight, true);
    for (oc, db) in dbias.iter_mut().enumerate() {
        *db += g[oc * p..(oc + 1) * p].iter().copied().sum::<T>();
    }
    let mut dcols = vec![T::zero(); ckk * p];
    T::gemm(ckk, o, p, weight.data(), true, g, false, &mut dcols, false);
    Tensor::from_vec(&[c, win.in_h, win.in_w], col2im(&dcols, c, win))
        .expect("col2im matches input shape")
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    /// Flat input index of the winning element for each output.
    pub argmax: Vec<usize>,
    pub in_shape: [usize; 3],
}

/// Max over each window; padding never wins. Ties go to the first element
/// in row-major window order.
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, PoolCache)> {
    let (c, h, w) = chw("maxpool2d", x)?;
    let win = Window::new("maxpool2d", h, w, kernel, kernel, stride, padding)?;
    let plane = h * w;
    let p = win.out_h * win.out_w;
    let mut out = vec![T::zero(); c * p];
    let mut argmax = vec![0usize; c * p];
    let data = x.data();
    for ci in 0..c {
        for oy in 0..win.out_h {
            for ox in 0..win.out_w {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        if let Some((y, xx)) = win.source(oy, ox, ky, kx) {
                            let idx = ci * plane + y * w + xx;
                            let v = data[idx];
                            if best.map_or(true, |(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                }
                let (v, idx) = best.expect("every window overlaps the input");
                let o = ci * p + oy * win.out_w + ox;
                out[o] = v;
                argmax[o] = idx;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, win.out_h, win.out_w], out)?,
        PoolCache {
            argmax,
            in_shape: [c, h, w],
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(cache: &PoolCache, dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&cache.in_shape);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(dout.data()) {
        d[idx] += g;
    }
    dx
}

/// `y = W x + b` with `W` of shape `out x in`; `x` is flattened.
pub fn dense_forward<T: Scalar>(x: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Vec<T>> {
    let (out, fan_in) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::shape("fully_connected", format!("weight shape {s:?} is not 2-d"))),
    };
    if x.len() != fan_in {
        return Err(Error::shape(
            "fully_connected",
            format!("fan-in mismatch: expected {fan_in}, got {}", x.len()),
        ));
    }
    let mut y = bias.data().to_vec();
    if y.len() != out {
        return Err(Error::shape("fully_connected", "bias length != output width"));
    }
    T::gemm(out, fan_in, 1, weight.data(), false, x, false, &mut y, true);
    Ok(y)
}

/// Returns `dx`; accumulates into `dweight` and `dbias`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &Tensor<T>,
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let (out, fan_in) = (weight.shape()[0], weight.shape()[1]);
    T::gemm(out, 1, fan_in, dy, false, x, false, dweight, true);
    for (b, g) in dbias.iter_mut().zip(dy) {
        *b += *g;
    }
    let mut dx = vec![T::zero(); fan_in];
    T::gemm(fan_in, out, 1, weight.data(), true, dy, false, &mut dx, false);
    dx
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `grad` where the post-activation output is not positive.
pub fn relu_backward_inplace<T: Scalar>(out: &[T], grad: &mut [T]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}
