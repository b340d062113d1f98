//! Square-kernel 2-D convolution with zero padding, forward and backward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Convolution bank; `weight` is laid out `[c_out, c_in, k, k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConvRecord")]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvRecord {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<ConvRecord> for Conv2d {
    type Error = Error;

    fn try_from(r: ConvRecord) -> Result<Self> {
        if r.c_in == 0 || r.c_out == 0 || r.kernel == 0 || r.stride == 0 {
            return Err(Error::Schema("conv dimensions must be positive".into()));
        }
        if r.weight.len() != r.c_out * r.c_in * r.kernel * r.kernel || r.bias.len() != r.c_out {
            return Err(Error::Schema("conv parameter counts do not match dimensions".into()));
        }
        if r.weight.iter().chain(&r.bias).any(|v| !v.is_finite()) {
            return Err(Error::Schema("conv parameters must be finite".into()));
        }
        Ok(Self {
            c_in: r.c_in,
            c_out: r.c_out,
            kernel: r.kernel,
            stride: r.stride,
            pad: r.pad,
            weight: r.weight,
            bias: r.bias,
        })
    }
}

/// Parameter gradients of a [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrads {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ConvGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            weight: vec![0.0; c_out * c_in * kernel * kernel],
            bias: vec![0.0; c_out],
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Output positions `[lo, hi)` along one axis whose input tap
    /// `out * stride + k - pad` lands inside `[0, n)`.
    fn valid_range(&self, k: usize, n: usize, out_n: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n-1
        let top = n as isize - 1 - off;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(out_n as isize) };
        (lo.max(0) as usize, hi.max(lo) as usize)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = x.dims3()?;
        if c != self.c_in {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::shape(format!("input {h}x{w} smaller than kernel")));
        }
        Ok((c, h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = self.check_input(x)?;
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = vec![0.0; self.c_out * oh * ow];
        let xd = x.data();
        for o in 0..self.c_out {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias[o]);
            for i in 0..self.c_in {
                let xin = &xd[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    let (y0, y1) = self.valid_range(ky, h, oh);
                    for kx in 0..self.kernel {
                        let wv = self.weight[self.widx(o, i, ky, kx)];
                        let (x0, x1) = self.valid_range(kx, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if self.stride == 1 {
                                let base = kx as isize - self.pad as isize;
                                let src = &row[(x0 as isize + base) as usize..(x1 as isize + base) as usize];
                                for (dst, &v) in orow[x0..x1].iter_mut().zip(src) {
                                    *dst += wv * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * self.stride + kx - self.pad;
                                    orow[ox] += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.c_out, oh, ow], out))
    }

    /// Backpropagates `grad_out` (shape of `forward(x)`). Returns the input
    /// gradient when `want_input` is set, plus the parameter gradients.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        want_input: bool,
    ) -> Result<(Option<Tensor>, ConvGrads)> {
        let (_, h, w) = self.check_input(x)?;
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        if grad_out.shape() != [self.c_out, oh, ow] {
            return Err(Error::shape(format!(
                "grad_out {:?} does not match conv output [{}, {oh}, {ow}]",
                grad_out.shape(),
                self.c_out
            )));
        }
        let xd = x.data();
        let gd = grad_out.data();
        let mut grads = ConvGrads::zeros_like(self);
        let mut gin = if want_input {
            vec![0.0; self.c_in * h * w]
        } else {
            Vec::new()
        };
        for o in 0..self.c_out {
            let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
            grads.bias[o] = gplane.iter().sum();
            for i in 0..self.c_in {
                let xin = &xd[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    let (y0, y1) = self.valid_range(ky, h, oh);
                    for kx in 0..self.kernel {
                        let wi = self.widx(o, i, ky, kx);
                        let wv = self.weight[wi];
                        let (x0, x1) = self.valid_range(kx, w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let base = iy * w;
                            if self.stride == 1 {
                                let shift = kx as isize - self.pad as isize;
                                let lo = (base as isize + x0 as isize + shift) as usize;
                                let n = x1 - x0;
                                let src = &xin[lo..lo + n];
                                for (g, v) in grow[x0..x1].iter().zip(src) {
                                    acc += g * v;
                                }
                                if want_input {
                                    let dst = &mut gin[i * h * w + lo..i * h * w + lo + n];
                                    for (d, g) in dst.iter_mut().zip(&grow[x0..x1]) {
                                        *d += wv * g;
                                    }
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * self.stride + kx - self.pad;
                                    acc += grow[ox] * xin[base + ix];
                                    if want_input {
                                        gin[i * h * w + base + ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        grads.weight[wi] = acc;
                    }
                }
            }
        }
        let gin = want_input.then(|| Tensor::from_parts(vec![self.c_in, h, w], gin));
        Ok((gin, grads))
    }

    /// `param -= lr * grad` over weights and bias.
    pub fn apply(&mut self, grads: &ConvGrads, lr: f64) {
        for (p, g) in self.weight.iter_mut().zip(&grads.weight) {
            *p -= lr * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&grads.bias) {
            *p -= lr * g;
        }
    }
}

/// Adam moment estimates for one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: ConvGrads,
    v: ConvGrads,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(conv: &Conv2d) -> Self {
        Self {
            m: ConvGrads::zeros_like(conv),
            v: ConvGrads::zeros_like(conv),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `conv` with step size `lr`.
    pub fn step(&mut self, conv: &mut Conv2d, grads: &ConvGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        update(&mut conv.weight, &mut self.m.weight, &mut self.v.weight, &grads.weight);
        update(&mut conv.bias, &mut self.m.bias, &mut self.v.bias, &grads.bias);
    }
}

pub(crate) fn relu(t: &Tensor) -> Tensor {
    Tensor::from_parts(
        t.shape().to_vec(),
        t.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Zeroes `grad` wherever the pre-activation was not strictly positive.
pub(crate) fn relu_backward(pre: &Tensor, grad: &mut Tensor) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}
