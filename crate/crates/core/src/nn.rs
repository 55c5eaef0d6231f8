//! Layers over flat parameter buffers.
//!
//! Each network owns one `Vec<f64>` of parameters; layers only remember
//! offsets into it. Gradients use a buffer of the same length, so optimizers,
//! EMA and checkpoints all operate on plain slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::rng::{init_rng, normal};

pub const LRELU_SLOPE: f64 = 0.2;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn lrelu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LRELU_SLOPE * x
    }
}

#[inline]
pub fn lrelu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LRELU_SLOPE
    }
}

/// Allocates named parameter blocks and initializes them from per-block
/// random streams, so adding a block never changes another block's values.
pub struct ParamBuilder {
    seed: u64,
    params: Vec<f64>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    fn alloc_normal(&mut self, name: &str, n: usize, std: f64) -> usize {
        let off = self.params.len();
        let mut rng = init_rng(self.seed, name);
        self.params.extend((0..n).map(|_| std * normal(&mut rng)));
        off
    }

    fn alloc_const(&mut self, n: usize, value: f64) -> usize {
        let off = self.params.len();
        self.params.extend(core::iter::repeat_n(value, n));
        off
    }

    /// Fully connected layer; weights `N(0, gain²/fan_in)`, zero bias.
    pub fn linear(&mut self, name: &str, inp: usize, out: usize, gain: f64) -> Linear {
        let std = gain / libm::sqrt(inp as f64);
        let w = self.alloc_normal(name, inp * out, std);
        let b = self.alloc_const(out, 0.0);
        Linear { inp, out, w, b }
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
    ) -> Conv2d {
        let fan_in = 9 * cin;
        let w = self.alloc_normal(name, 9 * cin * cout, gain / libm::sqrt(fan_in as f64));
        let b = self.alloc_const(cout, 0.0);
        Conv2d {
            cin,
            cout,
            stride,
            w,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn finish(self) -> Vec<f64> {
        self.params
    }
}

/// `y = W x + b` with `W` stored row-major as `[out][inp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.inp * self.out]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.out]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        debug_assert_eq!(y.len(), self.out);
        let w = self.weight(p);
        let b = self.bias(p);
        for o in 0..self.out {
            let row = &w[o * self.inp..(o + 1) * self.inp];
            y[o] = b[o] + dot(row, x);
        }
    }

    pub fn forward_vec(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out];
        self.forward(p, x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `gp` (when given) and input
    /// gradients into `gx` (when given).
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        gy: &[f64],
        gp: Option<&mut [f64]>,
        gx: Option<&mut [f64]>,
    ) {
        if let Some(gp) = gp {
            for o in 0..self.out {
                let g = gy[o];
                gp[self.b + o] += g;
                if g == 0.0 {
                    continue;
                }
                let row = &mut gp[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                for (r, &xi) in row.iter_mut().zip(x) {
                    *r += g * xi;
                }
            }
        }
        if let Some(gx) = gx {
            let w = self.weight(p);
            for o in 0..self.out {
                let g = gy[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * self.inp..(o + 1) * self.inp];
                for (xi, &wi) in gx.iter_mut().zip(row) {
                    *xi += g * wi;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 3×3 convolution with padding 1 over `H×W×C` maps. Weights are laid out
/// `[cout][ky][kx][cin]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv2d {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 - 3) / self.stride + 1
    }

    pub fn forward(&self, p: &[f64], x: &Image) -> Image {
        debug_assert_eq!(x.c, self.cin);
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let mut y = Image::zeros(oh, ow, self.cout);
        let w = &p[self.w..self.w + 9 * self.cin * self.cout];
        let b = &p[self.b..self.b + self.cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let yo = y.idx(oy, ox, 0);
                y.data[yo..yo + self.cout].copy_from_slice(b);
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let xi = x.idx(iy as usize, ix as usize, 0);
                        let xs = &x.data[xi..xi + self.cin];
                        let k = (ky * 3 + kx) * self.cin;
                        for co in 0..self.cout {
                            let ws = &w[co * 9 * self.cin + k..co * 9 * self.cin + k + self.cin];
                            y.data[yo + co] += dot(ws, xs);
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: &Image,
        gy: &Image,
        mut gp: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Image> {
        let w = &p[self.w..self.w + 9 * self.cin * self.cout];
        let mut gx = if want_input {
            Some(Image::zeros(x.h, x.w, x.c))
        } else {
            None
        };
        for oy in 0..gy.h {
            for ox in 0..gy.w {
                let go = gy.idx(oy, ox, 0);
                let gys = &gy.data[go..go + self.cout];
                if let Some(gp) = gp.as_deref_mut() {
                    for (co, &g) in gys.iter().enumerate() {
                        gp[self.b + co] += g;
                    }
                }
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let xi = x.idx(iy as usize, ix as usize, 0);
                        let k = (ky * 3 + kx) * self.cin;
                        for (co, &g) in gys.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let wo = co * 9 * self.cin + k;
                            if let Some(gp) = gp.as_deref_mut() {
                                let gw = &mut gp[self.w + wo..self.w + wo + self.cin];
                                for (gwi, &xv) in gw.iter_mut().zip(&x.data[xi..xi + self.cin]) {
                                    *gwi += g * xv;
                                }
                            }
                            if let Some(gx) = gx.as_mut() {
                                let gxs = &mut gx.data[xi..xi + self.cin];
                                for (gxi, &wv) in gxs.iter_mut().zip(&w[wo..wo + self.cin]) {
                                    *gxi += g * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

pub fn lrelu_image(x: &Image) -> Image {
    x.map(lrelu)
}

/// Gradient through a leaky ReLU given its pre-activation.
pub fn lrelu_backward(pre: &Image, g: &Image) -> Image {
    let mut out = g.clone();
    for (o, &p) in out.data.iter_mut().zip(&pre.data) {
        *o *= lrelu_grad(p);
    }
    out
}

/// Adam with bias correction over a flat parameter buffer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite differences used by the gradient tests.
    use alloc::vec::Vec;

    /// Numerical gradient of `f` at `x`.
    pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut xs = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xs[i];
                xs[i] = orig + h;
                let fp = f(&xs);
                xs[i] = orig - h;
                let fm = f(&xs);
                xs[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Max relative error with an absolute floor on the denominator.
    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = a
            .iter()
            .chain(b)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }
}
