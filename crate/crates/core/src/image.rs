//! Dense `H×W×C` maps (images, feature maps, depth maps) and the fixed
//! resampling operators used between resolutions.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major, channel-interleaved map.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "image buffer size mismatch");
        Self { h, w, c, data }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Copies channels `from..to` into a new map.
    pub fn channels(&self, from: usize, to: usize) -> Image {
        let c = to - from;
        let mut out = Image::zeros(self.h, self.w, c);
        for p in 0..self.h * self.w {
            out.data[p * c..(p + 1) * c]
                .copy_from_slice(&self.data[p * self.c + from..p * self.c + to]);
        }
        out
    }

    /// Mirror along the horizontal axis (left-right flip).
    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                let src = self.idx(y, self.w - 1 - x, 0);
                let dst = out.idx(y, x, 0);
                out.data[dst..dst + self.c].copy_from_slice(&self.data[src..src + self.c]);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Image) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Source coordinate and weights for half-pixel-centred linear resampling.
#[inline]
fn taps(dst: usize, scale: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
    let i0 = (s as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear upsampling by an integer factor, edges clamped.
pub fn upsample_bilinear(src: &Image, scale: usize) -> Image {
    if scale == 1 {
        return src.clone();
    }
    let (h, w, c) = (src.h * scale, src.w * scale, src.c);
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        let (y0, y1, fy) = taps(y, scale, src.h);
        for x in 0..w {
            let (x0, x1, fx) = taps(x, scale, src.w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let o = out.idx(y, x, 0);
            for ch in 0..c {
                out.data[o + ch] = w00 * src.at(y0, x0, ch)
                    + w01 * src.at(y0, x1, ch)
                    + w10 * src.at(y1, x0, ch)
                    + w11 * src.at(y1, x1, ch);
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: maps an upsampled gradient back.
pub fn upsample_bilinear_backward(grad: &Image, scale: usize, src_h: usize, src_w: usize) -> Image {
    if scale == 1 {
        return grad.clone();
    }
    let c = grad.c;
    let mut out = Image::zeros(src_h, src_w, c);
    for y in 0..grad.h {
        let (y0, y1, fy) = taps(y, scale, src_h);
        for x in 0..grad.w {
            let (x0, x1, fx) = taps(x, scale, src_w);
            let ws = [
                ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                ((y0, x1), (1.0 - fy) * fx),
                ((y1, x0), fy * (1.0 - fx)),
                ((y1, x1), fy * fx),
            ];
            let g = grad.idx(y, x, 0);
            for ((sy, sx), wt) in ws {
                let o = out.idx(sy, sx, 0);
                for ch in 0..c {
                    out.data[o + ch] += wt * grad.data[g + ch];
                }
            }
        }
    }
    out
}

/// Box-filter downsampling by an integer factor.
pub fn downsample_box(src: &Image, factor: usize) -> Image {
    if factor == 1 {
        return src.clone();
    }
    let (h, w, c) = (src.h / factor, src.w / factor, src.c);
    let mut out = Image::zeros(h, w, c);
    let inv = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let o = out.idx(y, x, 0);
            for dy in 0..factor {
                for dx in 0..factor {
                    let s = src.idx(y * factor + dy, x * factor + dx, 0);
                    for ch in 0..c {
                        out.data[o + ch] += src.data[s + ch] * inv;
                    }
                }
            }
        }
    }
    out
}

/// Rearranges `H×W×(C·r²)` into `rH×rW×C`.
pub fn pixel_shuffle(src: &Image, r: usize) -> Image {
    let c = src.c / (r * r);
    let mut out = Image::zeros(src.h * r, src.w * r, c);
    for y in 0..src.h {
        for x in 0..src.w {
            for dy in 0..r {
                for dx in 0..r {
                    for ch in 0..c {
                        let s = src.idx(y, x, (dy * r + dx) * c + ch);
                        let o = out.idx(y * r + dy, x * r + dx, ch);
                        out.data[o] = src.data[s];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle(src: &Image, r: usize) -> Image {
    let c = src.c;
    let mut out = Image::zeros(src.h / r, src.w / r, c * r * r);
    for y in 0..out.h {
        for x in 0..out.w {
            for dy in 0..r {
                for dx in 0..r {
                    for ch in 0..c {
                        let o = out.idx(y, x, (dy * r + dx) * c + ch);
                        out.data[o] = src.at(y * r + dy, x * r + dx, ch);
                    }
                }
            }
        }
    }
    out
}

/// Bilinear resize of a single map to an arbitrary square size (used for
/// image IO and evaluation, never inside a differentiable path).
pub fn resize_bilinear(src: &Image, size: usize) -> Image {
    let mut out = Image::zeros(size, size, src.c);
    let sy = src.h as f64 / size as f64;
    let sx = src.w as f64 / size as f64;
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.h - 1) as f64);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.w - 1) as f64);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..src.c {
                let v = (1.0 - ty) * ((1.0 - tx) * src.at(y0, x0, ch) + tx * src.at(y0, x1, ch))
                    + ty * ((1.0 - tx) * src.at(y1, x0, ch) + tx * src.at(y1, x1, ch));
                let o = out.idx(y, x, ch);
                out.data[o] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_vec(
            h,
            w,
            c,
            (0..h * w * c).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
    }

    #[test]
    fn upsample_adjoint_identity() {
        // <U x, y> == <x, U^T y>
        let x = ramp(3, 4, 2);
        let y = ramp(9, 12, 2).map(|v| v * 0.5 + 0.1);
        let ux = upsample_bilinear(&x, 3);
        let uty = upsample_bilinear_backward(&y, 3, 3, 4);
        let lhs: f64 = ux.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&uty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Image::filled(4, 4, 3, 0.25);
        let u = upsample_bilinear(&x, 4);
        assert!(u.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shuffle_round_trip() {
        let x = ramp(4, 4, 12);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&x, 2), 2), x);
    }

    #[test]
    fn flip_is_involution() {
        let x = ramp(5, 6, 3);
        assert_eq!(x.flip_horizontal().flip_horizontal(), x);
        assert_ne!(x.flip_horizontal(), x);
    }

    #[test]
    fn box_downsample_averages() {
        let x = Image::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(downsample_box(&x, 2).data, vec![2.5]);
    }
}
