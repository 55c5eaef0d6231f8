//! Super-resolution stage and the dual image pair fed to discriminators.
//!
//! `high = clamp(up(2·rgb_low − 1) + shuffle(conv2(lrelu(conv1(features)))), −1, 1)`
//! and `low_upsampled = up(2·rgb_low − 1)`. The second convolution starts at
//! zero, so a fresh stack reproduces the bilinear upsampling exactly.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::image::{
    downsample_box, pixel_shuffle, pixel_unshuffle, upsample_bilinear, upsample_bilinear_backward,
    Image,
};
use crate::nn::{lrelu_backward, lrelu_image, Conv2d, ParamBuilder};
use crate::render::RenderOutput;
use crate::Result;

/// High-resolution image and the upsampled raw rendering, both in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub high: Image,
    pub low_upsampled: Image,
}

impl ImagePair {
    pub fn resolution(&self) -> usize {
        self.high.h
    }

    /// Six-channel stack `(high, low_upsampled)`.
    pub fn stacked(&self) -> Image {
        let n = self.high.h * self.high.w;
        let mut out = Image::zeros(self.high.h, self.high.w, 6);
        for p in 0..n {
            out.data[p * 6..p * 6 + 3].copy_from_slice(&self.high.data[p * 3..p * 3 + 3]);
            out.data[p * 6 + 3..p * 6 + 6]
                .copy_from_slice(&self.low_upsampled.data[p * 3..p * 3 + 3]);
        }
        out
    }

    pub fn from_stacked(x: &Image) -> Self {
        ImagePair {
            high: x.channels(0, 3),
            low_upsampled: x.channels(3, 6),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        ImagePair {
            high: self.high.flip_horizontal(),
            low_upsampled: self.low_upsampled.flip_horizontal(),
        }
    }

    /// Dual pair for a real image: the low member is the image box-downsampled
    /// by `scale` and upsampled back, mirroring what the generator produces.
    pub fn from_real(image: &Image, scale: usize) -> Self {
        let low = upsample_bilinear(&downsample_box(image, scale), scale);
        ImagePair {
            high: image.clone(),
            low_upsampled: low,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperResConfig {
    pub feature_channels: usize,
    pub hidden: usize,
    pub feature_resolution: usize,
    pub final_resolution: usize,
}

impl SuperResConfig {
    pub fn scale(&self) -> Result<usize> {
        if self.final_resolution < self.feature_resolution
            || self.feature_resolution == 0
            || !self
                .final_resolution
                .is_multiple_of(self.feature_resolution)
        {
            return Err(config_err!(
                "final resolution {} must be an integer multiple of feature resolution {}",
                self.final_resolution,
                self.feature_resolution
            ));
        }
        Ok(self.final_resolution / self.feature_resolution)
    }
}

#[derive(Clone, Debug)]
pub struct SuperRes {
    pub config: SuperResConfig,
    scale: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    num_params: usize,
}

/// Forward intermediates of [`SuperRes::superresolve`].
#[derive(Clone, Debug)]
pub struct SuperResTrace {
    features: Image,
    conv1_pre: Image,
    pre_clamp: Image,
}

impl SuperRes {
    pub fn new(config: SuperResConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        let scale = config.scale()?;
        if config.feature_channels < 3 || config.hidden == 0 {
            return Err(config_err!(
                "super-resolution needs >= 3 feature channels and a hidden width"
            ));
        }
        let mut pb = ParamBuilder::new(seed);
        let conv1 = pb.conv(
            "sr.conv1",
            config.feature_channels,
            config.hidden,
            1,
            libm::sqrt(2.0),
        );
        let conv2 = pb.conv("sr.conv2", config.hidden, 3 * scale * scale, 1, 0.0);
        let num_params = pb.len();
        Ok((
            Self {
                config,
                scale,
                conv1,
                conv2,
                num_params,
            },
            pb.finish(),
        ))
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn superresolve(&self, p: &[f64], out: &RenderOutput) -> ImagePair {
        self.forward(p, &out.feature_map).0
    }

    /// Forward from a feature map whose first three channels are `rgb_low`.
    pub fn forward(&self, p: &[f64], features: &Image) -> (ImagePair, SuperResTrace) {
        let rgb = features.channels(0, 3).map(|v| 2.0 * v - 1.0);
        let base = upsample_bilinear(&rgb, self.scale);
        let conv1_pre = self.conv1.forward(p, features);
        let h1 = lrelu_image(&conv1_pre);
        let residual = pixel_shuffle(&self.conv2.forward(p, &h1), self.scale);
        let mut pre_clamp = base.clone();
        pre_clamp.add_assign(&residual);
        let high = pre_clamp.map(|v| v.clamp(-1.0, 1.0));
        let trace = SuperResTrace {
            features: features.clone(),
            conv1_pre,
            pre_clamp,
        };
        (
            ImagePair {
                high,
                low_upsampled: base,
            },
            trace,
        )
    }

    /// Returns the gradient with respect to the input feature map and
    /// accumulates parameter gradients into `gp`.
    pub fn backward(
        &self,
        p: &[f64],
        trace: &SuperResTrace,
        g: &ImagePair,
        gp: Option<&mut [f64]>,
    ) -> Image {
        let mut gp = gp;
        let mut g_pre = g.high.clone();
        for (gv, &v) in g_pre.data.iter_mut().zip(&trace.pre_clamp.data) {
            if !(-1.0..=1.0).contains(&v) {
                *gv = 0.0;
            }
        }
        let mut g_base = g_pre.clone();
        g_base.add_assign(&g.low_upsampled);

        let h1 = lrelu_image(&trace.conv1_pre);
        let g_raw = pixel_unshuffle(&g_pre, self.scale);
        let g_h1 = self
            .conv2
            .backward(p, &h1, &g_raw, gp.as_deref_mut(), true)
            .expect("input grad");
        let g_a1 = lrelu_backward(&trace.conv1_pre, &g_h1);
        let mut g_feat = self
            .conv1
            .backward(p, &trace.features, &g_a1, gp, true)
            .expect("input grad");

        let (h, w) = (trace.features.h, trace.features.w);
        let g_rgb = upsample_bilinear_backward(&g_base, self.scale, h, w);
        let c = g_feat.c;
        for px in 0..h * w {
            for k in 0..3 {
                g_feat.data[px * c + k] += 2.0 * g_rgb.data[px * 3 + k];
            }
        }
        g_feat
    }
}
