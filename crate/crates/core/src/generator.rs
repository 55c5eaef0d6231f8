//! Tri-plane radiance-field generator: latent → style → three feature planes,
//! decoded per 3D point into density and features.
//!
//! The field depends on the latent only. Rendering poses never enter the
//! generator, so the same latent viewed from two poses samples one field.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::geometry::Vec3;
use crate::nn::{lrelu, lrelu_grad, sigmoid, softplus, Linear, ParamBuilder};
use crate::render::RadianceField;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Latent dimension `n_z`.
    pub latent_dim: usize,
    /// Style dimension `n_w`.
    pub style_dim: usize,
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub decoder_hidden: usize,
    /// Decoded feature channels; the first three are RGB.
    pub feature_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            style_dim: 64,
            plane_resolution: 32,
            plane_channels: 16,
            decoder_hidden: 32,
            feature_channels: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.style_dim == 0 || self.decoder_hidden == 0 {
            return Err(config_err!("generator dimensions must be positive"));
        }
        if self.plane_resolution < 2 {
            return Err(config_err!("plane_resolution must be at least 2"));
        }
        if self.plane_channels == 0 {
            return Err(config_err!("plane_channels must be positive"));
        }
        if self.feature_channels < 3 {
            return Err(config_err!("feature_channels must be at least 3 (RGB)"));
        }
        Ok(())
    }

    pub fn plane_len(&self) -> usize {
        3 * self.plane_resolution * self.plane_resolution * self.plane_channels
    }
}

/// Latent vector `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn sample<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        LatentCode(crate::rng::normal_vec(rng, dim))
    }
}

/// Three axis-aligned feature planes (`xy`, `xz`, `yz`), stored
/// `[plane][row][col][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Projections of a point onto the three planes, as `(col, row)` coordinates.
#[inline]
fn plane_coords(p: Vec3) -> [(f64, f64); 3] {
    [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])]
}

/// Bilinear taps for a coordinate in `[-1, 1]`, grid nodes at the ends
/// (align-corners convention).
#[inline]
fn taps(v: f64, res: usize) -> (usize, usize, f64) {
    let u = (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * (res - 1) as f64;
    let i0 = (u as usize).min(res - 2);
    (i0, i0 + 1, u - i0 as f64)
}

impl TriPlane {
    pub fn constant(resolution: usize, channels: usize, value: f64) -> Self {
        Self {
            resolution,
            channels,
            data: vec![value; 3 * resolution * resolution * channels],
        }
    }

    #[inline]
    fn offset(&self, plane: usize, row: usize, col: usize) -> usize {
        ((plane * self.resolution + row) * self.resolution + col) * self.channels
    }

    /// Writes the summed bilinear features of `point` into `out`.
    /// Points outside the bounding cube are clamped to its surface.
    pub fn sample_into(&self, point: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let res = self.resolution;
        for (plane, (a, b)) in plane_coords(point).into_iter().enumerate() {
            let (c0, c1, fc) = taps(a, res);
            let (r0, r1, fr) = taps(b, res);
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c1, (1.0 - fr) * fc),
                (r1, c0, fr * (1.0 - fc)),
                (r1, c1, fr * fc),
            ];
            for (r, c, wt) in corners {
                if wt == 0.0 {
                    continue;
                }
                let o = self.offset(plane, r, c);
                for (dst, &v) in out.iter_mut().zip(&self.data[o..o + self.channels]) {
                    *dst += wt * v;
                }
            }
        }
    }

    /// Scatters a feature gradient back onto plane entries.
    pub fn sample_backward(&self, point: Vec3, grad: &[f64], gplanes: &mut [f64]) {
        let res = self.resolution;
        for (plane, (a, b)) in plane_coords(point).into_iter().enumerate() {
            let (c0, c1, fc) = taps(a, res);
            let (r0, r1, fr) = taps(b, res);
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c1, (1.0 - fr) * fc),
                (r1, c0, fr * (1.0 - fc)),
                (r1, c1, fr * fc),
            ];
            for (r, c, wt) in corners {
                if wt == 0.0 {
                    continue;
                }
                let o = self.offset(plane, r, c);
                for (dst, &g) in gplanes[o..o + self.channels].iter_mut().zip(grad) {
                    *dst += wt * g;
                }
            }
        }
    }
}

/// `K×C` features for a batch of points.
pub fn sample_triplane(tp: &TriPlane, points: &[Vec3]) -> Vec<f64> {
    let mut out = vec![0.0; points.len() * tp.channels];
    for (p, chunk) in points.iter().zip(out.chunks_mut(tp.channels)) {
        tp.sample_into(*p, chunk);
    }
    out
}

/// Decoded radiance at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDecode {
    pub density: f64,
    /// Features after the sigmoid; the first three are RGB.
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    map1: Linear,
    map2: Linear,
    synth1: Linear,
    synth2: Linear,
    dec1: Linear,
    dec2: Linear,
    num_params: usize,
}

/// Intermediates of `z → w → planes` needed for the backward pass.
#[derive(Clone, Debug)]
pub struct StyleTrace {
    pub z: Vec<f64>,
    map1_pre: Vec<f64>,
    pub w: Vec<f64>,
    synth1_pre: Vec<f64>,
}

impl Generator {
    /// Builds the architecture and its initial parameters.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let gain = libm::sqrt(2.0);
        let map1 = pb.linear("gen.map1", config.latent_dim, config.style_dim, gain);
        let map2 = pb.linear("gen.map2", config.style_dim, config.style_dim, 1.0);
        let synth1 = pb.linear("gen.synth1", config.style_dim, config.style_dim, gain);
        let synth2 = pb.linear("gen.synth2", config.style_dim, config.plane_len(), 1.0);
        let dec1 = pb.linear(
            "gen.dec1",
            config.plane_channels,
            config.decoder_hidden,
            1.0,
        );
        let dec2 = pb.linear(
            "gen.dec2",
            config.decoder_hidden,
            1 + config.feature_channels,
            1.0,
        );
        let num_params = pb.len();
        let gen = Self {
            config,
            map1,
            map2,
            synth1,
            synth2,
            dec1,
            dec2,
            num_params,
        };
        Ok((gen, pb.finish()))
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Offset of the mapping network's final bias (for identity checks).
    pub fn map_bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        self.map2.bias(p)
    }

    pub fn map_latent(&self, p: &[f64], z: &LatentCode) -> Result<Vec<f64>> {
        Ok(self.map_latent_traced(p, z)?.1)
    }

    fn map_latent_traced(&self, p: &[f64], z: &LatentCode) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.0.len() != self.config.latent_dim {
            return Err(config_err!(
                "latent has dimension {}, generator expects {}",
                z.0.len(),
                self.config.latent_dim
            ));
        }
        let pre = self.map1.forward_vec(p, &z.0);
        let h: Vec<f64> = pre.iter().map(|&v| lrelu(v)).collect();
        let w = self.map2.forward_vec(p, &h);
        Ok((pre, w))
    }

    pub fn synthesize_planes(&self, p: &[f64], w: &[f64]) -> TriPlane {
        self.synthesize_traced(p, w).1
    }

    fn synthesize_traced(&self, p: &[f64], w: &[f64]) -> (Vec<f64>, TriPlane) {
        let pre = self.synth1.forward_vec(p, w);
        let h: Vec<f64> = pre.iter().map(|&v| lrelu(v)).collect();
        let data = self.synth2.forward_vec(p, &h);
        let tp = TriPlane {
            resolution: self.config.plane_resolution,
            channels: self.config.plane_channels,
            data,
        };
        (pre, tp)
    }

    /// Full `z → planes` forward with the trace kept for backpropagation.
    pub fn style(&self, p: &[f64], z: &LatentCode) -> Result<(StyleTrace, TriPlane)> {
        let (map1_pre, w) = self.map_latent_traced(p, z)?;
        let (synth1_pre, planes) = self.synthesize_traced(p, &w);
        Ok((
            StyleTrace {
                z: z.0.clone(),
                map1_pre,
                w,
                synth1_pre,
            },
            planes,
        ))
    }

    /// Backpropagates a plane gradient to the generator parameters.
    /// Returns the gradient with respect to `w`.
    pub fn style_backward(
        &self,
        p: &[f64],
        trace: &StyleTrace,
        gplanes: &[f64],
        gp: &mut [f64],
    ) -> Vec<f64> {
        let h1: Vec<f64> = trace.synth1_pre.iter().map(|&v| lrelu(v)).collect();
        let mut gh1 = vec![0.0; h1.len()];
        self.synth2
            .backward(p, &h1, gplanes, Some(gp), Some(&mut gh1));
        for (g, &pre) in gh1.iter_mut().zip(&trace.synth1_pre) {
            *g *= lrelu_grad(pre);
        }
        let mut gw = vec![0.0; trace.w.len()];
        self.synth1
            .backward(p, &trace.w, &gh1, Some(gp), Some(&mut gw));

        let h0: Vec<f64> = trace.map1_pre.iter().map(|&v| lrelu(v)).collect();
        let mut gh0 = vec![0.0; h0.len()];
        self.map2.backward(p, &h0, &gw, Some(gp), Some(&mut gh0));
        for (g, &pre) in gh0.iter_mut().zip(&trace.map1_pre) {
            *g *= lrelu_grad(pre);
        }
        self.map1.backward(p, &trace.z, &gh0, Some(gp), None);
        gw
    }

    /// Decoder forward for one feature vector. Writes the raw output
    /// (density logit followed by feature logits) into `raw` and the hidden
    /// pre-activation into `hidden`.
    #[inline]
    fn decode_raw(
        &self,
        p: &[f64],
        feat: &[f64],
        hidden: &mut [f64],
        act: &mut [f64],
        raw: &mut [f64],
    ) {
        self.dec1.forward(p, feat, hidden);
        for (a, &h) in act.iter_mut().zip(hidden.iter()) {
            *a = softplus(h);
        }
        self.dec2.forward(p, act, raw);
    }

    /// Decodes plane features into density (softplus) and features (sigmoid).
    pub fn decode_point(&self, p: &[f64], features: &[f64]) -> Vec<PointDecode> {
        let c = self.config.plane_channels;
        let mut hidden = vec![0.0; self.config.decoder_hidden];
        let mut act = vec![0.0; self.config.decoder_hidden];
        let mut raw = vec![0.0; 1 + self.config.feature_channels];
        features
            .chunks(c)
            .map(|f| {
                self.decode_raw(p, f, &mut hidden, &mut act, &mut raw);
                PointDecode {
                    density: softplus(raw[0]),
                    feature: raw[1..].iter().map(|&v| sigmoid(v)).collect(),
                }
            })
            .collect()
    }

    /// Backward of [`Generator::decode_point`] for one feature vector.
    /// Accumulates parameter gradients into `gp` and returns the feature gradient.
    pub fn decode_point_backward(
        &self,
        p: &[f64],
        feat: &[f64],
        g_density: f64,
        g_feature: &[f64],
        gp: &mut [f64],
    ) -> Vec<f64> {
        let hdim = self.config.decoder_hidden;
        let mut hidden = vec![0.0; hdim];
        let mut act = vec![0.0; hdim];
        let mut raw = vec![0.0; 1 + self.config.feature_channels];
        self.decode_raw(p, feat, &mut hidden, &mut act, &mut raw);
        let mut g_raw = vec![0.0; raw.len()];
        g_raw[0] = g_density * sigmoid(raw[0]);
        for (k, &g) in g_feature.iter().enumerate() {
            let s = sigmoid(raw[1 + k]);
            g_raw[1 + k] = g * s * (1.0 - s);
        }
        let mut g_act = vec![0.0; hdim];
        self.dec2
            .backward(p, &act, &g_raw, Some(gp), Some(&mut g_act));
        for (g, &h) in g_act.iter_mut().zip(&hidden) {
            *g *= sigmoid(h);
        }
        let mut g_feat = vec![0.0; feat.len()];
        self.dec1
            .backward(p, feat, &g_act, Some(gp), Some(&mut g_feat));
        g_feat
    }

    /// The radiance field of one latent.
    pub fn field<'a>(&'a self, p: &'a [f64], planes: TriPlane) -> GeneratorField<'a> {
        let cfg = &self.config;
        let scratch = RefCell::new(Scratch {
            feat: vec![0.0; cfg.plane_channels],
            hidden: vec![0.0; cfg.decoder_hidden],
            act: vec![0.0; cfg.decoder_hidden],
            raw: vec![0.0; 1 + cfg.feature_channels],
        });
        GeneratorField {
            gen: self,
            params: p,
            planes,
            scratch,
        }
    }

    /// Backward through the field: per-sample gradients of density and
    /// features at `points` are pushed into the planes and decoder weights.
    pub fn field_backward(
        &self,
        p: &[f64],
        planes: &TriPlane,
        points: &[Vec3],
        g_density: &[f64],
        g_feature: &[f64],
        gp: &mut [f64],
        gplanes: &mut [f64],
    ) {
        let c = self.config.plane_channels;
        let cf = self.config.feature_channels;
        let mut feat = vec![0.0; c];
        for (k, &pt) in points.iter().enumerate() {
            let gd = if inside_cube(pt) { g_density[k] } else { 0.0 };
            let gf = &g_feature[k * cf..(k + 1) * cf];
            if gd == 0.0 && gf.iter().all(|&g| g == 0.0) {
                continue;
            }
            planes.sample_into(pt, &mut feat);
            let g_feat = self.decode_point_backward(p, &feat, gd, gf, gp);
            planes.sample_backward(pt, &g_feat, gplanes);
        }
    }
}

#[inline]
pub fn inside_cube(p: Vec3) -> bool {
    p.iter().all(|v| (-1.0..=1.0).contains(v))
}

/// A latent's radiance field: tri-plane features decoded per point. Density
/// is zero outside the `[-1, 1]³` bounding cube.
pub struct GeneratorField<'a> {
    gen: &'a Generator,
    params: &'a [f64],
    pub planes: TriPlane,
    scratch: RefCell<Scratch>,
}

struct Scratch {
    feat: Vec<f64>,
    hidden: Vec<f64>,
    act: Vec<f64>,
    raw: Vec<f64>,
}

impl RadianceField for GeneratorField<'_> {
    fn feature_dim(&self) -> usize {
        self.gen.config.feature_channels
    }

    fn query(&self, point: Vec3, feature: &mut [f64]) -> f64 {
        if !inside_cube(point) {
            feature.fill(0.0);
            return 0.0;
        }
        let mut scratch = self.scratch.borrow_mut();
        let Scratch {
            feat,
            hidden,
            act,
            raw,
        } = &mut *scratch;
        self.planes.sample_into(point, feat);
        self.gen.decode_raw(self.params, feat, hidden, act, raw);
        for (f, &r) in feature.iter_mut().zip(&raw[1..]) {
            *f = sigmoid(r);
        }
        softplus(raw[0])
    }
}
