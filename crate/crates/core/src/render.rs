//! Emission-absorption volume rendering of a radiance field into a
//! low-resolution feature map, RGB image, depth map and opacity map.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err};
use crate::geometry::{generate_rays, CameraPose, Vec3};
use crate::image::Image;
use crate::Result;

/// Pixels whose opacity does not exceed this report `far` as depth.
pub const DEPTH_EPS: f64 = 1e-6;

/// Anything that maps a 3D point to a density and a feature vector.
pub trait RadianceField {
    fn feature_dim(&self) -> usize;
    /// Returns the density at `point` and writes its features.
    fn query(&self, point: Vec3, feature: &mut [f64]) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub feature_resolution: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Jitter each sample uniformly inside its stratum.
    pub stratified: bool,
    /// Background colour in `[0, 1]`.
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        let r = crate::geometry::DEFAULT_RADIUS;
        Self {
            feature_resolution: 32,
            samples_per_ray: 96,
            near: r - 1.2,
            far: r + 1.2,
            stratified: true,
            background: [0.0; 3],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(config_err!("samples_per_ray must be at least 2"));
        }
        if self.feature_resolution == 0 {
            return Err(config_err!("feature_resolution must be at least 1"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(config_err!("need 0 < near < far"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }

    /// Sample depths along one ray.
    pub fn sample_depths<R: Rng + ?Sized>(&self, jitter: Option<&mut R>) -> Vec<f64> {
        let step = self.step();
        let n = self.samples_per_ray;
        match jitter {
            Some(rng) if self.stratified => (0..n)
                .map(|k| self.near + (k as f64 + rng.random::<f64>()) * step)
                .collect(),
            _ => (0..n)
                .map(|k| self.near + (k as f64 + 0.5) * step)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub feature_map: Image,
    pub rgb_low: Image,
    pub depth: Image,
    pub opacity: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub value: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// Sample spacings; the last sample uses `last_delta`.
fn deltas(t_vals: &[f64], last_delta: f64) -> Result<Vec<f64>> {
    let mut d = Vec::with_capacity(t_vals.len());
    for w in t_vals.windows(2) {
        if !(w[1] > w[0]) {
            return Err(contract_err!("sample depths must be strictly increasing"));
        }
        d.push(w[1] - w[0]);
    }
    d.push(last_delta);
    Ok(d)
}

/// Alpha-composites `S` samples with values of width `C` over `background`.
///
/// `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i} (1 − α_j)`, and the output is
/// `Σ T_i α_i v_i + T_S · background`. Depth is the weight-averaged sample
/// depth normalized by opacity, or the last sample depth bound when the ray
/// is empty.
pub fn composite(
    densities: &[f64],
    values: &[f64],
    t_vals: &[f64],
    last_delta: f64,
    background: &[f64],
) -> Result<Composite> {
    let s = densities.len();
    let c = background.len();
    if s == 0 || values.len() != s * c || t_vals.len() != s {
        return Err(contract_err!("composite inputs have inconsistent lengths"));
    }
    let delta = deltas(t_vals, last_delta)?;
    Ok(composite_unchecked(
        densities,
        values,
        t_vals,
        &delta,
        background,
        t_vals[s - 1] + last_delta,
    ))
}

fn composite_unchecked(
    densities: &[f64],
    values: &[f64],
    t_vals: &[f64],
    delta: &[f64],
    background: &[f64],
    far: f64,
) -> Composite {
    let c = background.len();
    let mut value = vec![0.0; c];
    let mut trans = 1.0;
    let mut depth_acc = 0.0;
    let mut weight_sum = 0.0;
    for k in 0..densities.len() {
        let alpha = 1.0 - libm::exp(-densities[k] * delta[k]);
        let w = trans * alpha;
        debug_assert!(w >= 0.0);
        for (o, &v) in value.iter_mut().zip(&values[k * c..(k + 1) * c]) {
            *o += w * v;
        }
        depth_acc += w * t_vals[k];
        weight_sum += w;
        trans *= 1.0 - alpha;
    }
    for (o, &b) in value.iter_mut().zip(background) {
        *o += trans * b;
    }
    let opacity = 1.0 - trans;
    debug_assert!(weight_sum <= opacity + 1e-9 && opacity <= 1.0);
    let depth = if opacity > DEPTH_EPS {
        depth_acc / opacity
    } else {
        far
    };
    Composite {
        value,
        depth,
        opacity,
    }
}

/// Gradients of `g_value · value + g_opacity · opacity` with respect to the
/// densities and per-sample values.
pub fn composite_backward(
    densities: &[f64],
    values: &[f64],
    t_vals: &[f64],
    last_delta: f64,
    background: &[f64],
    g_value: &[f64],
    g_opacity: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let delta = deltas(t_vals, last_delta)?;
    Ok(composite_backward_unchecked(
        densities, values, &delta, background, g_value, g_opacity,
    ))
}

fn composite_backward_unchecked(
    densities: &[f64],
    values: &[f64],
    delta: &[f64],
    background: &[f64],
    g_value: &[f64],
    g_opacity: f64,
) -> (Vec<f64>, Vec<f64>) {
    let s = densities.len();
    let c = background.len();
    // Projected sample values u_k = g · v_k.
    let mut trans = vec![0.0; s + 1];
    let mut weights = vec![0.0; s];
    trans[0] = 1.0;
    for k in 0..s {
        let e = libm::exp(-densities[k] * delta[k]);
        weights[k] = trans[k] * (1.0 - e);
        trans[k + 1] = trans[k] * e;
    }
    let t_final = trans[s];
    let bg_proj: f64 = background.iter().zip(g_value).map(|(b, g)| b * g).sum();
    let mut g_vals = vec![0.0; s * c];
    let mut g_dens = vec![0.0; s];
    // suffix = Σ_{i>k} w_i u_i
    let mut suffix = 0.0;
    for k in (0..s).rev() {
        let vk = &values[k * c..(k + 1) * c];
        let u: f64 = vk.iter().zip(g_value).map(|(v, g)| v * g).sum();
        for (gv, &g) in g_vals[k * c..(k + 1) * c].iter_mut().zip(g_value) {
            *gv = weights[k] * g;
        }
        let d_tau = trans[k + 1] * u - suffix - t_final * bg_proj + g_opacity * t_final;
        g_dens[k] = d_tau * delta[k];
        suffix += weights[k] * u;
    }
    (g_dens, g_vals)
}

/// Everything the backward pass needs from a differentiable render.
#[derive(Clone, Debug)]
pub struct RenderTape {
    pub resolution: usize,
    pub samples: usize,
    pub feature_dim: usize,
    pub points: Vec<Vec3>,
    pub densities: Vec<f64>,
    pub values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub background: Vec<f64>,
}

/// Per-sample gradients produced by [`render_backward`].
pub struct SampleGrads {
    pub g_density: Vec<f64>,
    pub g_feature: Vec<f64>,
}

fn background_features(cfg: &RenderConfig, dim: usize) -> Vec<f64> {
    let mut bg = vec![0.0; dim];
    for (b, &v) in bg.iter_mut().zip(&cfg.background) {
        *b = v;
    }
    bg
}

/// Renders `field` from `pose`. With `cfg.stratified` and a jitter source,
/// sample depths are jittered per ray; otherwise stratum midpoints are used.
pub fn render<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    pose: &CameraPose,
    cfg: &RenderConfig,
    jitter: Option<&mut R>,
) -> Result<RenderOutput> {
    Ok(render_impl(field, pose, cfg, jitter, false)?.0)
}

/// Like [`render`] but keeps the per-sample tape for [`render_backward`].
pub fn render_with_tape<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    pose: &CameraPose,
    cfg: &RenderConfig,
    jitter: Option<&mut R>,
) -> Result<(RenderOutput, RenderTape)> {
    let (out, tape) = render_impl(field, pose, cfg, jitter, true)?;
    Ok((out, tape.expect("tape requested")))
}

fn render_impl<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    pose: &CameraPose,
    cfg: &RenderConfig,
    mut jitter: Option<&mut R>,
    keep_tape: bool,
) -> Result<(RenderOutput, Option<RenderTape>)> {
    cfg.validate()?;
    let res = cfg.feature_resolution;
    let s = cfg.samples_per_ray;
    let cf = field.feature_dim();
    if cf < 3 {
        return Err(contract_err!(
            "radiance field needs at least 3 feature channels (RGB), has {cf}"
        ));
    }
    let rays = generate_rays(pose, res, cfg.near, cfg.far)?;
    let bg = background_features(cfg, cf);
    let step = cfg.step();

    let mut feature_map = Image::zeros(res, res, cf);
    let mut depth = Image::zeros(res, res, 1);
    let mut opacity = Image::zeros(res, res, 1);
    let mut tape = keep_tape.then(|| RenderTape {
        resolution: res,
        samples: s,
        feature_dim: cf,
        points: Vec::with_capacity(res * res * s),
        densities: Vec::with_capacity(res * res * s),
        values: Vec::with_capacity(res * res * s * cf),
        deltas: Vec::with_capacity(res * res * s),
        background: bg.clone(),
    });

    let mut dens = vec![0.0; s];
    let mut vals = vec![0.0; s * cf];
    let mut pts = vec![[0.0; 3]; s];
    for (px, (o, d)) in rays.origins.iter().zip(&rays.directions).enumerate() {
        let t_vals = cfg.sample_depths(jitter.as_deref_mut());
        let delta = deltas(&t_vals, step)?;
        for k in 0..s {
            let t = t_vals[k];
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            pts[k] = p;
            dens[k] = field.query(p, &mut vals[k * cf..(k + 1) * cf]);
        }
        let comp = composite_unchecked(&dens, &vals, &t_vals, &delta, &bg, cfg.far);
        feature_map.data[px * cf..(px + 1) * cf].copy_from_slice(&comp.value);
        depth.data[px] = comp.depth.clamp(cfg.near, cfg.far);
        opacity.data[px] = comp.opacity.clamp(0.0, 1.0);
        if let Some(tape) = tape.as_mut() {
            tape.points.extend_from_slice(&pts);
            tape.densities.extend_from_slice(&dens);
            tape.values.extend_from_slice(&vals);
            tape.deltas.extend_from_slice(&delta);
        }
    }
    let rgb_low = feature_map.channels(0, 3);
    Ok((
        RenderOutput {
            feature_map,
            rgb_low,
            depth,
            opacity,
        },
        tape,
    ))
}

/// Pushes a feature-map gradient back to every sample's density and features.
pub fn render_backward(tape: &RenderTape, g_feature_map: &Image) -> SampleGrads {
    let (s, cf) = (tape.samples, tape.feature_dim);
    let n = tape.resolution * tape.resolution;
    let mut g_density = vec![0.0; n * s];
    let mut g_feature = vec![0.0; n * s * cf];
    for px in 0..n {
        let g_val = &g_feature_map.data[px * cf..(px + 1) * cf];
        if g_val.iter().all(|&g| g == 0.0) {
            continue;
        }
        let (gd, gv) = composite_backward_unchecked(
            &tape.densities[px * s..(px + 1) * s],
            &tape.values[px * s * cf..(px + 1) * s * cf],
            &tape.deltas[px * s..(px + 1) * s],
            &tape.background,
            g_val,
            0.0,
        );
        g_density[px * s..(px + 1) * s].copy_from_slice(&gd);
        g_feature[px * s * cf..(px + 1) * s * cf].copy_from_slice(&gv);
    }
    SampleGrads {
        g_density,
        g_feature,
    }
}
