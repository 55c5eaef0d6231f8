//! Loss functions and their gradients.
//!
//! Sign convention for the adversarial game, with `f(u) = −log(1 + e^{−u})`:
//! the discriminator minimizes `softplus(−l_real) + softplus(l_fake)` (that is
//! `−f(l_real) − f(−l_fake)`) plus `(λ_r1/2)·R1` on real images, and the
//! generator minimizes `softplus(−l_fake)`. Auxiliary pose terms are added to
//! both players and only ever see generated images.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, VariantKind};
use crate::error::{config_err, contract_err};
use crate::generator::LatentCode;
use crate::geometry::{pose_to_vector, sample_pose, CameraPose, PoseDistribution};
use crate::image::Image;
use crate::model::FakeSample;
use crate::nn::{dot, sigmoid, softplus};
use crate::superres::ImagePair;
use crate::Result;

/// Norm guard shared with embedding normalization.
pub const COS_EPS: f64 = 1e-8;

/// Poses closer than this in both angles count as duplicates in a contrast batch.
pub const POSE_DUP_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseNorm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r1: f64,
    /// Weight of the pose regression term.
    pub lambda_pose: f64,
    /// Weight of the InfoNCE term.
    pub lambda_contrast: f64,
    pub tau: f64,
    pub pose_norm: PoseNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r1: 1.0,
            lambda_pose: 1.0,
            lambda_contrast: 1.0,
            tau: 0.25,
            pose_norm: PoseNorm::L2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err!("loss.tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("lambda_r1", self.lambda_r1),
            ("lambda_pose", self.lambda_pose),
            ("lambda_contrast", self.lambda_contrast),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!(
                    "loss.{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        Ok(())
    }
}

/// `f(u) = −log(1 + e^{−u})`, evaluated as `−softplus(−u)`.
pub fn softplus_gan_f(u: f64) -> f64 {
    -softplus(-u)
}

/// A scalar-valued image critic whose input gradient is available.
pub trait Critic {
    /// Logit and `∂logit/∂x` for a six-channel `(high, low)` stack.
    fn logit_and_input_grad(&self, x: &Image) -> Result<(f64, Image)>;
}

/// A discriminator with frozen parameters and an optional condition pose.
pub struct DiscCritic<'a> {
    pub disc: &'a Discriminator,
    pub params: &'a [f64],
    pub condition: Option<[f64; 2]>,
}

impl Critic for DiscCritic<'_> {
    fn logit_and_input_grad(&self, x: &Image) -> Result<(f64, Image)> {
        self.disc.input_gradient(self.params, x, self.condition)
    }
}

/// Mean over the batch of `‖∂logit/∂x‖²`, where `x` is every value of the
/// stacked image pair.
pub fn r1_penalty<C: Critic + ?Sized>(critic: &C, real: &[ImagePair]) -> Result<f64> {
    if real.is_empty() {
        return Err(contract_err!("R1 needs at least one real image"));
    }
    let mut total = 0.0;
    for pair in real {
        let (_, g) = critic.logit_and_input_grad(&pair.stacked())?;
        total += dot(&g.data, &g.data);
    }
    Ok(total / real.len() as f64)
}

/// `R1 = ‖∇ₓl‖²` for one input and `weight · ∂R1/∂θ` accumulated into `gp`.
///
/// The parameter gradient is `2·H_{θx}·∇ₓl`, the directional derivative of
/// `∇_θ l` along `∇ₓl`, taken as a central difference. The network is
/// piecewise linear in its input, so the difference is exact unless the
/// probe crosses an activation kink.
pub fn r1_with_param_grad(
    disc: &Discriminator,
    p: &[f64],
    x: &Image,
    condition: Option<[f64; 2]>,
    weight: f64,
    gp: &mut [f64],
) -> Result<f64> {
    let (_, g) = disc.input_gradient(p, x, condition)?;
    let r1 = dot(&g.data, &g.data);
    let gmax = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax == 0.0 || weight == 0.0 {
        return Ok(r1);
    }
    let eps = 1e-5 / gmax;
    let probe = |sign: f64| -> Result<Vec<f64>> {
        let mut xs = x.clone();
        for (v, gi) in xs.data.iter_mut().zip(&g.data) {
            *v += sign * eps * gi;
        }
        let (_, trace) = disc.forward_stacked(p, xs, condition)?;
        let mut out = vec![0.0; gp.len()];
        let heads = crate::discriminator::HeadGrads {
            logit: 1.0,
            ..Default::default()
        };
        disc.backward(p, &trace, &heads, Some(&mut out), false);
        Ok(out)
    };
    let plus = probe(1.0)?;
    let minus = probe(-1.0)?;
    let scale = weight * 2.0 / (2.0 * eps);
    for ((o, a), b) in gp.iter_mut().zip(&plus).zip(&minus) {
        *o += scale * (a - b);
    }
    Ok(r1)
}

/// `‖ĉ − c‖` in the chosen norm.
pub fn pose_regression_loss(estimate: [f64; 2], target: [f64; 2], norm: PoseNorm) -> f64 {
    let d = [estimate[0] - target[0], estimate[1] - target[1]];
    match norm {
        PoseNorm::L1 => d[0].abs() + d[1].abs(),
        PoseNorm::L2 => libm::sqrt(d[0] * d[0] + d[1] * d[1]),
    }
}

/// Gradient of [`pose_regression_loss`] with respect to the estimate. The
/// subgradient 0 is used where the norm is not differentiable.
pub fn pose_regression_grad(estimate: [f64; 2], target: [f64; 2], norm: PoseNorm) -> [f64; 2] {
    let d = [estimate[0] - target[0], estimate[1] - target[1]];
    match norm {
        PoseNorm::L1 => [sign0(d[0]), sign0(d[1])],
        PoseNorm::L2 => {
            let n = libm::sqrt(d[0] * d[0] + d[1] * d[1]);
            if n == 0.0 {
                [0.0, 0.0]
            } else {
                [d[0] / n, d[1] / n]
            }
        }
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A sample whose rendering pose is known because it was generated. Real
/// training images do not implement this, so they cannot reach the pose loss.
pub trait Rendered {
    fn render_pose(&self) -> &CameraPose;
}

impl Rendered for FakeSample {
    fn render_pose(&self) -> &CameraPose {
        &self.pose
    }
}

/// Batch-mean pose regression loss over generated samples and the gradient
/// with respect to each estimate.
///
/// Only generated samples type-check here:
///
/// ```compile_fail
/// use contranerf_core::dataset::TrainImage;
/// use contranerf_core::image::Image;
/// use contranerf_core::objectives::{fake_pose_loss, PoseNorm};
/// let real = vec![TrainImage::new(Image::zeros(4, 4, 3))];
/// let _ = fake_pose_loss(&real, &[[0.0, 0.0]], PoseNorm::L2);
/// ```
pub fn fake_pose_loss<S: Rendered>(
    samples: &[S],
    estimates: &[[f64; 2]],
    norm: PoseNorm,
) -> Result<(f64, Vec<[f64; 2]>)> {
    if samples.is_empty() || samples.len() != estimates.len() {
        return Err(contract_err!(
            "pose loss needs one estimate per generated sample"
        ));
    }
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (s, &e) in samples.iter().zip(estimates) {
        let c = pose_to_vector(s.render_pose());
        loss += pose_regression_loss(e, c, norm);
        let g = pose_regression_grad(e, c, norm);
        grads.push([g[0] / n, g[1] / n]);
    }
    Ok((loss / n, grads))
}

fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

fn guarded(n: f64) -> f64 {
    if n > 0.0 {
        n
    } else {
        n + COS_EPS
    }
}

/// `uᵀv / (‖u‖‖v‖)` with the zero-norm guard.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / (guarded(norm2(u)) * guarded(norm2(v)))
}

/// Cosine similarity and its gradients with respect to `u` and `v`.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nu, nv) = (guarded(norm2(u)), guarded(norm2(v)));
    let d = dot(u, v) / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - d * a / (nu * nu))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - d * b / (nv * nv))
        .collect();
    (d, gu, gv)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

/// `−log softmax` of the positive similarity among the positive and the
/// negatives, each scaled by `1/τ`.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(contract_err!("InfoNCE needs at least one negative"));
    }
    let logits: Vec<f64> = core::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|v| cosine_similarity(anchor, v) / tau)
        .collect();
    Ok(log_sum_exp(&logits) - logits[0])
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + libm::log(x.iter().map(|&v| libm::exp(v - m)).sum::<f64>())
}

/// InfoNCE value and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn info_nce_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<InfoNceGrad> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(contract_err!("InfoNCE needs at least one negative"));
    }
    let others: Vec<&[f64]> = core::iter::once(positive)
        .chain(negatives.iter().copied())
        .collect();
    let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = others
        .iter()
        .map(|v| cosine_similarity_grad(anchor, v))
        .collect();
    let logits: Vec<f64> = parts.iter().map(|p| p.0 / tau).collect();
    let lse = log_sum_exp(&logits);
    let mut g_anchor = vec![0.0; anchor.len()];
    let mut g_others = Vec::with_capacity(others.len());
    for (k, (_, gu, gv)) in parts.iter().enumerate() {
        // ∂loss/∂logit_k = softmax_k − [k = 0]
        let coef = (libm::exp(logits[k] - lse) - if k == 0 { 1.0 } else { 0.0 }) / tau;
        for (a, &g) in g_anchor.iter_mut().zip(gu) {
            *a += coef * g;
        }
        g_others.push(gv.iter().map(|&g| coef * g).collect::<Vec<f64>>());
    }
    let positive_grad = g_others.remove(0);
    Ok(InfoNceGrad {
        loss: lse - logits[0],
        anchor: g_anchor,
        positive: positive_grad,
        negatives: g_others,
    })
}

/// Anchors and positives share poses and differ in latent. Negatives of
/// anchor `i` are every other member of the batch, `S = 2(N−1)`.
#[derive(Clone, Debug)]
pub struct ContrastBatch<T> {
    pub poses: Vec<CameraPose>,
    pub anchor_latents: Vec<LatentCode>,
    pub positive_latents: Vec<LatentCode>,
    pub anchors: Vec<T>,
    pub positives: Vec<T>,
}

/// A member of a contrast batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Member {
    Anchor(usize),
    Positive(usize),
}

impl<T> ContrastBatch<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Negatives of anchor `i`: all anchors and positives with index `≠ i`.
    pub fn negatives(&self, i: usize) -> Vec<Member> {
        let n = self.len();
        (0..n)
            .filter(|&j| j != i)
            .map(Member::Anchor)
            .chain((0..n).filter(|&j| j != i).map(Member::Positive))
            .collect()
    }
}

fn near_duplicate(a: &CameraPose, b: &CameraPose) -> bool {
    (a.pitch - b.pitch).abs() < POSE_DUP_TOL && (a.yaw - b.yaw).abs() < POSE_DUP_TOL
}

/// Resamples any pose lying within [`POSE_DUP_TOL`] of an earlier one in
/// both angles. Degenerate priors that cannot produce distinct poses are
/// rejected after a bounded number of attempts.
pub fn dedupe_poses<R: rand::Rng + ?Sized>(
    poses: &mut [CameraPose],
    dist: &PoseDistribution,
    rng: &mut R,
) -> Result<()> {
    for i in 1..poses.len() {
        let mut tries = 0;
        while poses[..i].iter().any(|q| near_duplicate(q, &poses[i])) {
            tries += 1;
            if tries > 1000 {
                return Err(config_err!(
                    "pose prior cannot produce {} distinct poses",
                    poses.len()
                ));
            }
            poses[i] = sample_pose(dist, rng)?;
        }
    }
    Ok(())
}

/// Draws anchor and positive latents for each pose and renders them through
/// `render`, all anchors first. Poses must already be distinct (see
/// [`dedupe_poses`]).
pub fn build_contrast_batch<T, R: rand::Rng + ?Sized>(
    poses: &[CameraPose],
    latent_dim: usize,
    anchor_rng: &mut R,
    positive_rng: &mut R,
    mut render: impl FnMut(Member, &LatentCode, &CameraPose) -> Result<T>,
) -> Result<ContrastBatch<T>> {
    if poses.len() < 2 {
        return Err(config_err!(
            "a contrast batch needs at least 2 poses, got {}",
            poses.len()
        ));
    }
    for (i, p) in poses.iter().enumerate() {
        if poses[..i].iter().any(|q| near_duplicate(q, p)) {
            return Err(contract_err!(
                "contrast batch poses must be pairwise distinct"
            ));
        }
    }
    let anchor_latents: Vec<LatentCode> = poses
        .iter()
        .map(|_| LatentCode::sample(latent_dim, anchor_rng))
        .collect();
    let mut positive_latents = Vec::with_capacity(poses.len());
    for za in &anchor_latents {
        let mut zp = LatentCode::sample(latent_dim, positive_rng);
        while zp == *za {
            zp = LatentCode::sample(latent_dim, positive_rng);
        }
        positive_latents.push(zp);
    }
    let mut anchors = Vec::with_capacity(poses.len());
    let mut positives = Vec::with_capacity(poses.len());
    for (i, (pose, za)) in poses.iter().zip(&anchor_latents).enumerate() {
        anchors.push(render(Member::Anchor(i), za, pose)?);
    }
    for (i, (pose, zp)) in poses.iter().zip(&positive_latents).enumerate() {
        positives.push(render(Member::Positive(i), zp, pose)?);
    }
    Ok(ContrastBatch {
        poses: poses.to_vec(),
        anchor_latents,
        positive_latents,
        anchors,
        positives,
    })
}

/// Mean InfoNCE over anchors and the gradients for every embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastGrads {
    pub loss: f64,
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
}

pub fn contrastive_loss_from_embeddings(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    tau: f64,
) -> Result<ContrastGrads> {
    let n = anchors.len();
    if n < 2 || positives.len() != n {
        return Err(contract_err!(
            "contrastive loss needs N >= 2 anchors with one positive each"
        ));
    }
    let m = anchors[0].len();
    let mut ga = vec![vec![0.0; m]; n];
    let mut gpos = vec![vec![0.0; m]; n];
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let members: Vec<Member> = (0..n)
            .filter(|&j| j != i)
            .map(Member::Anchor)
            .chain((0..n).filter(|&j| j != i).map(Member::Positive))
            .collect();
        let negs: Vec<&[f64]> = members
            .iter()
            .map(|mb| match *mb {
                Member::Anchor(j) => anchors[j].as_slice(),
                Member::Positive(j) => positives[j].as_slice(),
            })
            .collect();
        let r = info_nce_grad(&anchors[i], &positives[i], &negs, tau)?;
        total += r.loss;
        axpy(&mut ga[i], scale, &r.anchor);
        axpy(&mut gpos[i], scale, &r.positive);
        for (mb, g) in members.iter().zip(&r.negatives) {
            match *mb {
                Member::Anchor(j) => axpy(&mut ga[j], scale, g),
                Member::Positive(j) => axpy(&mut gpos[j], scale, g),
            }
        }
    }
    Ok(ContrastGrads {
        loss: total * scale,
        anchors: ga,
        positives: gpos,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Mean InfoNCE of a rendered contrast batch under `disc`.
pub fn contrastive_loss(
    batch: &ContrastBatch<ImagePair>,
    disc: &Discriminator,
    params: &[f64],
    tau: f64,
) -> Result<f64> {
    if !disc.variant().kind.has_embedding() {
        return Err(contract_err!(
            "{:?} discriminator has no embedding head",
            disc.variant().kind
        ));
    }
    let embed = |pair: &ImagePair| -> Result<Vec<f64>> {
        Ok(disc
            .discriminate(params, pair, None)?
            .embedding
            .expect("embedding head present"))
    };
    let va = batch
        .anchors
        .iter()
        .map(embed)
        .collect::<Result<Vec<_>>>()?;
    let vp = batch
        .positives
        .iter()
        .map(embed)
        .collect::<Result<Vec<_>>>()?;
    Ok(contrastive_loss_from_embeddings(&va, &vp, tau)?.loss)
}

/// Loss components of one step, as reported.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub real_logits: Vec<f64>,
    pub fake_logits: Vec<f64>,
    pub r1: Option<f64>,
    pub pose_loss: Option<f64>,
    pub info_nce: Option<f64>,
}

/// `(loss_D, loss_G)` for the given terms. R1 enters `loss_D` with weight
/// `λ_r1/2` when present.
pub fn total_objective(
    kind: VariantKind,
    weights: &LossWeights,
    terms: &LossTerms,
) -> Result<(f64, f64)> {
    weights.validate()?;
    if terms.real_logits.is_empty() || terms.fake_logits.is_empty() {
        return Err(contract_err!("objective needs real and fake logits"));
    }
    if kind.has_pose_head() != terms.pose_loss.is_some()
        || kind.has_embedding() != terms.info_nce.is_some()
    {
        return Err(contract_err!(
            "auxiliary losses do not match the {kind:?} variant"
        ));
    }
    let mean =
        |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let aux = aux_term(weights, terms.pose_loss, terms.info_nce);
    let mut loss_d = mean(&terms.real_logits, &|l| softplus(-l))
        + mean(&terms.fake_logits, &|l| softplus(l))
        + aux;
    if let Some(r1) = terms.r1 {
        loss_d += 0.5 * weights.lambda_r1 * r1;
    }
    let loss_g = mean(&terms.fake_logits, &|l| softplus(-l)) + aux;
    Ok((loss_d, loss_g))
}

/// Weighted auxiliary loss. A term with zero weight is left out entirely.
pub fn aux_term(weights: &LossWeights, pose_loss: Option<f64>, info_nce: Option<f64>) -> f64 {
    let mut aux = 0.0;
    if let Some(p) = pose_loss.filter(|_| weights.lambda_pose != 0.0) {
        aux += weights.lambda_pose * p;
    }
    if let Some(c) = info_nce.filter(|_| weights.lambda_contrast != 0.0) {
        aux += weights.lambda_contrast * c;
    }
    aux
}

/// `∂ softplus(−l)/∂l` and `∂ softplus(l)/∂l`.
pub fn gan_grads(logit: f64) -> (f64, f64) {
    (-sigmoid(-logit), sigmoid(logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{DiscConfig, DiscVariant};
    use crate::nn::testing::{numeric_grad, rel_err};
    use crate::rng::{normal_vec, stream_rng, Stream};
    use core::f64::consts::LN_2;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        crate::discriminator::normalize_embedding(&v)
    }

    /// Direct softmax over exponentials, no stabilization.
    fn brute_info_nce(a: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |u: &[f64], v: &[f64]| {
            let d: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (nu * nv)
        };
        let ep = (cos(a, p) / tau).exp();
        let en: f64 = negs.iter().map(|n| (cos(a, n) / tau).exp()).sum();
        -(ep / (ep + en)).ln()
    }

    #[test]
    fn gan_f_values() {
        assert!((softplus_gan_f(0.0) + LN_2).abs() < 1e-15);
        for u in [-5.0, 0.3, 12.0] {
            assert!((softplus_gan_f(u) - softplus_gan_f(-u) - u).abs() < 1e-12);
        }
        let v = softplus_gan_f(50.0);
        assert!(v > -1e-20 && v <= 0.0);
        assert!(softplus_gan_f(-800.0).is_finite());
    }

    #[test]
    fn pose_loss_values() {
        assert_eq!(
            pose_regression_loss([0.4, 1.2], [0.4, 1.2], PoseNorm::L2),
            0.0
        );
        assert!((pose_regression_loss([0.1, 0.2], [0.0, 0.0], PoseNorm::L1) - 0.3).abs() < 1e-15);
        assert!(
            (pose_regression_loss([0.1, 0.2], [0.0, 0.0], PoseNorm::L2) - 0.05f64.sqrt()).abs()
                < 1e-15
        );
    }

    #[test]
    fn pose_loss_gradient() {
        for norm in [PoseNorm::L1, PoseNorm::L2] {
            let e = [0.37, -1.1];
            let c = [0.1, 0.4];
            let g = pose_regression_grad(e, c, norm);
            let n = numeric_grad(&e, 1e-7, |x| pose_regression_loss([x[0], x[1]], c, norm));
            assert!(rel_err(&g, &n) < 1e-6);
        }
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -2.0, 1.1];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&u, &u) - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&u, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn info_nce_symmetric_cases() {
        let v = [0.6, 0.8];
        assert!((info_nce(&v, &v, &[&v], 0.25).unwrap() - LN_2).abs() < 1e-12);
        for s in 1..6 {
            let negs: Vec<&[f64]> = (0..s).map(|_| &v[..]).collect();
            let l = info_nce(&v, &v, &negs, 0.7).unwrap();
            assert!((l - ((s + 1) as f64).ln()).abs() < 1e-12);
        }
        assert!(matches!(
            info_nce(&v, &v, &[&v], 0.0),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn info_nce_specific_similarities() {
        // Vectors in the plane with prescribed cosines to the anchor e₁.
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        let a = [1.0, 0.0];
        let (p, n1, n2) = (at(0.9), at(0.1), at(-0.3));
        let l = info_nce(&a, &p, &[&n1, &n2], 0.25).unwrap();
        let ep = (0.9f64 / 0.25).exp();
        let expect = -(ep / (ep + (0.1f64 / 0.25).exp() + (-0.3f64 / 0.25).exp())).ln();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn info_nce_matches_brute_force() {
        let mut rng = stream_rng(11, 0, Stream::Eval);
        for case in 0..200 {
            let s = 1 + case % 5;
            let tau = [0.1, 0.25, 1.0][case % 3];
            let a = unit(normal_vec(&mut rng, 8));
            let p = unit(normal_vec(&mut rng, 8));
            let negs: Vec<Vec<f64>> = (0..s).map(|_| unit(normal_vec(&mut rng, 8))).collect();
            let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
            let l = info_nce(&a, &p, &refs, tau).unwrap();
            assert!((l - brute_info_nce(&a, &p, &negs, tau)).abs() < 1e-9);
            assert!(l > 0.0);
        }
    }

    #[test]
    fn info_nce_rescaling_invariance() {
        let mut rng = stream_rng(12, 0, Stream::Eval);
        let raw: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, 6)).collect();
        let norm = |k: f64| -> f64 {
            let v: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| unit(r.iter().map(|x| x * k).collect()))
                .collect();
            info_nce(&v[0], &v[1], &[&v[2], &v[3]], 0.25).unwrap()
        };
        assert!((norm(1.0) - norm(37.5)).abs() < 1e-12);
    }

    #[test]
    fn info_nce_monotone_in_positive_similarity() {
        let at = |c: f64| [c, (1.0 - c * c).sqrt(), 0.0];
        let a = [1.0, 0.0, 0.0];
        let n1 = [0.2, 0.0, (1.0f64 - 0.04).sqrt()];
        let n2 = [-0.5, 0.0, (1.0f64 - 0.25).sqrt()];
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let c = -1.0 + k as f64 * 0.05;
            let l = info_nce(&a, &at(c), &[&n1, &n2], 0.25).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut rng = stream_rng(13, 0, Stream::Eval);
        for m in [2, 5, 8] {
            let a = unit(normal_vec(&mut rng, m));
            let p = unit(normal_vec(&mut rng, m));
            let negs: Vec<Vec<f64>> = (0..3).map(|_| unit(normal_vec(&mut rng, m))).collect();
            let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
            let g = info_nce_grad(&a, &p, &refs, 0.25).unwrap();
            let na = numeric_grad(&a, 1e-6, |x| info_nce(x, &p, &refs, 0.25).unwrap());
            let np = numeric_grad(&p, 1e-6, |x| info_nce(&a, x, &refs, 0.25).unwrap());
            let nn0 = numeric_grad(&negs[0], 1e-6, |x| {
                info_nce(&a, &p, &[x, refs[1], refs[2]], 0.25).unwrap()
            });
            assert!(rel_err(&g.anchor, &na) < 1e-4);
            assert!(rel_err(&g.positive, &np) < 1e-4);
            assert!(rel_err(&g.negatives[0], &nn0) < 1e-4);
        }
    }

    #[test]
    fn contrastive_loss_gradients_and_oracle() {
        let mut rng = stream_rng(14, 0, Stream::Eval);
        let n = 3;
        let va: Vec<Vec<f64>> = (0..n).map(|_| unit(normal_vec(&mut rng, 4))).collect();
        let vp: Vec<Vec<f64>> = (0..n).map(|_| unit(normal_vec(&mut rng, 4))).collect();
        let r = contrastive_loss_from_embeddings(&va, &vp, 0.25).unwrap();
        let mut brute = 0.0;
        for i in 0..n {
            let negs: Vec<Vec<f64>> = (0..n)
                .filter(|&j| j != i)
                .flat_map(|j| [va[j].clone(), vp[j].clone()])
                .collect();
            brute += brute_info_nce(&va[i], &vp[i], &negs, 0.25);
        }
        assert!((r.loss - brute / n as f64).abs() < 1e-9);
        let flat: Vec<f64> = va.iter().chain(&vp).flatten().copied().collect();
        let num = numeric_grad(&flat, 1e-6, |x| {
            let a: Vec<Vec<f64>> = x[..n * 4].chunks(4).map(|c| c.to_vec()).collect();
            let p: Vec<Vec<f64>> = x[n * 4..].chunks(4).map(|c| c.to_vec()).collect();
            contrastive_loss_from_embeddings(&a, &p, 0.25).unwrap().loss
        });
        let ana: Vec<f64> = r
            .anchors
            .iter()
            .chain(&r.positives)
            .flatten()
            .copied()
            .collect();
        assert!(rel_err(&ana, &num) < 1e-4);

        let perfect = contrastive_loss_from_embeddings(&va, &va, 0.25)
            .unwrap()
            .loss;
        assert!(perfect < r.loss);
        let constant = vec![vec![0.5, 0.5, 0.5, 0.5]; n];
        let c = contrastive_loss_from_embeddings(&constant, &constant, 0.25)
            .unwrap()
            .loss;
        assert!((c - ((2 * (n - 1) + 1) as f64).ln()).abs() < 1e-12);
    }

    struct Linear(f64);
    impl Critic for Linear {
        fn logit_and_input_grad(&self, x: &Image) -> Result<(f64, Image)> {
            Ok((self.0 * x.data.iter().sum::<f64>(), x.map(|_| self.0)))
        }
    }
    struct Constant;
    impl Critic for Constant {
        fn logit_and_input_grad(&self, x: &Image) -> Result<(f64, Image)> {
            Ok((3.0, x.map(|_| 0.0)))
        }
    }

    fn random_pairs(n: usize, res: usize, seed: u64) -> Vec<ImagePair> {
        let mut rng = stream_rng(seed, 0, Stream::Eval);
        (0..n)
            .map(|_| {
                let mut img = || Image::from_vec(res, res, 3, normal_vec(&mut rng, res * res * 3));
                ImagePair {
                    high: img(),
                    low_upsampled: img(),
                }
            })
            .collect()
    }

    #[test]
    fn r1_closed_forms() {
        let pairs = random_pairs(3, 4, 1);
        assert_eq!(r1_penalty(&Constant, &pairs).unwrap(), 0.0);
        let k = 0.7;
        let r1 = r1_penalty(&Linear(k), &pairs).unwrap();
        assert!((r1 - k * k * (4 * 4 * 6) as f64).abs() < 1e-12);
    }

    #[test]
    fn r1_nonnegative_on_discriminator() {
        let cfg = DiscConfig {
            resolution: 8,
            channels: 2,
            hidden: 4,
            variant: DiscVariant {
                kind: VariantKind::Regression,
                embedding_dim: 0,
            },
        };
        let (d, p) = Discriminator::new(cfg, 3).unwrap();
        let critic = DiscCritic {
            disc: &d,
            params: &p,
            condition: None,
        };
        for pair in random_pairs(100, 8, 2) {
            assert!(r1_penalty(&critic, &[pair]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_differences() {
        let cfg = DiscConfig {
            resolution: 8,
            channels: 2,
            hidden: 4,
            variant: DiscVariant {
                kind: VariantKind::Implicit,
                embedding_dim: 3,
            },
        };
        let (d, p) = Discriminator::new(cfg, 4).unwrap();
        let x = random_pairs(1, 8, 5)[0].stacked();
        let r1_of = |pp: &[f64]| {
            let (_, g) = d.input_gradient(pp, &x, None).unwrap();
            dot(&g.data, &g.data)
        };
        let mut gp = vec![0.0; d.num_params()];
        let r1 = r1_with_param_grad(&d, &p, &x, None, 1.0, &mut gp).unwrap();
        assert_eq!(r1, r1_of(&p));
        let num = numeric_grad(&p, 1e-6, r1_of);
        assert!(rel_err(&gp, &num) < 1e-4, "{}", rel_err(&gp, &num));
    }

    #[test]
    fn total_objective_reductions() {
        let w = LossWeights {
            lambda_pose: 0.0,
            lambda_contrast: 0.0,
            ..Default::default()
        };
        let terms = LossTerms {
            real_logits: vec![0.5, -0.2],
            fake_logits: vec![0.1, 0.3],
            r1: Some(2.0),
            pose_loss: Some(0.7),
            info_nce: Some(1.9),
        };
        let plain = LossTerms {
            pose_loss: None,
            info_nce: None,
            ..terms.clone()
        };
        let base = total_objective(VariantKind::PoseConditioned, &w, &plain).unwrap();
        assert_eq!(
            total_objective(VariantKind::RegressionImplicit, &w, &terms).unwrap(),
            base
        );
        let expect_d =
            (softplus(-0.5) + softplus(0.2)) / 2.0 + (softplus(0.1) + softplus(0.3)) / 2.0 + 1.0;
        assert!((base.0 - expect_d).abs() < 1e-15);
        assert!(total_objective(VariantKind::Regression, &w, &plain).is_err());
        let bad = LossWeights { tau: -1.0, ..w };
        assert!(total_objective(VariantKind::PoseConditioned, &bad, &plain).is_err());
    }

    #[test]
    fn contrast_batch_structure() {
        let dist = PoseDistribution::preset(crate::geometry::PosePreset::Bedroom);
        let mut prng = stream_rng(1, 0, Stream::Poses);
        let mut poses: Vec<CameraPose> = (0..2)
            .map(|_| sample_pose(&dist, &mut prng).unwrap())
            .collect();
        dedupe_poses(&mut poses, &dist, &mut prng).unwrap();
        let mut ra = stream_rng(1, 0, Stream::AnchorLatents);
        let mut rp = stream_rng(1, 0, Stream::PositiveLatents);
        let b = build_contrast_batch(&poses, 5, &mut ra, &mut rp, |_, z, c| Ok((z.clone(), *c)))
            .unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.negatives(0), vec![Member::Anchor(1), Member::Positive(1)]);
        for i in 0..2 {
            assert_eq!(b.anchors[i].1, b.positives[i].1);
            assert_ne!(b.anchor_latents[i], b.positive_latents[i]);
        }
        let one = [poses[0]];
        assert!(matches!(
            build_contrast_batch(&one, 5, &mut ra, &mut rp, |_, z, _| Ok(z.clone())),
            Err(crate::Error::Config(_))
        ));
        let fixed = PoseDistribution::fixed(1.5, 1.5);
        let mut same = vec![sample_pose(&fixed, &mut prng).unwrap(); 3];
        assert!(dedupe_poses(&mut same, &fixed, &mut prng).is_err());
    }
}
