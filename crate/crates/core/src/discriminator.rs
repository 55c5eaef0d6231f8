//! Discriminators sharing one convolutional trunk with per-variant heads:
//!
//! * pose-conditioned: `D(I, c) → l`, the pose enters through a learned
//!   projection whose inner product with the trunk feature is added to `l`;
//! * regression: `D(I) → (l, ĉ)` with `ĉ` an estimated `(pitch, yaw)`;
//! * implicit: `D(I) → (l, v)` with `v` an ℓ2-normalized `m`-vector;
//! * regression + implicit: both auxiliary heads.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err};
use crate::image::Image;
use crate::nn::{lrelu, lrelu_backward, lrelu_grad, lrelu_image, Conv2d, Linear, ParamBuilder};
use crate::superres::ImagePair;
use crate::Result;

/// Norm guard for zero embeddings.
pub const EMBED_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    PoseConditioned,
    Regression,
    Implicit,
    RegressionImplicit,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::PoseConditioned,
        VariantKind::Regression,
        VariantKind::Implicit,
        VariantKind::RegressionImplicit,
    ];

    /// Preset name of the training recipe using this discriminator.
    pub fn preset_name(self) -> &'static str {
        match self {
            VariantKind::PoseConditioned => "pose_conditioned",
            VariantKind::Regression => "prnerf",
            VariantKind::Implicit => "contranerf",
            VariantKind::RegressionImplicit => "pr_contranerf",
        }
    }

    /// Accepts either the preset name or the snake-case kind name.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "pose_conditioned" => VariantKind::PoseConditioned,
            "prnerf" | "regression" => VariantKind::Regression,
            "contranerf" | "implicit" => VariantKind::Implicit,
            "pr_contranerf" | "regression_implicit" => VariantKind::RegressionImplicit,
            _ => return None,
        })
    }

    pub fn has_pose_head(self) -> bool {
        matches!(
            self,
            VariantKind::Regression | VariantKind::RegressionImplicit
        )
    }

    pub fn has_embedding(self) -> bool {
        matches!(
            self,
            VariantKind::Implicit | VariantKind::RegressionImplicit
        )
    }

    pub fn is_conditioned(self) -> bool {
        self == VariantKind::PoseConditioned
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscVariant {
    pub kind: VariantKind,
    /// Embedding dimension `m`; ignored by variants without an embedding head.
    pub embedding_dim: usize,
}

impl DiscVariant {
    pub fn new(kind: VariantKind, embedding_dim: usize) -> Result<Self> {
        let v = Self {
            kind,
            embedding_dim,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.has_embedding() && self.embedding_dim < 2 {
            return Err(config_err!(
                "embedding dimension must be at least 2, got {}",
                self.embedding_dim
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub resolution: usize,
    /// Channels of the first trunk block; later blocks double up to 4×.
    pub channels: usize,
    pub hidden: usize,
    pub variant: DiscVariant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub logit: f64,
    pub pose_estimate: Option<[f64; 2]>,
    pub embedding: Option<Vec<f64>>,
}

/// Upstream gradients for each head.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads {
    pub logit: f64,
    pub pose: Option<[f64; 2]>,
    /// Gradient with respect to the normalized embedding.
    pub embedding: Option<Vec<f64>>,
}

/// `raw / ‖raw‖₂`; the zero vector maps to itself via the norm guard.
pub fn normalize_embedding(raw: &[f64]) -> Vec<f64> {
    let norm = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>());
    let denom = if norm > 0.0 { norm } else { norm + EMBED_EPS };
    raw.iter().map(|v| v / denom).collect()
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscConfig,
    convs: [Conv2d; 4],
    flat_dim: usize,
    fc: Linear,
    logit_head: Linear,
    cond_proj: Option<Linear>,
    pose_head: Option<Linear>,
    embed_head: Option<Linear>,
    num_params: usize,
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DiscTrace {
    inputs: Vec<Image>,
    pres: Vec<Image>,
    flat: Vec<f64>,
    fc_pre: Vec<f64>,
    hidden: Vec<f64>,
    cond: Option<[f64; 2]>,
    cond_embed: Option<Vec<f64>>,
    raw_embedding: Option<Vec<f64>>,
    embedding: Option<Vec<f64>>,
}

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        config.variant.validate()?;
        if config.resolution == 0 || config.channels == 0 || config.hidden == 0 {
            return Err(config_err!("discriminator sizes must be positive"));
        }
        let mut pb = ParamBuilder::new(seed);
        let gain = libm::sqrt(2.0);
        let c = config.channels;
        let widths = [6, c, 2 * c, 4 * c, 4 * c];
        let convs: [Conv2d; 4] = core::array::from_fn(|i| {
            pb.conv(
                &alloc::format!("disc.conv{i}"),
                widths[i],
                widths[i + 1],
                2,
                gain,
            )
        });
        let mut side = config.resolution;
        for conv in &convs {
            side = conv.out_size(side);
        }
        let flat_dim = side * side * widths[4];
        let fc = pb.linear("disc.fc", flat_dim, config.hidden, gain);
        let logit_head = pb.linear("disc.logit", config.hidden, 1, 1.0);
        let kind = config.variant.kind;
        let cond_proj = kind
            .is_conditioned()
            .then(|| pb.linear("disc.cond", 2, config.hidden, 1.0));
        let pose_head = kind
            .has_pose_head()
            .then(|| pb.linear("disc.pose", config.hidden, 2, 1.0));
        let embed_head = kind.has_embedding().then(|| {
            pb.linear(
                "disc.embed",
                config.hidden,
                config.variant.embedding_dim,
                1.0,
            )
        });
        if let Some(ph) = pose_head {
            // Start the pose estimate at the centre of every camera prior.
            pb.params_mut()[ph.b..ph.b + 2].copy_from_slice(&[FRAC_PI_2, FRAC_PI_2]);
        }
        let num_params = pb.len();
        let disc = Self {
            config,
            convs,
            flat_dim,
            fc,
            logit_head,
            cond_proj,
            pose_head,
            embed_head,
            num_params,
        };
        Ok((disc, pb.finish()))
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn variant(&self) -> DiscVariant {
        self.config.variant
    }

    fn check_condition(&self, cond: Option<[f64; 2]>) -> Result<()> {
        match (self.config.variant.kind.is_conditioned(), cond.is_some()) {
            (true, false) => Err(contract_err!(
                "pose-conditioned discriminator needs a condition pose"
            )),
            (false, true) => Err(contract_err!(
                "only the pose-conditioned discriminator accepts a condition pose"
            )),
            _ => Ok(()),
        }
    }

    pub fn discriminate(
        &self,
        p: &[f64],
        images: &ImagePair,
        cond: Option<[f64; 2]>,
    ) -> Result<DiscriminatorOutput> {
        Ok(self.forward(p, images, cond)?.0)
    }

    pub fn forward(
        &self,
        p: &[f64],
        images: &ImagePair,
        cond: Option<[f64; 2]>,
    ) -> Result<(DiscriminatorOutput, DiscTrace)> {
        self.forward_stacked(p, images.stacked(), cond)
    }

    /// Forward over the six-channel `(high, low)` stack.
    pub fn forward_stacked(
        &self,
        p: &[f64],
        x: Image,
        cond: Option<[f64; 2]>,
    ) -> Result<(DiscriminatorOutput, DiscTrace)> {
        self.check_condition(cond)?;
        if x.h != self.config.resolution || x.w != self.config.resolution || x.c != 6 {
            return Err(contract_err!(
                "discriminator expects {0}×{0}×6 input, got {1}×{2}×{3}",
                self.config.resolution,
                x.h,
                x.w,
                x.c
            ));
        }
        let mut inputs = Vec::with_capacity(4);
        let mut pres = Vec::with_capacity(4);
        let mut cur = x;
        for conv in &self.convs {
            let pre = conv.forward(p, &cur);
            let next = lrelu_image(&pre);
            inputs.push(cur);
            pres.push(pre);
            cur = next;
        }
        let flat = cur.data;
        debug_assert_eq!(flat.len(), self.flat_dim);
        let fc_pre = self.fc.forward_vec(p, &flat);
        let hidden: Vec<f64> = fc_pre.iter().map(|&v| lrelu(v)).collect();
        let mut logit = self.logit_head.forward_vec(p, &hidden)[0];
        let cond_embed = match (self.cond_proj, cond) {
            (Some(proj), Some(c)) => {
                let e = proj.forward_vec(p, &c);
                logit += crate::nn::dot(&e, &hidden);
                Some(e)
            }
            _ => None,
        };
        let pose_estimate = self.pose_head.map(|h| {
            let v = h.forward_vec(p, &hidden);
            [v[0], v[1]]
        });
        let raw_embedding = self.embed_head.map(|h| h.forward_vec(p, &hidden));
        let embedding = raw_embedding.as_deref().map(normalize_embedding);
        let out = DiscriminatorOutput {
            logit,
            pose_estimate,
            embedding: embedding.clone(),
        };
        let trace = DiscTrace {
            inputs,
            pres,
            flat,
            fc_pre,
            hidden,
            cond,
            cond_embed,
            raw_embedding,
            embedding,
        };
        Ok((out, trace))
    }

    /// Backward from head gradients. Parameter gradients accumulate into `gp`
    /// when given; the six-channel input gradient is returned when requested.
    pub fn backward(
        &self,
        p: &[f64],
        trace: &DiscTrace,
        g: &HeadGrads,
        gp: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Image> {
        let mut gp = gp;
        let hdim = self.config.hidden;
        let mut g_hidden = vec![0.0; hdim];
        self.logit_head.backward(
            p,
            &trace.hidden,
            &[g.logit],
            gp.as_deref_mut(),
            Some(&mut g_hidden),
        );
        if let (Some(proj), Some(e), Some(c)) = (self.cond_proj, &trace.cond_embed, trace.cond) {
            for (gh, &ev) in g_hidden.iter_mut().zip(e) {
                *gh += g.logit * ev;
            }
            let g_e: Vec<f64> = trace.hidden.iter().map(|&h| g.logit * h).collect();
            proj.backward(p, &c, &g_e, gp.as_deref_mut(), None);
        }
        if let (Some(head), Some(gpose)) = (self.pose_head, g.pose) {
            head.backward(
                p,
                &trace.hidden,
                &gpose,
                gp.as_deref_mut(),
                Some(&mut g_hidden),
            );
        }
        if let (Some(head), Some(gv), Some(raw), Some(v)) = (
            self.embed_head,
            &g.embedding,
            &trace.raw_embedding,
            &trace.embedding,
        ) {
            let norm = libm::sqrt(raw.iter().map(|x| x * x).sum::<f64>());
            let g_raw: Vec<f64> = if norm > 0.0 {
                let proj = crate::nn::dot(gv, v);
                gv.iter()
                    .zip(v)
                    .map(|(&gi, &vi)| (gi - proj * vi) / norm)
                    .collect()
            } else {
                gv.iter().map(|&gi| gi / EMBED_EPS).collect()
            };
            head.backward(
                p,
                &trace.hidden,
                &g_raw,
                gp.as_deref_mut(),
                Some(&mut g_hidden),
            );
        }
        for (gh, &pre) in g_hidden.iter_mut().zip(&trace.fc_pre) {
            *gh *= lrelu_grad(pre);
        }
        let mut g_flat = vec![0.0; self.flat_dim];
        self.fc.backward(
            p,
            &trace.flat,
            &g_hidden,
            gp.as_deref_mut(),
            Some(&mut g_flat),
        );
        let last = &trace.pres[3];
        let mut g_cur = Image::from_vec(last.h, last.w, last.c, g_flat);
        for i in (0..4).rev() {
            let g_pre = lrelu_backward(&trace.pres[i], &g_cur);
            let need_input = want_input || i > 0;
            g_cur = self.convs[i].backward(
                p,
                &trace.inputs[i],
                &g_pre,
                gp.as_deref_mut(),
                need_input,
            )?;
        }
        Some(g_cur)
    }

    /// Logit and its gradient with respect to the six-channel input.
    pub fn input_gradient(
        &self,
        p: &[f64],
        x: &Image,
        cond: Option<[f64; 2]>,
    ) -> Result<(f64, Image)> {
        let (out, trace) = self.forward_stacked(p, x.clone(), cond)?;
        let g = HeadGrads {
            logit: 1.0,
            ..Default::default()
        };
        let gx = self
            .backward(p, &trace, &g, None, true)
            .expect("input gradient requested");
        Ok((out.logit, gx))
    }

    /// Short human-readable description of the heads.
    pub fn describe(&self) -> String {
        alloc::format!(
            "{:?} (m={}, {} params)",
            self.config.variant.kind,
            self.config.variant.embedding_dim,
            self.num_params
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{numeric_grad, rel_err};
    use crate::rng::{normal, stream_rng, Stream};

    fn disc(kind: VariantKind, m: usize, res: usize) -> (Discriminator, Vec<f64>) {
        let cfg = DiscConfig {
            resolution: res,
            channels: 3,
            hidden: 8,
            variant: DiscVariant {
                kind,
                embedding_dim: m,
            },
        };
        Discriminator::new(cfg, 17).unwrap()
    }

    fn random_pair(res: usize, seed: u64) -> ImagePair {
        let mut rng = stream_rng(seed, 0, Stream::Eval);
        let mut img = || {
            Image::from_vec(
                res,
                res,
                3,
                (0..res * res * 3)
                    .map(|_| normal(&mut rng).tanh())
                    .collect(),
            )
        };
        ImagePair {
            high: img(),
            low_upsampled: img(),
        }
    }

    #[test]
    fn normalize_embedding_cases() {
        assert_eq!(normalize_embedding(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(normalize_embedding(&[0.6, 0.8]), vec![0.6, 0.8]);
        assert_eq!(normalize_embedding(&[0.0, 0.0]), vec![0.0, 0.0]);
        let u = [0.3, -1.2, 2.5];
        let k = 7.5;
        let ku: Vec<f64> = u.iter().map(|v| v * k).collect();
        let a = normalize_embedding(&u);
        let b = normalize_embedding(&ku);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn heads_follow_variant() {
        let pair = random_pair(16, 1);
        let (d, p) = disc(VariantKind::Regression, 0, 16);
        let out = d.discriminate(&p, &pair, None).unwrap();
        assert!(out.pose_estimate.is_some() && out.embedding.is_none());

        let (d, p) = disc(VariantKind::Implicit, 6, 16);
        let out = d.discriminate(&p, &pair, None).unwrap();
        assert!(out.pose_estimate.is_none());
        let v = out.embedding.unwrap();
        assert_eq!(v.len(), 6);
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);

        let (d, p) = disc(VariantKind::RegressionImplicit, 4, 16);
        let out = d.discriminate(&p, &pair, None).unwrap();
        assert!(out.pose_estimate.is_some() && out.embedding.is_some());
    }

    #[test]
    fn condition_pose_contract() {
        let pair = random_pair(16, 2);
        let (d, p) = disc(VariantKind::PoseConditioned, 0, 16);
        assert!(matches!(
            d.discriminate(&p, &pair, None),
            Err(crate::Error::Contract(_))
        ));
        let a = d.discriminate(&p, &pair, Some([1.4, 1.2])).unwrap().logit;
        let b = d.discriminate(&p, &pair, Some([1.7, 2.2])).unwrap().logit;
        assert_ne!(a, b);
        let (d, p) = disc(VariantKind::Implicit, 4, 16);
        assert!(d.discriminate(&p, &pair, Some([1.0, 1.0])).is_err());
    }

    #[test]
    fn small_embedding_dim_rejected() {
        assert!(DiscVariant::new(VariantKind::Implicit, 1).is_err());
        assert!(DiscVariant::new(VariantKind::Regression, 0).is_ok());
    }

    #[test]
    fn trunk_reads_both_images() {
        let (d, p) = disc(VariantKind::Regression, 0, 16);
        let mut changed = 0;
        for s in 0..16 {
            let pair = random_pair(16, 100 + s);
            let mut zeroed = pair.clone();
            zeroed.low_upsampled.data.fill(0.0);
            let a = d.discriminate(&p, &pair, None).unwrap().logit;
            let b = d.discriminate(&p, &zeroed, None).unwrap().logit;
            changed += (a != b) as usize;
        }
        assert!(changed >= 15, "{changed}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in VariantKind::ALL {
            let (d, p) = disc(kind, 3, 8);
            let pair = random_pair(8, 5);
            let cond = kind.is_conditioned().then_some([1.3, 1.9]);
            let g = HeadGrads {
                logit: 0.8,
                pose: kind.has_pose_head().then_some([0.4, -0.6]),
                embedding: kind.has_embedding().then(|| vec![0.5, -0.2, 0.9]),
            };
            let loss = |pp: &[f64], x: &Image| {
                let (o, _) = d.forward_stacked(pp, x.clone(), cond).unwrap();
                let mut l = g.logit * o.logit;
                if let (Some(a), Some(b)) = (o.pose_estimate, g.pose) {
                    l += a[0] * b[0] + a[1] * b[1];
                }
                if let (Some(a), Some(b)) = (&o.embedding, &g.embedding) {
                    l += crate::nn::dot(a, b);
                }
                l
            };
            let x = pair.stacked();
            let (_, trace) = d.forward_stacked(&p, x.clone(), cond).unwrap();
            let mut gp = vec![0.0; d.num_params()];
            let gx = d.backward(&p, &trace, &g, Some(&mut gp), true).unwrap();
            let np = numeric_grad(&p, 1e-6, |pp| loss(pp, &x));
            let nx = numeric_grad(&x.data, 1e-6, |xx| {
                loss(&p, &Image::from_vec(8, 8, 6, xx.to_vec()))
            });
            assert!(rel_err(&gp, &np) < 1e-4, "{kind:?} params");
            assert!(rel_err(&gx.data, &nx) < 1e-4, "{kind:?} input");
            assert!(gx.is_finite());
        }
    }
}
