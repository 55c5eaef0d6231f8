//! The full model: generator, renderer, super-resolution and discriminator,
//! with the differentiable path from a latent to the discriminator input.
//!
//! Generator-side parameters (generator followed by super-resolution) live in
//! one flat buffer so a single optimizer and one EMA cover both.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{DiscConfig, DiscVariant, Discriminator};
use crate::error::config_err;
use crate::generator::{Generator, GeneratorConfig, LatentCode, StyleTrace, TriPlane};
use crate::geometry::{pose_to_vector, CameraPose, PoseDistribution};
use crate::image::Image;
use crate::render::{
    render, render_backward, render_with_tape, RenderConfig, RenderOutput, RenderTape,
};
use crate::superres::{ImagePair, SuperRes, SuperResConfig, SuperResTrace};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub render: RenderConfig,
    pub superres_hidden: usize,
    pub final_resolution: usize,
    pub disc_channels: usize,
    pub disc_hidden: usize,
    pub variant: DiscVariant,
    pub prior: PoseDistribution,
}

impl ModelConfig {
    pub fn superres(&self) -> SuperResConfig {
        SuperResConfig {
            feature_channels: self.generator.feature_channels,
            hidden: self.superres_hidden,
            feature_resolution: self.render.feature_resolution,
            final_resolution: self.final_resolution,
        }
    }

    pub fn disc(&self) -> DiscConfig {
        DiscConfig {
            resolution: self.final_resolution,
            channels: self.disc_channels,
            hidden: self.disc_hidden,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.render.validate()?;
        self.superres().scale()?;
        self.variant.validate()?;
        self.prior.validate()?;
        if self.generator.feature_channels < 3 {
            return Err(config_err!("feature channels must include RGB (>= 3)"));
        }
        Ok(())
    }
}

/// A generated sample and the pose it was rendered from. This is the only
/// type that can feed the pose regression loss.
#[derive(Clone, Debug)]
pub struct FakeSample {
    pub latent: LatentCode,
    pub pose: CameraPose,
    pub pair: ImagePair,
    pub render: RenderOutput,
}

/// Backward state for one [`FakeSample`].
#[derive(Clone, Debug)]
pub struct FakeTrace {
    style: StyleTrace,
    planes: TriPlane,
    tape: RenderTape,
    sr: SuperResTrace,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub generator: Generator,
    pub superres: SuperRes,
    pub disc: Discriminator,
}

/// Initial parameter buffers for a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub g: Vec<f64>,
    pub d: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ModelParams)> {
        config.validate()?;
        let (generator, gen_p) = Generator::new(config.generator, seed)?;
        let (superres, sr_p) = SuperRes::new(config.superres(), seed)?;
        let (disc, d) = Discriminator::new(config.disc(), seed)?;
        let mut g = gen_p;
        g.extend_from_slice(&sr_p);
        Ok((
            Self {
                config,
                generator,
                superres,
                disc,
            },
            ModelParams { g, d },
        ))
    }

    pub fn num_g_params(&self) -> usize {
        self.generator.num_params() + self.superres.num_params()
    }

    pub fn num_d_params(&self) -> usize {
        self.disc.num_params()
    }

    pub fn split_g<'a>(&self, g: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        g.split_at(self.generator.num_params())
    }

    fn split_g_mut<'a>(&self, g: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        g.split_at_mut(self.generator.num_params())
    }

    /// Renders the latent's field from `pose` without keeping a tape.
    pub fn render_low<R: Rng + ?Sized>(
        &self,
        g: &[f64],
        z: &LatentCode,
        pose: &CameraPose,
        jitter: Option<&mut R>,
    ) -> Result<RenderOutput> {
        let (gp, _) = self.split_g(g);
        let (_, planes) = self.generator.style(gp, z)?;
        render(
            &self.generator.field(gp, planes),
            pose,
            &self.config.render,
            jitter,
        )
    }

    /// Full generation `G(z, c)` without a backward tape.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        g: &[f64],
        z: &LatentCode,
        pose: &CameraPose,
        jitter: Option<&mut R>,
    ) -> Result<FakeSample> {
        let out = self.render_low(g, z, pose, jitter)?;
        let (_, sp) = self.split_g(g);
        let pair = self.superres.superresolve(sp, &out);
        Ok(FakeSample {
            latent: z.clone(),
            pose: *pose,
            pair,
            render: out,
        })
    }

    /// Full generation with the trace needed by [`Model::synthesize_backward`].
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        g: &[f64],
        z: &LatentCode,
        pose: &CameraPose,
        jitter: Option<&mut R>,
    ) -> Result<(FakeSample, FakeTrace)> {
        let (gp, sp) = self.split_g(g);
        let (style, planes) = self.generator.style(gp, z)?;
        let field = self.generator.field(gp, planes);
        let (out, tape) = render_with_tape(&field, pose, &self.config.render, jitter)?;
        let (pair, sr) = self.superres.forward(sp, &out.feature_map);
        let sample = FakeSample {
            latent: z.clone(),
            pose: *pose,
            pair,
            render: out,
        };
        Ok((
            sample,
            FakeTrace {
                style,
                planes: field.planes,
                tape,
                sr,
            },
        ))
    }

    /// Accumulates `∂L/∂g` into `grad` given `∂L/∂pair`.
    pub fn synthesize_backward(
        &self,
        g: &[f64],
        trace: &FakeTrace,
        g_pair: &ImagePair,
        grad: &mut [f64],
    ) {
        let (gp, sp) = self.split_g(g);
        let (ggen, gsr) = self.split_g_mut(grad);
        let g_features = self.superres.backward(sp, &trace.sr, g_pair, Some(gsr));
        let samples = render_backward(&trace.tape, &g_features);
        let mut gplanes = vec![0.0; trace.planes.data.len()];
        self.generator.field_backward(
            gp,
            &trace.planes,
            &trace.tape.points,
            &samples.g_density,
            &samples.g_feature,
            ggen,
            &mut gplanes,
        );
        self.generator
            .style_backward(gp, &trace.style, &gplanes, ggen);
    }

    /// Condition vector handed to a pose-conditioned discriminator for a
    /// generated sample; `None` for the other variants.
    pub fn fake_condition(&self, sample: &FakeSample) -> Option<[f64; 2]> {
        self.config
            .variant
            .kind
            .is_conditioned()
            .then(|| pose_to_vector(&sample.pose))
    }
}

/// Splits a six-channel gradient into the gradient of an [`ImagePair`].
pub fn split_pair_grad(g: &Image) -> ImagePair {
    ImagePair::from_stacked(g)
}


#[cfg(test)]
mod tests {
    use super::testing::tiny_config;
    use super::*;
    use crate::discriminator::VariantKind;
    use crate::nn::testing::{numeric_grad, rel_err};
    use crate::rng::{stream_rng, Rng as ChaCha, Stream};

    #[test]
    fn synthesize_matches_generate() {
        let (model, params) = Model::new(tiny_config(VariantKind::Implicit, 4), 3).unwrap();
        let mut rng = stream_rng(3, 0, Stream::AnchorLatents);
        let z = LatentCode::sample(6, &mut rng);
        let pose = CameraPose::new(1.4, 1.7, 2.7, 0.7).unwrap();
        let a = model
            .generate::<ChaCha>(&params.g, &z, &pose, None)
            .unwrap();
        let (b, _) = model
            .synthesize::<ChaCha>(&params.g, &z, &pose, None)
            .unwrap();
        assert_eq!(a.pair, b.pair);
        assert_eq!(a.render, b.render);
    }

    #[test]
    fn end_to_end_generator_gradient() {
        let mut cfg = tiny_config(VariantKind::Regression, 0);
        cfg.render.stratified = false;
        let (model, mut params) = Model::new(cfg, 5).unwrap();
        // Give the super-resolution residual a non-zero path.
        for (i, v) in params.g.iter_mut().enumerate() {
            *v += 0.02 * ((i * 7 % 5) as f64 - 2.0);
        }
        let z = LatentCode((0..6).map(|i| (i as f64 * 0.9).sin()).collect());
        let pose = CameraPose::new(1.5, 1.6, 2.7, 0.7).unwrap();
        let gh = Image::from_vec(8, 8, 3, (0..192).map(|i| (i as f64 * 0.31).cos()).collect());
        let gl = Image::from_vec(8, 8, 3, (0..192).map(|i| (i as f64 * 0.17).sin()).collect());
        let loss = |g: &[f64]| {
            let s = model.generate::<ChaCha>(g, &z, &pose, None).unwrap();
            crate::nn::dot(&s.pair.high.data, &gh.data)
                + crate::nn::dot(&s.pair.low_upsampled.data, &gl.data)
        };
        let (_, trace) = model
            .synthesize::<ChaCha>(&params.g, &z, &pose, None)
            .unwrap();
        let mut grad = vec![0.0; model.num_g_params()];
        model.synthesize_backward(
            &params.g,
            &trace,
            &ImagePair {
                high: gh.clone(),
                low_upsampled: gl.clone(),
            },
            &mut grad,
        );
        let num = numeric_grad(&params.g, 1e-6, loss);
        assert!(rel_err(&grad, &num) < 1e-4, "{}", rel_err(&grad, &num));
    }
}
