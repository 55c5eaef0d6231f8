//! Alternating discriminator/generator optimization with lazy R1 and an EMA
//! copy of the generator-side parameters.
//!
//! One step:
//! 1. render the fake batch (anchors, plus same-pose positives for the
//!    contrastive variants) from freshly sampled prior poses;
//! 2. discriminator update on real and fake images with the auxiliary terms;
//! 3. every `r1_every` steps, a separate discriminator update on the R1
//!    penalty alone, weighted by `r1_every`;
//! 4. generator update through the updated discriminator, reusing the renders;
//! 5. EMA update.
//!
//! `loss_D` in [`StepMetrics`] covers the adversarial and auxiliary terms;
//! the lazily applied penalty is reported on its own as `r1`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::TrainImage;
use crate::discriminator::{DiscriminatorOutput, HeadGrads};
use crate::error::{config_err, contract_err};
use crate::geometry::{pose_to_vector, sample_pose, CameraPose};
use crate::model::{split_pair_grad, FakeSample, FakeTrace, Model, ModelConfig};
use crate::nn::{sigmoid, Adam};
use crate::objectives::{
    aux_term, build_contrast_batch, contrastive_loss_from_embeddings, dedupe_poses, fake_pose_loss,
    gan_grads, r1_with_param_grad, total_objective, LossTerms, LossWeights, Member,
};
use crate::rng::{stream_rng, Stream};
use crate::superres::ImagePair;
use crate::{Error, Result};

/// Adam momentum pair.
pub const ADAM_BETAS: (f64, f64) = (0.0, 0.99);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub ema_decay: f64,
    pub r1_every: u64,
    pub seed: u64,
    /// Random horizontal flips of real images.
    pub flip_real: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let kind = self.model.variant.kind;
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be at least 1"));
        }
        if kind.has_embedding() && self.batch_size < 2 {
            return Err(config_err!(
                "contrastive variants need train.batch_size >= 2 for negatives"
            ));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("train.ema_decay must lie in [0, 1)"));
        }
        if self.r1_every == 0 {
            return Err(config_err!("train.r1_every must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    pub r1: Option<f64>,
    pub pose_loss: Option<f64>,
    pub info_nce: Option<f64>,
    pub real_logit_mean: f64,
    pub fake_logit_mean: f64,
}

/// Snapshot of the batch that produced a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDump {
    pub step: u64,
    pub quantity: String,
    pub loss_d: Option<f64>,
    pub loss_g: Option<f64>,
    pub r1: Option<f64>,
    pub real_logits: Vec<f64>,
    pub fake_logits: Vec<f64>,
    pub real_image_means: Vec<f64>,
    pub fake_poses: Vec<[f64; 2]>,
    pub fake_latents: Vec<Vec<f64>>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub g: Vec<f64>,
    pub d: Vec<f64>,
    pub ema: Vec<f64>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

/// Renders of one step.
struct FakeBatch {
    anchors: Vec<(FakeSample, FakeTrace)>,
    positives: Vec<(FakeSample, FakeTrace)>,
}

impl FakeBatch {
    fn anchor_samples(&self) -> Vec<&FakeSample> {
        self.anchors.iter().map(|(s, _)| s).collect()
    }
}

/// Head outputs of the fake batch under one set of discriminator parameters.
struct FakeEval {
    anchors: Vec<(DiscriminatorOutput, crate::discriminator::DiscTrace)>,
    positives: Vec<(DiscriminatorOutput, crate::discriminator::DiscTrace)>,
}

/// Auxiliary losses and their per-head gradients (already weighted).
struct Aux {
    pose_loss: Option<f64>,
    info_nce: Option<f64>,
    pose_grads: Option<Vec<[f64; 2]>>,
    anchor_embed_grads: Option<Vec<Vec<f64>>>,
    positive_embed_grads: Option<Vec<Vec<f64>>>,
}

/// EMA decay at step `t`, ramped up from zero so early averages are not
/// dominated by the initialization.
pub fn ema_decay_at(decay: f64, t: u64) -> f64 {
    decay.min((1.0 + t as f64) / (10.0 + t as f64))
}

pub fn update_ema(ema: &mut [f64], params: &[f64], decay: f64) {
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

/// Indices of the real images for `step`, drawn without replacement while the
/// dataset is large enough.
pub fn sample_real_indices(dataset_len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = stream_rng(seed, step, Stream::RealBatch);
    if dataset_len >= batch {
        let mut idx: Vec<usize> = (0..dataset_len).collect();
        for i in 0..batch {
            let j = rng.random_range(i..dataset_len);
            idx.swap(i, j);
        }
        idx.truncate(batch);
        idx
    } else {
        (0..batch)
            .map(|_| rng.random_range(0..dataset_len))
            .collect()
    }
}

fn finite_or(value: f64, quantity: &str, dump: impl FnOnce(&str) -> BatchDump) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(alloc::boxed::Box::new(dump(quantity))))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Model::new(config.model.clone(), config.seed)?;
        let opt_g = Adam::new(params.g.len(), config.lr_g, ADAM_BETAS.0, ADAM_BETAS.1);
        let opt_d = Adam::new(params.d.len(), config.lr_d, ADAM_BETAS.0, ADAM_BETAS.1);
        Ok(Self {
            ema: params.g.clone(),
            g: params.g,
            d: params.d,
            opt_g,
            opt_d,
            model,
            config,
            step: 0,
        })
    }

    /// Rebuilds a state from stored buffers, checking every length.
    pub fn from_parts(
        config: TrainConfig,
        g: Vec<f64>,
        d: Vec<f64>,
        ema: Vec<f64>,
        opt_g: Adam,
        opt_d: Adam,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (model, _) = Model::new(config.model.clone(), config.seed)?;
        let (ng, nd) = (model.num_g_params(), model.num_d_params());
        if g.len() != ng || ema.len() != ng || opt_g.m.len() != ng || opt_g.v.len() != ng {
            return Err(config_err!(
                "generator parameter count does not match the configuration ({ng})"
            ));
        }
        if d.len() != nd || opt_d.m.len() != nd || opt_d.v.len() != nd {
            return Err(config_err!(
                "discriminator parameter count does not match the configuration ({nd})"
            ));
        }
        Ok(Self {
            config,
            model,
            g,
            d,
            ema,
            opt_g,
            opt_d,
            step,
        })
    }

    fn real_pairs(&self, real: &[TrainImage]) -> Result<Vec<ImagePair>> {
        use rand::Rng;
        let res = self.config.model.final_resolution;
        let scale = self.model.superres.scale();
        let mut rng = stream_rng(self.config.seed, self.step, Stream::RealAugment);
        real.iter()
            .map(|t| {
                let img = t.image();
                if img.h != res || img.w != res || img.c != 3 {
                    return Err(contract_err!(
                        "real image is {}×{}×{}, expected {res}×{res}×3",
                        img.h,
                        img.w,
                        img.c
                    ));
                }
                let flip = self.config.flip_real && rng.random::<f64>() < 0.5;
                let img = if flip {
                    img.flip_horizontal()
                } else {
                    img.clone()
                };
                Ok(ImagePair::from_real(&img, scale))
            })
            .collect()
    }

    fn real_conditions(&self, n: usize) -> Result<Vec<Option<[f64; 2]>>> {
        if !self.config.model.variant.kind.is_conditioned() {
            return Ok(vec![None; n]);
        }
        // Real images have no poses here; the conditioned baseline sees prior draws.
        let mut rng = stream_rng(self.config.seed, self.step, Stream::ConditionPoses);
        (0..n)
            .map(|_| {
                Ok(Some(pose_to_vector(&sample_pose(
                    &self.config.model.prior,
                    &mut rng,
                )?)))
            })
            .collect()
    }

    fn render_fakes(&self) -> Result<FakeBatch> {
        let cfg = &self.config;
        let kind = cfg.model.variant.kind;
        let (seed, step) = (cfg.seed, self.step);
        let mut pose_rng = stream_rng(seed, step, Stream::Poses);
        let mut poses: Vec<CameraPose> = (0..cfg.batch_size)
            .map(|_| sample_pose(&cfg.model.prior, &mut pose_rng))
            .collect::<Result<_>>()?;
        let mut anchor_rng = stream_rng(seed, step, Stream::AnchorLatents);
        let mut jitter = stream_rng(seed, step, Stream::Jitter);
        if !kind.has_embedding() {
            let anchors = poses
                .iter()
                .map(|pose| {
                    let z = crate::generator::LatentCode::sample(
                        cfg.model.generator.latent_dim,
                        &mut anchor_rng,
                    );
                    self.model.synthesize(&self.g, &z, pose, Some(&mut jitter))
                })
                .collect::<Result<_>>()?;
            return Ok(FakeBatch {
                anchors,
                positives: Vec::new(),
            });
        }
        dedupe_poses(&mut poses, &cfg.model.prior, &mut pose_rng)?;
        let mut positive_rng = stream_rng(seed, step, Stream::PositiveLatents);
        let mut positive_jitter = stream_rng(seed, step, Stream::PositiveJitter);
        let batch = build_contrast_batch(
            &poses,
            cfg.model.generator.latent_dim,
            &mut anchor_rng,
            &mut positive_rng,
            |member, z, pose| {
                let rng = match member {
                    Member::Anchor(_) => &mut jitter,
                    Member::Positive(_) => &mut positive_jitter,
                };
                self.model.synthesize(&self.g, z, pose, Some(rng))
            },
        )?;
        Ok(FakeBatch {
            anchors: batch.anchors,
            positives: batch.positives,
        })
    }

    fn eval_fakes(&self, d: &[f64], fakes: &FakeBatch) -> Result<FakeEval> {
        let disc = &self.model.disc;
        let eval = |(s, _): &(FakeSample, FakeTrace)| {
            disc.forward(d, &s.pair, self.model.fake_condition(s))
        };
        let anchors = fakes.anchors.iter().map(eval).collect::<Result<_>>()?;
        let positives = fakes.positives.iter().map(eval).collect::<Result<_>>()?;
        Ok(FakeEval { anchors, positives })
    }

    fn aux(&self, fakes: &FakeBatch, eval: &FakeEval) -> Result<Aux> {
        let kind = self.config.model.variant.kind;
        let w = &self.config.loss;
        let mut aux = Aux {
            pose_loss: None,
            info_nce: None,
            pose_grads: None,
            anchor_embed_grads: None,
            positive_embed_grads: None,
        };
        if kind.has_pose_head() {
            let est: Vec<[f64; 2]> = eval
                .anchors
                .iter()
                .map(|(o, _)| o.pose_estimate.expect("pose head"))
                .collect();
            let samples: Vec<FakeSample> = fakes.anchor_samples().into_iter().cloned().collect();
            let (loss, grads) = fake_pose_loss(&samples, &est, w.pose_norm)?;
            aux.pose_loss = Some(loss);
            if w.lambda_pose != 0.0 {
                aux.pose_grads = Some(
                    grads
                        .iter()
                        .map(|g| [w.lambda_pose * g[0], w.lambda_pose * g[1]])
                        .collect(),
                );
            }
        }
        if kind.has_embedding() {
            let emb = |v: &Vec<(DiscriminatorOutput, _)>| -> Vec<Vec<f64>> {
                v.iter()
                    .map(|(o, _)| o.embedding.clone().expect("embedding head"))
                    .collect()
            };
            let r = contrastive_loss_from_embeddings(
                &emb(&eval.anchors),
                &emb(&eval.positives),
                w.tau,
            )?;
            aux.info_nce = Some(r.loss);
            if w.lambda_contrast != 0.0 {
                let scale = |g: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    g.into_iter()
                        .map(|v| v.into_iter().map(|x| w.lambda_contrast * x).collect())
                        .collect()
                };
                aux.anchor_embed_grads = Some(scale(r.anchors));
                aux.positive_embed_grads = Some(scale(r.positives));
            }
        }
        Ok(aux)
    }

    fn dump(
        &self,
        quantity: &str,
        fakes: &FakeBatch,
        reals: &[ImagePair],
        real_logits: &[f64],
        fake_logits: &[f64],
    ) -> BatchDump {
        BatchDump {
            step: self.step,
            quantity: quantity.into(),
            loss_d: None,
            loss_g: None,
            r1: None,
            real_logits: real_logits.to_vec(),
            fake_logits: fake_logits.to_vec(),
            real_image_means: reals.iter().map(|p| p.high.mean()).collect(),
            fake_poses: fakes
                .anchors
                .iter()
                .map(|(s, _)| pose_to_vector(&s.pose))
                .collect(),
            fake_latents: fakes
                .anchors
                .iter()
                .map(|(s, _)| s.latent.0.clone())
                .collect(),
        }
    }

    /// One discriminator step on the R1 penalty of `reals` alone. Returns the
    /// batch-mean penalty.
    pub fn r1_step(&mut self, reals: &[ImagePair], conditions: &[Option<[f64; 2]>]) -> Result<f64> {
        let n = reals.len() as f64;
        let weight = 0.5 * self.config.loss.lambda_r1 * self.config.r1_every as f64 / n;
        let mut grad = vec![0.0; self.d.len()];
        let mut r1 = 0.0;
        for (pair, &cond) in reals.iter().zip(conditions) {
            r1 += r1_with_param_grad(
                &self.model.disc,
                &self.d,
                &pair.stacked(),
                cond,
                weight,
                &mut grad,
            )? / n;
        }
        self.opt_d.step(&mut self.d, &grad);
        Ok(r1)
    }

    /// Prepares the real half of a batch exactly as [`TrainState::train_step`] does.
    pub fn prepare_reals(
        &self,
        real: &[TrainImage],
    ) -> Result<(Vec<ImagePair>, Vec<Option<[f64; 2]>>)> {
        Ok((self.real_pairs(real)?, self.real_conditions(real.len())?))
    }

    pub fn train_step(&mut self, real: &[TrainImage]) -> Result<StepMetrics> {
        if real.is_empty() {
            return Err(contract_err!("real batch is empty"));
        }
        let kind = self.config.model.variant.kind;
        let weights = self.config.loss;
        let (reals, conds) = self.prepare_reals(real)?;
        let fakes = self.render_fakes()?;
        let disc = self.model.disc.clone();
        let n_real = reals.len() as f64;
        let n_fake = fakes.anchors.len() as f64;

        // Discriminator step.
        let mut grad_d = vec![0.0; self.d.len()];
        let mut real_logits = Vec::with_capacity(reals.len());
        for (pair, &cond) in reals.iter().zip(&conds) {
            let (out, trace) = disc.forward(&self.d, pair, cond)?;
            real_logits.push(out.logit);
            let g = HeadGrads {
                logit: gan_grads(out.logit).0 / n_real,
                ..Default::default()
            };
            disc.backward(&self.d, &trace, &g, Some(&mut grad_d), false);
        }
        let eval = self.eval_fakes(&self.d, &fakes)?;
        let fake_logits: Vec<f64> = eval.anchors.iter().map(|(o, _)| o.logit).collect();
        let aux = self.aux(&fakes, &eval)?;
        for (i, (out, trace)) in eval.anchors.iter().enumerate() {
            let g = HeadGrads {
                logit: gan_grads(out.logit).1 / n_fake,
                pose: aux.pose_grads.as_ref().map(|g| g[i]),
                embedding: aux.anchor_embed_grads.as_ref().map(|g| g[i].clone()),
            };
            disc.backward(&self.d, trace, &g, Some(&mut grad_d), false);
        }
        if let Some(pg) = &aux.positive_embed_grads {
            for ((_, trace), g) in eval.positives.iter().zip(pg) {
                let heads = HeadGrads {
                    logit: 0.0,
                    pose: None,
                    embedding: Some(g.clone()),
                };
                disc.backward(&self.d, trace, &heads, Some(&mut grad_d), false);
            }
        }
        let terms = LossTerms {
            real_logits: real_logits.clone(),
            fake_logits: fake_logits.clone(),
            r1: None,
            pose_loss: aux.pose_loss,
            info_nce: aux.info_nce,
        };
        let (loss_d, _) = total_objective(kind, &weights, &terms)?;
        let loss_d = finite_or(loss_d, "loss_D", |q| {
            let mut d = self.dump(q, &fakes, &reals, &real_logits, &fake_logits);
            d.loss_d = Some(loss_d);
            d
        })?;
        self.opt_d.step(&mut self.d, &grad_d);

        // Lazy R1.
        let r1 = if weights.lambda_r1 > 0.0 && self.step.is_multiple_of(self.config.r1_every) {
            let r1 = self.r1_step(&reals, &conds)?;
            Some(finite_or(r1, "r1", |q| {
                let mut d = self.dump(q, &fakes, &reals, &real_logits, &fake_logits);
                d.loss_d = Some(loss_d);
                d.r1 = Some(r1);
                d
            })?)
        } else {
            None
        };

        // Generator step through the updated discriminator.
        let eval = self.eval_fakes(&self.d, &fakes)?;
        let aux_g = self.aux(&fakes, &eval)?;
        let g_logits: Vec<f64> = eval.anchors.iter().map(|(o, _)| o.logit).collect();
        let loss_g = g_logits
            .iter()
            .map(|&l| crate::nn::softplus(-l))
            .sum::<f64>()
            / n_fake
            + aux_term(&weights, aux_g.pose_loss, aux_g.info_nce);
        let loss_g = finite_or(loss_g, "loss_G", |q| {
            let mut d = self.dump(q, &fakes, &reals, &real_logits, &g_logits);
            d.loss_d = Some(loss_d);
            d.loss_g = Some(loss_g);
            d.r1 = r1;
            d
        })?;
        let mut grad_g = vec![0.0; self.g.len()];
        let backprop = |(out, trace): &(DiscriminatorOutput, _),
                        heads: HeadGrads,
                        sample: &(FakeSample, FakeTrace),
                        grad: &mut [f64]| {
            let _ = out;
            let gx = disc
                .backward(&self.d, trace, &heads, None, true)
                .expect("input gradient requested");
            self.model
                .synthesize_backward(&self.g, &sample.1, &split_pair_grad(&gx), grad);
        };
        for (i, (e, sample)) in eval.anchors.iter().zip(&fakes.anchors).enumerate() {
            let heads = HeadGrads {
                logit: -sigmoid(-e.0.logit) / n_fake,
                pose: aux_g.pose_grads.as_ref().map(|g| g[i]),
                embedding: aux_g.anchor_embed_grads.as_ref().map(|g| g[i].clone()),
            };
            backprop(e, heads, sample, &mut grad_g);
        }
        if let Some(pg) = &aux_g.positive_embed_grads {
            for ((e, sample), g) in eval.positives.iter().zip(&fakes.positives).zip(pg) {
                let heads = HeadGrads {
                    logit: 0.0,
                    pose: None,
                    embedding: Some(g.clone()),
                };
                backprop(e, heads, sample, &mut grad_g);
            }
        }
        self.opt_g.step(&mut self.g, &grad_g);
        update_ema(
            &mut self.ema,
            &self.g,
            ema_decay_at(self.config.ema_decay, self.step),
        );

        let metrics = StepMetrics {
            step: self.step,
            loss_d,
            loss_g,
            r1,
            pose_loss: aux.pose_loss,
            info_nce: aux.info_nce,
            real_logit_mean: mean(&real_logits),
            fake_logit_mean: mean(&fake_logits),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `steps` steps over `dataset`, calling `on_step` after each.
    pub fn train(
        &mut self,
        dataset: &[TrainImage],
        steps: u64,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        if dataset.is_empty() {
            return Err(config_err!("training dataset is empty"));
        }
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = sample_real_indices(
                dataset.len(),
                self.config.batch_size,
                self.config.seed,
                self.step,
            );
            let batch: Vec<TrainImage> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let m = self.train_step(&batch)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}


#[cfg(test)]
mod tests {
    use super::testing::{tiny_data, tiny_train};
    use super::*;
    use crate::discriminator::VariantKind;
    use crate::image::Image;

    #[test]
    fn identical_seeds_identical_metrics() {
        for kind in VariantKind::ALL {
            let cfg = tiny_train(kind);
            let data = tiny_data(&cfg, 5);
            let a = TrainState::new(cfg.clone())
                .unwrap()
                .train(&data, 3, |_| {})
                .unwrap();
            let b = TrainState::new(cfg.clone())
                .unwrap()
                .train(&data, 3, |_| {})
                .unwrap();
            assert_eq!(a, b);
            assert!(a
                .iter()
                .all(|m| m.loss_d.is_finite() && m.loss_g.is_finite()));
            assert_eq!(a[0].pose_loss.is_some(), kind.has_pose_head());
            assert_eq!(a[0].info_nce.is_some(), kind.has_embedding());
            assert!(a[0].r1.is_some() && a[1].r1.is_none());
        }
    }

    #[test]
    fn zero_contrast_weight_still_reports_info_nce() {
        let mut cfg = tiny_train(VariantKind::Implicit);
        cfg.loss.lambda_contrast = 0.0;
        let data = tiny_data(&cfg, 4);
        let m = TrainState::new(cfg)
            .unwrap()
            .train(&data, 1, |_| {})
            .unwrap();
        assert!(m[0].info_nce.unwrap() > 0.0);
    }

    #[test]
    fn r1_step_only_touches_discriminator() {
        let cfg = tiny_train(VariantKind::Regression);
        let data = tiny_data(&cfg, 3);
        let mut st = TrainState::new(cfg).unwrap();
        let (g0, d0, e0) = (st.g.clone(), st.d.clone(), st.ema.clone());
        let (reals, conds) = st.prepare_reals(&data).unwrap();
        let r1 = st.r1_step(&reals, &conds).unwrap();
        assert!(r1 > 0.0);
        assert_eq!(st.g, g0);
        assert_eq!(st.ema, e0);
        assert_ne!(st.d, d0);
    }

    #[test]
    fn ema_converges_to_frozen_parameters() {
        let target = vec![1.0, -2.0, 0.5];
        let mut ema = vec![0.0; 3];
        let decay = 0.9;
        for t in 0..200 {
            update_ema(&mut ema, &target, decay);
            let gap = ema
                .iter()
                .zip(&target)
                .map(|(e, p)| (e - p).abs())
                .fold(0.0, f64::max);
            let bound = 2.0 * 0.9f64.powi(t + 1);
            assert!(gap <= bound + 1e-12);
        }
        assert_eq!(ema_decay_at(0.999, 0), 0.1);
        assert_eq!(ema_decay_at(0.999, 1_000_000), 0.999);
    }

    #[test]
    fn flips_hit_about_half_of_real_images() {
        let mut cfg = tiny_train(VariantKind::Regression);
        cfg.flip_real = true;
        let st = TrainState::new(cfg).unwrap();
        let img = Image::from_vec(8, 8, 3, (0..192).map(|i| (i as f64 * 0.1).sin()).collect());
        let flipped = img.flip_horizontal();
        let batch = vec![TrainImage::new(img.clone()); 2000];
        let (pairs, _) = st.prepare_reals(&batch).unwrap();
        let n = pairs.iter().filter(|p| p.high == flipped).count();
        assert_eq!(pairs.iter().filter(|p| p.high == img).count() + n, 2000);
        // Binomial(2000, 0.5): 4σ ≈ 89.
        assert!((n as i64 - 1000).abs() < 90, "{n}");
    }

    #[test]
    fn nan_input_aborts_with_dump() {
        let cfg = tiny_train(VariantKind::Implicit);
        let mut data = tiny_data(&cfg, 3);
        let mut bad = data[0].image().clone();
        bad.data[5] = f64::NAN;
        data[0] = TrainImage::new(bad);
        let mut st = TrainState::new(cfg).unwrap();
        match st.train_step(&data) {
            Err(Error::NonFinite(dump)) => {
                assert_eq!(dump.quantity, "loss_D");
                assert_eq!(dump.step, 0);
                assert_eq!(dump.fake_poses.len(), 3);
                assert!(dump.real_image_means[0].is_nan());
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn degenerations_reproduce_single_loss_variants() {
        let run = |kind, lp: f64, lc: f64| {
            let mut cfg = tiny_train(kind);
            cfg.loss.lambda_pose = lp;
            cfg.loss.lambda_contrast = lc;
            let data = tiny_data(&cfg, 4);
            TrainState::new(cfg)
                .unwrap()
                .train(&data, 1, |_| {})
                .unwrap()
                .remove(0)
        };
        let both_no_contrast = run(VariantKind::RegressionImplicit, 1.0, 0.0);
        let regression = run(VariantKind::Regression, 1.0, 1.0);
        assert_eq!(
            both_no_contrast.loss_d.to_bits(),
            regression.loss_d.to_bits()
        );
        assert_eq!(
            both_no_contrast.loss_g.to_bits(),
            regression.loss_g.to_bits()
        );
        let both_no_pose = run(VariantKind::RegressionImplicit, 0.0, 1.0);
        let implicit = run(VariantKind::Implicit, 1.0, 1.0);
        assert_eq!(both_no_pose.loss_d.to_bits(), implicit.loss_d.to_bits());
        assert_eq!(both_no_pose.loss_g.to_bits(), implicit.loss_g.to_bits());
    }

    #[test]
    fn contrastive_variant_needs_two_images() {
        let mut cfg = tiny_train(VariantKind::Implicit);
        cfg.batch_size = 1;
        assert!(matches!(TrainState::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn real_indices_are_deterministic_and_distinct() {
        let a = sample_real_indices(20, 8, 1, 3);
        assert_eq!(a, sample_real_indices(20, 8, 1, 3));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 8);
        assert_eq!(sample_real_indices(3, 5, 1, 0).len(), 5);
    }
}
