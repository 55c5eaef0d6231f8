//! Run configuration: a TOML file with `model`, `loss`, `train`, `data` and
//! `eval` sections. Unknown keys are rejected and every error names the file
//! line (or the `--set` override) it came from.

use std::fmt::Write as _;
use std::path::Path;

use contranerf_core::dataset::SyntheticConfig;
use contranerf_core::discriminator::{DiscVariant, VariantKind};
use contranerf_core::generator::GeneratorConfig;
use contranerf_core::geometry::{AngleLaw, PoseDistribution, PosePreset};
use contranerf_core::metrics::{EvalOptions, MetricSelection};
use contranerf_core::model::ModelConfig;
use contranerf_core::objectives::{LossWeights, PoseNorm};
use contranerf_core::render::RenderConfig;
use contranerf_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, IoContext, Result};

/// Distance between the camera radius and the default near/far bounds.
pub const DEPTH_MARGIN: f64 = 1.2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `pose_conditioned`, `prnerf`, `contranerf` or `pr_contranerf`.
    pub variant: String,
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub decoder_hidden: usize,
    pub feature_channels: usize,
    pub feature_resolution: usize,
    pub final_resolution: usize,
    pub samples_per_ray: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    pub stratified: bool,
    pub superres_hidden: usize,
    pub disc_channels: usize,
    pub disc_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: "contranerf".into(),
            embedding_dim: 24,
            latent_dim: 64,
            style_dim: 64,
            plane_resolution: 16,
            plane_channels: 8,
            decoder_hidden: 32,
            feature_channels: 16,
            feature_resolution: 16,
            final_resolution: 32,
            samples_per_ray: 24,
            near: None,
            far: None,
            stratified: true,
            superres_hidden: 16,
            disc_channels: 16,
            disc_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub lambda_pose: f64,
    pub lambda_contrast: f64,
    pub lambda_r1: f64,
    pub pose_norm: PoseNorm,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            tau: w.tau,
            lambda_pose: w.lambda_pose,
            lambda_contrast: w.lambda_contrast,
            lambda_r1: w.lambda_r1,
            pose_norm: w.pose_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub ema_decay: f64,
    pub r1_every: u64,
    pub seed: u64,
    pub flip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            lr_g: 2e-3,
            lr_d: 2e-3,
            ema_decay: 0.999,
            r1_every: 16,
            seed: 0,
            flip: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedural scenes generated in memory.
    Synthetic,
    /// A directory written by `make-data`, with ground truth.
    Dir,
    /// A folder of images without ground truth.
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// `bedroom`, `church`, `afhq`, `cub` or `custom`.
    pub prior: String,
    /// Pitch law for the `custom` prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pitch: Option<AngleLaw>,
    /// Yaw law for the `custom` prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw: Option<AngleLaw>,
    pub radius: f64,
    pub fov: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
    pub scenes: usize,
    pub views: usize,
    /// Quadrature samples for the ground-truth renders.
    pub samples_per_ray: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            prior: "bedroom".into(),
            pitch: None,
            yaw: None,
            radius: 2.7,
            fov: 0.7,
            background: None,
            scenes: 50,
            views: 8,
            samples_per_ray: 64,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub fid: bool,
    pub precision_recall: bool,
    pub depth_fd: bool,
    pub embedding: bool,
    pub samples: usize,
    pub k: usize,
    pub diag_poses: usize,
    pub diag_latents: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            fid: true,
            precision_recall: true,
            depth_fd: true,
            embedding: true,
            samples: o.samples,
            k: o.k,
            diag_poses: o.diag_poses,
            diag_latents: o.diag_latents,
            seed: o.seed,
        }
    }
}

/// A `--set section.key=value` override.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
    pub raw: String,
}

impl Override {
    /// Parses `section.key=value`. The value is read as TOML and falls back
    /// to a bare string, so `model.variant=prnerf` needs no quotes.
    pub fn parse(arg: &str) -> Result<Self> {
        let (key, raw) = arg
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("--set {arg}: expected section.key=value")))?;
        let key = key.trim().to_string();
        if key.split('.').count() != 2 || key.split('.').any(str::is_empty) {
            return Err(AppError::Config(format!(
                "--set {arg}: key must have the form section.key"
            )));
        }
        let raw = raw.trim().to_string();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        Ok(Self { key, value, raw })
    }
}

/// Where a configuration text came from, for error messages.
#[derive(Clone, Debug)]
pub struct Source<'a> {
    pub name: &'a str,
    pub text: &'a str,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line and column of `section.key` in a TOML text.
pub fn locate(text: &str, dotted: &str) -> Option<(usize, usize)> {
    let (section, key) = dotted.split_once('.')?;
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix('[') {
            current = rest.split(']').next().unwrap_or("").trim().to_string();
            continue;
        }
        if current != section {
            continue;
        }
        if let Some(rest) = t.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some((i + 1, line.len() - t.len() + 1));
            }
        }
    }
    None
}

impl RunConfig {
    /// Reads, overrides and validates a configuration file.
    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let name = path.display().to_string();
        Self::from_text(
            &Source {
                name: &name,
                text: &text,
            },
            overrides,
        )
    }

    pub fn from_text(src: &Source<'_>, overrides: &[Override]) -> Result<Self> {
        let anchored = |e: toml::de::Error| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (l, c) = line_col(src.text, span.start);
                    AppError::Config(format!("{}:{l}:{c}: {msg}", src.name))
                }
                None => AppError::Config(format!("{}: {msg}", src.name)),
            }
        };
        // Parse the file alone first so its errors keep their spans.
        let base: RunConfig = toml::from_str(src.text).map_err(anchored)?;
        let cfg = if overrides.is_empty() {
            base
        } else {
            let mut table: toml::Table = toml::from_str(src.text).map_err(anchored)?;
            for o in overrides {
                let (section, key) = o.key.split_once('.').expect("checked by Override::parse");
                let entry = table
                    .entry(section)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let toml::Value::Table(t) = entry else {
                    return Err(AppError::Config(format!(
                        "--set {}: `{section}` is not a section",
                        o.key
                    )));
                };
                t.insert(key.to_string(), o.value.clone());
            }
            RunConfig::deserialize(toml::Value::Table(table))
                .map_err(|e| AppError::Config(format!("--set: {}", e.message().trim())))?
        };
        cfg.check().map_err(|(key, msg)| {
            let at = if let Some(o) = overrides.iter().rev().find(|o| o.key == key) {
                format!("--set {}={}", o.key, o.raw)
            } else if let Some((l, c)) = locate(src.text, &key) {
                format!("{}:{l}:{c}", src.name)
            } else {
                format!("{} (default value)", src.name)
            };
            AppError::Config(format!("{at}: {key}: {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn variant_kind(&self) -> Option<VariantKind> {
        VariantKind::from_name(&self.model.variant)
    }

    pub fn near_far(&self) -> (f64, f64) {
        (
            self.model.near.unwrap_or(self.data.radius - DEPTH_MARGIN),
            self.model.far.unwrap_or(self.data.radius + DEPTH_MARGIN),
        )
    }

    pub fn prior(&self) -> Result<PoseDistribution> {
        let dist = match (
            PosePreset::from_name(&self.data.prior),
            self.data.prior.as_str(),
        ) {
            (Some(p), _) => PoseDistribution::preset(p),
            (None, "custom") => match (self.data.pitch, self.data.yaw) {
                (Some(pitch), Some(yaw)) => PoseDistribution {
                    pitch,
                    yaw,
                    radius: 0.0,
                    fov: 0.0,
                },
                _ => {
                    return Err(AppError::Config(
                        "data.prior = \"custom\" needs data.pitch and data.yaw".into(),
                    ))
                }
            },
            _ => {
                return Err(AppError::Config(format!(
                    "unknown data.prior `{}`",
                    self.data.prior
                )))
            }
        };
        Ok(dist.with_camera(self.data.radius, self.data.fov))
    }

    /// Background colour: white for the bird prior, black otherwise.
    pub fn background(&self) -> [f64; 3] {
        self.data.background.unwrap_or(if self.data.prior == "cub" {
            [1.0; 3]
        } else {
            [0.0; 3]
        })
    }

    /// Checks ranges and returns the offending key.
    fn check(&self) -> std::result::Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        let m = &self.model;
        let Some(kind) = self.variant_kind() else {
            return err(
                "model.variant",
                format!(
                    "unknown variant `{}` (pose_conditioned, prnerf, contranerf, pr_contranerf)",
                    m.variant
                ),
            );
        };
        if kind.has_embedding() && m.embedding_dim < 2 {
            return err(
                "model.embedding_dim",
                format!("must be at least 2, got {}", m.embedding_dim),
            );
        }
        for (k, v) in [
            ("model.latent_dim", m.latent_dim),
            ("model.style_dim", m.style_dim),
            ("model.plane_resolution", m.plane_resolution),
            ("model.plane_channels", m.plane_channels),
            ("model.decoder_hidden", m.decoder_hidden),
            ("model.feature_resolution", m.feature_resolution),
            ("model.superres_hidden", m.superres_hidden),
            ("model.disc_channels", m.disc_channels),
            ("model.disc_hidden", m.disc_hidden),
        ] {
            if v == 0 {
                return err(k, "must be positive".into());
            }
        }
        if m.feature_channels < 3 {
            return err(
                "model.feature_channels",
                format!("must be at least 3 (RGB), got {}", m.feature_channels),
            );
        }
        if m.samples_per_ray < 2 {
            return err(
                "model.samples_per_ray",
                format!("must be at least 2, got {}", m.samples_per_ray),
            );
        }
        if m.final_resolution < m.feature_resolution
            || !m.final_resolution.is_multiple_of(m.feature_resolution)
        {
            return err(
                "model.final_resolution",
                format!(
                    "must be an integer multiple of model.feature_resolution ({})",
                    m.feature_resolution
                ),
            );
        }
        if m.final_resolution < 16 {
            return err(
                "model.final_resolution",
                "must be at least 16 for the discriminator trunk".into(),
            );
        }
        let (near, far) = self.near_far();
        if !(near > 0.0) {
            return err("model.near", format!("must be positive, got {near}"));
        }
        if !(far > near) {
            return err("model.far", format!("must exceed near ({near}), got {far}"));
        }
        let l = &self.loss;
        if !(l.tau > 0.0 && l.tau.is_finite()) {
            return err("loss.tau", format!("must be positive, got {}", l.tau));
        }
        for (k, v) in [
            ("loss.lambda_pose", l.lambda_pose),
            ("loss.lambda_contrast", l.lambda_contrast),
            ("loss.lambda_r1", l.lambda_r1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(k, format!("must be finite and non-negative, got {v}"));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 || (kind.has_embedding() && t.batch_size < 2) {
            return err(
                "train.batch_size",
                format!(
                    "must be at least {}, got {}",
                    1 + usize::from(kind.has_embedding()),
                    t.batch_size
                ),
            );
        }
        if !(t.lr_g > 0.0) {
            return err("train.lr_g", format!("must be positive, got {}", t.lr_g));
        }
        if !(t.lr_d > 0.0) {
            return err("train.lr_d", format!("must be positive, got {}", t.lr_d));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return err(
                "train.ema_decay",
                format!("must lie in [0, 1), got {}", t.ema_decay),
            );
        }
        if t.r1_every == 0 {
            return err("train.r1_every", "must be at least 1".into());
        }
        let d = &self.data;
        if PosePreset::from_name(&d.prior).is_none() && d.prior != "custom" {
            return err(
                "data.prior",
                format!(
                    "unknown prior `{}` (bedroom, church, afhq, cub, custom)",
                    d.prior
                ),
            );
        }
        if d.prior == "custom" && (d.pitch.is_none() || d.yaw.is_none()) {
            return err(
                "data.prior",
                "the custom prior needs data.pitch and data.yaw".into(),
            );
        }
        if let Ok(p) = self.prior() {
            if let Err(e) = p.validate() {
                return err("data.prior", e.to_string());
            }
        }
        if !(d.radius > 0.0) {
            return err("data.radius", format!("must be positive, got {}", d.radius));
        }
        if !(d.fov > 0.0 && d.fov < std::f64::consts::PI) {
            return err("data.fov", format!("must lie in (0, π), got {}", d.fov));
        }
        if d.source != DataSource::Synthetic && d.path.is_none() {
            return err(
                "data.path",
                "required for the dir and folder sources".into(),
            );
        }
        if d.scenes == 0 {
            return err("data.scenes", "must be at least 1".into());
        }
        if d.views == 0 {
            return err("data.views", "must be at least 1".into());
        }
        if d.samples_per_ray < 2 {
            return err("data.samples_per_ray", "must be at least 2".into());
        }
        let e = &self.eval;
        if e.k == 0 || e.k >= e.samples {
            return err(
                "eval.k",
                format!("must satisfy 1 <= k < eval.samples ({})", e.samples),
            );
        }
        if e.diag_poses < 4 {
            return err("eval.diag_poses", "must be at least 4".into());
        }
        if e.diag_latents < 2 {
            return err("eval.diag_latents", "must be at least 2".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let kind = self
            .variant_kind()
            .ok_or_else(|| AppError::Config(format!("unknown variant `{}`", m.variant)))?;
        let (near, far) = self.near_far();
        Ok(ModelConfig {
            generator: GeneratorConfig {
                latent_dim: m.latent_dim,
                style_dim: m.style_dim,
                plane_resolution: m.plane_resolution,
                plane_channels: m.plane_channels,
                decoder_hidden: m.decoder_hidden,
                feature_channels: m.feature_channels,
            },
            render: RenderConfig {
                feature_resolution: m.feature_resolution,
                samples_per_ray: m.samples_per_ray,
                near,
                far,
                stratified: m.stratified,
                background: self.background(),
            },
            superres_hidden: m.superres_hidden,
            final_resolution: m.final_resolution,
            disc_channels: m.disc_channels,
            disc_hidden: m.disc_hidden,
            variant: DiscVariant {
                kind,
                embedding_dim: m.embedding_dim,
            },
            prior: self.prior()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let l = &self.loss;
        let t = &self.train;
        let cfg = TrainConfig {
            model: self.model_config()?,
            loss: LossWeights {
                lambda_r1: l.lambda_r1,
                lambda_pose: l.lambda_pose,
                lambda_contrast: l.lambda_contrast,
                tau: l.tau,
                pose_norm: l.pose_norm,
            },
            batch_size: t.batch_size,
            steps: t.steps,
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            ema_decay: t.ema_decay,
            r1_every: t.r1_every,
            seed: t.seed,
            flip_real: t.flip,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        let (near, far) = self.near_far();
        Ok(SyntheticConfig {
            scenes: self.data.scenes,
            views_per_scene: self.data.views,
            prior: self.prior()?,
            resolution: self.model.final_resolution,
            samples_per_ray: self.data.samples_per_ray,
            near,
            far,
            background: self.background(),
            seed: self.data.seed,
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        let e = &self.eval;
        EvalOptions {
            metrics: MetricSelection {
                fid: e.fid,
                precision_recall: e.precision_recall,
                depth_fd: e.depth_fd,
                embedding: e.embedding,
            },
            samples: e.samples,
            k: e.k,
            diag_poses: e.diag_poses,
            diag_latents: e.diag_latents,
            seed: e.seed,
        }
    }

    /// Fully resolved configuration as TOML, with the overrides listed first.
    pub fn snapshot(&self, overrides: &[Override]) -> String {
        let mut resolved = self.clone();
        let (near, far) = self.near_far();
        resolved.model.near = Some(near);
        resolved.model.far = Some(far);
        resolved.data.background = Some(self.background());
        let mut out = String::new();
        for o in overrides {
            let _ = writeln!(out, "# --set {}={}", o.key, o.raw);
        }
        out.push_str(&toml::to_string(&resolved).expect("configuration serializes"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<Override> = overrides
            .iter()
            .map(|s| Override::parse(s).unwrap())
            .collect();
        RunConfig::from_text(
            &Source {
                name: "run.cfg",
                text,
            },
            &o,
        )
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.near_far(), (2.7 - DEPTH_MARGIN, 2.7 + DEPTH_MARGIN));
        c.train_config().unwrap();
    }

    #[test]
    fn unknown_key_is_line_anchored() {
        let e = parse(
            "[model]\nvariant = \"prnerf\"\n\n[loss]\ntemperature = 0.3\n",
            &[],
        )
        .unwrap_err()
        .to_string();
        assert!(e.starts_with("run.cfg:5:1:"), "{e}");
        assert!(e.contains("temperature"), "{e}");
    }

    #[test]
    fn range_error_names_line_and_key() {
        let e = parse("[loss]\n\ntau = -1.0\n", &[])
            .unwrap_err()
            .to_string();
        assert!(e.starts_with("run.cfg:3:1: loss.tau:"), "{e}");
        let e = parse("[model]\nvariant = \"bogus\"\n", &[])
            .unwrap_err()
            .to_string();
        assert!(e.starts_with("run.cfg:2:1: model.variant:"), "{e}");
    }

    #[test]
    fn overrides_win_and_are_recorded() {
        let c = parse(
            "[loss]\ntau = 0.25\n",
            &["loss.tau=0.5", "model.variant=prnerf"],
        )
        .unwrap();
        assert_eq!(c.loss.tau, 0.5);
        assert_eq!(c.variant_kind(), Some(VariantKind::Regression));
        let snap = c.snapshot(&[Override::parse("loss.tau=0.5").unwrap()]);
        assert!(snap.starts_with("# --set loss.tau=0.5\n"));
        let back = parse(&snap, &[]).unwrap();
        assert_eq!(back.loss.tau, 0.5);
        assert_eq!(back.train_config().unwrap(), c.train_config().unwrap());
        let e = parse("", &["loss.tau=0"]).unwrap_err().to_string();
        assert!(e.starts_with("--set loss.tau=0: loss.tau"), "{e}");
        assert!(parse("", &["loss.bogus=1"]).is_err());
        assert!(Override::parse("tau=1").is_err());
    }

    #[test]
    fn custom_prior_needs_laws() {
        assert!(parse("[data]\nprior = \"custom\"\n", &[]).is_err());
        let c = parse(
            "[data]\nprior = \"custom\"\npitch = { law = \"fixed\", value = 1.5 }\nyaw = { law = \"uniform\", lo = 1.0, hi = 2.0 }\n",
            &[],
        )
        .unwrap();
        assert_eq!(c.prior().unwrap().pitch, AngleLaw::Fixed { value: 1.5 });
    }

    #[test]
    fn locate_finds_keys_in_sections() {
        let text = "[model]\ntau = 1\n[loss]\n  tau = 2\n";
        assert_eq!(locate(text, "loss.tau"), Some((4, 3)));
        assert_eq!(locate(text, "train.tau"), None);
    }
}
