//! Procedural multi-view data with known poses and depths, and the record
//! types that keep ground truth away from training.
//!
//! A [`DatasetRecord`] may carry a ground-truth pose and depth map for
//! evaluation. Training consumes [`TrainImage`], which holds pixels only:
//!
//! ```compile_fail
//! use contranerf_core::dataset::TrainImage;
//! let t = TrainImage::new(contranerf_core::image::Image::zeros(2, 2, 3));
//! let _ = t.gt_pose;
//! ```

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::geometry::{sample_pose, CameraPose, PoseDistribution, Vec3};
use crate::image::Image;
use crate::render::{render, RadianceField, RenderConfig};
use crate::rng::{stream_rng, Rng, Stream};
use crate::Result;

/// Peak density inside an ellipsoid.
pub const ELLIPSOID_DENSITY: f64 = 50.0;
/// Width of the Gaussian falloff outside the surface, in normalized radius.
pub const ELLIPSOID_FALLOFF: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub radii: Vec3,
    pub rgb: [f64; 3],
}

impl Ellipsoid {
    /// `σ₀` inside, `σ₀·exp(−(q−1)²/(2w²))` outside, with `q` the normalized radius.
    pub fn density(&self, p: Vec3) -> f64 {
        let q2: f64 = (0..3)
            .map(|k| {
                let u = (p[k] - self.center[k]) / self.radii[k];
                u * u
            })
            .sum();
        let excess = (libm::sqrt(q2) - 1.0).max(0.0);
        ELLIPSOID_DENSITY
            * libm::exp(-excess * excess / (2.0 * ELLIPSOID_FALLOFF * ELLIPSOID_FALLOFF))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Ellipsoid>,
    pub background: [f64; 3],
}

impl SyntheticScene {
    /// One to five ellipsoids with centres in `[−0.5, 0.5]³` and radii in `[0.2, 0.45]`.
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, background: [f64; 3]) -> Self {
        let n = rng.random_range(1..=5);
        let primitives = (0..n)
            .map(|_| Ellipsoid {
                center: core::array::from_fn(|_| rng.random_range(-0.5..=0.5)),
                radii: core::array::from_fn(|_| rng.random_range(0.2..=0.45)),
                rgb: core::array::from_fn(|_| rng.random_range(0.1..=0.95)),
            })
            .collect();
        Self {
            primitives,
            background,
        }
    }
}

/// Density is the sum over primitives; colour is their density-weighted mix.
impl RadianceField for SyntheticScene {
    fn feature_dim(&self) -> usize {
        3
    }

    fn query(&self, point: Vec3, feature: &mut [f64]) -> f64 {
        feature.fill(0.0);
        let mut total = 0.0;
        for e in &self.primitives {
            let d = e.density(point);
            total += d;
            for (f, &c) in feature.iter_mut().zip(&e.rgb) {
                *f += d * c;
            }
        }
        if total > 0.0 {
            for f in feature.iter_mut() {
                *f /= total;
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub scenes: usize,
    pub views_per_scene: usize,
    pub prior: PoseDistribution,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.views_per_scene == 0 {
            return Err(config_err!(
                "synthetic data needs at least one scene and one view"
            ));
        }
        self.prior.validate()?;
        self.render_config().validate()
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            feature_resolution: self.resolution,
            samples_per_ray: self.samples_per_ray,
            near: self.near,
            far: self.far,
            stratified: false,
            background: self.background,
        }
    }
}

/// One dataset image in `[−1, 1]`, with ground truth when it is known.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image: Image,
    pub gt_pose: Option<CameraPose>,
    /// Depth in scene units at the image resolution.
    pub gt_depth: Option<Image>,
}

impl DatasetRecord {
    pub fn has_ground_truth(&self) -> bool {
        self.gt_pose.is_some() && self.gt_depth.is_some()
    }

    /// The pixels only.
    pub fn to_train_image(&self) -> TrainImage {
        TrainImage::new(self.image.clone())
    }
}

/// The only image type the training loop accepts. It has no room for poses
/// or depths.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    image: Image,
}

impl TrainImage {
    pub fn new(image: Image) -> Self {
        Self { image }
    }

    pub fn image(&self) -> &Image {
        &self.image
    }
}

/// Renders one scene from `pose` with the midpoint quadrature.
pub fn render_scene(
    scene: &SyntheticScene,
    pose: &CameraPose,
    cfg: &SyntheticConfig,
) -> Result<DatasetRecord> {
    let out = render::<_, Rng>(scene, pose, &cfg.render_config(), None)?;
    Ok(DatasetRecord {
        image: out.rgb_low.map(|v| 2.0 * v - 1.0),
        gt_pose: Some(*pose),
        gt_depth: Some(out.depth),
    })
}

/// Scene `i` and its views draw from their own stream, so a prefix of a
/// larger dataset equals the smaller dataset with the same seed.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.scenes * cfg.views_per_scene);
    for s in 0..cfg.scenes {
        let mut rng = stream_rng(cfg.seed, s as u64, Stream::Data);
        let scene = SyntheticScene::random(&mut rng, cfg.background);
        for _ in 0..cfg.views_per_scene {
            let pose = sample_pose(&cfg.prior, &mut rng)?;
            records.push(render_scene(&scene, &pose, cfg)?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_rays, PosePreset};
    use crate::render::composite;
    use core::f64::consts::FRAC_PI_2;

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            scenes: 3,
            views_per_scene: 2,
            prior: PoseDistribution::preset(PosePreset::Bedroom).with_camera(2.7, 0.7),
            resolution: 8,
            samples_per_ray: 192,
            near: 1.5,
            far: 3.9,
            background: [0.0; 3],
            seed: 9,
        }
    }

    #[test]
    fn empty_scene_shows_background_at_far() {
        let scene = SyntheticScene {
            primitives: Vec::new(),
            background: [0.2, 0.4, 0.6],
        };
        let c = SyntheticConfig {
            background: [0.2, 0.4, 0.6],
            ..cfg()
        };
        let pose = CameraPose::new(1.3, 2.0, 2.7, 0.7).unwrap();
        let r = render_scene(&scene, &pose, &c).unwrap();
        for px in r.image.data.chunks(3) {
            assert!(
                (px[0] + 0.6).abs() < 1e-12
                    && (px[1] + 0.2).abs() < 1e-12
                    && (px[2] - 0.2).abs() < 1e-12
            );
        }
        assert!(r.gt_depth.unwrap().data.iter().all(|&d| d == c.far));
    }

    #[test]
    fn centred_sphere_depth() {
        let radius = 0.5;
        let scene = SyntheticScene {
            primitives: vec![Ellipsoid {
                center: [0.0; 3],
                radii: [radius; 3],
                rgb: [1.0; 3],
            }],
            background: [0.0; 3],
        };
        let c = SyntheticConfig {
            resolution: 9,
            ..cfg()
        };
        let pose = CameraPose::new(FRAC_PI_2, FRAC_PI_2, 2.7, 0.7).unwrap();
        let depth = render_scene(&scene, &pose, &c).unwrap().gt_depth.unwrap();
        let step = (c.far - c.near) / c.samples_per_ray as f64;
        // Entry depth plus the mean free path 1/σ₀, minus the soft shell.
        let got = depth.at(4, 4, 0);
        assert!(
            (got - (2.7 - radius)).abs() < 2.0 * step + 1.0 / ELLIPSOID_DENSITY,
            "{got}"
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(&cfg()).unwrap();
        let b = generate_synthetic_dataset(&cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let other = generate_synthetic_dataset(&SyntheticConfig { seed: 10, ..cfg() }).unwrap();
        assert_ne!(a, other);
        let prefix = generate_synthetic_dataset(&SyntheticConfig { scenes: 2, ..cfg() }).unwrap();
        assert_eq!(&a[..4], &prefix[..]);
        assert!(
            a.iter()
                .all(|r| r.has_ground_truth()
                    && r.image.data.iter().all(|v| (-1.0..=1.0).contains(v)))
        );
    }

    #[test]
    fn matches_composite_on_analytic_samples() {
        let c = cfg();
        let mut rng = stream_rng(c.seed, 0, Stream::Data);
        let scene = SyntheticScene::random(&mut rng, c.background);
        let pose = CameraPose::new(1.45, 1.8, 2.7, 0.7).unwrap();
        let rec = render_scene(&scene, &pose, &c).unwrap();
        let rays = generate_rays(&pose, c.resolution, c.near, c.far).unwrap();
        let rc = c.render_config();
        let t: Vec<f64> = rc.sample_depths::<Rng>(None);
        for px in [0, 27, 36, 63] {
            let (o, d) = (rays.origins[px], rays.directions[px]);
            let mut dens = Vec::new();
            let mut vals = Vec::new();
            for &ti in &t {
                let mut f = [0.0; 3];
                dens.push(scene.query(
                    [o[0] + ti * d[0], o[1] + ti * d[1], o[2] + ti * d[2]],
                    &mut f,
                ));
                vals.extend_from_slice(&f);
            }
            let comp = composite(&dens, &vals, &t, rc.step(), &c.background).unwrap();
            for k in 0..3 {
                assert!((rec.image.data[px * 3 + k] - (2.0 * comp.value[k] - 1.0)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(generate_synthetic_dataset(&SyntheticConfig { scenes: 0, ..cfg() }).is_err());
    }
}
