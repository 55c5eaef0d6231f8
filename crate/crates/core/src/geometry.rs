//! Cameras on a sphere around the origin: pose priors, look-at transforms and
//! pinhole ray generation.
//!
//! World up is `+z`. Pitch is the polar angle measured from `+z` (so `π/2`
//! sits on the equator) and yaw is the azimuth around `+z`.

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err};
use crate::rng::normal;
use crate::Result;

/// Pitch samples are clamped to `(PITCH_EPS, π − PITCH_EPS)`.
pub const PITCH_EPS: f64 = 1e-3;
pub const DEFAULT_RADIUS: f64 = 2.7;
pub const DEFAULT_FOV: f64 = 0.23;

pub type Vec3 = [f64; 3];
/// Row-major 4×4 transform.
pub type Mat4 = [[f64; 4]; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub pitch: f64,
    pub yaw: f64,
    pub radius: f64,
    pub fov: f64,
}

impl CameraPose {
    /// Validates the pose and canonicalizes yaw into `[0, 2π)`.
    pub fn new(pitch: f64, yaw: f64, radius: f64, fov: f64) -> Result<Self> {
        if !(pitch > 0.0 && pitch < PI) {
            return Err(contract_err!("pitch {pitch} outside (0, π)"));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(contract_err!("radius {radius} must be positive"));
        }
        if !(fov > 0.0 && fov < PI) {
            return Err(contract_err!("fov {fov} outside (0, π)"));
        }
        if !yaw.is_finite() {
            return Err(contract_err!("yaw must be finite"));
        }
        Ok(Self {
            pitch,
            yaw: canonical_yaw(yaw),
            radius,
            fov,
        })
    }

    /// Camera centre in world space.
    pub fn position(&self) -> Vec3 {
        let (sp, cp) = (libm::sin(self.pitch), libm::cos(self.pitch));
        let (sy, cy) = (libm::sin(self.yaw), libm::cos(self.yaw));
        [
            self.radius * sp * cy,
            self.radius * sp * sy,
            self.radius * cp,
        ]
    }
}

pub fn canonical_yaw(yaw: f64) -> f64 {
    let y = yaw % TAU;
    let y = if y < 0.0 { y + TAU } else { y };
    // `-tiny % TAU + TAU` can round up to exactly TAU.
    if y >= TAU {
        0.0
    } else {
        y
    }
}

/// Marginal law for one camera angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum AngleLaw {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
    Fixed { value: f64 },
}

impl AngleLaw {
    fn validate(&self, what: &str) -> Result<()> {
        match *self {
            AngleLaw::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                    return Err(config_err!(
                        "{what}: gaussian needs finite mean and std >= 0"
                    ));
                }
            }
            AngleLaw::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(config_err!("{what}: uniform needs finite lo <= hi"));
                }
            }
            AngleLaw::Fixed { value } => {
                if !value.is_finite() {
                    return Err(config_err!("{what}: fixed value must be finite"));
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            AngleLaw::Gaussian { mean, std } => mean + std * normal(rng),
            AngleLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            AngleLaw::Fixed { value } => value,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            AngleLaw::Gaussian { mean, .. } => mean,
            AngleLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            AngleLaw::Fixed { value } => value,
        }
    }
}

/// Named camera priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosePreset {
    Bedroom,
    Church,
    Afhq,
    Cub,
}

impl PosePreset {
    pub const ALL: [PosePreset; 4] = [
        PosePreset::Bedroom,
        PosePreset::Church,
        PosePreset::Afhq,
        PosePreset::Cub,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosePreset::Bedroom => "bedroom",
            PosePreset::Church => "church",
            PosePreset::Afhq => "afhq",
            PosePreset::Cub => "cub",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Pitch and yaw laws of the preset.
    pub fn laws(self) -> (AngleLaw, AngleLaw) {
        use AngleLaw::*;
        match self {
            PosePreset::Bedroom => (
                Gaussian {
                    mean: FRAC_PI_2,
                    std: 0.10,
                },
                Gaussian {
                    mean: FRAC_PI_2,
                    std: 0.70,
                },
            ),
            PosePreset::Church => (
                Fixed { value: FRAC_PI_2 },
                Uniform {
                    lo: FRAC_PI_2 - 5.0 * PI / 18.0,
                    hi: FRAC_PI_2 + 5.0 * PI / 18.0,
                },
            ),
            PosePreset::Afhq => (
                Gaussian {
                    mean: FRAC_PI_2,
                    std: 0.13,
                },
                Gaussian {
                    mean: FRAC_PI_2,
                    std: 0.19,
                },
            ),
            PosePreset::Cub => (
                Gaussian {
                    mean: FRAC_PI_2,
                    std: 0.13,
                },
                Uniform {
                    lo: FRAC_PI_2 - 3.0 * PI / 4.0,
                    hi: FRAC_PI_2 + 3.0 * PI / 4.0,
                },
            ),
        }
    }
}

/// Camera prior: independent pitch/yaw laws with fixed radius and field of view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub pitch: AngleLaw,
    pub yaw: AngleLaw,
    pub radius: f64,
    pub fov: f64,
}

impl PoseDistribution {
    pub fn preset(preset: PosePreset) -> Self {
        let (pitch, yaw) = preset.laws();
        Self {
            pitch,
            yaw,
            radius: DEFAULT_RADIUS,
            fov: DEFAULT_FOV,
        }
    }

    pub fn fixed(pitch: f64, yaw: f64) -> Self {
        Self {
            pitch: AngleLaw::Fixed { value: pitch },
            yaw: AngleLaw::Fixed { value: yaw },
            radius: DEFAULT_RADIUS,
            fov: DEFAULT_FOV,
        }
    }

    pub fn with_camera(mut self, radius: f64, fov: f64) -> Self {
        self.radius = radius;
        self.fov = fov;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pitch.validate("pitch")?;
        self.yaw.validate("yaw")?;
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(config_err!("camera radius must be positive"));
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(config_err!("camera fov must lie in (0, π)"));
        }
        Ok(())
    }

    /// Pose at the mean of both marginals.
    pub fn mean_pose(&self) -> CameraPose {
        let pitch = self.pitch.mean().clamp(PITCH_EPS, PI - PITCH_EPS);
        CameraPose {
            pitch,
            yaw: canonical_yaw(self.yaw.mean()),
            radius: self.radius,
            fov: self.fov,
        }
    }
}

/// Draws one pose; pitch is clamped away from the poles.
pub fn sample_pose<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> Result<CameraPose> {
    dist.validate()?;
    let pitch = dist.pitch.sample(rng).clamp(PITCH_EPS, PI - PITCH_EPS);
    let yaw = dist.yaw.sample(rng);
    CameraPose::new(pitch, yaw, dist.radius, dist.fov)
}

/// Regression target `(pitch, yaw)`.
pub fn pose_to_vector(pose: &CameraPose) -> [f64; 2] {
    [pose.pitch, pose.yaw]
}

pub fn vector_to_pose(v: [f64; 2], radius: f64, fov: f64) -> Result<CameraPose> {
    CameraPose::new(v[0], v[1], radius, fov)
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = libm::sqrt(dot(a, a));
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Camera-to-world transform. Columns of the rotation block are the camera's
/// right, up and backward axes; the camera looks down its local `-z`.
pub fn pose_to_matrix(pose: &CameraPose) -> Result<Mat4> {
    if !(pose.pitch > 0.0 && pose.pitch < PI) {
        return Err(contract_err!("pitch {} is at or beyond a pole", pose.pitch));
    }
    let p = pose.position();
    let forward = normalize([-p[0], -p[1], -p[2]]);
    let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
    let up = cross(right, forward);
    let back = [-forward[0], -forward[1], -forward[2]];
    let mut m = [[0.0; 4]; 4];
    for r in 0..3 {
        m[r][0] = right[r];
        m[r][1] = up[r];
        m[r][2] = back[r];
        m[r][3] = p[r];
    }
    m[3][3] = 1.0;
    Ok(m)
}

pub(crate) fn rotate(m: &Mat4, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Pinhole rays through pixel centres, row-major with row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
}

/// Unit direction in camera space for pixel `(row, col)` of a square image.
pub fn camera_direction(row: usize, col: usize, resolution: usize, fov: f64) -> Vec3 {
    let t = libm::tan(0.5 * fov);
    let n = resolution as f64;
    let x = (2.0 * (col as f64 + 0.5) / n - 1.0) * t;
    let y = (1.0 - 2.0 * (row as f64 + 0.5) / n) * t;
    normalize([x, y, -1.0])
}

pub fn generate_rays(
    pose: &CameraPose,
    resolution: usize,
    near: f64,
    far: f64,
) -> Result<RayBatch> {
    if resolution == 0 {
        return Err(contract_err!("resolution must be at least 1"));
    }
    if !(near > 0.0 && near < far) {
        return Err(contract_err!("need 0 < near < far, got {near}, {far}"));
    }
    let m = pose_to_matrix(pose)?;
    let origin = pose.position();
    let mut directions = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let d = rotate(&m, camera_direction(row, col, resolution, pose.fov));
            directions.push(normalize(d));
        }
    }
    Ok(RayBatch {
        width: resolution,
        height: resolution,
        origins: alloc::vec![origin; resolution * resolution],
        directions,
        near,
        far,
    })
}
