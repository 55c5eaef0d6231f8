//! Evaluation: Fréchet distance, k-NN precision/recall, depth-map Fréchet
//! distance against ground truth, pose-embedding diagnostics and yaw sweeps.
//!
//! Features come from a fixed random convolutional projection identified by
//! an `extractor_id`. Distances are comparable only between feature sets with
//! the same identifier.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::error::{config_err, contract_err};
use crate::generator::LatentCode;
use crate::geometry::{sample_pose, CameraPose};
use crate::image::{downsample_box, Image};
use crate::model::Model;
use crate::nn::{lrelu_image, Conv2d, ParamBuilder};
use crate::objectives::cosine_similarity;
use crate::rng::{stream_rng, Rng, Stream};
use crate::Result;

/// Negative eigenvalues and distances above this are treated as round-off.
pub const NEG_TOL: f64 = 1e-6;

/// `n×d` features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(contract_err!(
                "feature rows must be non-empty and equally long"
            ));
        }
        Ok(Self {
            n,
            d,
            data: rows.into_iter().flatten().collect(),
            extractor_id: extractor_id.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let x = DMatrix::from_row_slice(self.n, self.d, &self.data);
        let mu = x.row_mean().transpose();
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = centred.transpose() * &centred / (self.n as f64 - 1.0);
        (mu, cov)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The trace of the product root is taken as `Tr (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}`,
/// which keeps every root symmetric. Eigenvalues in `[−1e-6, 0)` are clipped.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(config_err!(
            "feature extractors differ: {} vs {}",
            a.extractor_id,
            b.extractor_id
        ));
    }
    if a.d != b.d {
        return Err(contract_err!(
            "feature dimensions differ: {} vs {}",
            a.d,
            b.d
        ));
    }
    for (name, s) in [("first", a), ("second", b)] {
        if s.n < s.d + 1 {
            return Err(config_err!(
                "{name} feature set has {} rows, needs at least d+1 = {}",
                s.n,
                s.d + 1
            ));
        }
        if s.data.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numerical(format!(
                "{name} feature set has non-finite values"
            )));
        }
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = sym_sqrt(&cov_a);
    let mut m = &root_a * &cov_b * &root_a;
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let mut tr_root = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -NEG_TOL * scale {
            log::warn!("Fréchet distance: clipping eigenvalue {v:e}");
        }
        tr_root += libm::sqrt(v.max(0.0));
    }
    let diff = &mu_a - &mu_b;
    let fd = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    if fd < -NEG_TOL {
        log::warn!("Fréchet distance {fd:e} below the numerical floor; clamped to 0");
    }
    Ok(fd.max(0.0))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its `k`-th nearest other row.
fn knn_radii2(s: &FeatureSet, k: usize) -> Vec<f64> {
    (0..s.n)
        .map(|i| {
            let mut d: Vec<f64> = (0..s.n)
                .filter(|&j| j != i)
                .map(|j| dist2(s.row(i), s.row(j)))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &FeatureSet, radii2: &[f64], probes: &FeatureSet) -> f64 {
    let inside = (0..probes.n)
        .filter(|&j| (0..manifold.n).any(|i| dist2(probes.row(j), manifold.row(i)) <= radii2[i]))
        .count();
    inside as f64 / probes.n as f64
}

/// Improved precision and recall with `k`-NN hyperspheres: precision is the
/// fraction of fakes inside some real sphere, recall the fraction of reals
/// inside some fake sphere.
pub fn precision_recall(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.extractor_id != fake.extractor_id || real.d != fake.d {
        return Err(config_err!(
            "precision/recall needs features from the same extractor"
        ));
    }
    if k == 0 || k >= real.n || k >= fake.n {
        return Err(config_err!(
            "k = {k} must satisfy 1 <= k < n (real {}, fake {})",
            real.n,
            fake.n
        ));
    }
    let precision = coverage(real, &knn_radii2(real, k), fake);
    let recall = coverage(fake, &knn_radii2(fake, k), real);
    Ok((precision, recall))
}

/// Two strided 3×3 convolutions with fixed random weights, followed by
/// per-quadrant channel means: `4 × 8 = 32` features per map.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    pub id: String,
    channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    params: Vec<f64>,
}

impl RandomConvExtractor {
    pub const DIM: usize = 32;

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed);
        let gain = libm::sqrt(2.0);
        let conv1 = pb.conv("extractor.conv1", channels, 6, 2, gain);
        let conv2 = pb.conv("extractor.conv2", 6, 8, 2, gain);
        let id = format!("randconv-v1-c{channels}-s{seed}");
        Self {
            id,
            channels,
            conv1,
            conv2,
            params: pb.finish(),
        }
    }

    /// Extractor for `[−1, 1]` RGB images.
    pub fn for_images() -> Self {
        Self::new(3, 0x1a9e)
    }

    /// Extractor for depth maps normalized to `[0, 1]`.
    pub fn for_depth() -> Self {
        Self::new(1, 0xde97)
    }

    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        if img.c != self.channels || img.h < 4 || img.w < 4 {
            return Err(contract_err!(
                "extractor {} cannot read a {}×{}×{} map",
                self.id,
                img.h,
                img.w,
                img.c
            ));
        }
        let h1 = lrelu_image(&self.conv1.forward(&self.params, img));
        let h2 = lrelu_image(&self.conv2.forward(&self.params, &h1));
        let (hh, ww, c) = (h2.h, h2.w, h2.c);
        let mut out = vec![0.0; 4 * c];
        let mut counts = [0usize; 4];
        for y in 0..hh {
            for x in 0..ww {
                let q = 2 * usize::from(2 * y >= hh) + usize::from(2 * x >= ww);
                counts[q] += 1;
                for k in 0..c {
                    out[q * c + k] += h2.at(y, x, k);
                }
            }
        }
        for q in 0..4 {
            for k in 0..c {
                out[q * c + k] /= counts[q].max(1) as f64;
            }
        }
        Ok(out)
    }

    pub fn feature_set(&self, maps: &[Image]) -> Result<FeatureSet> {
        let rows = maps
            .iter()
            .map(|m| self.features(m))
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(rows, self.id.clone())
    }
}

/// Maps depths in `[near, far]` to `[0, 1]`.
pub fn normalize_depth(depth: &Image, near: f64, far: f64) -> Image {
    depth.map(|d| ((d - near) / (far - near)).clamp(0.0, 1.0))
}

/// Fréchet distance between two sets of normalized depth maps.
pub fn depth_quality(
    generated: &[Image],
    reference: &[Image],
    extractor: &RandomConvExtractor,
) -> Result<f64> {
    let first = generated
        .first()
        .ok_or_else(|| contract_err!("no generated depth maps"))?;
    if generated
        .iter()
        .chain(reference)
        .any(|m| m.h != first.h || m.w != first.w || m.c != 1)
    {
        return Err(contract_err!(
            "depth maps must share one resolution and have one channel"
        ));
    }
    frechet_distance(
        &extractor.feature_set(generated)?,
        &extractor.feature_set(reference)?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDiagnostics {
    pub same_pose_sim: f64,
    pub diff_pose_sim: f64,
    pub gap: f64,
    pub probe_r2: f64,
}

/// Yaw unwrapped to the branch centred on `centre`, so a prior straddling
/// `0 ≡ 2π` gives continuous regression targets.
pub fn unwrap_yaw(yaw: f64, centre: f64) -> f64 {
    let mut d = (yaw - centre) % TAU;
    if d > PI {
        d -= TAU;
    } else if d <= -PI {
        d += TAU;
    }
    centre + d
}

/// Similarity statistics over a `poses × latents` grid of embeddings and a
/// linear probe for `(pitch, yaw)`.
///
/// `embed(p, l)` returns the embedding of latent `l` rendered at `poses[p]`.
/// The probe is fit by least squares on the first half of the poses and
/// scored on the rest; `R²` pools both angles. Yaw targets are unwrapped
/// around `yaw_centre`.
pub fn embedding_diagnostics(
    poses: &[CameraPose],
    n_latents: usize,
    yaw_centre: f64,
    mut embed: impl FnMut(usize, usize) -> Result<Vec<f64>>,
) -> Result<EmbeddingDiagnostics> {
    if poses.len() < 4 || n_latents < 2 {
        return Err(config_err!(
            "diagnostics need at least 4 poses and 2 latents"
        ));
    }
    let mut grid = Vec::with_capacity(poses.len());
    for p in 0..poses.len() {
        let row = (0..n_latents)
            .map(|l| embed(p, l))
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    let (mut same, mut n_same) = (0.0, 0usize);
    let (mut diff, mut n_diff) = (0.0, 0usize);
    for p in 0..poses.len() {
        for a in 0..n_latents {
            for b in a + 1..n_latents {
                same += cosine_similarity(&grid[p][a], &grid[p][b]);
                n_same += 1;
            }
        }
        for q in p + 1..poses.len() {
            for a in 0..n_latents {
                for b in 0..n_latents {
                    diff += cosine_similarity(&grid[p][a], &grid[q][b]);
                    n_diff += 1;
                }
            }
        }
    }
    let same_pose_sim = same / n_same as f64;
    let diff_pose_sim = diff / n_diff as f64;

    let m = grid[0][0].len();
    let half = poses.len() / 2;
    if half <= m + 1 {
        log::warn!(
            "probe fits {} parameters from {half} training poses; R² will be unreliable",
            m + 1
        );
    }
    let rows = |range: core::ops::Range<usize>| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for p in range {
            let target = [poses[p].pitch, unwrap_yaw(poses[p].yaw, yaw_centre)];
            for v in &grid[p] {
                x.extend(v.iter().copied().chain(core::iter::once(1.0)));
                y.extend_from_slice(&target);
            }
        }
        let n = y.len() / 2;
        (
            DMatrix::from_row_slice(n, m + 1, &x),
            DMatrix::from_row_slice(n, 2, &y),
        )
    };
    let (x_train, y_train) = rows(0..half);
    let (x_test, y_test) = rows(half..poses.len());
    let svd = x_train.svd(true, true);
    let w = svd
        .solve(&y_train, 1e-10)
        .map_err(|e| crate::Error::Numerical(e.to_string()))?;
    let resid = &y_test - &x_test * &w;
    let sse = resid.norm_squared();
    let mut sst = 0.0;
    for c in 0..2 {
        let col = y_test.column(c);
        let mean = col.mean();
        sst += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    // With no pose variation on the held-out half there is nothing to explain.
    let probe_r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    Ok(EmbeddingDiagnostics {
        same_pose_sim,
        diff_pose_sim,
        gap: same_pose_sim - diff_pose_sim,
        probe_r2,
    })
}

/// Diagnostics for a trained model: prior poses and latents from the eval
/// stream, rendered without jitter by generator parameters `g`.
pub fn model_embedding_diagnostics(
    model: &Model,
    g: &[f64],
    d: &[f64],
    n_poses: usize,
    n_latents: usize,
    seed: u64,
) -> Result<EmbeddingDiagnostics> {
    if !model.config.variant.kind.has_embedding() {
        return Err(contract_err!(
            "{:?} discriminator has no embedding head",
            model.config.variant.kind
        ));
    }
    let prior = &model.config.prior;
    let mut rng = stream_rng(seed, 0, Stream::Eval);
    let poses = (0..n_poses)
        .map(|_| sample_pose(prior, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let latents: Vec<LatentCode> = (0..n_latents)
        .map(|_| LatentCode::sample(model.config.generator.latent_dim, &mut rng))
        .collect();
    embedding_diagnostics(&poses, n_latents, prior.yaw.mean(), |p, l| {
        let s = model.generate::<Rng>(g, &latents[l], &poses[p], None)?;
        Ok(model
            .disc
            .discriminate(d, &s.pair, None)?
            .embedding
            .expect("embedding head"))
    })
}

/// `steps` evenly spaced values from `lo` to `hi`, endpoints exact.
pub fn sweep_yaws(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    match steps {
        0 => Err(config_err!("a sweep needs at least one step")),
        1 => Ok(vec![lo]),
        _ => Ok((0..steps)
            .map(|i| {
                if i + 1 == steps {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (steps - 1) as f64
                }
            })
            .collect()),
    }
}

/// Frames of a yaw sweep laid out left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSweep {
    /// Absolute yaw of each frame before canonicalization.
    pub yaws: Vec<f64>,
    pub rgb_strip: Image,
    pub depth_strip: Image,
}

fn hconcat(frames: &[Image]) -> Image {
    let (h, w, c) = (frames[0].h, frames[0].w, frames[0].c);
    let mut out = Image::zeros(h, w * frames.len(), c);
    for (f, img) in frames.iter().enumerate() {
        for y in 0..h {
            let dst = out.idx(y, f * w, 0);
            out.data[dst..dst + w * c]
                .copy_from_slice(&img.data[img.idx(y, 0, 0)..img.idx(y, 0, 0) + w * c]);
        }
    }
    out
}

/// Renders `base` rotated to each yaw offset in `linspace(lo, hi, steps)`.
/// `render` returns the RGB image and depth map of one pose.
pub fn pose_sweep(
    base: &CameraPose,
    lo: f64,
    hi: f64,
    steps: usize,
    mut render: impl FnMut(&CameraPose) -> Result<(Image, Image)>,
) -> Result<PoseSweep> {
    let offsets = sweep_yaws(lo, hi, steps)?;
    let mut rgb = Vec::with_capacity(steps);
    let mut depth = Vec::with_capacity(steps);
    let mut yaws = Vec::with_capacity(steps);
    for off in offsets {
        let yaw = base.yaw + off;
        let pose = CameraPose::new(base.pitch, yaw, base.radius, base.fov)?;
        let (r, d) = render(&pose)?;
        rgb.push(r);
        depth.push(d);
        yaws.push(yaw);
    }
    Ok(PoseSweep {
        yaws,
        rgb_strip: hconcat(&rgb),
        depth_strip: hconcat(&depth),
    })
}

/// Which metrics to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub fid: bool,
    pub precision_recall: bool,
    pub depth_fd: bool,
    pub embedding: bool,
}

impl MetricSelection {
    pub const ALL: MetricSelection = MetricSelection {
        fid: true,
        precision_recall: true,
        depth_fd: true,
        embedding: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: MetricSelection,
    /// Generated samples (and at most this many dataset images).
    pub samples: usize,
    pub k: usize,
    pub diag_poses: usize,
    pub diag_latents: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: MetricSelection::ALL,
            samples: 400,
            k: 3,
            diag_poses: 128,
            diag_latents: 4,
            seed: 0,
        }
    }
}

/// Metric values; `None` where a metric was not requested, does not apply
/// to the variant, or was refused. Refusals are listed in `refused`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub depth_fd: Option<f64>,
    pub same_pose_sim: Option<f64>,
    pub diff_pose_sim: Option<f64>,
    pub gap: Option<f64>,
    pub probe_r2: Option<f64>,
    pub refused: Vec<String>,
    pub extractor_id: String,
    pub depth_extractor_id: String,
}

/// Refusal message for a metric that needs ground truth.
pub fn gt_refusal(metric: &str) -> String {
    format!("{metric}: refused, the dataset carries no ground-truth depth")
}

/// Evaluates generator parameters `g` (usually the EMA copy) and
/// discriminator `d` against `records`.
pub fn evaluate(
    model: &Model,
    g: &[f64],
    d: &[f64],
    records: &[DatasetRecord],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(config_err!("evaluation dataset is empty"));
    }
    let res = model.config.final_resolution;
    if records.iter().any(|r| r.image.h != res || r.image.w != res) {
        return Err(config_err!(
            "dataset images must be {res}×{res} to match the model"
        ));
    }
    let image_x = RandomConvExtractor::for_images();
    let depth_x = RandomConvExtractor::for_depth();
    let mut report = EvalReport {
        extractor_id: image_x.id.clone(),
        depth_extractor_id: depth_x.id.clone(),
        ..Default::default()
    };

    let mut rng = stream_rng(opts.seed, 1, Stream::Eval);
    let n_real = records.len().min(opts.samples);
    let idx = crate::trainer::sample_real_indices(records.len(), n_real, opts.seed, u64::MAX);
    let chosen: Vec<&DatasetRecord> = idx.iter().map(|&i| &records[i]).collect();

    let sel = opts.metrics;
    let want_depth = sel.depth_fd && {
        let has_gt = chosen.iter().all(|r| r.gt_depth.is_some());
        if !has_gt {
            report.refused.push(gt_refusal("depth_fd"));
        }
        has_gt
    };
    if sel.fid || sel.precision_recall || want_depth {
        let mut fake_rgb = Vec::with_capacity(opts.samples);
        let mut fake_depth = Vec::with_capacity(opts.samples);
        for _ in 0..opts.samples {
            let pose = sample_pose(&model.config.prior, &mut rng)?;
            let z = LatentCode::sample(model.config.generator.latent_dim, &mut rng);
            let s = model.generate::<Rng>(g, &z, &pose, None)?;
            fake_rgb.push(s.pair.high);
            fake_depth.push(s.render.depth);
        }
        if sel.fid || sel.precision_recall {
            let real =
                image_x.feature_set(&chosen.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
            let fake = image_x.feature_set(&fake_rgb)?;
            if sel.fid {
                report.fid = Some(frechet_distance(&real, &fake)?);
            }
            if sel.precision_recall {
                let (p, r) = precision_recall(&real, &fake, opts.k)?;
                report.precision = Some(p);
                report.recall = Some(r);
            }
        }
        if want_depth {
            let rc = &model.config.render;
            let low = rc.feature_resolution;
            let reference = chosen
                .iter()
                .map(|r| {
                    let gt = r.gt_depth.as_ref().expect("checked above");
                    if gt.h % low != 0 {
                        return Err(config_err!(
                            "ground-truth depth {}×{} cannot be reduced to {low}×{low}",
                            gt.h,
                            gt.w
                        ));
                    }
                    Ok(normalize_depth(
                        &downsample_box(gt, gt.h / low),
                        rc.near,
                        rc.far,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let generated: Vec<Image> = fake_depth
                .iter()
                .map(|dm| normalize_depth(dm, rc.near, rc.far))
                .collect();
            report.depth_fd = Some(depth_quality(&generated, &reference, &depth_x)?);
        }
    }
    if sel.embedding && model.config.variant.kind.has_embedding() {
        let diag = model_embedding_diagnostics(
            model,
            g,
            d,
            opts.diag_poses,
            opts.diag_latents,
            opts.seed,
        )?;
        report.same_pose_sim = Some(diag.same_pose_sim);
        report.diff_pose_sim = Some(diag.diff_pose_sim);
        report.gap = Some(diag.gap);
        report.probe_r2 = Some(diag.probe_r2);
    }
    Ok(report)
}
