//! Image and dataset files.
//!
//! A synthetic dataset directory holds `images/NNNNN.png` (8-bit RGB),
//! `depth/NNNNN.png` (16-bit grayscale, `[near, far]` mapped to `[0, 65535]`),
//! `poses.csv` (`index,pitch,yaw,radius,fov`) and `manifest.json` with the
//! generation settings and a SHA-256 digest of all other files.

use std::fs;
use std::path::{Path, PathBuf};

use contranerf_core::dataset::{DatasetRecord, SyntheticConfig};
use contranerf_core::geometry::CameraPose;
use contranerf_core::image::Image;
use contranerf_core::rng::{stream_rng, Stream};
use image::{imageops, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, IoContext, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_TAG: &str = "contranerf-synthetic-v1";

/// `[−1, 1]` RGB to 8-bit.
pub fn to_rgb8(img: &Image) -> RgbImage {
    assert_eq!(img.c, 3, "RGB image expected");
    ImageBuffer::from_fn(img.w as u32, img.h as u32, |x, y| {
        let px = img.pixel(y as usize, x as usize);
        Rgb(std::array::from_fn(|k| {
            (((px[k] + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// 8-bit RGB to `[−1, 1]`.
pub fn from_rgb8(img: &RgbImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .flat_map(|p| p.0.map(|v| v as f64 / 127.5 - 1.0))
        .collect();
    Image::from_vec(h, w, 3, data)
}

/// Depth in `[near, far]` to 16-bit grayscale.
pub fn depth_to_gray16(depth: &Image, near: f64, far: f64) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_fn(depth.w as u32, depth.h as u32, |x, y| {
        let t = ((depth.at(y as usize, x as usize, 0) - near) / (far - near)).clamp(0.0, 1.0);
        Luma([(t * 65535.0).round() as u16])
    })
}

pub fn depth_from_gray16(img: &ImageBuffer<Luma<u16>, Vec<u16>>, near: f64, far: f64) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| near + (far - near) * p.0[0] as f64 / 65535.0)
        .collect();
    Image::from_vec(h, w, 1, data)
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AppError::format(path, format!("cannot write PNG: {e}")))
}

pub fn save_rgb(img: &Image, path: &Path) -> Result<()> {
    save_png(&to_rgb8(img), path)
}

pub fn save_depth(depth: &Image, near: f64, far: f64, path: &Path) -> Result<()> {
    save_png(&depth_to_gray16(depth, near, far), path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub records: usize,
    pub generator: SyntheticConfig,
    /// SHA-256 over the images, depth maps and `poses.csv`, in file order.
    pub sha256: String,
}

fn record_name(i: usize) -> String {
    format!("{i:05}.png")
}

/// Creates `dir` for writing. A non-empty directory is refused unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).at(dir)?.next().is_some();
        if non_empty && !force {
            return Err(AppError::Config(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).at(dir)
}

/// Writes a synthetic dataset directory and returns its manifest.
pub fn write_dataset(
    dir: &Path,
    records: &[DatasetRecord],
    cfg: &SyntheticConfig,
) -> Result<Manifest> {
    let images = dir.join("images");
    let depth = dir.join("depth");
    fs::create_dir_all(&images).at(&images)?;
    fs::create_dir_all(&depth).at(&depth)?;
    let mut hasher = Sha256::new();
    let mut csv = String::from("index,pitch,yaw,radius,fov\n");
    for (i, r) in records.iter().enumerate() {
        let (Some(pose), Some(d)) = (r.gt_pose, r.gt_depth.as_ref()) else {
            return Err(AppError::Config(
                "synthetic records must carry ground truth".into(),
            ));
        };
        let ip = images.join(record_name(i));
        let dp = depth.join(record_name(i));
        save_rgb(&r.image, &ip)?;
        save_depth(d, cfg.near, cfg.far, &dp)?;
        hasher.update(fs::read(&ip).at(&ip)?);
        hasher.update(fs::read(&dp).at(&dp)?);
        csv.push_str(&format!(
            "{i},{:?},{:?},{:?},{:?}\n",
            pose.pitch, pose.yaw, pose.radius, pose.fov
        ));
    }
    let cp = dir.join("poses.csv");
    fs::write(&cp, &csv).at(&cp)?;
    hasher.update(csv.as_bytes());
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        records: records.len(),
        generator: cfg.clone(),
        sha256: hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
    };
    let mp = dir.join(MANIFEST);
    fs::write(
        &mp,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .at(&mp)?;
    Ok(manifest)
}

fn parse_poses(path: &Path, n: usize) -> Result<Vec<CameraPose>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("index,pitch,yaw,radius,fov") {
        return Err(AppError::format(
            path,
            "missing header index,pitch,yaw,radius,fov",
        ));
    }
    let mut poses = Vec::with_capacity(n);
    for (row, line) in lines.enumerate() {
        let bad = |m: &str| AppError::format(path, format!("line {}: {m}", row + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 || f[0].parse::<usize>().ok() != Some(row) {
            return Err(bad(
                "expected index,pitch,yaw,radius,fov with consecutive indices",
            ));
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        poses.push(CameraPose::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(&e.to_string()))?);
    }
    if poses.len() != n {
        return Err(AppError::format(
            path,
            format!("{} poses for {n} records", poses.len()),
        ));
    }
    Ok(poses)
}

/// Reads a synthetic dataset directory with its ground truth.
pub fn read_dataset(dir: &Path) -> Result<(Vec<DatasetRecord>, Manifest)> {
    let mp = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mp).at(&mp)?)
        .map_err(|e| AppError::format(&mp, format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT_TAG {
        return Err(AppError::format(
            &mp,
            format!("unsupported dataset format `{}`", manifest.format),
        ));
    }
    let poses = parse_poses(&dir.join("poses.csv"), manifest.records)?;
    let (near, far) = (manifest.generator.near, manifest.generator.far);
    let mut records = Vec::with_capacity(manifest.records);
    for (i, pose) in poses.into_iter().enumerate() {
        let ip = dir.join("images").join(record_name(i));
        let dp = dir.join("depth").join(record_name(i));
        let rgb = image::open(&ip)
            .map_err(|e| AppError::format(&ip, e.to_string()))?
            .into_rgb8();
        let d = image::open(&dp)
            .map_err(|e| AppError::format(&dp, e.to_string()))?
            .into_luma16();
        records.push(DatasetRecord {
            image: from_rgb8(&rgb),
            gt_pose: Some(pose),
            gt_depth: Some(depth_from_gray16(&d, near, far)),
        });
    }
    Ok((records, manifest))
}

fn is_image_file(p: &Path) -> bool {
    p.is_file()
        && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "jpg" | "jpeg" | "bmp" | "gif" | "tif" | "tiff" | "webp"
            )
        })
}

/// Center square crop followed by a bilinear resize.
pub fn crop_and_resize(img: &RgbImage, resolution: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    let crop = imageops::crop_imm(img, (w - s) / 2, (h - s) / 2, s, s).to_image();
    if s == resolution {
        crop
    } else {
        imageops::resize(
            &crop,
            resolution,
            resolution,
            imageops::FilterType::Triangle,
        )
    }
}

/// Loads every decodable image in `dir` (sorted by file name), center-crops
/// and resizes it. With `flip_seed`, each image is mirrored with
/// probability 0.5. Unreadable files are skipped with a warning.
pub fn load_image_folder(
    dir: &Path,
    resolution: usize,
    flip_seed: Option<u64>,
) -> Result<Vec<DatasetRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    let mut rng = flip_seed.map(|s| stream_rng(s, 0, Stream::RealAugment));
    let mut out = Vec::new();
    for p in paths.iter().filter(|p| p.is_file()) {
        let decoded = match image::open(p) {
            Ok(img) => img,
            Err(e) => {
                if is_image_file(p) {
                    log::warn!("skipping {}: {e}", p.display());
                }
                continue;
            }
        };
        let img = from_rgb8(&crop_and_resize(&decoded.into_rgb8(), resolution as u32));
        let flip = rng.as_mut().is_some_and(|r| r.random::<f64>() < 0.5);
        let image = if flip { img.flip_horizontal() } else { img };
        out.push(DatasetRecord {
            image,
            gt_pose: None,
            gt_depth: None,
        });
    }
    if out.is_empty() {
        return Err(AppError::Config(format!(
            "{}: no readable images",
            dir.display()
        )));
    }
    Ok(out)
}

/// Concatenates frames left to right and upsamples `low` maps by nearest
/// neighbour so a depth strip can sit next to an RGB strip.
pub fn upsample_nearest(img: &Image, factor: usize) -> Image {
    let mut out = Image::zeros(img.h * factor, img.w * factor, img.c);
    for y in 0..out.h {
        for x in 0..out.w {
            for k in 0..img.c {
                let i = out.idx(y, x, k);
                out.data[i] = img.at(y / factor, x / factor, k);
            }
        }
    }
    out
}
