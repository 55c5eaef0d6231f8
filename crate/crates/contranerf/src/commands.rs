//! The subcommands as library functions. Each returns a [`Result`] whose
//! error carries the process exit code.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use contranerf_core::dataset::{generate_synthetic_dataset, DatasetRecord, TrainImage};
use contranerf_core::generator::LatentCode;
use contranerf_core::metrics::{evaluate, pose_sweep, EvalOptions, EvalReport, PoseSweep};
use contranerf_core::rng::{stream_rng, Rng, Stream};
use contranerf_core::trainer::{StepMetrics, TrainConfig, TrainState};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use crate::config::{DataSource, Override, RunConfig};
use crate::data::{
    load_image_folder, prepare_out_dir, read_dataset, save_depth, save_rgb, upsample_nearest,
    write_dataset, Manifest, MANIFEST,
};
use crate::error::{AppError, IoContext, Result};

pub const CHECKPOINT: &str = "ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const SNAPSHOT: &str = "config.snapshot";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Dataset records named by the `data` section.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<DatasetRecord>> {
    let res = cfg.model.final_resolution;
    let records = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_dataset(&cfg.synthetic_config()?)?,
        DataSource::Dir => read_dataset(Path::new(cfg.data.path.as_deref().unwrap_or_default()))?.0,
        DataSource::Folder => load_image_folder(
            Path::new(cfg.data.path.as_deref().unwrap_or_default()),
            res,
            None,
        )?,
    };
    if let Some(r) = records
        .iter()
        .find(|r| r.image.h != res || r.image.w != res)
    {
        return Err(AppError::Config(format!(
            "dataset images are {}×{}, model.final_resolution is {res}",
            r.image.h, r.image.w
        )));
    }
    Ok(records)
}

/// Records for evaluation: a `make-data` directory (with ground truth) or a
/// plain image folder.
pub fn load_eval_records(path: &Path, resolution: usize) -> Result<Vec<DatasetRecord>> {
    if path.join(MANIFEST).is_file() {
        Ok(read_dataset(path)?.0)
    } else {
        load_image_folder(path, resolution, None)
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub records: Vec<DatasetRecord>,
}

/// Trains until `train.steps` and writes `ckpt`, `metrics.jsonl` and
/// `config.snapshot` to `out`. With `resume`, training continues from a
/// checkpoint of the same variant. A non-finite loss writes `nan_dump.json`.
pub fn train(
    cfg: &RunConfig,
    overrides: &[Override],
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    let tc = cfg.train_config()?;
    let kind = tc.model.variant.kind;
    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint_for(p, kind)?;
            if s.config
                != (TrainConfig {
                    steps: s.config.steps,
                    ..tc.clone()
                })
            {
                return Err(AppError::Config(format!(
                    "{}: checkpoint configuration differs from the run",
                    p.display()
                )));
            }
            TrainState { config: tc, ..s }
        }
        None => TrainState::new(tc)?,
    };
    let records = load_records(cfg)?;
    let images: Vec<TrainImage> = records.iter().map(DatasetRecord::to_train_image).collect();
    fs::create_dir_all(out).at(out)?;
    let snap = out.join(SNAPSHOT);
    fs::write(&snap, cfg.snapshot(overrides)).at(&snap)?;
    let mp = out.join(METRICS);
    let file = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&mp)
    } else {
        fs::File::create(&mp)
    }
    .at(&mp)?;
    let mut writer = BufWriter::new(file);
    let remaining = cfg.train.steps.saturating_sub(state.step);
    let mut io_err = None;
    let result = state.train(&images, remaining, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(writer, "{line}") {
            io_err.get_or_insert(e);
        }
        on_step(m);
    });
    writer.flush().at(&mp)?;
    if let Some(e) = io_err {
        return Err(AppError::Io {
            path: mp,
            source: e,
        });
    }
    let metrics = match result {
        Ok(m) => m,
        Err(contranerf_core::Error::NonFinite(dump)) => {
            let dp = out.join(NAN_DUMP);
            fs::write(
                &dp,
                serde_json::to_string_pretty(&*dump).expect("dump serializes"),
            )
            .at(&dp)?;
            log::error!(
                "non-finite {} at step {}; batch written to {}",
                dump.quantity,
                dump.step,
                dp.display()
            );
            return Err(contranerf_core::Error::NonFinite(dump).into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&state, &out.join(CHECKPOINT))?;
    Ok(TrainOutcome {
        state,
        metrics,
        records,
    })
}

/// Evaluates the EMA generator of a checkpoint on `records`.
pub fn eval_state(
    state: &TrainState,
    records: &[DatasetRecord],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    Ok(evaluate(&state.model, &state.ema, &state.d, records, opts)?)
}

/// Runs the metric suite and writes the report as JSON to `report`.
pub fn eval(
    checkpoint: &Path,
    dataset: &Path,
    opts: &EvalOptions,
    report: &Path,
) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint)?;
    let records = load_eval_records(dataset, state.config.model.final_resolution)?;
    let r = eval_state(&state, &records, opts)?;
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(
        report,
        serde_json::to_string_pretty(&r).expect("report serializes") + "\n",
    )
    .at(report)?;
    Ok(r)
}

/// One-line summary of a report.
pub fn summary(r: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    format!(
        "fid {} precision {} recall {} depth_fd {} same_pose_sim {} diff_pose_sim {} gap {} probe_r2 {}",
        f(r.fid),
        f(r.precision),
        f(r.recall),
        f(r.depth_fd),
        f(r.same_pose_sim),
        f(r.diff_pose_sim),
        f(r.gap),
        f(r.probe_r2)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepMeta {
    pub latent: usize,
    pub offsets_deg: (f64, f64),
    /// Absolute yaw per frame, in radians.
    pub yaws: Vec<f64>,
    pub rgb: String,
    pub depth: String,
}

/// Renders yaw sweeps around the prior mean pose for `count` latents with
/// the EMA generator. Frame offsets are `linspace(lo_deg, hi_deg, steps)`.
pub fn sweep(
    checkpoint: &Path,
    lo_deg: f64,
    hi_deg: f64,
    steps: usize,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<SweepMeta>> {
    let state = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out).at(out)?;
    let model = &state.model;
    let base = model.config.prior.mean_pose();
    let (near, far) = (model.config.render.near, model.config.render.far);
    let mut metas = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream_rng(seed, i as u64, Stream::Eval);
        let z = LatentCode::sample(model.config.generator.latent_dim, &mut rng);
        let PoseSweep {
            yaws,
            rgb_strip,
            depth_strip,
        } = pose_sweep(
            &base,
            lo_deg.to_radians(),
            hi_deg.to_radians(),
            steps,
            |pose| {
                let s = model.generate::<Rng>(&state.ema, &z, pose, None)?;
                Ok((s.pair.high, s.render.depth))
            },
        )?;
        let rgb = format!("sweep_{i}.png");
        let depth = format!("sweep_{i}_depth.png");
        save_rgb(&rgb_strip, &out.join(&rgb))?;
        let scale = model.superres.scale();
        save_depth(
            &upsample_nearest(&depth_strip, scale),
            near,
            far,
            &out.join(&depth),
        )?;
        metas.push(SweepMeta {
            latent: i,
            offsets_deg: (lo_deg, hi_deg),
            yaws,
            rgb,
            depth,
        });
    }
    let mp = out.join("sweep.json");
    fs::write(
        &mp,
        serde_json::to_string_pretty(&metas).expect("sweep metadata serializes") + "\n",
    )
    .at(&mp)?;
    Ok(metas)
}

/// Materializes the synthetic dataset of `cfg` in `out`.
pub fn make_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    let sc = cfg.synthetic_config()?;
    prepare_out_dir(out, force)?;
    let records = generate_synthetic_dataset(&sc)?;
    write_dataset(out, &records, &sc)
}

/// Parses `LO:HI` in degrees.
pub fn parse_yaw_range(s: &str) -> Result<(f64, f64)> {
    let bad = || AppError::Config(format!("--yaw {s}: expected LO:HI in degrees"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Default report location next to the checkpoint.
pub fn default_report_path(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join("eval.json")
}
