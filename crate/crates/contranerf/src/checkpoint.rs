//! Checkpoint file: the magic `CNRFCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then the parameter and
//! optimizer buffers as raw little-endian `f64`.
//!
//! Random streams are keyed by `(seed, step)`, so the seed and step in the
//! header are the complete random state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use contranerf_core::discriminator::VariantKind;
use contranerf_core::nn::Adam;
use contranerf_core::trainer::{TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"CNRFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl AdamMeta {
    fn of(a: &Adam) -> Self {
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
        }
    }

    fn with(self, m: Vec<f64>, v: Vec<f64>) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
            m,
            v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    variant: String,
    step: u64,
    rng: RngState,
    config: TrainConfig,
    opt_g: AdamMeta,
    opt_d: AdamMeta,
    /// Buffer names and lengths, in file order.
    sections: Vec<(String, usize)>,
}

const SECTIONS: [&str; 7] = ["g", "d", "ema", "opt_g.m", "opt_g.v", "opt_d.m", "opt_d.v"];

/// Writes `state` to `path` through a temporary file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let buffers: [&[f64]; 7] = [
        &state.g,
        &state.d,
        &state.ema,
        &state.opt_g.m,
        &state.opt_g.v,
        &state.opt_d.m,
        &state.opt_d.v,
    ];
    let header = Header {
        variant: state.config.model.variant.kind.preset_name().to_string(),
        step: state.step,
        rng: RngState {
            seed: state.config.seed,
            step: state.step,
        },
        config: state.config.clone(),
        opt_g: AdamMeta::of(&state.opt_g),
        opt_d: AdamMeta::of(&state.opt_d),
        sections: SECTIONS
            .iter()
            .zip(buffers)
            .map(|(n, b)| (n.to_string(), b.len()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes =
        Vec::with_capacity(json.len() + 20 + 8 * buffers.iter().map(|b| b.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for b in buffers {
        for v in b {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(&bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .at(path)?
        .read_to_end(&mut bytes)
        .at(path)?;
    let bad = |msg: &str| AppError::format(path, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!(
            "checkpoint format version {version} is not supported (expected {VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
    let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(&format!("corrupt header: {e}")))?;
    if header.sections.len() != SECTIONS.len()
        || header
            .sections
            .iter()
            .zip(SECTIONS)
            .any(|((n, _), s)| n != s)
    {
        return Err(bad("unexpected buffer layout"));
    }
    let mut data = &body[hlen..];
    let expected: usize = header.sections.iter().map(|(_, n)| n * 8).sum();
    if data.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes of parameters, found {}",
            data.len()
        )));
    }
    let mut take = |n: usize| {
        let (head, rest) = data.split_at(n * 8);
        data = rest;
        head.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<f64>>()
    };
    let lens: Vec<usize> = header.sections.iter().map(|(_, n)| *n).collect();
    let g = take(lens[0]);
    let d = take(lens[1]);
    let ema = take(lens[2]);
    let opt_g = header.opt_g.with(take(lens[3]), take(lens[4]));
    let opt_d = header.opt_d.with(take(lens[5]), take(lens[6]));
    if header.variant != header.config.model.variant.kind.preset_name() {
        return Err(bad("header variant disagrees with its configuration"));
    }
    Ok(TrainState::from_parts(
        header.config,
        g,
        d,
        ema,
        opt_g,
        opt_d,
        header.step,
    )?)
}

/// Loads a checkpoint and refuses it unless it was trained with `kind`.
pub fn load_checkpoint_for(path: &Path, kind: VariantKind) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let found = state.config.model.variant.kind;
    if found != kind {
        return Err(AppError::format(
            path,
            format!(
                "checkpoint holds a {} model, the run expects {}",
                found.preset_name(),
                kind.preset_name()
            ),
        ));
    }
    Ok(state)
}
