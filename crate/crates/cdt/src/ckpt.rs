//! Checkpoint directories: a TOML manifest next to one tensor container per
//! parameter and per optimizer moment. Layout:
//!
//! ```text
//! <dir>/manifest.toml          model config, step counters, loss average
//! <dir>/params/NNNN.<name>.cdt parameters in construction order
//! <dir>/opt/NNNN.m.cdt         first Adam moments, same order
//! <dir>/opt/NNNN.v.cdt         second Adam moments, same order
//! ```
//!
//! The manifest is written last, so a readable manifest implies the tensor
//! files are complete. Any missing or reshaped parameter fails the load.

use std::fs;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VideoCodec};
use crate::ops::ParamStore;
use crate::schedule::cosine_schedule;
use crate::train::{Adam, TrainConfig, TrainState};
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub adam_steps: usize,
    pub ema_loss: f64,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

fn param_file(i: usize, name: &str) -> String {
    format!("{i:04}.{name}.cdt")
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    state: &TrainState,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let dir = dir.as_ref();
    let params = dir.join("params");
    let opt = dir.join("opt");
    fs::create_dir_all(&params)?;
    fs::create_dir_all(&opt)?;
    for (i, (name, var)) in state.codec.store().iter().enumerate() {
        write_tensor(params.join(param_file(i, name)), var.as_tensor())?;
    }
    let (m, v) = state.opt.moments();
    for (i, t) in m.iter().enumerate() {
        write_tensor(opt.join(format!("{i:04}.m.cdt")), t)?;
    }
    for (i, t) in v.iter().enumerate() {
        write_tensor(opt.join(format!("{i:04}.v.cdt")), t)?;
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step: state.step,
        adam_steps: state.opt.steps(),
        ema_loss: state.ema_loss,
        model: state.codec.config.clone(),
        train: train.cloned(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join("manifest.toml");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::data(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format {} but this build reads {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Parameter files in index order, with their names restored.
fn read_params(dir: &Path, device: &Device) -> Result<Vec<(String, candle_core::Tensor)>> {
    let mut entries: Vec<(usize, String, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        let fname = match path.file_name().and_then(|n| n.to_str()) {
            Some(f) => f.to_string(),
            None => continue,
        };
        let Some(stem) = fname.strip_suffix(".cdt") else { continue };
        let Some((idx, name)) = stem.split_once('.') else {
            return Err(Error::data(format!("unexpected checkpoint file {fname}")));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::data(format!("unexpected checkpoint file {fname}")))?;
        entries.push((idx, name.to_string(), path));
    }
    entries.sort_by_key(|(i, _, _)| *i);
    for (want, (got, _, _)) in entries.iter().enumerate() {
        if want != *got {
            return Err(Error::data(format!("parameter index {want} is missing")));
        }
    }
    entries
        .into_iter()
        .map(|(_, name, path)| Ok((name, read_tensor(path, device)?)))
        .collect()
}

/// Load just the model, for decoding and evaluation.
pub fn load_codec(dir: impl AsRef<Path>, device: &Device) -> Result<(VideoCodec, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let named = read_params(&dir.join("params"), device)?;
    let dtype = named
        .first()
        .map(|(_, t)| t.dtype())
        .ok_or_else(|| Error::data("checkpoint holds no parameters"))?;
    let store = ParamStore::from_tensors(named, dtype, device.clone())?;
    let codec = VideoCodec::from_store(manifest.model.clone(), store)?;
    Ok((codec, manifest))
}

/// Load the full training state: model, optimizer moments, counters.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    device: &Device,
) -> Result<(TrainState, Option<TrainConfig>)> {
    let dir = dir.as_ref();
    let (codec, manifest) = load_codec(dir, device)?;
    let n = codec.store().len();
    let opt_dir = dir.join("opt");
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        m.push(read_tensor(opt_dir.join(format!("{i:04}.m.cdt")), device)?);
        v.push(read_tensor(opt_dir.join(format!("{i:04}.v.cdt")), device)?);
    }
    for (i, (mt, (_, var))) in m.iter().zip(codec.store().iter()).enumerate() {
        if mt.dims() != var.as_tensor().dims() || v[i].dims() != var.as_tensor().dims() {
            return Err(Error::data(format!("optimizer moment {i} has the wrong shape")));
        }
    }
    let opt = Adam::from_moments(m, v, manifest.adam_steps);
    let sched = cosine_schedule(manifest.model.t_count)?;
    let state = TrainState { codec, sched, opt, step: manifest.step, ema_loss: manifest.ema_loss };
    Ok((state, manifest.train))
}
