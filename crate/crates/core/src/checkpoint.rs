//! Single-file checkpoints: a safetensors archive whose metadata carries the
//! format tag, the training config (JSON) and the step counter.
//!
//! Tensor names are namespaced: `generator.*`, `disc.<member>.*`,
//! `frozen.encoder.*`, `frozen.perceptual.*` and `adam.<group>.{m,v}.*`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::discriminators::Member;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::training::{TrainConfig, TrainState};

pub const FORMAT_TAG: &str = "gclab-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: u64,
    pub config: TrainConfig,
    pub adam_steps: BTreeMap<String, u64>,
}

fn write(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    let mut md = HashMap::new();
    md.insert("format".to_string(), meta.format.clone());
    md.insert("step".to_string(), meta.step.to_string());
    md.insert("config".to_string(), serde_json::to_string(&meta.config).expect("config serializes"));
    md.insert("adam_steps".to_string(), serde_json::to_string(&meta.adam_steps).expect("map serializes"));
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        }
    }
    // write then rename so readers never observe a partial archive
    let tmp = path.with_extension("safetensors.tmp");
    let contiguous: BTreeMap<&String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(md), &tmp)
        .map_err(|e| Error::storage(&tmp, std::io::Error::other(e.to_string())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))?;
    Ok(())
}

fn parse_meta(path: &Path, st_meta: Option<&HashMap<String, String>>) -> Result<CheckpointMeta> {
    let md = st_meta.ok_or_else(|| Error::load(path, "checkpoint has no metadata"))?;
    let get = |k: &str| md.get(k).ok_or_else(|| Error::load(path, format!("checkpoint metadata lacks `{k}`")));
    let format = get("format")?.clone();
    if format != FORMAT_TAG {
        return Err(Error::load(path, format!("unsupported checkpoint format `{format}`")));
    }
    let step = get("step")?.parse().map_err(|e| Error::load(path, e))?;
    let config = serde_json::from_str(get("config")?).map_err(|e| Error::load(path, e))?;
    let adam_steps = match md.get("adam_steps") {
        Some(s) => serde_json::from_str(s).map_err(|e| Error::load(path, e))?,
        None => BTreeMap::new(),
    };
    Ok(CheckpointMeta {
        format,
        step,
        config,
        adam_steps,
    })
}

/// Reads metadata and all tensors.
pub fn read(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::load(path, e))?;
    let meta = parse_meta(path, header.metadata().as_ref())?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| Error::load(path, e))?
        .into_iter()
        .collect();
    Ok((meta, tensors))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::load(path, e))?;
    parse_meta(path, header.metadata().as_ref())
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    state.generator.store().export("generator.", &mut tensors)?;
    for m in Member::ALL {
        state.ensemble.store(m).export(&format!("disc.{}.", m.as_str()), &mut tensors)?;
    }
    state.ensemble.encoder().store().export("frozen.encoder.", &mut tensors)?;
    state.extractor.store().export("frozen.perceptual.", &mut tensors)?;
    state.opt_g.export("adam.generator.", &mut tensors);
    let mut adam_steps = BTreeMap::new();
    adam_steps.insert("generator".to_string(), state.opt_g.step);
    for (m, opt) in &state.opt_d {
        opt.export(&format!("adam.{}.", m.as_str()), &mut tensors);
        adam_steps.insert(m.as_str().to_string(), opt.step);
    }
    let meta = CheckpointMeta {
        format: FORMAT_TAG.into(),
        step: state.step,
        config: state.config.clone(),
        adam_steps,
    };
    write(path, &tensors, &meta)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let (meta, tensors) = read(path)?;
    let mut state = TrainState::new(meta.config.clone())?;
    state.generator.store().import("generator.", &tensors)?;
    for m in Member::ALL {
        state.ensemble.store(m).import(&format!("disc.{}.", m.as_str()), &tensors)?;
    }
    state.ensemble.encoder().store().import("frozen.encoder.", &tensors)?;
    state.extractor.store().import("frozen.perceptual.", &tensors)?;
    let step_of = |k: &str| meta.adam_steps.get(k).copied().unwrap_or(0);
    state.opt_g.import("adam.generator.", step_of("generator"), &tensors);
    for (m, opt) in state.opt_d.iter_mut() {
        opt.import(&format!("adam.{}.", m.as_str()), step_of(m.as_str()), &tensors);
    }
    state.step = meta.step;
    Ok(state)
}

/// Loads only the generator (for inference).
pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointMeta)> {
    let (meta, tensors) = read(path)?;
    let generator = Generator::init(0, meta.config.generator_config())?;
    generator.store().import("generator.", &tensors)?;
    if !generator.store().all_finite()? {
        return Err(Error::Validation(format!("{}: non-finite generator parameters", path.display())));
    }
    Ok((generator, meta))
}
