use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use gclab_core::checkpoint::{load_generator, CheckpointMeta};
use gclab_core::pipeline::{build_segmenter, Segmenter};
use gclab_core::scenes::{load_all, SceneConfig, DEFAULT_CLASS_NAMES};
use gclab_core::{Error, Generator, GuidanceKind, Result, TrainConfig};

use crate::config::ServiceConfig;

/// One checkpoint held in memory. Inference on it is serialized by the mutex.
pub struct LoadedModel {
    pub tag: String,
    pub config: TrainConfig,
    generator: Mutex<Generator>,
}

impl LoadedModel {
    pub fn new(tag: impl Into<String>, generator: Generator, config: TrainConfig) -> Self {
        LoadedModel {
            tag: tag.into(),
            config,
            generator: Mutex::new(generator),
        }
    }

    pub fn from_checkpoint(tag: impl Into<String>, generator: Generator, meta: CheckpointMeta) -> Self {
        LoadedModel::new(tag, generator, meta.config)
    }

    /// `None` for a model trained with zeroed guidance.
    pub fn guidance_kind(&self) -> Option<GuidanceKind> {
        (!self.config.zero_guidance).then_some(self.config.guidance)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn class_names(&self) -> Vec<String> {
        class_names(&self.config)
    }

    /// Runs `f` with exclusive use of the generator.
    pub fn with_generator<T>(&self, f: impl FnOnce(&Generator) -> T) -> T {
        let g = self.generator.lock().unwrap_or_else(|p| p.into_inner());
        f(&g)
    }

    /// Shallow copy of the generator (shares parameter storage).
    pub fn generator(&self) -> Generator {
        self.with_generator(Generator::clone)
    }
}

pub fn class_names(cfg: &TrainConfig) -> Vec<String> {
    if cfg.class_names.len() == cfg.num_classes {
        return cfg.class_names.clone();
    }
    (0..cfg.num_classes)
        .map(|k| DEFAULT_CLASS_NAMES.get(k).map_or_else(|| format!("class_{k}"), |s| s.to_string()))
        .collect()
}

/// Models keyed by tag plus the optional segmenter.
#[derive(Default)]
pub struct Registry {
    pub models: BTreeMap<String, Arc<LoadedModel>>,
    pub segmenter: Option<Arc<dyn Segmenter>>,
    pub initial_model: Option<String>,
}

impl Registry {
    pub fn insert(&mut self, model: LoadedModel) {
        self.models.insert(model.tag.clone(), Arc::new(model));
    }

    pub fn get(&self, tag: &str) -> Option<Arc<LoadedModel>> {
        self.models.get(tag).cloned()
    }

    /// First model (by tag) accepting `kind`; `None` asks for a guidance-free one.
    pub fn find(&self, kind: Option<GuidanceKind>) -> Option<Arc<LoadedModel>> {
        self.models.values().find(|m| m.guidance_kind() == kind).cloned()
    }

    /// The guidance-free inpainter for the automatic pipeline.
    pub fn initial(&self) -> Option<Arc<LoadedModel>> {
        match &self.initial_model {
            Some(tag) => self.get(tag),
            None => self.find(None),
        }
    }

    /// Loads every checkpoint in the configured directory and builds the segmenter.
    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let mut reg = Registry {
            initial_model: cfg.initial_model.clone(),
            ..Registry::default()
        };
        if cfg.model_dir.is_dir() {
            reg.load_dir(&cfg.model_dir)?;
        } else {
            log::warn!("model directory {} does not exist; no models loaded", cfg.model_dir.display());
        }
        if let Some(tag) = &cfg.segmenter {
            let k = reg
                .find(Some(GuidanceKind::Panoptic))
                .or_else(|| reg.models.values().next().cloned())
                .map_or(SceneConfig::default().num_classes, |m| m.num_classes());
            let reference = match &cfg.reference_manifest {
                Some(p) => Some(load_all(p)?),
                None => None,
            };
            reg.segmenter = Some(build_segmenter(tag, k, &SceneConfig::default().palette, reference)?);
        }
        if let Some(tag) = &reg.initial_model {
            if !reg.models.contains_key(tag) {
                return Err(Error::Config(format!("initial model `{tag}` is not loaded")));
            }
        }
        Ok(reg)
    }

    fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::storage(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        paths.sort();
        for p in paths {
            let tag = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let (generator, meta) = load_generator(&p)?;
            log::info!("loaded model `{tag}` from {}", p.display());
            self.insert(LoadedModel::from_checkpoint(tag, generator, meta));
        }
        Ok(())
    }
}
