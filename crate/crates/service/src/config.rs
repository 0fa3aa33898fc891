use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gclab_core::{Error, Result};

/// Service settings: a TOML file, then `GCLAB_*` environment overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Every `*.safetensors` here is loaded; the file stem is the model tag.
    pub model_dir: PathBuf,
    pub api_key: Option<String>,
    /// Request bodies above this many bytes get 413.
    pub max_body_bytes: usize,
    /// `palette`, `oracle` or absent (no segmentation endpoint).
    pub segmenter: Option<String>,
    /// Dataset manifest whose scenes back the oracle segmenter.
    pub reference_manifest: Option<PathBuf>,
    /// Tag of the guidance-free inpainter used by the automatic pipeline.
    /// When absent, any loaded model trained with zeroed guidance is used.
    pub initial_model: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            model_dir: PathBuf::from("models"),
            api_key: None,
            max_body_bytes: 16 << 20,
            segmenter: None,
            reference_manifest: None,
            initial_model: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::load(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Applies `GCLAB_HOST`, `GCLAB_PORT`, `GCLAB_MODEL_DIR` and `GCLAB_API_KEY`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(h) = get("GCLAB_HOST") {
            self.host = h;
        }
        if let Some(p) = get("GCLAB_PORT") {
            self.port = p
                .parse()
                .map_err(|_| Error::Config(format!("GCLAB_PORT `{p}` is not a port number")))?;
        }
        if let Some(d) = get("GCLAB_MODEL_DIR") {
            self.model_dir = d.into();
        }
        if let Some(k) = get("GCLAB_API_KEY") {
            self.api_key = (!k.is_empty()).then_some(k);
        }
        Ok(())
    }
}
