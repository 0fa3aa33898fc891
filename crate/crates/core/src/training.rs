//! Alternating discriminator/generator optimization with deterministic
//! per-step randomness, JSON-lines logging, checkpointing and resume.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::sync_channel;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::discriminators::{CropInputs, DiscriminatorEnsemble, Enabled, EnsembleConfig, ImageInputs, Member};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::guidance::{encode_edge, encode_panoptic, encode_semantic, GuidanceKind, GuidanceMap, EDGE_HIGH, EDGE_LOW};
use crate::losses::{
    discriminator_objective, generator_objective, perceptual_loss, DilatedPyramid, LossReport, LossWeights,
    PerceptualExtractor, PyramidConfig,
};
use crate::masks::{sample_mask, MaskOptions, MaskScheme};
use crate::nn::{Adam, AdamConfig};
use crate::objectalign::{crop_with_geometry, instance_bbox, sample_overlapping_instance, CropConfig, CropGeometry, ObjectCrop};
use crate::metrics::{extract_features, report, FeatureExtractor, MetricsReport};
use crate::raster::{HoleMask, RgbImage};
use crate::scenes::PanopticScene;
use crate::tensors::{binary_tensor, composite, guidance_tensor, images_tensor, masks_tensor, resample_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Training resolution; larger scenes are randomly cropped to it.
    pub resolution: usize,
    pub guidance: GuidanceKind,
    /// Train with an all-zero guidance block (a guidance-free inpainter).
    pub zero_guidance: bool,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub enabled: Enabled,
    pub weights: LossWeights,
    pub crop: CropConfig,
    pub mask_scheme: MaskScheme,
    pub mask: MaskOptions,
    pub flip: bool,
    pub generator: GeneratorConfig,
    pub discriminator: EnsembleConfig,
    pub perceptual: PyramidConfig,
    /// Weight of the finite-difference R1 estimate on real inputs; 0 disables it.
    pub r1_gamma: f64,
    pub checkpoint_every: u64,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 8,
            steps: 500,
            seed: 0,
            resolution: 64,
            guidance: GuidanceKind::Panoptic,
            zero_guidance: false,
            num_classes: 4,
            class_names: Vec::new(),
            enabled: Enabled::all(),
            weights: LossWeights::default(),
            crop: CropConfig::default(),
            mask_scheme: MaskScheme::Mixed { object_prob: 0.5 },
            mask: MaskOptions::default(),
            flip: true,
            generator: GeneratorConfig::default(),
            discriminator: EnsembleConfig::default(),
            perceptual: PyramidConfig::default(),
            r1_gamma: 0.0,
            checkpoint_every: 100,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML train config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON train config: {e}")))
    }

    /// Reads `.toml` or `.json` by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        self.crop.validate()?;
        self.mask.stroke.validate()?;
        self.generator_config().validate()?;
        self.ensemble_config().validate()?;
        Ok(())
    }

    pub fn guidance_channels(&self) -> usize {
        self.guidance.channels(self.num_classes)
    }

    /// Generator config with the guidance channel count filled in.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            guidance_channels: self.guidance_channels(),
            ..self.generator.clone()
        }
    }

    /// Ensemble config consistent with the training resolution and crop size.
    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            enabled: self.enabled,
            resolution: self.resolution,
            crop_size: self.crop.size,
            guidance_channels: self.guidance_channels(),
            ..self.discriminator.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Deterministic 64-bit mixing of a seed with stream identifiers.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Encodes the configured guidance for a scene.
pub fn encode_guidance(scene: &PanopticScene, kind: GuidanceKind, num_classes: usize) -> Result<GuidanceMap> {
    match kind {
        GuidanceKind::Edge => encode_edge(&scene.image, EDGE_LOW, EDGE_HIGH),
        GuidanceKind::Semantic => encode_semantic(&scene.semantic, num_classes),
        GuidanceKind::Panoptic => encode_panoptic(&scene.semantic, &scene.instances, num_classes),
    }
}

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct BatchElement {
    pub scene: PanopticScene,
    pub flipped: bool,
    pub mask: HoleMask,
    pub guidance: GuidanceMap,
    pub instance: Option<u32>,
    /// Crop of the real image at the sampled instance, plus its sample grid.
    pub crop: Option<(ObjectCrop, CropGeometry)>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub step: u64,
    pub elements: Vec<BatchElement>,
}

impl Batch {
    pub fn crop_count(&self) -> usize {
        self.elements.iter().filter(|e| e.crop.is_some()).count()
    }
}

/// Augments `scene` under `seed` (random crop to the training resolution,
/// random flip), draws a mask, encodes guidance and samples the object crop.
pub fn build_element(scene: &PanopticScene, seed: u64, cfg: &TrainConfig) -> Result<BatchElement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = scene.image.shape();
    let res = cfg.resolution;
    if h < res || w < res {
        return Err(Error::argument(
            "scene",
            format!("scene {h}x{w} smaller than training resolution {res}"),
        ));
    }
    let row0 = rng.random_range(0..=h - res);
    let col0 = rng.random_range(0..=w - res);
    let flipped = cfg.flip && rng.random_bool(0.5);
    let mask_seed = rng.next_u64();
    let instance_seed = rng.next_u64();
    let mut s = if (h, w) == (res, res) {
        scene.clone()
    } else {
        scene.crop(row0, col0, res, res)?
    };
    if flipped {
        s = s.flip_horizontal()?;
    }
    let mask = sample_mask(&s, cfg.mask_scheme, mask_seed, &cfg.mask)?;
    let guidance = encode_guidance(&s, cfg.guidance, cfg.num_classes)?;
    let instance = sample_overlapping_instance(&s.instances, &mask, instance_seed, cfg.crop.min_area)?;
    let crop = match instance {
        Some(id) => {
            let bbox = instance_bbox(&s.instances, id)?;
            let geom = CropGeometry::new(bbox, res, res, &cfg.crop)?;
            let c = crop_with_geometry(&s.image, &mask, &guidance, &s.instances, id, &geom)?;
            Some((c, geom))
        }
        None => None,
    };
    Ok(BatchElement {
        scene: s,
        flipped,
        mask,
        guidance,
        instance,
        crop,
    })
}

pub fn build_batch(scenes: &[&PanopticScene], seeds: &[u64], cfg: &TrainConfig) -> Result<Batch> {
    if scenes.len() != seeds.len() {
        return Err(Error::argument("seeds", "one seed per scene is required"));
    }
    let elements = scenes
        .iter()
        .zip(seeds)
        .map(|(s, &seed)| build_element(s, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { step: 0, elements })
}

/// Scene indices and element seeds used at `step`; a pure function of `(seed, step)`.
pub fn batch_plan(cfg: &TrainConfig, step: u64, num_scenes: usize) -> Vec<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, step]));
    (0..cfg.batch_size)
        .map(|_| (rng.random_range(0..num_scenes), rng.next_u64()))
        .collect()
}

pub fn batch_for_step(scenes: &[PanopticScene], cfg: &TrainConfig, step: u64) -> Result<Batch> {
    if scenes.is_empty() {
        return Err(Error::argument("dataset", "no scenes"));
    }
    let plan = batch_plan(cfg, step, scenes.len());
    let picked: Vec<&PanopticScene> = plan.iter().map(|&(i, _)| &scenes[i]).collect();
    let seeds: Vec<u64> = plan.iter().map(|&(_, s)| s).collect();
    let mut b = build_batch(&picked, &seeds, cfg)?;
    b.step = step;
    Ok(b)
}

/// Generator, ensemble, frozen extractor, optimizers and step counter.
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub ensemble: DiscriminatorEnsemble,
    pub extractor: DilatedPyramid,
    pub opt_g: Adam,
    pub opt_d: BTreeMap<Member, Adam>,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::init(derive_seed(config.seed, &[10]), config.generator_config())?;
        let ensemble = DiscriminatorEnsemble::new(derive_seed(config.seed, &[11]), config.ensemble_config())?;
        let extractor = DilatedPyramid::new(config.perceptual.clone())?;
        let opt_g = Adam::new(config.adam());
        let opt_d = Member::ALL.into_iter().map(|m| (m, Adam::new(config.adam()))).collect();
        Ok(TrainState {
            config,
            generator,
            ensemble,
            extractor,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    /// Checksums of every parameter group, including frozen ones.
    pub fn checksums(&self) -> Result<BTreeMap<String, u64>> {
        let mut out = self.ensemble.checksums()?;
        out.insert("generator".into(), self.generator.store().checksum()?);
        out.insert("frozen_perceptual".into(), self.extractor.checksum()?);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_state(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load_state(path)
    }
}

struct BatchTensors {
    real: ImageInputs,
    noise: Option<Tensor>,
    /// Indices of elements that carry a crop.
    crop_index: Vec<usize>,
    crop_real: Option<CropInputs>,
    resamplers: Vec<(Tensor, Tensor)>,
}

fn batch_tensors(state: &TrainState, batch: &Batch) -> Result<BatchTensors> {
    let cfg = &state.config;
    let els = &batch.elements;
    let images: Vec<_> = els.iter().map(|e| &e.scene.image).collect();
    let masks: Vec<_> = els.iter().map(|e| &e.mask).collect();
    let guid: Vec<_> = els.iter().map(|e| &e.guidance).collect();
    let image = images_tensor(&images)?;
    let mask = masks_tensor(&masks)?;
    let mut guidance = guidance_tensor(&guid)?;
    if cfg.zero_guidance {
        guidance = guidance.zeros_like()?;
    }
    let noise = if cfg.generator.noise {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, batch.step]));
        let n = els.len() * cfg.generator.noise_dim;
        let z: Vec<f32> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Some(Tensor::from_vec(z, (els.len(), cfg.generator.noise_dim), &Device::Cpu)?)
    } else {
        None
    };
    let crop_index: Vec<usize> = (0..els.len()).filter(|&i| els[i].crop.is_some()).collect();
    let mut resamplers = Vec::new();
    let crop_real = if crop_index.is_empty() {
        None
    } else {
        let crops: Vec<&(ObjectCrop, CropGeometry)> = crop_index.iter().map(|&i| els[i].crop.as_ref().expect("crop")).collect();
        let mut real_images = Vec::new();
        for (&i, (_, geom)) in crop_index.iter().zip(&crops) {
            let (ry, rx) = geom.dense_continuous();
            let s = geom.size;
            let ry = Tensor::from_vec(ry, (s, geom.src_height), &Device::Cpu)?;
            let rx = Tensor::from_vec(rx, (s, geom.src_width), &Device::Cpu)?;
            real_images.push(resample_tensor(&image.narrow(0, i, 1)?, &ry, &rx)?);
            resamplers.push((ry, rx));
        }
        let c_mask: Vec<_> = crops.iter().map(|(c, _)| &c.mask).collect();
        let c_guid: Vec<_> = crops.iter().map(|(c, _)| &c.guidance).collect();
        let c_shape: Vec<_> = crops.iter().map(|(c, _)| &c.shape).collect();
        let mut g = guidance_tensor(&c_guid)?;
        if cfg.zero_guidance {
            g = g.zeros_like()?;
        }
        Some(CropInputs {
            image: Tensor::cat(&real_images, 0)?,
            mask: masks_tensor(&c_mask)?,
            guidance: g,
            shape: binary_tensor(&c_shape, "shape")?,
        })
    };
    Ok(BatchTensors {
        real: ImageInputs { image, mask, guidance },
        noise,
        crop_index,
        crop_real,
        resamplers,
    })
}

fn fake_crops(t: &BatchTensors, fake_image: &Tensor) -> Result<Option<CropInputs>> {
    let Some(real) = &t.crop_real else {
        return Ok(None);
    };
    let parts = t
        .crop_index
        .iter()
        .zip(&t.resamplers)
        .map(|(&i, (ry, rx))| resample_tensor(&fake_image.narrow(0, i, 1)?, ry, rx))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(CropInputs {
        image: Tensor::cat(&parts, 0)?,
        ..real.clone()
    }))
}

const R1_EPS: f64 = 1e-2;

/// Finite-difference estimate of `E‖∇_x D(x)‖²` along one Gaussian direction.
fn r1_estimate(
    state: &TrainState,
    m: Member,
    t: &BatchTensors,
    base: &Tensor,
) -> Result<Tensor> {
    let seed = derive_seed(state.config.seed, &[3, state.step, m as u64]);
    let perturb = |x: &Tensor| -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = x.elem_count();
        let v: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        Ok((x + (Tensor::from_vec(v, x.shape(), &Device::Cpu)? * R1_EPS)?)?)
    };
    let shifted = if m.is_object() {
        let c = t.crop_real.as_ref().expect("crop inputs for object member");
        let moved = CropInputs {
            image: perturb(&c.image)?,
            ..c.clone()
        };
        state.ensemble.crop_logits(m, &moved)?
    } else {
        let moved = ImageInputs {
            image: perturb(&t.real.image)?,
            ..t.real.clone()
        };
        state.ensemble.image_logits(m, &moved)?
    };
    Ok(((shifted - base)? / R1_EPS)?.sqr()?.mean_all()?)
}

/// Which half of a step just finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    train_step_observed(state, batch, |_, _| Ok(()))
}

/// `train_step` that hands the state to `observe` after each phase.
pub fn train_step_observed(
    state: &mut TrainState,
    batch: &Batch,
    mut observe: impl FnMut(Phase, &TrainState) -> Result<()>,
) -> Result<LossReport> {
    let t = batch_tensors(state, batch)?;
    let enabled = state.ensemble.enabled();
    let weights = state.config.weights.clone();
    let mut report = LossReport::default();

    // The generator is not updated until the end of the step, so one forward
    // pass serves both phases: detached for the discriminators, tracked for
    // the generator.
    let raw = state
        .generator
        .forward(&t.real.image, &t.real.mask, &t.real.guidance, t.noise.as_ref())?;

    // discriminator phase
    let fake_image = composite(&raw.detach(), &t.real.image, &t.real.mask)?;
    let fake = ImageInputs {
        image: fake_image.clone(),
        ..t.real.clone()
    };
    let crop_fake = fake_crops(&t, &fake_image)?;
    let mut pairs = BTreeMap::new();
    for m in enabled.members() {
        if m.is_object() {
            if let (Some(rc), Some(fc)) = (&t.crop_real, &crop_fake) {
                pairs.insert(m, (state.ensemble.crop_logits(m, rc)?, state.ensemble.crop_logits(m, fc)?));
            }
        } else {
            pairs.insert(m, (state.ensemble.image_logits(m, &t.real)?, state.ensemble.image_logits(m, &fake)?));
        }
    }
    let mut d_loss = discriminator_objective(enabled, &pairs, &weights, &mut report)?;
    if state.config.r1_gamma > 0.0 {
        let mut r1_total = None;
        for (&m, (real_logit, _)) in &pairs {
            let r = r1_estimate(state, m, &t, real_logit)?;
            r1_total = Some(match r1_total {
                None => r,
                Some(acc) => (acc + r)?,
            });
        }
        if let Some(r1) = r1_total {
            let scaled = (r1 * (0.5 * state.config.r1_gamma))?;
            report.r1 = crate::nn::scalar(&scaled)?;
            d_loss = (d_loss + scaled)?;
        }
    }
    let grads = d_loss.backward()?;
    for &m in pairs.keys() {
        let opt = state.opt_d.get_mut(&m).expect("optimizer per member");
        opt.step(state.ensemble.store(m), &grads)?;
    }
    drop(grads);
    drop(pairs);
    observe(Phase::Discriminator, state)?;

    // generator phase, against the freshly updated discriminators
    let critics = state.ensemble.detached();
    let fake_image = composite(&raw, &t.real.image, &t.real.mask)?;
    let fake = ImageInputs {
        image: fake_image.clone(),
        ..t.real.clone()
    };
    let crop_fake = fake_crops(&t, &fake_image)?;
    let mut fakes = BTreeMap::new();
    for m in enabled.members() {
        if m.is_object() {
            if let Some(fc) = &crop_fake {
                fakes.insert(m, critics.crop_logits(m, fc)?);
            }
        } else {
            fakes.insert(m, critics.image_logits(m, &fake)?);
        }
    }
    let perceptual = perceptual_loss(&fake_image, &t.real.image, &state.extractor)?;
    let g_loss = generator_objective(enabled, &fakes, Some(&perceptual), &weights, &mut report)?;
    let grads = g_loss.backward()?;
    state.opt_g.step(state.generator.store(), &grads)?;
    observe(Phase::Generator, state)?;

    state.step += 1;
    Ok(report)
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
    /// Elements of this step's batch without an object crop.
    pub crops_missing: usize,
    pub batch_size: usize,
    /// Cumulative fraction of elements (since step 0 of this run's log) without a crop.
    pub skip_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_step: u64,
    pub interrupted: bool,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.safetensors")
}

/// Reads a JSON-lines log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::load(path, e)))
        .collect()
}

/// Runs training from `state.step` up to `state.config.steps`. Batches are
/// prepared on a producer thread ahead of the optimizer. A set `cancel` flag
/// stops after the current step; the final checkpoint is always written.
pub fn run(
    state: &mut TrainState,
    scenes: &[PanopticScene],
    out_dir: &Path,
    cancel: Option<&AtomicBool>,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::argument("dataset", "no scenes"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let (mut missing, mut seen) = if state.step > 0 && log_path.exists() {
        let prior: Vec<LogRecord> = read_log(&log_path)?.into_iter().filter(|r| r.step <= state.step).collect();
        // rewrite so the log matches the resumed state exactly
        let mut f = BufWriter::new(File::create(&log_path).map_err(|e| Error::storage(&log_path, e))?);
        for r in &prior {
            writeln!(f, "{}", serde_json::to_string(r).expect("serializable")).map_err(|e| Error::storage(&log_path, e))?;
        }
        f.flush().map_err(|e| Error::storage(&log_path, e))?;
        (
            prior.iter().map(|r| r.crops_missing).sum::<usize>(),
            prior.iter().map(|r| r.batch_size).sum::<usize>(),
        )
    } else {
        File::create(&log_path).map_err(|e| Error::storage(&log_path, e))?;
        (0, 0)
    };
    let mut log = BufWriter::new(
        OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::storage(&log_path, e))?,
    );
    let start = state.step;
    let end = state.config.steps;
    let cfg = state.config.clone();
    let mut interrupted = false;
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(cfg.prefetch.max(1));
        let stop_ref = &stop;
        let cfg_ref = &cfg;
        scope.spawn(move || {
            for step in start..end {
                if stop_ref.load(Ordering::Relaxed) {
                    break;
                }
                if tx.send(batch_for_step(scenes, cfg_ref, step)).is_err() {
                    break;
                }
            }
        });
        let result = (|| -> Result<()> {
            for batch in rx.iter() {
                let batch = batch?;
                let report = train_step(state, &batch)?;
                let crops_missing = batch.elements.len() - batch.crop_count();
                missing += crops_missing;
                seen += batch.elements.len();
                let rec = LogRecord {
                    step: state.step,
                    report,
                    crops_missing,
                    batch_size: batch.elements.len(),
                    skip_rate: missing as f64 / seen as f64,
                };
                writeln!(log, "{}", serde_json::to_string(&rec).expect("serializable"))
                    .map_err(|e| Error::storage(&log_path, e))?;
                log::info!(
                    "step {} g_total {:.4} d_total {:.4} perceptual {:.4}",
                    rec.step,
                    rec.report.g_total,
                    rec.report.d_total,
                    rec.report.perceptual
                );
                if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < end {
                    log.flush().map_err(|e| Error::storage(&log_path, e))?;
                    state.save(&out_dir.join(periodic_checkpoint_name(state.step)))?;
                }
                if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                    interrupted = true;
                    break;
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        drop(rx);
        result
    })?;
    log.flush().map_err(|e| Error::storage(&log_path, e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    state.save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        final_step: state.step,
        interrupted,
    })
}

/// Fresh training run over `scenes`; class count and names come from the config.
pub fn train(config: TrainConfig, scenes: &[PanopticScene], out_dir: &Path, cancel: Option<&AtomicBool>) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config)?;
    run(&mut state, scenes, out_dir, cancel)
}

/// Continues from a checkpoint up to `steps` (overriding the stored total).
pub fn resume(
    checkpoint: &Path,
    steps: u64,
    scenes: &[PanopticScene],
    out_dir: &Path,
    cancel: Option<&AtomicBool>,
) -> Result<TrainOutcome> {
    let mut state = TrainState::load(checkpoint)?;
    state.config.steps = steps;
    run(&mut state, scenes, out_dir, cancel)
}

/// Metadata of a checkpoint without loading its tensors.
pub fn checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    checkpoint::read_meta(path)
}

const EVAL_STREAM: u64 = 0xe7a1;

/// Completes every scene under a seeded mask of `scheme`, with the guidance
/// the model was trained on (none for a zero-guidance model).
pub fn complete_scenes(
    generator: &Generator,
    config: &TrainConfig,
    scenes: &[PanopticScene],
    scheme: MaskScheme,
    seed: u64,
) -> Result<Vec<RgbImage>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mask = sample_mask(scene, scheme, derive_seed(seed, &[EVAL_STREAM, i as u64]), &config.mask)?;
            let guidance = if config.zero_guidance {
                None
            } else {
                Some(encode_guidance(scene, config.guidance, config.num_classes)?)
            };
            generator.complete(&scene.image, &mask, guidance.as_ref())
        })
        .collect()
}

/// FID and IDS of a model's completions against the original scenes.
pub fn evaluate(
    generator: &Generator,
    config: &TrainConfig,
    scenes: &[PanopticScene],
    scheme: MaskScheme,
    seed: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<MetricsReport> {
    let fakes = complete_scenes(generator, config, scenes, scheme, seed)?;
    let reals: Vec<RgbImage> = scenes.iter().map(|s| s.image.clone()).collect();
    let real = extract_features(&reals, extractor)?;
    let fake = extract_features(&fakes, extractor)?;
    report(&real, &fake, true, &scheme.tag())
}


/// Zero tensor helper used by callers that need an empty guidance block.
pub fn zero_guidance(n: usize, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::zeros((n, channels, h, w), DType::F32, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, SceneConfig};

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(1, &[1, 1]));
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(2, &[1, 0]));
        assert_eq!(derive_seed(5, &[3, 4]), derive_seed(5, &[3, 4]));
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let cfg = TrainConfig::default();
        let t = toml::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_toml(&t).unwrap(), cfg);
        let j = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&j).unwrap(), cfg);
        let partial = TrainConfig::from_toml("steps = 3\nbatch_size = 2\n").unwrap();
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.lr, 0.001);
    }

    #[test]
    fn invalid_configs_fail_validation() {
        for cfg in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { steps: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().unwrap_err().is_validation());
        }
    }

    #[test]
    fn plan_is_pure_in_seed_and_step() {
        let cfg = TrainConfig::default();
        assert_eq!(batch_plan(&cfg, 3, 10), batch_plan(&cfg, 3, 10));
        assert_ne!(batch_plan(&cfg, 3, 10), batch_plan(&cfg, 4, 10));
    }

    #[test]
    fn build_element_is_deterministic() {
        let scene = generate_scene(2, &SceneConfig::default()).unwrap();
        let cfg = TrainConfig::default();
        let a = build_element(&scene, 9, &cfg).unwrap();
        let b = build_element(&scene, 9, &cfg).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.flipped, b.flipped);
        assert_eq!(a.instance, b.instance);
        assert_eq!(a.crop.map(|c| c.0), b.crop.map(|c| c.0));
    }

    #[test]
    fn oversized_scenes_are_randomly_cropped() {
        let scene = generate_scene(2, &SceneConfig { height: 80, width: 72, ..SceneConfig::default() }).unwrap();
        let cfg = TrainConfig::default();
        let e = build_element(&scene, 1, &cfg).unwrap();
        assert_eq!(e.scene.image.shape(), (64, 64));
        e.scene.validate().unwrap();
    }
}
