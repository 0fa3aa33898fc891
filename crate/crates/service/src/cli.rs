//! The `gclab` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use gclab_core::checkpoint::{load_generator, read_meta};
use gclab_core::guidance::{edge_from_grid, encode_panoptic, encode_semantic};
use gclab_core::masks::MaskScheme;
use gclab_core::metrics::{extract_features, report, EncoderExtractor, ExtractorConfig, FeatureExtractor};
use gclab_core::discriminators::EncoderConfig;
use gclab_core::pipeline::{build_segmenter, Pipeline, PipelineConfig};
use gclab_core::scenes::{generate_scene, load_all, save_dataset, SceneConfig, DEFAULT_CLASS_NAMES};
use gclab_core::training::{self, evaluate, TrainConfig};
use gclab_core::{pngio, Error, GuidanceKind, Result, RgbImage};

use crate::api::{router, AppState};
use crate::config::ServiceConfig;
use crate::registry::Registry;

#[derive(Debug, Parser)]
#[command(name = "gclab", version, about = "Guided image completion: data, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExtractorChoice {
    /// Random projection of block-averaged pixels.
    Randproj,
    /// Mean-pooled embedding of the frozen vision encoder.
    Encoder,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panoptic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
    },
    /// Train (or resume) a model on a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML or JSON training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// FID / U-IDS / P-IDS, either of a checkpoint's completions or of two image folders.
    Eval {
        /// Dataset manifest (with --checkpoint).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "mixed")]
        mask_scheme: String,
        /// Folder of real PNGs (with --fake-dir); files are paired by name.
        #[arg(long)]
        real_dir: Option<PathBuf>,
        #[arg(long)]
        fake_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ExtractorChoice::Randproj)]
        extractor: ExtractorChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Complete one image with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Edge map or semantic map PNG, per the model's guidance kind.
        #[arg(long)]
        guidance: Option<PathBuf>,
        /// Instance map PNG (panoptic models).
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Automatic completion pipeline.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML service config; `GCLAB_*` variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Complete every scene of a manifest under sampled masks.
    Run {
        /// Pipeline config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mixed")]
        mask_scheme: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs a parsed command; exit code 2 for invalid input, 1 for other failures.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            count,
            seed,
            height,
            width,
            num_classes,
        } => gen_data(&out, count, seed, height, width, num_classes),
        Command::Train {
            data,
            out,
            config,
            steps,
            seed,
            resume,
        } => train(&data, &out, config.as_deref(), steps, seed, resume.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            mask_scheme,
            real_dir,
            fake_dir,
            extractor,
            seed,
            out,
        } => {
            let extractor = build_extractor(extractor)?;
            let report = match (data, checkpoint, real_dir, fake_dir) {
                (Some(d), Some(c), None, None) => {
                    let scheme: MaskScheme = mask_scheme.parse()?;
                    let (generator, meta) = load_generator(&c)?;
                    evaluate(&generator, &meta.config, &load_all(&d)?, scheme, seed, extractor.as_ref())?
                }
                (None, None, Some(r), Some(f)) => {
                    let (reals, fakes) = paired_folders(&r, &f)?;
                    let real = extract_features(&reals, extractor.as_ref())?;
                    let fake = extract_features(&fakes, extractor.as_ref())?;
                    report(&real, &fake, true, "none")?
                }
                _ => {
                    return Err(Error::argument(
                        "eval",
                        "give either --data with --checkpoint, or --real-dir with --fake-dir",
                    ))
                }
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::storage(&p, e)),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        Command::Infer {
            checkpoint,
            image,
            mask,
            guidance,
            instances,
            out,
        } => infer(&checkpoint, &image, &mask, guidance.as_deref(), instances.as_deref(), &out),
        Command::Pipeline {
            command:
                PipelineCommand::Run {
                    config,
                    data,
                    out,
                    mask_scheme,
                    seed,
                },
        } => pipeline_run(&config, &data, &out, &mask_scheme, seed),
        Command::Serve {
            config,
            host,
            port,
            model_dir,
            segmenter,
        } => {
            let mut cfg = ServiceConfig::load(config.as_deref())?;
            if let Some(h) = host {
                cfg.host = h;
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(d) = model_dir {
                cfg.model_dir = d;
            }
            if segmenter.is_some() {
                cfg.segmenter = segmenter;
            }
            serve(cfg)
        }
    }
}

fn build_extractor(choice: ExtractorChoice) -> Result<Box<dyn FeatureExtractor>> {
    match choice {
        ExtractorChoice::Randproj => ExtractorConfig::default().build(),
        ExtractorChoice::Encoder => Ok(Box::new(EncoderExtractor::new(EncoderConfig::default())?)),
    }
}

fn gen_data(out: &Path, count: usize, seed: u64, height: usize, width: usize, num_classes: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::argument("count", "must be positive"));
    }
    let cfg = SceneConfig {
        height,
        width,
        num_classes,
        ..SceneConfig::default()
    };
    cfg.validate()?;
    let scenes = (0..count as u64)
        .map(|i| generate_scene(seed.wrapping_add(i), &cfg))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = (0..num_classes)
        .map(|k| DEFAULT_CLASS_NAMES.get(k).map_or_else(|| format!("class_{k}"), |s| s.to_string()))
        .collect();
    save_dataset(&scenes, out, &names)?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    steps: Option<u64>,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let scenes = load_all(data)?;
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        if let Err(e) = ctrlc::set_handler(move || cancel.store(true, Ordering::SeqCst)) {
            log::warn!("could not install interrupt handler: {e}");
        }
    }
    let outcome = match resume {
        Some(ckpt) => {
            let total = match steps {
                Some(s) => s,
                None => read_meta(ckpt)?.config.steps,
            };
            training::resume(ckpt, total, &scenes, out, Some(&cancel))?
        }
        None => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(first) = scenes.first() {
                if cfg.num_classes != first.num_classes() {
                    log::info!("using K={} from the dataset", first.num_classes());
                    cfg.num_classes = first.num_classes();
                    cfg.class_names.clear();
                }
            }
            training::train(cfg, &scenes, out, Some(&cancel))?
        }
    };
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": outcome.checkpoint,
            "log": outcome.log,
            "final_step": outcome.final_step,
            "interrupted": outcome.interrupted,
        })
    );
    Ok(())
}

fn paired_folders(real: &Path, fake: &Path) -> Result<(Vec<RgbImage>, Vec<RgbImage>)> {
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::load(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        v.sort();
        Ok(v)
    };
    let reals = list(real)?;
    let mut out_r = Vec::new();
    let mut out_f = Vec::new();
    for r in reals {
        let name = r.file_name().expect("listed files have names");
        let f = fake.join(name);
        if !f.exists() {
            return Err(Error::argument("fake_dir", format!("no fake image named {}", name.to_string_lossy())));
        }
        out_r.push(pngio::decode_rgb(&pngio::read_file(&r)?)?);
        out_f.push(pngio::decode_rgb(&pngio::read_file(&f)?)?);
    }
    if out_r.len() < 2 {
        return Err(Error::argument("real_dir", "need at least two images"));
    }
    Ok((out_r, out_f))
}

fn infer(
    checkpoint: &Path,
    image: &Path,
    mask: &Path,
    guidance: Option<&Path>,
    instances: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (generator, meta) = load_generator(checkpoint)?;
    let img = pngio::decode_rgb_field(&pngio::read_file(image)?, "image")?;
    let mask = pngio::decode_mask(&pngio::read_file(mask)?, "mask")?;
    let cfg = &meta.config;
    let k = cfg.num_classes;
    let need = |p: Option<&Path>, field: &str| {
        p.map(Path::to_path_buf)
            .ok_or_else(|| Error::argument(field, format!("--{field} is required for a {} model", cfg.guidance.as_str())))
    };
    let map = if cfg.zero_guidance {
        None
    } else {
        let bytes = pngio::read_file(&need(guidance, "guidance")?)?;
        Some(match cfg.guidance {
            GuidanceKind::Edge => edge_from_grid(&pngio::decode_mask(&bytes, "guidance")?.0),
            GuidanceKind::Semantic => encode_semantic(&pngio::decode_semantic(&bytes, k, "guidance")?, k)?,
            GuidanceKind::Panoptic => {
                let sem = pngio::decode_semantic(&bytes, k, "guidance")?;
                let inst = pngio::decode_instances(&pngio::read_file(&need(instances, "instances")?)?, "instances")?;
                encode_panoptic(&sem, &inst, k)?
            }
        })
    };
    let result = generator.complete(&img, &mask, map.as_ref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    pngio::write_file(out, &pngio::encode_rgb(&result)?)
}

fn pipeline_run(config: &Path, data: &Path, out: &Path, mask_scheme: &str, seed: u64) -> Result<()> {
    let cfg = PipelineConfig::load(config)?;
    let scheme: MaskScheme = mask_scheme.parse()?;
    let scenes = load_all(data)?;
    let k = read_meta(&cfg.guided_checkpoint)?.config.num_classes;
    let reference = (cfg.segmenter == "oracle").then(|| scenes.clone());
    let segmenter = build_segmenter(&cfg.segmenter, k, &SceneConfig::default().palette, reference)?;
    let pipeline = Pipeline::load(&cfg, segmenter)?;
    std::fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
    let opts = TrainConfig::default().mask;
    for (i, scene) in scenes.iter().enumerate() {
        let mask = gclab_core::masks::sample_mask(scene, scheme, training::derive_seed(seed, &[i as u64]), &opts)?;
        let done = pipeline.auto_complete(&scene.image, &mask)?;
        let stem = format!("{i:05}");
        pngio::write_file(&out.join(format!("{stem}_mask.png")), &pngio::encode_mask(&mask)?)?;
        pngio::write_file(&out.join(format!("{stem}_completed.png")), &pngio::encode_rgb(&done.image)?)?;
        pngio::write_file(&out.join(format!("{stem}_semantic.png")), &pngio::encode_semantic(&done.semantic)?)?;
        pngio::write_file(&out.join(format!("{stem}_instances.png")), &pngio::encode_instances(&done.instances)?)?;
    }
    println!("{} scenes completed into {}", scenes.len(), out.display());
    Ok(())
}

fn serve(cfg: ServiceConfig) -> Result<()> {
    let registry = Registry::load(&cfg)?;
    log::info!("{} model(s) loaded", registry.models.len());
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
    let state = AppState {
        registry,
        api_key: cfg.api_key.clone(),
        max_body_bytes: cfg.max_body_bytes,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::storage("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::storage(addr.to_string(), e))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::storage(addr.to_string(), e))
    })
}
