//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use tower::ServiceExt;

use gclab_core::discriminators::Enabled;
use gclab_core::guidance::{encode_panoptic, encode_semantic};
use gclab_core::losses::{adv_d_loss, adv_g_loss, discriminator_objective, generator_objective, LossReport, LossWeights};
use gclab_core::masks::{sample_mask, MaskScheme};
use gclab_core::metrics::{extract_features, fid, ids, ExtractorConfig, FeatureMatrix};
use gclab_core::objectalign::{apply_separable, crop_align, naive_bilinear_crop, CropGeometry};
use gclab_core::pipeline::{OracleSegmenter, Pipeline, Variant};
use gclab_core::scenes::{generate_scene, load_all, save_dataset, SceneConfig};
use gclab_core::training::{
    batch_for_step, complete_scenes, read_log, train, train_step_observed, LogRecord, Phase, TrainConfig, TrainState,
};
use gclab_core::{
    pngio, BBox, CropConfig, Generator, GeneratorConfig, Grid, HoleMask, InstanceMap, Member, PanopticScene, RgbImage,
    SemanticMap,
};
use gclab_service::{router, AppState, LoadedModel, Registry};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const LN2: f64 = std::f64::consts::LN_2;

// ---------------------------------------------------------------- criterion 1

fn losses() -> Check {
    let d = ok(adv_d_loss(&[0.0], &[0.0]))?;
    let g = ok(adv_g_loss(&[0.0]))?;
    ensure!((d - 2.0 * LN2).abs() <= 1e-9, "adv_d_loss(0,0) = {d}");
    ensure!((g - LN2).abs() <= 1e-9, "adv_g_loss(0) = {g}");
    let zero = || candle_tensor(&[0.0, 0.0]);
    let fakes: BTreeMap<Member, _> = Member::ALL.iter().map(|&m| (m, zero())).collect();
    let weights = LossWeights { rec: 0.0, ..LossWeights::default() };
    let mut report = LossReport::default();
    ok(generator_objective(Enabled::all(), &fakes, None, &weights, &mut report))?;
    ensure!((report.g_total - 4.0 * LN2).abs() <= 1e-6, "four-member total {}", report.g_total);
    Ok(format!("d {d:.12} g {g:.12} total {:.9} (tol 1e-9 / 1e-6)", report.g_total))
}

fn candle_tensor(v: &[f32]) -> candle_core::Tensor {
    candle_core::Tensor::new(v, &candle_core::Device::Cpu).expect("tensor")
}

// ---------------------------------------------------------------- criterion 2

fn gaussian_rows(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (0..d).map(|i| shift + z[i] + (0..d).map(|j| a[i * d + j] * z[j]).sum::<f64>()).collect()
        })
        .collect()
}

fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
    FeatureMatrix::from_rows(rows, "acceptance").expect("rows")
}

/// FID with the root trace taken from the general complex eigenvalues of Σr·Σf.
fn fid_reference(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
    let stats = |rows: &[Vec<f64>]| {
        let (n, d) = (rows.len(), rows[0].len());
        let mut mu = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                mu[j] += r[j] / n as f64;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1) as f64;
                }
            }
        }
        (mu, cov)
    };
    let (mr, sr) = stats(real);
    let (mf, sf) = stats(fake);
    let diff: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b).powi(2)).sum();
    let tr_root: f64 = (&sr * &sf).complex_eigenvalues().iter().map(|l| l.sqrt().re).sum();
    diff + sr.trace() + sf.trace() - 2.0 * tr_root
}

fn fid_suite() -> Check {
    let a = gaussian_rows(1, 64, 6, 0.0);
    let self_fid = ok(fid(&fm(&a), &fm(&a)))?;
    ensure!(self_fid <= 1e-6, "fid(A,A) = {self_fid}");

    let delta = [0.5, -1.25, 2.0, 0.0, 0.75];
    let base = gaussian_rows(2, 100, 5, 0.0);
    let shifted: Vec<Vec<f64>> = base.iter().map(|r| r.iter().zip(&delta).map(|(v, d)| v + d).collect()).collect();
    let want: f64 = delta.iter().map(|d| d * d).sum();
    let got = ok(fid(&fm(&base), &fm(&shifted)))?;
    ensure!((got - want).abs() <= 1e-6, "equal covariance: {got} vs {want}");

    let mut worst = 0.0f64;
    for seed in 0..5 {
        let real = gaussian_rows(100 + seed, 256, 8, 0.0);
        let fake = gaussian_rows(200 + seed, 256, 8, 0.3);
        let got = ok(fid(&fm(&real), &fm(&fake)))?;
        let want = fid_reference(&real, &fake);
        worst = worst.max(((got - want) / want).abs());
    }
    ensure!(worst <= 1e-5, "eigen oracle relative error {worst:.3e}");
    Ok(format!("self {self_fid:.2e} (<=1e-6), shift err {:.2e} (<=1e-6), oracle rel {worst:.2e} (<=1e-5)", (got - want).abs()))
}

// ---------------------------------------------------------------- criterion 3

fn ids_suite() -> Check {
    let sep = ok(ids(&fm(&vec![vec![1.0]; 10]), &fm(&vec![vec![-1.0]; 10]), true))?;
    ensure!(sep.u_ids == 0.0 && sep.p_ids == Some(0.0), "separable: {sep:?}");

    let real: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 * 0.1]).collect();
    let fake: Vec<Vec<f64>> = real
        .iter()
        .enumerate()
        .map(|(i, r)| vec![if matches!(i % 10, 0 | 3 | 7) { r[0] + 1.0 } else { r[0] - 1.0 }])
        .collect();
    let thirty = ok(ids(&fm(&real), &fm(&fake), true))?;
    ensure!(thirty.p_ids == Some(0.30), "constructed pairs: p_ids {:?}", thirty.p_ids);

    let a = fm(&gaussian_rows(9, 50, 4, 0.0));
    let tie = ok(ids(&a, &a, true))?;
    ensure!(tie.p_ids == Some(0.0), "strict tie: p_ids {:?}", tie.p_ids);
    Ok(format!("separable (0, 0); constructed p_ids {:?} (exact 0.30); tie p_ids {:?}", thirty.p_ids.unwrap(), tie.p_ids.unwrap()))
}

// ---------------------------------------------------------------- criterion 4

fn crop_cfg(size: usize, margin: f32) -> CropConfig {
    CropConfig { size, margin, ..CropConfig::default() }
}

fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("image")
}

/// Pointwise continuous-resampling reference: reflect-padded 2× nearest
/// upscale, binomial low-pass on the upscaled grid when minifying, bilinear
/// sample at each output pixel centre.
fn reference_crop(image: &RgbImage, geom: &CropGeometry) -> Vec<f64> {
    let (h, w) = image.shape();
    let reflect = |i: i64, n: i64| -> i64 {
        let m = i.rem_euclid(2 * n);
        if m < n {
            m
        } else {
            2 * n - 1 - m
        }
    };
    let up = |ch: usize, y: i64, x: i64| -> f64 {
        image.get(ch, (reflect(y, 2 * h as i64) / 2) as usize, (reflect(x, 2 * w as i64) / 2) as usize) as f64
    };
    let taps = [1.0, 4.0, 6.0, 4.0, 1.0];
    let filter = geom.step() > 1.0;
    let filtered = |ch: usize, y: i64, x: i64| -> f64 {
        if !filter {
            return up(ch, y, x);
        }
        let mut acc = 0.0;
        for (a, ta) in taps.iter().enumerate() {
            for (b, tb) in taps.iter().enumerate() {
                acc += ta * tb / 256.0 * up(ch, y + a as i64 - 2, x + b as i64 - 2);
            }
        }
        acc
    };
    let s = geom.size;
    let mut out = vec![0.0; 3 * s * s];
    for ch in 0..3 {
        for i in 0..s {
            for j in 0..s {
                let sy = geom.origin_y + (i as f64 + 0.5) * geom.side / s as f64;
                let sx = geom.origin_x + (j as f64 + 0.5) * geom.side / s as f64;
                let (ty, tx) = (2.0 * sy - 0.5, 2.0 * sx - 0.5);
                let (y0, x0) = (ty.floor(), tx.floor());
                let (fy, fx) = (ty - y0, tx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                out[(ch * s + i) * s + j] = (1.0 - fy) * (1.0 - fx) * filtered(ch, y0, x0)
                    + (1.0 - fy) * fx * filtered(ch, y0, x0 + 1)
                    + fy * (1.0 - fx) * filtered(ch, y0 + 1, x0)
                    + fy * fx * filtered(ch, y0 + 1, x0 + 1);
            }
        }
    }
    out
}

fn gradient(h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(h, w, |r, c| {
        let (x, y) = (c as f32 / (w - 1) as f32, r as f32 / (h - 1) as f32);
        [x - 0.5, 0.8 * y - 0.4, 0.5 * (x + y) - 0.5]
    })
}

fn blobs(seed: u64, h: usize, count: u32) -> InstanceMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Grid::filled(h, h, 0u32);
    for id in 1..=count {
        let (r0, c0) = (rng.random_range(0..h - 8), rng.random_range(0..h - 8));
        for r in r0..r0 + 8 {
            for c in c0..c0 + 8 {
                g.set(r, c, id);
            }
        }
    }
    InstanceMap(g).densified()
}

fn crop_suite() -> Check {
    let k = 4;
    let h = 32;
    let image = random_image(1, h, h);
    let inst = blobs(2, h, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sem = ok(SemanticMap::new(Grid::from_fn(h, h, |_, _| rng.random_range(0..k as u16)), k))?;
    let guidance = ok(encode_panoptic(&sem, &inst, k))?;
    let mask = HoleMask(Grid::from_fn(h, h, |r, c| u8::from((r * 5 + c) % 7 == 0)));
    let id = 1;
    let crop = ok(crop_align(&image, &mask, &guidance, &inst, id, BBox::new(0, 0, h, h), &crop_cfg(h, 0.0)))?;
    ensure!(crop.image == image && crop.mask == mask && crop.guidance == guidance, "scale-1 crop is not an identity");

    let mut worst_const = 0.0f32;
    for (seed, margin) in [(4u64, 0.0f32), (5, 0.1), (6, 0.4)] {
        let v = seed as f32 * 0.2 - 0.9;
        let flat = RgbImage::filled(40, 44, [v, -v, 0.5 * v]);
        let geom = ok(CropGeometry::new(BBox::new(3, 5, 20 + seed as usize, 30), 40, 44, &crop_cfg(16, margin)))?;
        let (ry, rx) = geom.continuous_weights();
        let out = apply_separable(&flat, &ry, &rx);
        for (plane, want) in out.data().chunks(256).zip([v, -v, 0.5 * v]) {
            for &x in plane {
                worst_const = worst_const.max((x - want).abs());
            }
        }
    }
    ensure!(worst_const <= 1e-6, "constant drifted by {worst_const}");

    let mut worst_ref = 0.0f64;
    for (img, bbox, size, margin) in [
        (gradient(4, 4), BBox::new(0, 0, 2, 4), 16, 0.0),
        (gradient(64, 64), BBox::new(0, 0, 32, 64), 16, 0.0),
        (gradient(48, 40), BBox::new(30, 5, 40, 30), 16, 0.1),
        (random_image(5, 40, 40), BBox::new(3, 7, 37, 31), 20, 0.25),
    ] {
        let (ih, iw) = img.shape();
        let geom = ok(CropGeometry::new(bbox, ih, iw, &crop_cfg(size, margin)))?;
        let (ry, rx) = geom.continuous_weights();
        let got = apply_separable(&img, &ry, &rx);
        for (a, b) in got.data().iter().zip(reference_crop(&img, &geom)) {
            worst_ref = worst_ref.max((*a as f64 - b).abs());
        }
    }
    ensure!(worst_ref < 1e-5, "resampling oracle error {worst_ref:.3e}");

    let sem_only = ok(encode_semantic(&sem, k))?;
    let bbox = BBox::new(4, 6, 14, 18);
    let c = ok(crop_align(&image, &mask, &sem_only, &inst, id, bbox, &crop_cfg(16, 0.1)))?;
    ensure!(c.guidance.data().iter().all(|&v| v == 0.0 || v == 1.0), "interpolated label value");
    ensure!(c.mask.data().iter().all(|&v| v <= 1), "interpolated mask value");
    let geom = ok(CropGeometry::new(bbox, h, h, &crop_cfg(16, 0.1)))?;
    let (ys, xs) = geom.nearest_indices();
    for i in 0..16 {
        for j in 0..16 {
            ensure!(c.shape.get(i, j) == u8::from(inst.get(ys[i], xs[j]) == id), "shape map at ({i}, {j})");
        }
    }

    let mut worst_ratio = 0.0f64;
    for freq in [0.3f32, 0.35, 0.4] {
        let img = RgbImage::from_fn(64, 64, |_, col| {
            let v = 0.9 * (2.0 * std::f32::consts::PI * freq * col as f32).cos();
            [v, v, v]
        });
        let geom = ok(CropGeometry::new(BBox::new(0, 0, 64, 64), 64, 64, &crop_cfg(32, 0.0)))?;
        let (ry, rx) = geom.continuous_weights();
        let ratio = ac_energy(&apply_separable(&img, &ry, &rx)) / ac_energy(&naive_bilinear_crop(&img, &geom));
        worst_ratio = worst_ratio.max(ratio);
    }
    ensure!(worst_ratio < 0.9, "above-Nyquist energy ratio {worst_ratio:.3}");
    Ok(format!(
        "identity exact; const err {worst_const:.1e} (<=1e-6); oracle err {worst_ref:.2e} (<1e-5); labels nearest; energy ratio {worst_ratio:.3} (<0.9)"
    ))
}

fn ac_energy(img: &RgbImage) -> f64 {
    let p = img.plane(0);
    let mean = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
    p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p.len() as f64
}

// ---------------------------------------------------------------- criterion 5

fn toy_scenes(first_seed: u64, n: u64) -> Vec<PanopticScene> {
    (0..n).map(|s| generate_scene(first_seed + s, &SceneConfig::default()).expect("scene")).collect()
}

fn architecture() -> Check {
    let g = ok(Generator::init(3, GeneratorConfig::default()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let image = random_image(1000 + case, 64, 64);
        let (r0, c0) = (rng.random_range(0..40), rng.random_range(0..40));
        let (rh, cw) = (rng.random_range(1..24), rng.random_range(1..24));
        let mask = HoleMask(Grid::from_fn(64, 64, |r, c| u8::from(r >= r0 && r < r0 + rh && c >= c0 && c < c0 + cw)));
        let out = ok(g.complete(&image, &mask, None))?;
        for r in 0..64 {
            for c in 0..64 {
                if !mask.is_hole(r, c) {
                    for ch in 0..3 {
                        ensure!(
                            out.get(ch, r, c).to_bits() == image.get(ch, r, c).to_bits(),
                            "composite case {case} pixel ({r}, {c})"
                        );
                    }
                }
            }
        }
    }

    let scenes = toy_scenes(50, 8);
    let cfg = TrainConfig { steps: 20, seed: 1, batch_size: 4, mask_scheme: MaskScheme::Object, ..TrainConfig::default() };
    let mut state = ok(TrainState::new(cfg))?;
    let initial = ok(state.checksums())?;
    let members = ["image_d", "image_semantic_d", "object_d", "object_semantic_d"];
    let mut violations = Vec::new();
    for step in 0..20 {
        let batch = ok(batch_for_step(&scenes, &state.config, step))?;
        let start = ok(state.checksums())?;
        let mut after_d: Option<BTreeMap<String, u64>> = None;
        ok(train_step_observed(&mut state, &batch, |phase, s| {
            let now = s.checksums()?;
            match phase {
                Phase::Discriminator => {
                    if now["generator"] != start["generator"] {
                        violations.push(format!("step {step}: generator moved in the discriminator phase"));
                    }
                    after_d = Some(now.clone());
                }
                Phase::Generator => {
                    let d = after_d.as_ref().expect("discriminator phase ran");
                    for m in members {
                        if now[m] != d[m] {
                            violations.push(format!("step {step}: {m} moved in the generator phase"));
                        }
                    }
                }
            }
            Ok(())
        }))?;
    }
    ensure!(violations.is_empty(), "{}", violations.join("; "));
    let last = ok(state.checksums())?;
    for key in ["frozen_encoder", "frozen_perceptual"] {
        ensure!(last[key] == initial[key], "{key} checksum changed over 20 steps");
    }
    ensure!(last["generator"] != initial["generator"], "generator never updated");

    // disabling a member removes exactly its terms
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = || candle_tensor(&(0..4).map(|_| rng.random_range(-3.0f32..3.0)).collect::<Vec<_>>());
    let pairs: BTreeMap<Member, _> = Member::ALL.iter().map(|&m| (m, (draw(), draw()))).collect();
    let fakes: BTreeMap<Member, _> = pairs.iter().map(|(m, (_, f))| (*m, f.clone())).collect();
    let weights = LossWeights { rec: 0.0, ..LossWeights::default() };
    let mut full = LossReport::default();
    ok(discriminator_objective(Enabled::all(), &pairs, &weights, &mut full))?;
    ok(generator_objective(Enabled::all(), &fakes, None, &weights, &mut full))?;
    for bits in 0u8..8 {
        // image_d always stays on
        let enabled = Enabled {
            image_d: true,
            image_semantic_d: bits & 1 != 0,
            object_d: bits & 2 != 0,
            object_semantic_d: bits & 4 != 0,
        };
        let mut r = LossReport::default();
        ok(discriminator_objective(enabled, &pairs, &weights, &mut r))?;
        ok(generator_objective(enabled, &fakes, None, &weights, &mut r))?;
        let members: Vec<Member> = enabled.members().collect();
        let mut want: Vec<&str> = members.iter().map(|m| m.as_str()).collect();
        want.sort();
        let keys: Vec<&str> = r.g_adv.keys().map(String::as_str).collect();
        ensure!(keys == want, "subset {bits}: reported terms {keys:?}");
        let d_want: f64 = members.iter().map(|m| full.d_real[m.as_str()] + full.d_fake[m.as_str()]).sum();
        let g_want: f64 = members.iter().map(|m| full.g_adv[m.as_str()]).sum();
        ensure!((r.d_total - d_want).abs() < 1e-5 && (r.g_total - g_want).abs() < 1e-5, "subset {bits}: totals differ");
    }
    Ok("composite exact on 100 cases; frozen checksums stable over 20 steps; phases isolated; 8 member subsets remove exactly their terms".into())
}

// ---------------------------------------------------------------- criteria 6 and 7

const FULL_RUN: &str = r#"
steps = 500
seed = 7
checkpoint_every = 0
[mask_scheme]
kind = "object"
"#;

const IMAGE_ONLY_RUN: &str = r#"
steps = 500
seed = 7
checkpoint_every = 0
[mask_scheme]
kind = "object"
[enabled]
image_d = true
image_semantic_d = false
object_d = false
object_semantic_d = false
"#;

/// The 8-scene toy set, stored and reloaded as `gen-data --count 8 --seed 7` would.
fn toy_set(dir: &Path) -> std::result::Result<Vec<PanopticScene>, String> {
    let scenes = toy_scenes(7, 8);
    let manifest = ok(save_dataset(&scenes, dir, &SceneConfig::default().class_names()))?;
    ok(load_all(&manifest.manifest_path()))
}

fn finite_record(r: &LogRecord) -> bool {
    let rep = &r.report;
    [rep.g_total, rep.d_total, rep.perceptual, rep.r1].iter().all(|v| v.is_finite())
        && rep.d_real.values().chain(rep.d_fake.values()).chain(rep.g_adv.values()).all(|v| v.is_finite())
}

struct Runs {
    full: Option<(Generator, TrainConfig)>,
    scenes: Vec<PanopticScene>,
}

fn overfit(work: &Path, runs: &mut Runs) -> Check {
    let data = work.join("toy");
    runs.scenes = toy_set(&data)?;
    let cfg = ok(TrainConfig::from_toml(FULL_RUN))?;
    let out = ok(train(cfg.clone(), &runs.scenes, &work.join("full"), None))?;
    let log = ok(read_log(&out.log))?;
    ensure!(log.len() == 500, "{} log records", log.len());
    if let Some(bad) = log.iter().find(|r| !finite_record(r)) {
        return Err(format!("non-finite loss at step {}", bad.step));
    }
    let at = |s: u64| log.iter().find(|r| r.step == s).map(|r| r.report.perceptual).expect("logged step");
    let (p10, p500) = (at(10), at(500));
    let skip = log.last().expect("records").skip_rate;
    let state = ok(TrainState::load(&out.checkpoint))?;
    runs.full = Some((state.generator.clone(), state.config.clone()));
    ensure!(p500 < 0.5 * p10, "perceptual {p500:.4} at step 500 vs {p10:.4} at step 10");
    ensure!(skip < 0.3, "skip rate {skip:.3}");
    Ok(format!("all finite; perceptual {p10:.4} -> {p500:.4} (ratio {:.3} < 0.5); skip rate {skip:.3} (< 0.3)", p500 / p10))
}

/// FID of completions over the toy set under 8 object-mask seeds.
fn toy_fid(generator: &Generator, cfg: &TrainConfig, scenes: &[PanopticScene]) -> std::result::Result<f64, String> {
    let extractor = ok(ExtractorConfig::default().build())?;
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for seed in 0..8 {
        fakes.extend(ok(complete_scenes(generator, cfg, scenes, MaskScheme::Object, seed))?);
        reals.extend(scenes.iter().map(|s| s.image.clone()));
    }
    let real = ok(extract_features(&reals, extractor.as_ref()))?;
    let fake = ok(extract_features(&fakes, extractor.as_ref()))?;
    ok(fid(&real, &fake))
}

/// Allowed excess of the full ensemble's FID over the image-only baseline.
const ABLATION_SLACK: f64 = 1.10;

fn ablation(work: &Path, runs: &Runs) -> Check {
    let (full_g, full_cfg) = runs.full.as_ref().ok_or("full run unavailable")?;
    let cfg = ok(TrainConfig::from_toml(IMAGE_ONLY_RUN))?;
    let out = ok(train(cfg, &runs.scenes, &work.join("image_only"), None))?;
    let base = ok(TrainState::load(&out.checkpoint))?;
    let fid_full = toy_fid(full_g, full_cfg, &runs.scenes)?;
    let fid_base = toy_fid(&base.generator, &base.config, &runs.scenes)?;
    let detail = format!("FID full {fid_full:.4} vs image-D + perceptual {fid_base:.4} (ratio {:.3}, limit {ABLATION_SLACK})", fid_full / fid_base);
    ensure!(fid_full <= ABLATION_SLACK * fid_base, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 8

fn pipeline_and_service() -> Check {
    let scenes: Vec<PanopticScene> = toy_scenes(300, 6)
        .into_iter()
        .map(|mut s| {
            s.image = s.image.quantized();
            s
        })
        .collect();
    let k = 4;
    let gcfg = GeneratorConfig { guidance_channels: k + 1, ..GeneratorConfig::default() };
    let guided = ok(Generator::init(21, gcfg.clone()))?;
    let initial = ok(Generator::init(22, gcfg))?;
    let oracle = std::sync::Arc::new(ok(OracleSegmenter::new(scenes.clone()))?);
    let opts = TrainConfig::default().mask;
    for variant in [Variant::SegmentIncomplete, Variant::InpaintThenSegment] {
        let p = ok(Pipeline::new(variant, Some(initial.clone()), oracle.clone(), guided.clone(), k))?;
        for (i, s) in scenes.iter().enumerate() {
            let mask = ok(sample_mask(s, MaskScheme::Object, i as u64, &opts))?;
            let auto = ok(p.auto_complete(&s.image, &mask))?;
            let gt = ok(encode_panoptic(&s.semantic, &s.instances, k))?;
            let direct = ok(guided.complete(&s.image, &mask, Some(&gt)))?;
            ensure!(auto.image == direct, "{variant:?} scene {i}: automatic and ground-truth completions differ");
        }
    }

    // zero-mask identity through HTTP, byte for byte
    let config = TrainConfig { num_classes: k, ..TrainConfig::default() };
    let mut registry = Registry::default();
    registry.insert(LoadedModel::new("toy", guided, config));
    let app = router(AppState { registry, api_key: None, max_body_bytes: 1 << 22 });
    let s = &scenes[0];
    let png = ok(pngio::encode_rgb(&s.image))?;
    let body = json!({
        "image": STANDARD.encode(&png),
        "mask": STANDARD.encode(ok(pngio::encode_mask(&HoleMask::empty(64, 64)))?),
        "guidance_kind": "panoptic",
        "guidance": STANDARD.encode(ok(pngio::encode_semantic(&s.semantic))?),
        "instances": STANDARD.encode(ok(pngio::encode_instances(&s.instances))?),
    });
    let rt = ok(tokio::runtime::Runtime::new())?;
    let (status, reply) = rt.block_on(async {
        let req = Request::post("/v1/complete")
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&body).expect("json")))
            .expect("request");
        let resp = app.oneshot(req).await.expect("response");
        let status = resp.status();
        let bytes = resp.into_body().collect().await.expect("body").to_bytes();
        (status, serde_json::from_slice::<Value>(&bytes).unwrap_or(Value::Null))
    });
    ensure!(status == StatusCode::OK, "service returned {status}: {reply}");
    let returned = ok(STANDARD.decode(reply["image"].as_str().unwrap_or_default()))?;
    ensure!(returned == png, "zero-mask response differs from the request image bytes");
    Ok("oracle auto_complete == ground-truth complete (both variants, 6 scenes); HTTP zero-mask bytes identical".into())
}

// ---------------------------------------------------------------- criterion 9

fn gclab(args: &[&str]) -> std::result::Result<String, String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_gclab")).args(args).output())?;
    if !out.status.success() {
        return Err(format!("gclab {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn cli_round_trips(work: &Path) -> Check {
    let data = work.join("cli_data");
    let d = data.to_str().ok_or("path")?;
    gclab(&["gen-data", "--out", d, "--count", "4", "--seed", "3"])?;
    let loaded = ok(load_all(&data))?;
    ensure!(loaded.len() == 4, "{} scenes loaded", loaded.len());
    for (i, s) in loaded.iter().enumerate() {
        let want = ok(generate_scene(3 + i as u64, &SceneConfig::default()))?;
        ensure!(
            s.image == want.image.quantized() && s.semantic == want.semantic && s.instances == want.instances,
            "scene {i} differs after gen-data and load"
        );
        ensure!(s.annotations == want.annotations, "scene {i} annotations differ");
    }

    let run = work.join("cli_train");
    gclab(&["train", "--data", d, "--out", run.to_str().ok_or("path")?, "--steps", "1"])?;
    let ckpt = run.join("final.safetensors");
    ensure!(ckpt.exists(), "no checkpoint after train --steps 1");
    let s = &loaded[0];
    let mask_path = work.join("cli_mask.png");
    let mask = HoleMask(Grid::from_fn(64, 64, |r, c| u8::from((16..40).contains(&r) && (20..44).contains(&c))));
    ok(pngio::write_file(&mask_path, &ok(pngio::encode_mask(&mask))?))?;
    let out_png = work.join("cli_out.png");
    let p = |path: &Path| path.to_str().map(str::to_string).ok_or_else(|| "path".to_string());
    gclab(&[
        "infer",
        "--checkpoint",
        &p(&ckpt)?,
        "--image",
        &p(&data.join("000000_img.png"))?,
        "--mask",
        &p(&mask_path)?,
        "--guidance",
        &p(&data.join("000000_sem.png"))?,
        "--instances",
        &p(&data.join("000000_inst.png"))?,
        "--out",
        &p(&out_png)?,
    ])?;
    let completed = ok(pngio::decode_rgb(&ok(pngio::read_file(&out_png))?))?;
    ensure!(completed.shape() == (64, 64), "inferred image is {:?}", completed.shape());
    for r in 0..64 {
        for c in 0..64 {
            ensure!(mask.is_hole(r, c) || completed.pixel(r, c) == s.image.pixel(r, c), "known pixel ({r}, {c}) changed");
        }
    }

    let images = work.join("cli_images");
    ok(std::fs::create_dir_all(&images))?;
    for i in 0..4 {
        let name = format!("{i:06}_img.png");
        ok(std::fs::copy(data.join(&name), images.join(&name)))?;
    }
    let report: Value = ok(serde_json::from_str(&gclab(&[
        "eval",
        "--real-dir",
        &p(&images)?,
        "--fake-dir",
        &p(&images)?,
    ])?))?;
    let f = report["fid"].as_f64().ok_or("no fid in report")?;
    ensure!(f <= 1e-6, "eval of identical sets: fid {f}");
    Ok(format!("gen-data/load identical; train --steps 1 then infer ok; identical-set fid {f:.2e} (<=1e-6)"))
}

// ---------------------------------------------------------------- driver

struct Criterion<'a> {
    id: u32,
    name: &'a str,
    budget: Duration,
}

fn record(c: Criterion, only: &[u32], results: &mut Vec<bool>, f: impl FnOnce() -> Check) {
    if !only.is_empty() && !only.contains(&c.id) {
        return;
    }
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let in_budget = took <= c.budget;
    let (pass, detail) = match outcome {
        Ok(d) if in_budget => (true, d),
        Ok(d) => (false, format!("{d}; over the time budget")),
        Err(e) => (false, e),
    };
    println!(
        "criterion {} {}: {} | {} | {:.1}s of {}s",
        c.id,
        c.name,
        if pass { "PASS" } else { "FAIL" },
        detail,
        took.as_secs_f64(),
        c.budget.as_secs()
    );
    results.push(pass);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters from the harness-less runner
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // optional criterion numbers restrict the run, e.g. `-- 1 2 3`
    let only: Vec<u32> = args.iter().skip(1).filter_map(|a| a.parse().ok()).collect();
    let work = tempfile::tempdir().expect("work dir");
    let mut results = Vec::new();
    let secs = Duration::from_secs;
    record(Criterion { id: 1, name: "loss analytics", budget: secs(1) }, &only, &mut results, losses);
    record(Criterion { id: 2, name: "FID oracle suite", budget: secs(10) }, &only, &mut results, fid_suite);
    record(Criterion { id: 3, name: "IDS suite", budget: secs(10) }, &only, &mut results, ids_suite);
    record(Criterion { id: 4, name: "crop alignment", budget: secs(10) }, &only, &mut results, crop_suite);
    record(Criterion { id: 5, name: "architecture contracts", budget: secs(300) }, &only, &mut results, architecture);
    let mut runs = Runs { full: None, scenes: Vec::new() };
    record(Criterion { id: 6, name: "overfit smoke", budget: secs(1800) }, &only, &mut results, || overfit(work.path(), &mut runs));
    record(Criterion { id: 7, name: "ablation direction", budget: secs(1800) }, &only, &mut results, || ablation(work.path(), &runs));
    record(Criterion { id: 8, name: "pipeline composition", budget: secs(60) }, &only, &mut results, pipeline_and_service);
    record(Criterion { id: 9, name: "CLI and dataset round trips", budget: secs(300) }, &only, &mut results, || {
        cli_round_trips(work.path())
    });
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
