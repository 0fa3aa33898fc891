//! Synthetic panoptic scenes and the on-disk dataset format.
//!
//! Scenes are painted back to front from a small shape vocabulary, so the
//! instance map always reflects what is visible. The dataset layout is a
//! `manifest.json` plus four files per item (`NNNNNN_img.png`, `_sem.png`,
//! `_inst.png`, `_ann.json`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectalign::BBox;
use crate::pngio;
use crate::raster::{Grid, InstanceMap, RgbImage, SemanticMap};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
    /// Head-over-body pair of overlapping discs; non-convex.
    PersonLike,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disc,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::PersonLike,
    ];
}

/// Colours used when painting scenes, in `[-1, 1]` RGB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background_top: [f32; 3],
    pub background_bottom: [f32; 3],
    /// Base colour per class; entry 0 is unused (background is a gradient).
    pub classes: Vec<[f32; 3]>,
    /// Maximum per-instance brightness offset.
    pub jitter: f32,
    /// Amplitude of the stripe texture painted on instances.
    pub texture: f32,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            background_top: [-0.35, -0.2, 0.05],
            background_bottom: [0.1, 0.05, -0.25],
            classes: vec![
                [0.0, 0.0, 0.0],
                [0.85, -0.55, -0.55],
                [-0.6, 0.8, -0.6],
                [-0.55, -0.55, 0.9],
                [0.85, 0.85, -0.7],
                [-0.7, 0.85, 0.85],
                [0.9, -0.6, 0.9],
                [0.95, 0.95, 0.95],
            ],
            jitter: 0.08,
            texture: 0.05,
        }
    }
}

pub const DEFAULT_CLASS_NAMES: [&str; 8] = [
    "background",
    "person",
    "vehicle",
    "animal",
    "furniture",
    "plant",
    "sign",
    "building",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub shapes: Vec<ShapeKind>,
    /// Instance radius range as a fraction of `min(height, width)`.
    pub min_radius: f32,
    pub max_radius: f32,
    pub palette: Palette,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            min_instances: 1,
            max_instances: 5,
            shapes: ShapeKind::ALL.to_vec(),
            min_radius: 0.1,
            max_radius: 0.28,
            palette: Palette::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("class count K={} must be at least 2", self.num_classes)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene size {}x{} below the 16 px minimum",
                self.height, self.width
            )));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::Config("min_instances exceeds max_instances".into()));
        }
        if self.max_instances > 0 && self.shapes.is_empty() {
            return Err(Error::Config("shape vocabulary is empty".into()));
        }
        if self.palette.classes.len() < self.num_classes {
            return Err(Error::Config(format!(
                "palette has {} class colours, need {}",
                self.palette.classes.len(),
                self.num_classes
            )));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("radius range must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| {
                DEFAULT_CLASS_NAMES
                    .get(k)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class_{k}"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: u32,
    pub class_index: u16,
    pub area: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticScene {
    pub image: RgbImage,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
    pub annotations: Vec<InstanceAnnotation>,
    pub seed: u64,
}

impl PanopticScene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn num_classes(&self) -> usize {
        self.semantic.num_classes()
    }

    /// Full-scan consistency check of maps and annotations.
    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if self.semantic.shape() != shape || self.instances.shape() != shape {
            return Err(Error::Validation(format!(
                "map shapes differ: image {:?}, semantic {:?}, instances {:?}",
                shape,
                self.semantic.shape(),
                self.instances.shape()
            )));
        }
        self.instances.validate()?;
        let scanned = annotate(&self.semantic, &self.instances)?;
        if scanned != self.annotations {
            return Err(Error::Validation(
                "annotations disagree with a rescan of the instance map".into(),
            ));
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        let semantic = self.semantic.flip_horizontal();
        let instances = self.instances.flip_horizontal();
        let annotations = annotate(&semantic, &instances)?;
        Ok(PanopticScene {
            image: self.image.flip_horizontal(),
            semantic,
            instances,
            annotations,
            seed: self.seed,
        })
    }

    /// Window crop; instances that fall outside are dropped and ids re-densified.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        if row0 + height > self.height() || col0 + width > self.width() {
            return Err(Error::argument("crop", "window exceeds scene bounds"));
        }
        let semantic = self.semantic.crop(row0, col0, height, width);
        let instances = self.instances.crop(row0, col0, height, width).densified();
        let annotations = annotate(&semantic, &instances)?;
        Ok(PanopticScene {
            image: self.image.crop(row0, col0, height, width),
            semantic,
            instances,
            annotations,
            seed: self.seed,
        })
    }
}

/// Recomputes annotations (id, class, area, minimal bbox) by scanning the maps.
///
/// Fails when an instance spans more than one semantic class.
pub fn annotate(semantic: &SemanticMap, instances: &InstanceMap) -> Result<Vec<InstanceAnnotation>> {
    if semantic.shape() != instances.shape() {
        return Err(Error::Validation("semantic and instance maps differ in shape".into()));
    }
    let n = instances.max_id() as usize;
    let mut acc: Vec<Option<(u16, usize, BBox)>> = vec![None; n + 1];
    for r in 0..instances.height() {
        for c in 0..instances.width() {
            let id = instances.get(r, c) as usize;
            if id == 0 {
                continue;
            }
            let class = semantic.get(r, c);
            match &mut acc[id] {
                None => acc[id] = Some((class, 1, BBox::pixel(c, r))),
                Some((k, area, bbox)) => {
                    if *k != class {
                        return Err(Error::Validation(format!(
                            "instance {id} spans classes {k} and {class}"
                        )));
                    }
                    *area += 1;
                    bbox.include(c, r);
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter_map(|(id, a)| {
            a.map(|(class_index, area, bbox)| InstanceAnnotation {
                id: id as u32,
                class_index,
                area,
                bbox,
            })
        })
        .collect())
}

/// Builds a scene from externally produced maps. Sparse instance ids are
/// re-densified to `1..=n`.
pub fn ingest_external(
    image: RgbImage,
    semantic: SemanticMap,
    raw_instances: InstanceMap,
    seed: u64,
) -> Result<PanopticScene> {
    let instances = raw_instances.densified();
    let annotations = annotate(&semantic, &instances)?;
    let scene = PanopticScene {
        image,
        semantic,
        instances,
        annotations,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

struct Shape {
    kind: ShapeKind,
    cy: f32,
    cx: f32,
    radius: f32,
    aspect: f32,
    tri: [(f32, f32); 3],
}

impl Shape {
    fn sample(rng: &mut ChaCha8Rng, kind: ShapeKind, h: usize, w: usize, cfg: &SceneConfig) -> Shape {
        let m = h.min(w) as f32;
        let radius = rng.random_range(cfg.min_radius..=cfg.max_radius) * m;
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let aspect = rng.random_range(0.5f32..2.0);
        let mut tri = [(0.0, 0.0); 3];
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        for (i, v) in tri.iter_mut().enumerate() {
            let ang = phase + i as f32 * std::f32::consts::TAU / 3.0 + rng.random_range(-0.5f32..0.5);
            let rad = radius * rng.random_range(0.8f32..1.3);
            *v = (cy + rad * ang.sin(), cx + rad * ang.cos());
        }
        Shape {
            kind,
            cy,
            cx,
            radius,
            aspect,
            tri,
        }
    }

    /// Pixel-centre inclusion test.
    fn contains(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
        // the pixel under the anchor always belongs to the shape
        if r == self.cy as usize && c == self.cx as usize {
            return true;
        }
        match self.kind {
            ShapeKind::Disc => (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.radius.powi(2),
            ShapeKind::Rectangle => {
                let hw = self.radius * self.aspect.sqrt();
                let hh = self.radius / self.aspect.sqrt();
                (x - self.cx).abs() <= hw && (y - self.cy).abs() <= hh
            }
            ShapeKind::Triangle => {
                let [a, b, c3] = self.tri;
                let cross = |p: (f32, f32), q: (f32, f32)| (q.1 - p.1) * (y - p.0) - (q.0 - p.0) * (x - p.1);
                let d1 = cross(a, b);
                let d2 = cross(b, c3);
                let d3 = cross(c3, a);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            ShapeKind::PersonLike => {
                let body = self.radius * 0.7;
                let head = body * 0.55;
                let head_cy = self.cy - body - head * 0.6;
                let in_body = ((y - self.cy) / 1.3).powi(2) + (x - self.cx).powi(2) <= body.powi(2);
                let in_head = (y - head_cy).powi(2) + (x - self.cx).powi(2) <= head.powi(2);
                in_body || in_head
            }
        }
    }
}

/// Deterministically synthesises one scene from `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<PanopticScene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = &config.palette;

    let count = rng.random_range(config.min_instances..=config.max_instances);
    let bg_freq = rng.random_range(0.05f32..0.2);
    let bg_phase = rng.random_range(0.0f32..std::f32::consts::TAU);

    let mut pixels = vec![[0f32; 3]; h * w];
    for r in 0..h {
        let t = r as f32 / (h - 1) as f32;
        for c in 0..w {
            let ripple = 0.04 * (bg_freq * c as f32 + bg_phase).sin();
            let mut px = [0f32; 3];
            for ch in 0..3 {
                px[ch] = pal.background_top[ch] * (1.0 - t) + pal.background_bottom[ch] * t + ripple;
            }
            pixels[r * w + c] = px;
        }
    }
    let mut semantic = Grid::filled(h, w, 0u16);
    let mut instances = Grid::filled(h, w, 0u32);

    for index in 0..count {
        let class = rng.random_range(1..config.num_classes) as u16;
        let kind = config.shapes[rng.random_range(0..config.shapes.len())];
        let shape = Shape::sample(&mut rng, kind, h, w, config);
        let shade = rng.random_range(-pal.jitter..=pal.jitter);
        let stripe_freq = rng.random_range(0.3f32..0.9);
        let base = pal.classes[class as usize];
        let id = index as u32 + 1;
        for r in 0..h {
            for c in 0..w {
                if shape.contains(r, c) {
                    let stripe = pal.texture * (stripe_freq * (r + c) as f32).sin();
                    pixels[r * w + c] = base.map(|v| v + shade + stripe);
                    semantic.set(r, c, class);
                    instances.set(r, c, id);
                }
            }
        }
    }

    let image = RgbImage::from_fn(h, w, |r, c| pixels[r * w + c]).quantized();
    let semantic = SemanticMap::new(semantic, config.num_classes)?;
    let instances = InstanceMap(instances).densified();
    let annotations = annotate(&semantic, &instances)?;
    Ok(PanopticScene {
        image,
        semantic,
        instances,
        annotations,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub semantic: String,
    pub instances: String,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    seed: u64,
    annotations: Vec<InstanceAnnotation>,
}

impl DatasetManifest {
    /// Reads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let joined;
        let path = if path.is_dir() {
            joined = path.join("manifest.json");
            joined.as_path()
        } else {
            path
        };
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::load(path, format!("bad manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.class_names.len() != manifest.num_classes {
            return Err(Error::Validation(format!(
                "manifest K={} but {} class names",
                manifest.num_classes,
                manifest.class_names.len()
            )));
        }
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Loads and validates one item.
    pub fn load_item(&self, index: usize) -> Result<PanopticScene> {
        let item = self
            .items
            .get(index)
            .ok_or_else(|| Error::argument("index", format!("item {index} out of range")))?;
        let path = |name: &str| self.root.join(name);
        let image = pngio::decode_rgb(&pngio::read_file(&path(&item.image))?)
            .map_err(|e| Error::load(path(&item.image), e))?;
        let semantic = pngio::decode_semantic(&pngio::read_file(&path(&item.semantic))?, self.num_classes, "semantic")
            .map_err(|e| match e {
                Error::Argument { message, .. } => Error::Validation(format!("{}: {message}", item.semantic)),
                other => other,
            })?;
        let instances = pngio::decode_instances(&pngio::read_file(&path(&item.instances))?, "instances")?;
        let ann_path = path(&item.annotations);
        let ann_text = fs::read_to_string(&ann_path).map_err(|e| Error::load(&ann_path, e))?;
        let ann: AnnotationFile =
            serde_json::from_str(&ann_text).map_err(|e| Error::load(&ann_path, format!("bad annotations: {e}")))?;
        let scene = PanopticScene {
            image,
            semantic,
            instances,
            annotations: ann.annotations,
            seed: ann.seed,
        };
        scene
            .validate()
            .map_err(|e| Error::Validation(format!("item {index} ({}): {e}", item.image)))?;
        Ok(scene)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<PanopticScene>> + '_ {
        (0..self.items.len()).map(move |i| self.load_item(i))
    }
}

/// Writes scenes in the dataset layout under `root` and returns the manifest.
pub fn save_dataset(scenes: &[PanopticScene], root: &Path, class_names: &[String]) -> Result<DatasetManifest> {
    let k = class_names.len();
    if let Some(bad) = scenes.iter().find(|s| s.num_classes() != k) {
        return Err(Error::argument(
            "scenes",
            format!("scene with K={} does not match {k} class names", bad.num_classes()),
        ));
    }
    fs::create_dir_all(root).map_err(|e| Error::storage(root, e))?;
    let mut items = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let item = ManifestItem {
            image: format!("{i:06}_img.png"),
            semantic: format!("{i:06}_sem.png"),
            instances: format!("{i:06}_inst.png"),
            annotations: format!("{i:06}_ann.json"),
        };
        pngio::write_file(&root.join(&item.image), &pngio::encode_rgb(&scene.image)?)?;
        pngio::write_file(&root.join(&item.semantic), &pngio::encode_semantic(&scene.semantic)?)?;
        pngio::write_file(&root.join(&item.instances), &pngio::encode_instances(&scene.instances)?)?;
        let ann = AnnotationFile {
            seed: scene.seed,
            annotations: scene.annotations.clone(),
        };
        let text = serde_json::to_string_pretty(&ann).expect("annotations serialize");
        pngio::write_file(&root.join(&item.annotations), text.as_bytes())?;
        items.push(item);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_classes: k,
        class_names: class_names.to_vec(),
        items,
        root: root.to_path_buf(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    pngio::write_file(&root.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// Opens a manifest and returns an iterator over its validated scenes.
pub fn load_dataset(manifest_path: &Path) -> Result<impl Iterator<Item = Result<PanopticScene>>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    Ok((0..manifest.len()).map(move |i| manifest.load_item(i)))
}

/// Loads every scene of a manifest eagerly.
pub fn load_all(manifest_path: &Path) -> Result<Vec<PanopticScene>> {
    load_dataset(manifest_path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_instances_gives_empty_maps() {
        let cfg = SceneConfig {
            min_instances: 0,
            max_instances: 0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(7, &cfg).unwrap();
        assert!(scene.instances.data().iter().all(|&v| v == 0));
        assert!(scene.semantic.data().iter().all(|&v| v == 0));
        assert!(scene.annotations.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap().image, generate_scene(8, &cfg).unwrap().image);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let small = SceneConfig {
            height: 8,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &small), Err(Error::Config(_))));
        let one_class = SceneConfig {
            num_classes: 1,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &one_class), Err(Error::Config(_))));
    }

    #[test]
    fn min_instances_guarantees_a_visible_instance() {
        let cfg = SceneConfig {
            min_instances: 1,
            ..SceneConfig::default()
        };
        for seed in 0..50 {
            let scene = generate_scene(seed, &cfg).unwrap();
            assert!(!scene.annotations.is_empty(), "seed {seed}");
            scene.validate().unwrap();
        }
    }

    #[test]
    fn annotate_rejects_mixed_classes() {
        let sem = SemanticMap::new(Grid::from_vec(1, 2, vec![1, 2]).unwrap(), 3).unwrap();
        let inst = InstanceMap(Grid::from_vec(1, 2, vec![1, 1]).unwrap());
        assert!(annotate(&sem, &inst).is_err());
    }

    #[test]
    fn ingestion_densifies_sparse_ids() {
        let img = RgbImage::filled(16, 16, [0.0; 3]);
        let mut sem = Grid::filled(16, 16, 0u16);
        let mut inst = Grid::filled(16, 16, 0u32);
        sem.set(2, 2, 1);
        inst.set(2, 2, 40);
        sem.set(9, 9, 2);
        inst.set(9, 9, 7);
        let scene = ingest_external(img, SemanticMap::new(sem, 3).unwrap(), InstanceMap(inst), 0).unwrap();
        assert_eq!(scene.instances.get(9, 9), 1);
        assert_eq!(scene.instances.get(2, 2), 2);
    }
}
