//! Automatic completion (inpaint, segment, guided inpaint) and the map edits
//! behind object insertion, removal and replacement.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::guidance::{encode_panoptic, GuidanceKind, GuidanceMap};
use crate::masks::{dilate_square, object_mask, ObjectMaskParams};
use crate::raster::{Grid, HoleMask, InstanceMap, RgbImage, SemanticMap};
use crate::scenes::{Palette, PanopticScene};

/// Anything that predicts a panoptic layout for an image.
pub trait Segmenter: Send + Sync {
    fn tag(&self) -> &str;

    /// Whether `segment` accepts an image with holes (and uses the mask).
    fn handles_incomplete(&self) -> bool;

    fn segment(&self, image: &RgbImage, mask: Option<&HoleMask>) -> Result<(SemanticMap, InstanceMap)>;
}

/// Rule-based segmenter for the synthetic palette: each pixel takes the class
/// whose base colour is nearest (background is the per-row gradient), and
/// instances are 4-connected components of equal class.
#[derive(Debug, Clone)]
pub struct PaletteSegmenter {
    palette: Palette,
    num_classes: usize,
    /// Components smaller than this are folded into the background.
    pub min_area: usize,
}

impl PaletteSegmenter {
    pub fn new(palette: Palette, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > palette.classes.len() {
            return Err(Error::argument(
                "num_classes",
                format!("palette has {} classes, asked for {num_classes}", palette.classes.len()),
            ));
        }
        Ok(PaletteSegmenter {
            palette,
            num_classes,
            min_area: 4,
        })
    }

    fn classify(&self, px: [f32; 3], row: usize, height: usize) -> u16 {
        let t = if height > 1 { row as f32 / (height - 1) as f32 } else { 0.0 };
        let dist = |c: [f32; 3]| (0..3).map(|i| (px[i] - c[i]).powi(2)).sum::<f32>();
        let bg: [f32; 3] =
            std::array::from_fn(|i| self.palette.background_top[i] * (1.0 - t) + self.palette.background_bottom[i] * t);
        let mut best = (0u16, dist(bg));
        for k in 1..self.num_classes {
            let d = dist(self.palette.classes[k]);
            if d < best.1 {
                best = (k as u16, d);
            }
        }
        best.0
    }
}

impl Segmenter for PaletteSegmenter {
    fn tag(&self) -> &str {
        "palette"
    }

    fn handles_incomplete(&self) -> bool {
        true
    }

    fn segment(&self, image: &RgbImage, mask: Option<&HoleMask>) -> Result<(SemanticMap, InstanceMap)> {
        let (h, w) = image.shape();
        if let Some(m) = mask {
            if m.shape() != (h, w) {
                return Err(Error::argument("mask", "mask shape differs from image"));
            }
        }
        let known = |r: usize, c: usize| mask.is_none_or(|m| !m.is_hole(r, c));
        let mut labels = Grid::from_fn(h, w, |r, c| if known(r, c) { self.classify(image.pixel(r, c), r, h) } else { 0 });
        if let Some(m) = mask {
            fill_holes_from_nearest(&mut labels, m);
        }
        let (mut labels, instances) = components(&labels, self.min_area);
        // components dropped for size also lose their class
        for (l, &id) in labels.data_mut().iter_mut().zip(instances.data()) {
            if id == 0 {
                *l = 0;
            }
        }
        Ok((SemanticMap::new(labels, self.num_classes)?, instances))
    }
}

/// Breadth-first propagation of known labels into the hole.
fn fill_holes_from_nearest(labels: &mut Grid<u16>, mask: &HoleMask) {
    let (h, w) = labels.shape();
    let mut done = Grid::from_fn(h, w, |r, c| !mask.is_hole(r, c));
    let mut queue: VecDeque<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).filter(|&(r, c)| done.get(r, c)).collect();
    while let Some((r, c)) = queue.pop_front() {
        let v = labels.get(r, c);
        for (nr, nc) in neighbours(r, c, h, w) {
            if !done.get(nr, nc) {
                done.set(nr, nc, true);
                labels.set(nr, nc, v);
                queue.push_back((nr, nc));
            }
        }
    }
}

fn neighbours(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    [
        (r.wrapping_sub(1), c),
        (r + 1, c),
        (r, c.wrapping_sub(1)),
        (r, c + 1),
    ]
    .into_iter()
    .filter(move |&(a, b)| a < h && b < w)
}

/// 4-connected components over non-zero labels, ids in raster-scan order.
fn components(labels: &Grid<u16>, min_area: usize) -> (Grid<u16>, InstanceMap) {
    let (h, w) = labels.shape();
    let mut ids = Grid::filled(h, w, 0u32);
    let mut next = 0u32;
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        let class = labels.get(r0, c0);
        if class == 0 || ids.get(r0, c0) != 0 {
            continue;
        }
        next += 1;
        let mut members = vec![(r0, c0)];
        ids.set(r0, c0, next);
        let mut i = 0;
        while i < members.len() {
            let (r, c) = members[i];
            i += 1;
            for (nr, nc) in neighbours(r, c, h, w) {
                if ids.get(nr, nc) == 0 && labels.get(nr, nc) == class {
                    ids.set(nr, nc, next);
                    members.push((nr, nc));
                }
            }
        }
        if members.len() < min_area {
            for (r, c) in members {
                ids.set(r, c, u32::MAX);
            }
            next -= 1;
        }
    }
    let ids = ids.map(|v| if v == u32::MAX { 0 } else { v });
    (labels.clone(), InstanceMap(ids).densified())
}

/// Returns the ground-truth maps of whichever reference scene agrees with the
/// image on its known pixels. Test double for the composition identity.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    scenes: Vec<PanopticScene>,
}

impl OracleSegmenter {
    pub fn new(scenes: Vec<PanopticScene>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::argument("scenes", "oracle needs at least one scene"));
        }
        Ok(OracleSegmenter { scenes })
    }
}

impl Segmenter for OracleSegmenter {
    fn tag(&self) -> &str {
        "oracle"
    }

    fn handles_incomplete(&self) -> bool {
        true
    }

    fn segment(&self, image: &RgbImage, mask: Option<&HoleMask>) -> Result<(SemanticMap, InstanceMap)> {
        let (h, w) = image.shape();
        // Count disagreeing pixels rather than summing errors: a completed
        // image matches its source exactly outside the hole, whatever the
        // hole holds.
        let score = |s: &PanopticScene| {
            let mut off = 0usize;
            for r in 0..h {
                for c in 0..w {
                    if mask.is_some_and(|m| m.is_hole(r, c)) {
                        continue;
                    }
                    let (a, b) = (image.pixel(r, c), s.image.pixel(r, c));
                    off += usize::from((0..3).any(|i| (a[i] - b[i]).abs() > 1e-6));
                }
            }
            off
        };
        let best = self
            .scenes
            .iter()
            .filter(|s| s.image.shape() == (h, w))
            .min_by_key(|s| score(s))
            .ok_or_else(|| Error::Pipeline(format!("oracle has no {h}x{w} scene")))?;
        Ok((best.semantic.clone(), best.instances.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Guidance-free completion first, then segment the completed image.
    #[default]
    InpaintThenSegment,
    /// Segment the incomplete image directly.
    SegmentIncomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub variant: Variant,
    /// Guidance-free inpainter; required by `inpaint_then_segment`.
    #[serde(default)]
    pub initial_checkpoint: Option<PathBuf>,
    #[serde(default = "default_segmenter")]
    pub segmenter: String,
    pub guided_checkpoint: PathBuf,
}

fn default_segmenter() -> String {
    "palette".into()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let mut cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        // relative checkpoint paths are taken relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.guided_checkpoint);
        if let Some(p) = cfg.initial_checkpoint.as_mut() {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::InpaintThenSegment && self.initial_checkpoint.is_none() {
            return Err(Error::Config(
                "variant inpaint_then_segment needs `initial_checkpoint`".into(),
            ));
        }
        Ok(())
    }
}

/// Final image plus the panoptic prediction that guided it.
#[derive(Debug, Clone)]
pub struct AutoCompletion {
    pub image: RgbImage,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
}

pub struct Pipeline {
    variant: Variant,
    initial: Option<Generator>,
    segmenter: Arc<dyn Segmenter>,
    guided: Generator,
    num_classes: usize,
}

impl Pipeline {
    pub fn new(
        variant: Variant,
        initial: Option<Generator>,
        segmenter: Arc<dyn Segmenter>,
        guided: Generator,
        num_classes: usize,
    ) -> Result<Self> {
        let want = GuidanceKind::Panoptic.channels(num_classes);
        if guided.config().guidance_channels != want {
            return Err(Error::Config(format!(
                "guided model takes {} guidance channels, panoptic K={num_classes} needs {want}",
                guided.config().guidance_channels
            )));
        }
        match variant {
            Variant::InpaintThenSegment if initial.is_none() => {
                return Err(Error::Config("inpaint_then_segment needs an initial inpainter".into()));
            }
            Variant::SegmentIncomplete if !segmenter.handles_incomplete() => {
                return Err(Error::Config(format!(
                    "segmenter `{}` cannot take incomplete images",
                    segmenter.tag()
                )));
            }
            _ => {}
        }
        Ok(Pipeline {
            variant,
            initial,
            segmenter,
            guided,
            num_classes,
        })
    }

    /// Loads both checkpoints named by `cfg`; K comes from the guided model.
    pub fn load(cfg: &PipelineConfig, segmenter: Arc<dyn Segmenter>) -> Result<Self> {
        cfg.validate()?;
        let (guided, meta) = checkpoint::load_generator(&cfg.guided_checkpoint)?;
        let initial = match &cfg.initial_checkpoint {
            Some(p) if cfg.variant == Variant::InpaintThenSegment => Some(checkpoint::load_generator(p)?.0),
            _ => None,
        };
        Pipeline::new(cfg.variant, initial, segmenter, guided, meta.config.num_classes)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn segmenter(&self) -> &dyn Segmenter {
        self.segmenter.as_ref()
    }

    /// The guidance-free completion alone.
    pub fn stage_one(&self, image: &RgbImage, mask: &HoleMask) -> Result<RgbImage> {
        let g = self
            .initial
            .as_ref()
            .ok_or_else(|| Error::Pipeline("no initial inpainter configured".into()))?;
        g.complete(image, mask, None)
    }

    pub fn auto_complete(&self, image: &RgbImage, mask: &HoleMask) -> Result<AutoCompletion> {
        if mask.shape() != image.shape() {
            return Err(Error::argument("mask", "mask shape differs from image"));
        }
        let (semantic, instances) = match self.variant {
            Variant::InpaintThenSegment => {
                let first = self.stage_one(image, mask)?;
                self.segmenter.segment(&first, None)?
            }
            Variant::SegmentIncomplete => self.segmenter.segment(&image.masked(mask, 0.0), Some(mask))?,
        };
        let (semantic, instances) = self.check_prediction(image, semantic, instances)?;
        let guidance = encode_panoptic(&semantic, &instances, self.num_classes)?;
        let out = self.guided.complete(image, mask, Some(&guidance))?;
        Ok(AutoCompletion {
            image: out,
            semantic,
            instances,
        })
    }

    fn check_prediction(
        &self,
        image: &RgbImage,
        semantic: SemanticMap,
        instances: InstanceMap,
    ) -> Result<(SemanticMap, InstanceMap)> {
        let tag = self.segmenter.tag();
        if semantic.shape() != image.shape() || instances.shape() != image.shape() {
            return Err(Error::Pipeline(format!("segmenter `{tag}` returned maps of the wrong size")));
        }
        if semantic.num_classes() != self.num_classes || semantic.data().iter().any(|&k| k as usize >= self.num_classes) {
            return Err(Error::Pipeline(format!(
                "segmenter `{tag}` produced classes outside K={}",
                self.num_classes
            )));
        }
        Ok((semantic, instances.densified()))
    }
}

/// Builds a segmenter by tag. `oracle` needs the reference scenes.
pub fn build_segmenter(
    tag: &str,
    num_classes: usize,
    palette: &Palette,
    reference: Option<Vec<PanopticScene>>,
) -> Result<Arc<dyn Segmenter>> {
    match tag {
        "palette" => Ok(Arc::new(PaletteSegmenter::new(palette.clone(), num_classes)?)),
        "oracle" => {
            let scenes = reference.ok_or_else(|| Error::Config("the oracle segmenter needs reference scenes".into()))?;
            Ok(Arc::new(OracleSegmenter::new(scenes)?))
        }
        other => Err(Error::Config(format!("unknown segmenter `{other}`"))),
    }
}

/// Result of a map edit: the hole and guidance to feed `complete`, plus the
/// edited maps themselves.
#[derive(Debug, Clone)]
pub struct Edit {
    pub mask: HoleMask,
    pub guidance: GuidanceMap,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
    /// Id of the inserted instance after re-densification.
    pub inserted_id: Option<u32>,
}

fn check_maps(semantic: &SemanticMap, instances: &InstanceMap) -> Result<()> {
    if semantic.shape() != instances.shape() {
        return Err(Error::argument("instances", "instance map shape differs from semantic map"));
    }
    Ok(())
}

fn finish(semantic: SemanticMap, instances: InstanceMap, hole: Grid<u8>, inserted: Option<u32>) -> Result<Edit> {
    let k = semantic.num_classes();
    let guidance = encode_panoptic(&semantic, &instances, k)?;
    Ok(Edit {
        mask: HoleMask::from_grid(hole)?,
        guidance,
        semantic,
        instances,
        inserted_id: inserted,
    })
}

fn footprint(pixels: &[(usize, usize)], h: usize, w: usize) -> Grid<u8> {
    let mut g = Grid::filled(h, w, 0u8);
    for &(r, c) in pixels {
        g.set(r, c, 1);
    }
    g
}

/// Relabels instance `id` to background and returns an object-shaped hole over it.
pub fn remove_instance(
    semantic: &SemanticMap,
    instances: &InstanceMap,
    id: u32,
    seed: u64,
    params: &ObjectMaskParams,
) -> Result<Edit> {
    check_maps(semantic, instances)?;
    if !instances.contains_id(id) {
        return Err(Error::argument("id", format!("instance {id} not present")));
    }
    let (h, w) = semantic.shape();
    let pixels = instances.pixels_of(id);
    let hole = object_mask(&pixels, h, w, seed, params)?;
    let mut sem = semantic.clone();
    let mut inst = instances.clone();
    for &(r, c) in &pixels {
        sem.set_class(r, c, 0);
        inst.set(r, c, 0);
    }
    finish(sem, inst.densified(), hole.0, None)
}

/// Paints a binary stencil as a new instance of `class_index` with its top-left
/// corner at `(row, col)`, occluding whatever was there.
pub fn insert_instance(
    semantic: &SemanticMap,
    instances: &InstanceMap,
    stencil: &Grid<u8>,
    class_index: u16,
    row: usize,
    col: usize,
    dilation: usize,
) -> Result<Edit> {
    check_maps(semantic, instances)?;
    let k = semantic.num_classes();
    if class_index as usize >= k {
        return Err(Error::argument("class_index", format!("{class_index} out of range for K={k}")));
    }
    if class_index == 0 {
        return Err(Error::argument("class_index", "class 0 is background"));
    }
    let (h, w) = semantic.shape();
    let (sh, sw) = stencil.shape();
    if row + sh > h || col + sw > w {
        return Err(Error::argument(
            "position",
            format!("{sh}x{sw} stencil at ({row}, {col}) leaves the {h}x{w} map"),
        ));
    }
    let mut pixels = Vec::new();
    for r in 0..sh {
        for c in 0..sw {
            if stencil.get(r, c) != 0 {
                pixels.push((row + r, col + c));
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::argument("shape", "stencil has no pixels"));
    }
    let new_id = instances.max_id() + 1;
    let mut sem = semantic.clone();
    let mut inst = instances.clone();
    for &(r, c) in &pixels {
        sem.set_class(r, c, class_index);
        inst.set(r, c, new_id);
    }
    // a fully occluded instance leaves a gap; densify keeps the new id last
    let inst = inst.densified();
    let final_id = inst.max_id();
    let hole = dilate_square(&footprint(&pixels, h, w), dilation);
    finish(sem, inst, hole, Some(final_id))
}

/// Changes the class of instance `id`, keeping its shape.
pub fn replace_instance(
    semantic: &SemanticMap,
    instances: &InstanceMap,
    id: u32,
    new_class_index: u16,
    dilation: usize,
) -> Result<Edit> {
    check_maps(semantic, instances)?;
    let k = semantic.num_classes();
    if !instances.contains_id(id) {
        return Err(Error::argument("id", format!("instance {id} not present")));
    }
    if new_class_index as usize >= k {
        return Err(Error::argument(
            "new_class_index",
            format!("{new_class_index} out of range for K={k}"),
        ));
    }
    let (h, w) = semantic.shape();
    let pixels = instances.pixels_of(id);
    let mut sem = semantic.clone();
    for &(r, c) in &pixels {
        sem.set_class(r, c, new_class_index);
    }
    let hole = dilate_square(&footprint(&pixels, h, w), dilation);
    finish(sem, instances.clone(), hole, None)
}
