//! Aligned object crops for the object-level discriminators.
//!
//! A crop is defined by a [`CropGeometry`]: the instance bbox is clamped to the
//! image, grown by a context margin and padded to a square, and an `S × S` grid
//! of sample positions is laid over it (pixel-centre convention, reflected
//! source padding). Continuous channels are resampled through a 2× nearest
//! upscale, a binomial low-pass (only when the crop minifies) and bilinear
//! interpolation; discrete channels use nearest sampling of the original maps.
//!
//! Both paths are separable, so each axis reduces to a sparse weight row per
//! output index. Training reuses the same rows as dense matrices to crop the
//! generator output inside the autograd graph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{instance_boundaries, GuidanceKind, GuidanceMap};
use crate::raster::{Grid, HoleMask, InstanceMap, RgbImage};

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    /// The box covering the single pixel at column `x`, row `y`.
    pub fn pixel(x: usize, y: usize) -> Self {
        BBox::new(x, y, x + 1, y + 1)
    }

    pub fn include(&mut self, x: usize, y: usize) {
        self.x0 = self.x0.min(x);
        self.y0 = self.y0.min(y);
        self.x1 = self.x1.max(x + 1);
        self.y1 = self.y1.max(y + 1);
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_valid_for(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height
    }

    /// Intersection with the image, or `None` when empty.
    pub fn clamped(&self, height: usize, width: usize) -> Option<BBox> {
        let b = BBox::new(self.x0.min(width), self.y0.min(height), self.x1.min(width), self.y1.min(height));
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Output side `S`.
    pub size: usize,
    /// Context added on each side, as a fraction of the bbox extent.
    pub margin: f32,
    /// Upscale factor applied before low-pass filtering.
    pub upscale: usize,
    /// Separable low-pass taps (normalised to sum 1 at use).
    pub lowpass: Vec<f32>,
    /// Minimum instance area for sampling, in pixels.
    pub min_area: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            size: 64,
            margin: 0.1,
            upscale: 2,
            lowpass: vec![1.0, 4.0, 6.0, 4.0, 1.0],
            min_area: 16,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!("crop size {} below 16", self.size)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("crop margin must be >= 0".into()));
        }
        if self.upscale == 0 {
            return Err(Error::Config("upscale factor must be positive".into()));
        }
        if self.lowpass.is_empty() || self.lowpass.len() % 2 == 0 || self.lowpass.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("low-pass kernel needs an odd number of nonnegative taps".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let sum: f64 = self.lowpass.iter().map(|&v| v as f64).sum();
        self.lowpass.iter().map(|&v| v as f64 / sum).collect()
    }
}

/// Symmetric (edge-repeating) reflection of `i` into `[0, n)`.
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Sparse resampling row: `(source index, weight)` pairs.
pub type WeightRow = Vec<(usize, f32)>;

/// Sample grid of one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CropGeometry {
    /// Bbox after clamping to the image.
    pub bbox: BBox,
    pub origin_x: f64,
    pub origin_y: f64,
    /// Side of the square sampled region, in source pixels.
    pub side: f64,
    pub size: usize,
    pub src_height: usize,
    pub src_width: usize,
    upscale: usize,
    kernel: Vec<f64>,
}

impl CropGeometry {
    pub fn new(bbox: BBox, src_height: usize, src_width: usize, cfg: &CropConfig) -> Result<Self> {
        cfg.validate()?;
        let b = bbox.clamped(src_height, src_width).ok_or_else(|| {
            Error::argument("bbox", format!("{bbox:?} is empty after clamping to {src_height}x{src_width}"))
        })?;
        let margin = cfg.margin as f64;
        let ew = b.width() as f64 * (1.0 + 2.0 * margin);
        let eh = b.height() as f64 * (1.0 + 2.0 * margin);
        let side = ew.max(eh);
        let cx = 0.5 * (b.x0 + b.x1) as f64;
        let cy = 0.5 * (b.y0 + b.y1) as f64;
        Ok(CropGeometry {
            bbox: b,
            origin_x: cx - 0.5 * side,
            origin_y: cy - 0.5 * side,
            side,
            size: cfg.size,
            src_height,
            src_width,
            upscale: cfg.upscale,
            kernel: cfg.kernel(),
        })
    }

    /// Source step between adjacent output samples.
    pub fn step(&self) -> f64 {
        self.side / self.size as f64
    }

    /// Low-pass filtering is applied only when the crop minifies.
    pub fn filters(&self) -> bool {
        self.step() > 1.0 + 1e-12
    }

    pub fn sample_x(&self, j: usize) -> f64 {
        self.origin_x + (j as f64 + 0.5) * self.step()
    }

    pub fn sample_y(&self, i: usize) -> f64 {
        self.origin_y + (i as f64 + 0.5) * self.step()
    }

    fn continuous_row(&self, pos: f64, src_len: usize, filter: bool) -> WeightRow {
        let s = self.upscale as i64;
        let up_len = self.upscale * src_len;
        let t = pos * self.upscale as f64 - 0.5;
        let k0 = t.floor();
        let frac = t - k0;
        let k0 = k0 as i64;
        let half = (self.kernel.len() / 2) as i64;
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (k, wk) in [(k0, 1.0 - frac), (k0 + 1, frac)] {
            if wk == 0.0 {
                continue;
            }
            if filter {
                for (a, &ka) in self.kernel.iter().enumerate() {
                    let idx = reflect_index(k + a as i64 - half, up_len) as i64 / s;
                    *acc.entry(idx as usize).or_default() += wk * ka;
                }
            } else {
                let idx = reflect_index(k, up_len) as i64 / s;
                *acc.entry(idx as usize).or_default() += wk;
            }
        }
        acc.into_iter().map(|(i, w)| (i, w as f32)).collect()
    }

    fn rows(&self, along_x: bool, filter: bool) -> Vec<WeightRow> {
        (0..self.size)
            .map(|j| {
                if along_x {
                    self.continuous_row(self.sample_x(j), self.src_width, filter)
                } else {
                    self.continuous_row(self.sample_y(j), self.src_height, filter)
                }
            })
            .collect()
    }

    /// Continuous-channel weights along x and y (upscale, optional low-pass, bilinear).
    pub fn continuous_weights(&self) -> (Vec<WeightRow>, Vec<WeightRow>) {
        let f = self.filters();
        (self.rows(false, f), self.rows(true, f))
    }

    /// Plain bilinear weights on the source grid with no prefilter.
    pub fn bilinear_weights(&self) -> (Vec<WeightRow>, Vec<WeightRow>) {
        let row = |pos: f64, len: usize| -> WeightRow {
            let t = pos - 0.5;
            let k0 = t.floor();
            let frac = t - k0;
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for (k, w) in [(k0 as i64, 1.0 - frac), (k0 as i64 + 1, frac)] {
                if w != 0.0 {
                    *acc.entry(reflect_index(k, len)).or_default() += w;
                }
            }
            acc.into_iter().map(|(i, w)| (i, w as f32)).collect()
        };
        (
            (0..self.size).map(|i| row(self.sample_y(i), self.src_height)).collect(),
            (0..self.size).map(|j| row(self.sample_x(j), self.src_width)).collect(),
        )
    }

    /// Nearest source row for each output row, and column for each output column.
    pub fn nearest_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |pos: f64, len: usize| reflect_index(pos.floor() as i64, len);
        (
            (0..self.size).map(|i| pick(self.sample_y(i), self.src_height)).collect(),
            (0..self.size).map(|j| pick(self.sample_x(j), self.src_width)).collect(),
        )
    }

    /// Dense `S × H` (rows) and `S × W` (columns) matrices of the continuous weights.
    pub fn dense_continuous(&self) -> (Vec<f32>, Vec<f32>) {
        let (ry, rx) = self.continuous_weights();
        (densify(&ry, self.src_height), densify(&rx, self.src_width))
    }
}

fn densify(rows: &[WeightRow], cols: usize) -> Vec<f32> {
    let mut m = vec![0f32; rows.len() * cols];
    for (i, row) in rows.iter().enumerate() {
        for &(j, w) in row {
            m[i * cols + j] = w;
        }
    }
    m
}

/// Applies separable weights to every channel plane of `image`.
pub fn apply_separable(image: &RgbImage, rows_y: &[WeightRow], rows_x: &[WeightRow]) -> RgbImage {
    let w = image.width();
    let (oh, ow) = (rows_y.len(), rows_x.len());
    let mut out = vec![0f32; 3 * oh * ow];
    let mut tmp = vec![0f32; oh * w];
    for ch in 0..3 {
        let plane = image.plane(ch);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in rows_y.iter().enumerate() {
            for &(src, wt) in row {
                let line = &plane[src * w..(src + 1) * w];
                for (t, &v) in tmp[i * w..(i + 1) * w].iter_mut().zip(line) {
                    *t += wt * v;
                }
            }
        }
        for i in 0..oh {
            for (j, row) in rows_x.iter().enumerate() {
                let mut acc = 0f32;
                for &(src, wt) in row {
                    acc += wt * tmp[i * w + src];
                }
                out[(ch * oh + i) * ow + j] = acc.clamp(-1.0, 1.0);
            }
        }
    }
    RgbImage::new(oh, ow, out).expect("resampled values are clamped and finite")
}

fn nearest_grid<T: Copy>(grid: &Grid<T>, ys: &[usize], xs: &[usize]) -> Grid<T> {
    Grid::from_fn(ys.len(), xs.len(), |i, j| grid.get(ys[i], xs[j]))
}

fn nearest_guidance(guidance: &GuidanceMap, ys: &[usize], xs: &[usize], ids: &Grid<u32>) -> Result<GuidanceMap> {
    let w = guidance.width();
    let (oh, ow) = (ys.len(), xs.len());
    let channels = guidance.channels();
    let mut data = Vec::with_capacity(channels * oh * ow);
    let semantic_channels = match guidance.kind() {
        GuidanceKind::Panoptic => channels - 1,
        _ => channels,
    };
    for ch in 0..semantic_channels {
        let plane = guidance.plane(ch);
        for &y in ys {
            for &x in xs {
                data.push(plane[y * w + x]);
            }
        }
    }
    if guidance.kind() == GuidanceKind::Panoptic {
        data.extend(instance_boundaries(ids).data().iter().map(|&b| b as f32));
    }
    GuidanceMap::from_raw(guidance.kind(), guidance.num_classes(), oh, ow, data)
}

/// The four aligned object inputs plus their source box.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCrop {
    pub image: RgbImage,
    pub mask: HoleMask,
    pub guidance: GuidanceMap,
    /// 1 where the nearest-sampled instance id equals `instance_id`.
    pub shape: Grid<u8>,
    pub bbox: BBox,
    pub instance_id: u32,
}

impl ObjectCrop {
    pub fn size(&self) -> usize {
        self.image.height()
    }
}

/// Minimal half-open box around the pixels of `id`.
pub fn instance_bbox(instances: &InstanceMap, id: u32) -> Result<BBox> {
    let mut bbox: Option<BBox> = None;
    for r in 0..instances.height() {
        for c in 0..instances.width() {
            if id > 0 && instances.get(r, c) == id {
                match &mut bbox {
                    None => bbox = Some(BBox::pixel(c, r)),
                    Some(b) => b.include(c, r),
                }
            }
        }
    }
    bbox.ok_or_else(|| Error::argument("id", format!("instance {id} not present")))
}

/// Uniformly picks one instance that overlaps the hole and has at least
/// `min_area` pixels. `None` when no instance qualifies.
pub fn sample_overlapping_instance(
    instances: &InstanceMap,
    mask: &HoleMask,
    seed: u64,
    min_area: usize,
) -> Result<Option<u32>> {
    if instances.shape() != mask.shape() {
        return Err(Error::argument("mask", "mask and instance map differ in shape"));
    }
    let areas = instances.areas();
    let mut overlap = vec![0usize; areas.len()];
    for (&id, &m) in instances.data().iter().zip(mask.data()) {
        if m == 1 {
            overlap[id as usize] += 1;
        }
    }
    let candidates: Vec<u32> = (1..areas.len())
        .filter(|&id| overlap[id] > 0 && areas[id] >= min_area)
        .map(|id| id as u32)
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Some(candidates[rng.random_range(0..candidates.len())]))
}

/// Builds the aligned `(image_c, mask_c, guidance_c, shape_c)` crop for instance `id`.
pub fn crop_align(
    image: &RgbImage,
    mask: &HoleMask,
    guidance: &GuidanceMap,
    instances: &InstanceMap,
    id: u32,
    bbox: BBox,
    cfg: &CropConfig,
) -> Result<ObjectCrop> {
    let shape = image.shape();
    if mask.shape() != shape {
        return Err(Error::argument("mask", "shape differs from image"));
    }
    if guidance.shape() != shape {
        return Err(Error::argument("guidance", "shape differs from image"));
    }
    if instances.shape() != shape {
        return Err(Error::argument("instances", "shape differs from image"));
    }
    if !instances.contains_id(id) {
        return Err(Error::argument("id", format!("instance {id} not present")));
    }
    let geom = CropGeometry::new(bbox, shape.0, shape.1, cfg)?;
    crop_with_geometry(image, mask, guidance, instances, id, &geom)
}

/// Same as [`crop_align`] with a precomputed geometry.
pub fn crop_with_geometry(
    image: &RgbImage,
    mask: &HoleMask,
    guidance: &GuidanceMap,
    instances: &InstanceMap,
    id: u32,
    geom: &CropGeometry,
) -> Result<ObjectCrop> {
    let (ry, rx) = geom.continuous_weights();
    let image_c = apply_separable(image, &ry, &rx);
    let (ys, xs) = geom.nearest_indices();
    let ids = nearest_grid(instances, &ys, &xs);
    let mask_c = HoleMask(nearest_grid(mask, &ys, &xs));
    let guidance_c = nearest_guidance(guidance, &ys, &xs, &ids)?;
    let shape_c = ids.map(|v| u8::from(v == id));
    Ok(ObjectCrop {
        image: image_c,
        mask: mask_c,
        guidance: guidance_c,
        shape: shape_c,
        bbox: geom.bbox,
        instance_id: id,
    })
}

/// Crop of the continuous channel with bilinear sampling only (no upscale or
/// low-pass), on the same sample grid.
pub fn naive_bilinear_crop(image: &RgbImage, geom: &CropGeometry) -> RgbImage {
    let (ry, rx) = geom.bilinear_weights();
    apply_separable(image, &ry, &rx)
}
