//! Hole-mask generation: free-form brush strokes and object-shaped masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, HoleMask, InstanceMap};
use crate::scenes::PanopticScene;

/// Inclusive `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy> Interval<T> {
    pub const fn new(min: T, max: T) -> Self {
        Interval { min, max }
    }

    fn is_valid(&self) -> bool {
        self.min <= self.max
    }
}

impl Interval<usize> {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

impl Interval<f32> {
    fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Free-form stroke parameters. Widths, lengths and rectangle sides are fractions
/// of the image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeMaskParams {
    pub strokes: Interval<usize>,
    pub vertices: Interval<usize>,
    /// Brush width as a fraction of `min(H, W)`.
    pub brush_width: Interval<f32>,
    /// Segment length as a fraction of `min(H, W)`.
    pub segment_length: Interval<f32>,
    pub rectangles: Interval<usize>,
    /// Rectangle side as a fraction of the matching image side.
    pub rectangle_size: Interval<f32>,
}

impl Default for StrokeMaskParams {
    fn default() -> Self {
        StrokeMaskParams {
            strokes: Interval::new(1, 8),
            vertices: Interval::new(4, 18),
            brush_width: Interval::new(0.02, 0.12),
            segment_length: Interval::new(0.05, 0.25),
            rectangles: Interval::new(0, 4),
            rectangle_size: Interval::new(0.05, 0.3),
        }
    }
}

impl StrokeMaskParams {
    /// No strokes and no rectangles.
    pub fn none() -> Self {
        StrokeMaskParams {
            strokes: Interval::new(0, 0),
            rectangles: Interval::new(0, 0),
            ..Self::default()
        }
    }

    /// The small scribble optionally added on top of object masks.
    pub fn small() -> Self {
        StrokeMaskParams {
            strokes: Interval::new(1, 2),
            vertices: Interval::new(2, 5),
            brush_width: Interval::new(0.02, 0.05),
            segment_length: Interval::new(0.05, 0.15),
            rectangles: Interval::new(0, 0),
            rectangle_size: Interval::new(0.05, 0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.strokes.is_valid()
            && self.vertices.is_valid()
            && self.vertices.min >= 1
            && self.brush_width.is_valid()
            && self.brush_width.min >= 0.0
            && self.segment_length.is_valid()
            && self.segment_length.min >= 0.0
            && self.rectangles.is_valid()
            && self.rectangle_size.is_valid()
            && self.rectangle_size.min >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::argument("stroke_params", "ranges must be nonempty with nonnegative bounds"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMaskParams {
    /// Chebyshev dilation radius in pixels.
    pub dilation: usize,
    /// Maximum absolute translation per axis, in pixels.
    pub jitter: usize,
    /// Probability of adding a small stroke mask on top.
    pub stroke_union_prob: f64,
    pub stroke: StrokeMaskParams,
}

impl ObjectMaskParams {
    /// Size-relative defaults: dilation 5% of `min(H, W)` (at least 1 px),
    /// jitter 3%, stroke union with probability 0.2.
    pub fn for_size(height: usize, width: usize) -> Self {
        let m = height.min(width) as f32;
        ObjectMaskParams {
            dilation: ((0.05 * m).round() as usize).max(1),
            jitter: (0.03 * m).round() as usize,
            stroke_union_prob: 0.2,
            stroke: StrokeMaskParams::small(),
        }
    }

    /// Pure dilation of the shape: no jitter, no extra strokes.
    pub fn dilation_only(dilation: usize) -> Self {
        ObjectMaskParams {
            dilation,
            jitter: 0,
            stroke_union_prob: 0.0,
            stroke: StrokeMaskParams::none(),
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(Error::argument("size", format!("{height}x{width} below the 16 px minimum")));
    }
    Ok(())
}

/// Marks every pixel whose centre lies within `radius` of segment `p`–`q`.
fn fill_capsule(grid: &mut Grid<u8>, p: (f32, f32), q: (f32, f32), radius: f32) {
    let (h, w) = grid.shape();
    let r0 = ((p.0.min(q.0) - radius).floor().max(0.0)) as usize;
    let r1 = ((p.0.max(q.0) + radius).ceil().max(0.0) as usize).min(h);
    let c0 = ((p.1.min(q.1) - radius).floor().max(0.0)) as usize;
    let c1 = ((p.1.max(q.1) + radius).ceil().max(0.0) as usize).min(w);
    let (dy, dx) = (q.0 - p.0, q.1 - p.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for r in r0..r1 {
        for c in c0..c1 {
            let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
            let t = if len2 > 0.0 {
                (((y - p.0) * dy + (x - p.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ey, ex) = (p.0 + t * dy - y, p.1 + t * dx - x);
            if ey * ey + ex * ex <= r2 {
                grid.set(r, c, 1);
            }
        }
    }
}

fn draw_strokes(grid: &mut Grid<u8>, rng: &mut ChaCha8Rng, params: &StrokeMaskParams) {
    let (h, w) = grid.shape();
    let m = h.min(w) as f32;
    let strokes = params.strokes.sample(rng);
    for _ in 0..strokes {
        let vertices = params.vertices.sample(rng);
        let radius = 0.5 * params.brush_width.sample(rng) * m;
        let mut p = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let mut angle = rng.random_range(0.0..std::f32::consts::TAU);
        fill_capsule(grid, p, p, radius);
        for _ in 1..vertices {
            angle += rng.random_range(-1.2f32..1.2);
            let len = params.segment_length.sample(rng) * m;
            let q = (
                (p.0 + len * angle.sin()).clamp(0.0, h as f32),
                (p.1 + len * angle.cos()).clamp(0.0, w as f32),
            );
            fill_capsule(grid, p, q, radius);
            p = q;
        }
    }
    let rects = params.rectangles.sample(rng);
    for _ in 0..rects {
        let rh = ((params.rectangle_size.sample(rng) * h as f32).round() as usize).clamp(1, h);
        let rw = ((params.rectangle_size.sample(rng) * w as f32).round() as usize).clamp(1, w);
        let r0 = rng.random_range(0..=h - rh);
        let c0 = rng.random_range(0..=w - rw);
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                grid.set(r, c, 1);
            }
        }
    }
}

/// Free-form mask of round-capped polyline strokes plus filled rectangles.
pub fn random_stroke_mask(seed: u64, height: usize, width: usize, params: &StrokeMaskParams) -> Result<HoleMask> {
    check_dims(height, width)?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = Grid::filled(height, width, 0u8);
    draw_strokes(&mut grid, &mut rng, params);
    Ok(HoleMask(grid))
}

/// Dilates a binary grid with a `(2r+1)²` square structuring element.
pub fn dilate_square(grid: &Grid<u8>, radius: usize) -> Grid<u8> {
    if radius == 0 {
        return grid.clone();
    }
    let (h, w) = grid.shape();
    let horizontal = Grid::from_fn(h, w, |r, c| {
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(w - 1);
        (lo..=hi).map(|cc| grid.get(r, cc)).max().unwrap_or(0)
    });
    Grid::from_fn(h, w, |r, c| {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        (lo..=hi).map(|rr| horizontal.get(rr, c)).max().unwrap_or(0)
    })
}

/// Object-shaped hole: the (optionally translated) instance shape dilated by
/// `params.dilation`, optionally unioned with a small stroke mask.
pub fn object_mask(
    pixels: &[(usize, usize)],
    height: usize,
    width: usize,
    seed: u64,
    params: &ObjectMaskParams,
) -> Result<HoleMask> {
    if pixels.is_empty() {
        return Err(Error::argument("instance_pixels", "instance pixel set is empty"));
    }
    if let Some(&(r, c)) = pixels.iter().find(|&&(r, c)| r >= height || c >= width) {
        return Err(Error::argument(
            "instance_pixels",
            format!("pixel ({r}, {c}) outside {height}x{width}"),
        ));
    }
    if !(0.0..=1.0).contains(&params.stroke_union_prob) {
        return Err(Error::argument("stroke_union_prob", "must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = params.jitter as i64;
    let (dy, dx) = if j > 0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0, 0)
    };
    let mut shape = Grid::filled(height, width, 0u8);
    let mut any = false;
    for &(r, c) in pixels {
        let (rr, cc) = (r as i64 + dy, c as i64 + dx);
        if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
            shape.set(rr as usize, cc as usize, 1);
            any = true;
        }
    }
    if !any {
        for &(r, c) in pixels {
            shape.set(r, c, 1);
        }
    }
    let mut grid = dilate_square(&shape, params.dilation);
    if params.stroke_union_prob > 0.0 && rng.random_bool(params.stroke_union_prob) {
        params.stroke.validate()?;
        draw_strokes(&mut grid, &mut rng, &params.stroke);
    }
    Ok(HoleMask(grid))
}

/// How training and evaluation masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskScheme {
    Stroke,
    Object,
    /// Object mask with probability `object_prob`, stroke mask otherwise.
    Mixed { object_prob: f64 },
}

impl MaskScheme {
    pub fn tag(&self) -> String {
        match self {
            MaskScheme::Stroke => "stroke".into(),
            MaskScheme::Object => "object".into(),
            MaskScheme::Mixed { object_prob } => format!("mixed({object_prob})"),
        }
    }
}

impl std::str::FromStr for MaskScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stroke" => Ok(MaskScheme::Stroke),
            "object" => Ok(MaskScheme::Object),
            "mixed" => Ok(MaskScheme::Mixed { object_prob: 0.5 }),
            other => Err(Error::argument("mask_scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskOptions {
    pub stroke: StrokeMaskParams,
    /// Object-mask parameters; `None` uses [`ObjectMaskParams::for_size`].
    pub object: Option<ObjectMaskParams>,
    /// Redraw stroke masks until they touch at least one instance.
    pub require_instance_overlap: bool,
    pub max_attempts: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            stroke: StrokeMaskParams::default(),
            object: None,
            require_instance_overlap: false,
            max_attempts: 16,
        }
    }
}

fn overlaps_instance(mask: &HoleMask, instances: &InstanceMap) -> bool {
    mask.data().iter().zip(instances.data()).any(|(&m, &id)| m == 1 && id > 0)
}

/// Draws one mask for `scene` under `scheme`. Scenes without instances fall
/// back to stroke masks.
pub fn sample_mask(scene: &PanopticScene, scheme: MaskScheme, seed: u64, opts: &MaskOptions) -> Result<HoleMask> {
    let (h, w) = scene.image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let use_object = match scheme {
        MaskScheme::Stroke => false,
        MaskScheme::Object => true,
        MaskScheme::Mixed { object_prob } => rng.random_bool(object_prob.clamp(0.0, 1.0)),
    };
    if use_object && !scene.annotations.is_empty() {
        let ann = scene.annotations[rng.random_range(0..scene.annotations.len())];
        let params = opts.object.clone().unwrap_or_else(|| ObjectMaskParams::for_size(h, w));
        return object_mask(&scene.instances.pixels_of(ann.id), h, w, rng.random(), &params);
    }
    let attempts = if opts.require_instance_overlap && !scene.annotations.is_empty() {
        opts.max_attempts.max(1)
    } else {
        1
    };
    let mut mask = random_stroke_mask(rng.random(), h, w, &opts.stroke)?;
    for _ in 1..attempts {
        if overlaps_instance(&mask, &scene.instances) {
            break;
        }
        mask = random_stroke_mask(rng.random(), h, w, &opts.stroke)?;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_params_give_empty_mask() {
        let mask = random_stroke_mask(3, 32, 32, &StrokeMaskParams::none()).unwrap();
        assert_eq!(mask.hole_count(), 0);
    }

    #[test]
    fn stroke_mask_is_deterministic_and_binary() {
        let p = StrokeMaskParams::default();
        let a = random_stroke_mask(11, 64, 48, &p).unwrap();
        let b = random_stroke_mask(11, 64, 48, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (64, 48));
        assert!(a.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn small_dims_rejected() {
        assert!(random_stroke_mask(0, 8, 64, &StrokeMaskParams::default()).is_err());
    }

    #[test]
    fn object_mask_identity_without_dilation() {
        let pixels = vec![(3, 4), (3, 5), (4, 4), (10, 12)];
        let mask = object_mask(&pixels, 16, 16, 9, &ObjectMaskParams::dilation_only(0)).unwrap();
        assert_eq!(mask.hole_count(), pixels.len());
        for &(r, c) in &pixels {
            assert!(mask.is_hole(r, c));
        }
    }

    #[test]
    fn object_mask_rejects_empty_set() {
        let err = object_mask(&[], 16, 16, 0, &ObjectMaskParams::dilation_only(1)).unwrap_err();
        assert!(matches!(err, Error::Argument { .. }));
    }

    #[test]
    fn size_defaults() {
        let p = ObjectMaskParams::for_size(64, 64);
        assert_eq!(p.dilation, 3);
        assert_eq!(p.jitter, 2);
        let tiny = ObjectMaskParams::for_size(16, 16);
        assert_eq!(tiny.dilation, 1);
    }
}
