//! Plain raster containers shared by every module: images, label maps and masks.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Row-major `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::argument(
                "data",
                format!("expected {} elements for {height}x{width}, got {}", height * width, data.len()),
            ));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Grid::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        Grid::from_fn(height, width, |r, c| self.get(row0 + r, col0 + c))
    }
}

/// Three-channel image stored channel-major (`3 × H × W`) with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::argument("image", "empty image"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::argument(
                "image",
                format!("expected {} values for 3x{height}x{width}, got {}", 3 * height * width, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::argument("image", format!("value {v} outside [-1, 1]")));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        RgbImage { height, width, data }
    }

    /// Builds an image from a per-pixel closure; values are clamped into `[-1, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                for ch in 0..3 {
                    data[ch * plane + r * width + c] = px[ch].clamp(-1.0, 1.0);
                }
            }
        }
        RgbImage { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        [self.get(0, row, col), self.get(1, row, col), self.get(2, row, col)]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn flip_horizontal(&self) -> Self {
        RgbImage::from_fn(self.height, self.width, |r, c| self.pixel(r, self.width - 1 - c))
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        RgbImage::from_fn(height, width, |r, c| self.pixel(row0 + r, col0 + c))
    }

    /// Known pixels kept, hole pixels replaced by `fill`.
    pub fn masked(&self, mask: &HoleMask, fill: f32) -> Self {
        RgbImage::from_fn(self.height, self.width, |r, c| {
            if mask.is_hole(r, c) {
                [fill; 3]
            } else {
                self.pixel(r, c)
            }
        })
    }

    /// Snap every value onto the 8-bit grid used by PNG storage.
    pub fn quantized(&self) -> Self {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| byte_to_unit(unit_to_byte(v))).collect(),
        }
    }
}

/// `[-1, 1]` to an 8-bit level.
#[inline]
pub fn unit_to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// 8-bit level to `[-1, 1]`.
#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Per-pixel semantic class indices with the class count `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    labels: Grid<u16>,
    num_classes: usize,
}

impl SemanticMap {
    pub fn new(labels: Grid<u16>, num_classes: usize) -> Result<Self> {
        if num_classes < 1 {
            return Err(Error::argument("num_classes", "K must be positive"));
        }
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::argument(
                "semantic",
                format!("class index {bad} out of range for K={num_classes}"),
            ));
        }
        Ok(SemanticMap { labels, num_classes })
    }

    /// All pixels background (class 0).
    pub fn background(height: usize, width: usize, num_classes: usize) -> Self {
        SemanticMap {
            labels: Grid::filled(height, width, 0),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &Grid<u16> {
        &self.labels
    }

    pub fn into_labels(self) -> Grid<u16> {
        self.labels
    }

    /// Sets a label; the caller guarantees `class < K`.
    pub fn set_class(&mut self, row: usize, col: usize, class: u16) {
        debug_assert!((class as usize) < self.num_classes);
        self.labels.set(row, col, class);
    }

    pub fn flip_horizontal(&self) -> Self {
        SemanticMap {
            labels: self.labels.flip_horizontal(),
            num_classes: self.num_classes,
        }
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        SemanticMap {
            labels: self.labels.crop(row0, col0, height, width),
            num_classes: self.num_classes,
        }
    }
}

impl Deref for SemanticMap {
    type Target = Grid<u16>;
    fn deref(&self) -> &Grid<u16> {
        &self.labels
    }
}

/// Per-pixel instance ids; 0 is "no instance" and positive ids are dense `1..=n`
/// once [`InstanceMap::validate`] passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap(pub Grid<u32>);

impl InstanceMap {
    pub fn empty(height: usize, width: usize) -> Self {
        InstanceMap(Grid::filled(height, width, 0))
    }

    pub fn max_id(&self) -> u32 {
        self.0.data().iter().copied().max().unwrap_or(0)
    }

    /// Number of instances, assuming dense ids.
    pub fn instance_count(&self) -> usize {
        self.max_id() as usize
    }

    /// Pixel count per id, indexed by id (entry 0 counts background pixels).
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.max_id() as usize + 1];
        for &id in self.0.data() {
            areas[id as usize] += 1;
        }
        areas
    }

    pub fn contains_id(&self, id: u32) -> bool {
        id > 0 && self.0.data().contains(&id)
    }

    /// Checks that ids form `{0, 1, .., n}` with no gaps.
    pub fn validate(&self) -> Result<()> {
        let areas = self.areas();
        if let Some(missing) = (1..areas.len()).find(|&id| areas[id] == 0) {
            return Err(Error::Validation(format!(
                "instance ids are not dense: id {missing} missing below max id {}",
                areas.len() - 1
            )));
        }
        Ok(())
    }

    /// Remaps ids to `1..=n` in increasing order of the original id.
    pub fn densified(&self) -> InstanceMap {
        let mut remap = BTreeMap::new();
        for &id in self.0.data() {
            if id > 0 {
                remap.insert(id, 0u32);
            }
        }
        for (next, v) in remap.values_mut().enumerate() {
            *v = next as u32 + 1;
        }
        InstanceMap(self.0.map(|id| if id == 0 { 0 } else { remap[&id] }))
    }

    pub fn pixels_of(&self, id: u32) -> Vec<(usize, usize)> {
        let w = self.0.width();
        self.0
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == id)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        InstanceMap(self.0.flip_horizontal())
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Self {
        InstanceMap(self.0.crop(row0, col0, height, width))
    }
}

impl Deref for InstanceMap {
    type Target = Grid<u32>;
    fn deref(&self) -> &Grid<u32> {
        &self.0
    }
}

impl DerefMut for InstanceMap {
    fn deref_mut(&mut self) -> &mut Grid<u32> {
        &mut self.0
    }
}

/// Binary hole mask; 1 marks a pixel to be completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoleMask(pub Grid<u8>);

impl HoleMask {
    pub fn empty(height: usize, width: usize) -> Self {
        HoleMask(Grid::filled(height, width, 0))
    }

    pub fn full(height: usize, width: usize) -> Self {
        HoleMask(Grid::filled(height, width, 1))
    }

    pub fn from_grid(grid: Grid<u8>) -> Result<Self> {
        if grid.data().iter().any(|&v| v > 1) {
            return Err(Error::argument("mask", "mask values must be 0 or 1"));
        }
        Ok(HoleMask(grid))
    }

    #[inline]
    pub fn is_hole(&self, row: usize, col: usize) -> bool {
        self.0.get(row, col) == 1
    }

    pub fn hole_count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of pixels marked as hole.
    pub fn coverage(&self) -> f64 {
        self.hole_count() as f64 / self.0.data().len() as f64
    }

    pub fn union(&self, other: &HoleMask) -> HoleMask {
        HoleMask(Grid::from_fn(self.height(), self.width(), |r, c| {
            self.0.get(r, c) | other.0.get(r, c)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        HoleMask(self.0.flip_horizontal())
    }
}

impl Deref for HoleMask {
    type Target = Grid<u8>;
    fn deref(&self) -> &Grid<u8> {
        &self.0
    }
}

impl DerefMut for HoleMask {
    fn deref_mut(&mut self) -> &mut Grid<u8> {
        &mut self.0
    }
}
