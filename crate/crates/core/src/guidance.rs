//! Guidance-map encoders: edge, semantic one-hot and panoptic
//! (one-hot plus an instance-boundary channel).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, InstanceMap, RgbImage, SemanticMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Edge,
    Semantic,
    Panoptic,
}

impl GuidanceKind {
    pub fn channels(self, num_classes: usize) -> usize {
        match self {
            GuidanceKind::Edge => 1,
            GuidanceKind::Semantic => num_classes,
            GuidanceKind::Panoptic => num_classes + 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceKind::Edge => "edge",
            GuidanceKind::Semantic => "semantic",
            GuidanceKind::Panoptic => "panoptic",
        }
    }
}

impl std::str::FromStr for GuidanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(GuidanceKind::Edge),
            "semantic" => Ok(GuidanceKind::Semantic),
            "panoptic" => Ok(GuidanceKind::Panoptic),
            other => Err(Error::argument("guidance_kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// Channel-major `C_g × H × W` conditioning map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    kind: GuidanceKind,
    num_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GuidanceMap {
    /// Wraps raw channels after checking the per-kind invariants.
    pub fn from_raw(kind: GuidanceKind, num_classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let map = GuidanceMap {
            kind,
            num_classes: if kind == GuidanceKind::Edge { 0 } else { num_classes },
            height,
            width,
            data,
        };
        map.check_invariants()?;
        Ok(map)
    }

    pub fn kind(&self) -> GuidanceKind {
        self.kind
    }

    /// `K`; zero for edge maps.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.kind.channels(self.num_classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// The instance-boundary plane of a panoptic map.
    pub fn boundary_plane(&self) -> Option<&[f32]> {
        (self.kind == GuidanceKind::Panoptic).then(|| self.plane(self.num_classes))
    }

    /// Per-pixel argmax over the semantic channels.
    pub fn semantic_argmax(&self) -> Option<Grid<u16>> {
        if self.kind == GuidanceKind::Edge {
            return None;
        }
        Some(Grid::from_fn(self.height, self.width, |r, c| {
            let mut best = 0;
            for k in 1..self.num_classes {
                if self.get(k, r, c) > self.get(best, r, c) {
                    best = k;
                }
            }
            best as u16
        }))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let plane = self.height * self.width;
        let c = self.channels();
        if self.data.len() != c * plane {
            return Err(Error::Validation(format!(
                "{} guidance expects {c} channels of {}x{}, got {} values",
                self.kind.as_str(),
                self.height,
                self.width,
                self.data.len()
            )));
        }
        let binary = |v: f32| v == 0.0 || v == 1.0;
        if !self.data.iter().all(|&v| binary(v)) {
            return Err(Error::Validation("guidance values must be 0 or 1".into()));
        }
        if self.kind != GuidanceKind::Edge {
            for i in 0..plane {
                let sum: f32 = (0..self.num_classes).map(|k| self.data[k * plane + i]).sum();
                if sum != 1.0 {
                    return Err(Error::Validation(format!("semantic channels not one-hot at pixel {i}")));
                }
            }
        }
        Ok(())
    }
}

fn one_hot(semantic: &SemanticMap, num_classes: usize, extra: usize) -> Vec<f32> {
    let plane = semantic.height() * semantic.width();
    let mut data = vec![0f32; (num_classes + extra) * plane];
    for (i, &k) in semantic.data().iter().enumerate() {
        data[k as usize * plane + i] = 1.0;
    }
    data
}

/// `K`-channel one-hot encoding of a semantic map.
pub fn encode_semantic(semantic: &SemanticMap, num_classes: usize) -> Result<GuidanceMap> {
    if let Some(&bad) = semantic.data().iter().find(|&&k| k as usize >= num_classes) {
        return Err(Error::argument(
            "semantic",
            format!("class index {bad} out of range for K={num_classes}"),
        ));
    }
    Ok(GuidanceMap {
        kind: GuidanceKind::Semantic,
        num_classes,
        height: semantic.height(),
        width: semantic.width(),
        data: one_hot(semantic, num_classes, 0),
    })
}

/// 1 where some 4-neighbour carries a different instance id.
pub fn instance_boundaries(instances: &Grid<u32>) -> Grid<u8> {
    let (h, w) = instances.shape();
    Grid::from_fn(h, w, |r, c| {
        let id = instances.get(r, c);
        let differs = (r > 0 && instances.get(r - 1, c) != id)
            || (r + 1 < h && instances.get(r + 1, c) != id)
            || (c > 0 && instances.get(r, c - 1) != id)
            || (c + 1 < w && instances.get(r, c + 1) != id);
        u8::from(differs)
    })
}

/// One-hot semantic channels followed by the instance-boundary channel.
pub fn encode_panoptic(semantic: &SemanticMap, instances: &InstanceMap, num_classes: usize) -> Result<GuidanceMap> {
    if semantic.shape() != instances.shape() {
        return Err(Error::argument(
            "instances",
            format!("shape {:?} differs from semantic {:?}", instances.shape(), semantic.shape()),
        ));
    }
    if let Some(&bad) = semantic.data().iter().find(|&&k| k as usize >= num_classes) {
        return Err(Error::argument(
            "semantic",
            format!("class index {bad} out of range for K={num_classes}"),
        ));
    }
    let plane = semantic.height() * semantic.width();
    let mut data = one_hot(semantic, num_classes, 1);
    let boundary = instance_boundaries(instances);
    for (i, &b) in boundary.data().iter().enumerate() {
        data[num_classes * plane + i] = b as f32;
    }
    Ok(GuidanceMap {
        kind: GuidanceKind::Panoptic,
        num_classes,
        height: semantic.height(),
        width: semantic.width(),
        data,
    })
}

/// Default hysteresis thresholds, in Sobel-magnitude units on `[-1, 1]` luma.
pub const EDGE_LOW: f32 = 0.4;
pub const EDGE_HIGH: f32 = 0.8;

pub fn luma(image: &RgbImage) -> Grid<f32> {
    Grid::from_fn(image.height(), image.width(), |r, c| {
        let [red, green, blue] = image.pixel(r, c);
        0.299 * red + 0.587 * green + 0.114 * blue
    })
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(gray: &Grid<f32>) -> Grid<f32> {
    let (h, w) = gray.shape();
    let at = |r: isize, c: isize| gray.get(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize);
    Grid::from_fn(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
        let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Binary edge map: Sobel magnitude with two-threshold hysteresis
/// (weak pixels kept when 8-connected to a strong pixel).
pub fn encode_edge(image: &RgbImage, low: f32, high: f32) -> Result<GuidanceMap> {
    if !(low > 0.0 && low <= high) {
        return Err(Error::argument("thresholds", "require 0 < low <= high"));
    }
    let mag = sobel_magnitude(&luma(image));
    let (h, w) = mag.shape();
    let mut edge = Grid::filled(h, w, 0u8);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mag.get(r, c) >= high {
                edge.set(r, c, 1);
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                if edge.get(rr, cc) == 0 && mag.get(rr, cc) >= low {
                    edge.set(rr, cc, 1);
                    stack.push((rr, cc));
                }
            }
        }
    }
    Ok(edge_from_grid(&edge))
}

/// Wraps a binary grid (e.g. a hand-drawn sketch) as edge guidance.
pub fn edge_from_grid(edge: &Grid<u8>) -> GuidanceMap {
    GuidanceMap {
        kind: GuidanceKind::Edge,
        num_classes: 0,
        height: edge.height(),
        width: edge.width(),
        data: edge.data().iter().map(|&v| f32::from(v.min(1))).collect(),
    }
}

/// The guidance block fed to a guidance-free model: zeros with the channel
/// count of `kind`. Does not satisfy one-hot invariants by construction.
pub fn zero_block(channels: usize, height: usize, width: usize) -> Vec<f32> {
    vec![0.0; channels * height * width]
}
