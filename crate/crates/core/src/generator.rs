//! Conditional completion network with a simplified cascaded-modulation
//! decoder: a strided encoder yields a global code; every decoder level first
//! applies a convolution modulated by that code and then one modulated
//! pixelwise by the encoder skip feature.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{zero_block, GuidanceMap};
use crate::nn::{lrelu, Conv2d, Linear, ModulatedConv, ParamStore};
use crate::raster::{HoleMask, RgbImage};
use crate::tensors::{composite_image, guidance_tensor, images_tensor, masks_tensor, tensor_images};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// Global modulation followed by spatial (skip-feature) modulation.
    Cascaded,
    /// Global modulation with additive skip connections only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub levels: usize,
    pub max_channels: usize,
    pub guidance_channels: usize,
    pub modulation: Modulation,
    pub noise: bool,
    pub noise_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 16,
            levels: 4,
            max_channels: 64,
            guidance_channels: 5,
            modulation: Modulation::Cascaded,
            noise: false,
            noise_dim: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 {
            return Err(Error::Config(format!("generator levels must be >= 3, got {}", self.levels)));
        }
        if self.width < 8 {
            return Err(Error::Config(format!("generator width must be >= 8, got {}", self.width)));
        }
        if self.max_channels < self.width {
            return Err(Error::Config("max_channels must be >= width".into()));
        }
        if self.noise && self.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be positive when noise is enabled".into()));
        }
        Ok(())
    }

    /// Channel count at resolution level `l` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        (self.width << level).min(self.max_channels)
    }

    pub fn input_channels(&self) -> usize {
        3 + 1 + self.guidance_channels
    }

    pub fn style_dim(&self) -> usize {
        self.channels(self.levels - 1)
    }

    /// Spatial dimensions must be divisible by this factor.
    pub fn stride_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Closed-form parameter count of the network this config describes.
    pub fn parameter_count(&self) -> usize {
        let ch = |l| self.channels(l);
        let s = self.style_dim();
        let last = self.levels - 1;
        let mut n = Conv2d::param_count(self.input_channels(), ch(0), 3);
        for l in 1..self.levels {
            n += Conv2d::param_count(ch(l - 1), ch(l), 3);
        }
        n += Linear::param_count(ch(last), s);
        if self.noise {
            n += Linear::param_count(self.noise_dim, s);
        }
        for l in (0..self.levels).rev() {
            let cin = if l == last { ch(last) } else { ch(l + 1) };
            n += ModulatedConv::param_count(s, cin, ch(l), 3);
            n += match self.modulation {
                Modulation::Cascaded => 2 * Conv2d::param_count(ch(l), ch(l), 1) + Conv2d::param_count(ch(l), ch(l), 3),
                Modulation::Plain => Conv2d::param_count(ch(l), ch(l), 1) + Conv2d::param_count(ch(l), ch(l), 3),
            };
        }
        n + Conv2d::param_count(ch(0), 3, 1)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    global: ModulatedConv,
    gamma: Option<Conv2d>,
    beta: Conv2d,
    conv: Conv2d,
}

/// Generator parameters plus the layer graph built over them.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    input: Conv2d,
    down: Vec<Conv2d>,
    style: Linear,
    noise: Option<Linear>,
    decoder: Vec<DecoderLevel>,
    to_rgb: Conv2d,
}

impl Generator {
    /// Deterministic initialization from `seed`.
    pub fn init(seed: u64, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, true);
        let ch = |l| config.channels(l);
        let s = config.style_dim();
        let last = config.levels - 1;
        let input = Conv2d::new(&mut store, "enc.input", config.input_channels(), ch(0), 3, 1, 1)?;
        let down = (1..config.levels)
            .map(|l| Conv2d::new(&mut store, &format!("enc.down{l}"), ch(l - 1), ch(l), 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let style = Linear::new(&mut store, "enc.style", ch(last), s, 0.0)?;
        let noise = if config.noise {
            Some(Linear::new(&mut store, "enc.noise", config.noise_dim, s, 0.0)?)
        } else {
            None
        };
        let mut decoder = Vec::with_capacity(config.levels);
        for l in (0..config.levels).rev() {
            let cin = if l == last { ch(last) } else { ch(l + 1) };
            let p = format!("dec{l}");
            let global = ModulatedConv::new(&mut store, &format!("{p}.global"), s, cin, ch(l), 3)?;
            let gamma = match config.modulation {
                Modulation::Cascaded => Some(Conv2d::new(&mut store, &format!("{p}.gamma"), ch(l), ch(l), 1, 1, 1)?),
                Modulation::Plain => None,
            };
            let beta = Conv2d::new(&mut store, &format!("{p}.beta"), ch(l), ch(l), 1, 1, 1)?;
            let conv = Conv2d::new(&mut store, &format!("{p}.conv"), ch(l), ch(l), 3, 1, 1)?;
            decoder.push(DecoderLevel { global, gamma, beta, conv });
        }
        let to_rgb = Conv2d::new(&mut store, "to_rgb", ch(0), 3, 1, 1, 1)?;
        log::debug!(
            "generator initialized: {} parameters (closed form {})",
            store.parameter_count(),
            config.parameter_count()
        );
        Ok(Generator {
            config,
            store,
            input,
            down,
            style,
            noise,
            decoder,
            to_rgb,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Raw output in `(-1, 1)` for input tensors `image (N,3,H,W)`, `mask (N,1,H,W)`,
    /// `guidance (N,C_g,H,W)`. The known region of `image` is zeroed internally.
    pub fn forward(&self, image: &Tensor, mask: &Tensor, guidance: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        let (n, _, h, w) = image.dims4()?;
        let m = self.config.stride_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::argument("image", format!("{h}x{w} is not divisible by {m}")));
        }
        if guidance.dim(1)? != self.config.guidance_channels {
            return Err(Error::argument(
                "guidance",
                format!("expected {} channels, got {}", self.config.guidance_channels, guidance.dim(1)?),
            ));
        }
        let keep = mask.affine(-1.0, 1.0)?;
        let x = Tensor::cat(&[&image.broadcast_mul(&keep)?, mask, guidance], 1)?;
        let mut feats = vec![lrelu(&self.input.forward(&x)?)?];
        for conv in &self.down {
            let next = lrelu(&conv.forward(feats.last().expect("nonempty"))?)?;
            feats.push(next);
        }
        let deepest = feats.last().expect("nonempty");
        let pooled = deepest.mean((2, 3))?;
        let mut style = lrelu(&self.style.forward(&pooled)?)?;
        if let Some(proj) = &self.noise {
            let z = match noise {
                Some(z) => z.clone(),
                None => Tensor::zeros((n, self.config.noise_dim), DType::F32, &Device::Cpu)?,
            };
            style = (style + proj.forward(&z)?)?;
        }
        let mut d = deepest.clone();
        for (i, level) in self.decoder.iter().enumerate() {
            let l = self.config.levels - 1 - i;
            if i > 0 {
                d = d.upsample_nearest2d(d.dim(2)? * 2, d.dim(3)? * 2)?;
            }
            d = lrelu(&level.global.forward(&d, &style)?)?;
            let skip = &feats[l];
            d = match &level.gamma {
                Some(gamma) => {
                    let g = (gamma.forward(skip)? + 1.0)?;
                    (level.conv.forward(&(d * g)?)? + level.beta.forward(skip)?)?
                }
                None => level.conv.forward(&(d + level.beta.forward(skip)?)?)?,
            };
            d = lrelu(&d)?;
        }
        Ok(self.to_rgb.forward(&d)?.tanh()?)
    }

    /// Completes one image; guidance `None` feeds an all-zero guidance block.
    pub fn complete(&self, image: &RgbImage, mask: &HoleMask, guidance: Option<&GuidanceMap>) -> Result<RgbImage> {
        if mask.shape() != image.shape() {
            return Err(Error::argument("mask", "mask shape differs from image"));
        }
        if mask.hole_count() == 0 {
            return Ok(image.clone());
        }
        let (h, w) = image.shape();
        let g = match guidance {
            Some(g) => {
                if g.shape() != image.shape() {
                    return Err(Error::argument("guidance", "guidance shape differs from image"));
                }
                guidance_tensor(&[g])?
            }
            None => {
                let c = self.config.guidance_channels;
                Tensor::from_vec(zero_block(c, h, w), (1, c, h, w), &Device::Cpu)?
            }
        };
        let raw = self.forward(&images_tensor(&[image])?, &masks_tensor(&[mask])?, &g, None)?;
        let raw = tensor_images(&raw.detach())?.remove(0);
        composite_image(&raw, image, mask)
    }
}

/// Deterministic generator initialization.
pub fn init_generator(seed: u64, config: GeneratorConfig) -> Result<Generator> {
    Generator::init(seed, config)
}
