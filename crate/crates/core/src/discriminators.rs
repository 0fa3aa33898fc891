//! The discriminator ensemble: a conditional image-level discriminator, an
//! image-level semantic discriminator fusing a frozen vision encoder with a
//! trainable convolutional branch, and their object-level counterparts over
//! aligned crops.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lrelu, minibatch_stddev, softmax_last, Conv2d, Linear, ParamStore};
use crate::tensors::resize_square;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Member {
    ImageD,
    ImageSemanticD,
    ObjectD,
    ObjectSemanticD,
}

impl Member {
    pub const ALL: [Member; 4] = [Member::ImageD, Member::ImageSemanticD, Member::ObjectD, Member::ObjectSemanticD];

    pub fn as_str(self) -> &'static str {
        match self {
            Member::ImageD => "image_d",
            Member::ImageSemanticD => "image_semantic_d",
            Member::ObjectD => "object_d",
            Member::ObjectSemanticD => "object_semantic_d",
        }
    }

    pub fn is_object(self) -> bool {
        matches!(self, Member::ObjectD | Member::ObjectSemanticD)
    }

    pub fn is_semantic(self) -> bool {
        matches!(self, Member::ImageSemanticD | Member::ObjectSemanticD)
    }

    fn seed_offset(self) -> u64 {
        match self {
            Member::ImageD => 1,
            Member::ImageSemanticD => 2,
            Member::ObjectD => 3,
            Member::ObjectSemanticD => 4,
        }
    }
}

impl std::str::FromStr for Member {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Member::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::argument("member", format!("unknown discriminator `{s}`")))
    }
}

/// Which members take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Enabled {
    pub image_d: bool,
    pub image_semantic_d: bool,
    pub object_d: bool,
    pub object_semantic_d: bool,
}

impl Default for Enabled {
    fn default() -> Self {
        Enabled::all()
    }
}

impl Enabled {
    pub fn all() -> Self {
        Enabled {
            image_d: true,
            image_semantic_d: true,
            object_d: true,
            object_semantic_d: true,
        }
    }

    pub fn image_only() -> Self {
        Enabled {
            image_d: true,
            image_semantic_d: false,
            object_d: false,
            object_semantic_d: false,
        }
    }

    pub fn get(&self, m: Member) -> bool {
        match m {
            Member::ImageD => self.image_d,
            Member::ImageSemanticD => self.image_semantic_d,
            Member::ObjectD => self.object_d,
            Member::ObjectSemanticD => self.object_semantic_d,
        }
    }

    pub fn set(&mut self, m: Member, on: bool) {
        match m {
            Member::ImageD => self.image_d = on,
            Member::ImageSemanticD => self.image_semantic_d = on,
            Member::ObjectD => self.object_d = on,
            Member::ObjectSemanticD => self.object_semantic_d = on,
        }
    }

    pub fn members(&self) -> impl Iterator<Item = Member> + '_ {
        Member::ALL.into_iter().filter(|&m| self.get(m))
    }

    pub fn any_object(&self) -> bool {
        self.object_d || self.object_semantic_d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub tag: String,
    pub input_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    /// Pretrained weights (safetensors). When absent the encoder is a frozen
    /// random network with the same interface.
    pub weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            tag: "vit-tiny-random".into(),
            input_size: 32,
            patch: 8,
            dim: 32,
            depth: 1,
            mlp_ratio: 2,
            seed: 0x5eed_c11b,
            weights: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (Tensor, Tensor),
    qkv: Linear,
    proj: Linear,
    ln2: (Tensor, Tensor),
    fc1: Linear,
    fc2: Linear,
}

fn layer_norm(x: &Tensor, (gamma, beta): &(Tensor, Tensor)) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(y.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Frozen vision-transformer image encoder producing a mean-pooled global embedding.
#[derive(Debug, Clone)]
pub struct FrozenVisionEncoder {
    config: EncoderConfig,
    store: ParamStore,
    patch_embed: Conv2d,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_out: (Tensor, Tensor),
}

impl FrozenVisionEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.input_size == 0 || config.patch == 0 || config.input_size % config.patch != 0 {
            return Err(Error::Config("encoder input_size must be a positive multiple of patch".into()));
        }
        if config.dim == 0 || config.depth == 0 {
            return Err(Error::Config("encoder dim and depth must be positive".into()));
        }
        let mut store = ParamStore::new(config.seed, false);
        let d = config.dim;
        let tokens = (config.input_size / config.patch).pow(2);
        let patch_embed = Conv2d::new(&mut store, "patch_embed", 3, d, config.patch, config.patch, 1)?.with_padding(0);
        let pos = store.randn("pos", &[tokens, d], 0.02)?;
        let ln = |store: &mut ParamStore, name: &str| -> Result<(Tensor, Tensor)> {
            Ok((
                store.constant(&format!("{name}.gamma"), &[d], 1.0)?,
                store.constant(&format!("{name}.beta"), &[d], 0.0)?,
            ))
        };
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1: ln(&mut store, &format!("{p}.ln1"))?,
                qkv: Linear::new(&mut store, &format!("{p}.qkv"), d, 3 * d, 0.0)?,
                proj: Linear::new(&mut store, &format!("{p}.proj"), d, d, 0.0)?,
                ln2: ln(&mut store, &format!("{p}.ln2"))?,
                fc1: Linear::new(&mut store, &format!("{p}.fc1"), d, config.mlp_ratio * d, 0.0)?,
                fc2: Linear::new(&mut store, &format!("{p}.fc2"), config.mlp_ratio * d, d, 0.0)?,
            });
        }
        let ln_out = ln(&mut store, "ln_out")?;
        let encoder = FrozenVisionEncoder {
            config,
            store,
            patch_embed,
            pos,
            blocks,
            ln_out,
        };
        if let Some(path) = &encoder.config.weights {
            let tensors = candle_core::safetensors::load(path, &Device::Cpu)
                .map_err(|e| Error::load(path, e))?
                .into_iter()
                .collect::<BTreeMap<_, _>>();
            encoder.store.import("", &tensors)?;
        }
        Ok(encoder)
    }

    pub fn tag(&self) -> &str {
        &self.config.tag
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<u64> {
        self.store.checksum()
    }

    /// Global embedding `(N, d_v)` of images `(N, 3, H, W)`; gradients flow to
    /// the input but never to the encoder's own parameters.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = resize_square(images, self.config.input_size)?;
        let x = self.patch_embed.forward(&x)?; // (N, d, g, g)
        let (n, d, gh, gw) = x.dims4()?;
        let mut t = x.reshape((n, d, gh * gw))?.transpose(1, 2)?.contiguous()?; // (N, T, d)
        t = t.broadcast_add(&self.pos)?;
        let scale = 1.0 / (d as f64).sqrt();
        for b in &self.blocks {
            let h = layer_norm(&t, &b.ln1)?;
            let qkv = b.qkv.forward(&h)?;
            let q = qkv.narrow(2, 0, d)?.contiguous()?;
            let k = qkv.narrow(2, d, d)?.contiguous()?;
            let v = qkv.narrow(2, 2 * d, d)?.contiguous()?;
            let att = softmax_last(&(q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?)?;
            let a = b.proj.forward(&att.matmul(&v)?)?;
            t = (t + a)?;
            let h = layer_norm(&t, &b.ln2)?;
            let m = b.fc2.forward(&b.fc1.forward(&h)?.gelu_erf()?)?;
            t = (t + m)?;
        }
        let t = layer_norm(&t, &self.ln_out)?;
        Ok(t.mean(1)?)
    }
}

/// Hyper-parameters shared by the convolutional members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub enabled: Enabled,
    pub width: usize,
    pub max_channels: usize,
    /// Image resolution seen by the image-level members.
    pub resolution: usize,
    /// Crop resolution seen by the object-level members.
    pub crop_size: usize,
    pub guidance_channels: usize,
    pub mbstd_group: usize,
    pub projection_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            enabled: Enabled::all(),
            width: 16,
            max_channels: 64,
            resolution: 64,
            crop_size: 64,
            guidance_channels: 5,
            mbstd_group: 4,
            projection_dim: 32,
            hidden_dim: 64,
            encoder: EncoderConfig::default(),
        }
    }
}

fn pyramid_depth(res: usize, field: &str) -> Result<usize> {
    if res < 8 || res % 4 != 0 || !(res / 4).is_power_of_two() {
        return Err(Error::Config(format!("{field} must be 4·2^k with k ≥ 1, got {res}")));
    }
    Ok((res / 4).trailing_zeros() as usize)
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled.image_d {
            return Err(Error::Config("image_d must be enabled".into()));
        }
        pyramid_depth(self.resolution, "resolution")?;
        pyramid_depth(self.crop_size, "crop_size")?;
        if self.width == 0 || self.max_channels < self.width {
            return Err(Error::Config("discriminator width must be positive and <= max_channels".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.width << level).min(self.max_channels)
    }

    /// Input channels of the image-level members: image, mask, guidance.
    pub fn image_channels(&self) -> usize {
        3 + 1 + self.guidance_channels
    }

    /// Input channels of the object-level members: image, mask, guidance, shape.
    pub fn crop_channels(&self) -> usize {
        self.image_channels() + 1
    }
}

#[derive(Debug, Clone)]
struct Trunk {
    from: Conv2d,
    blocks: Vec<Conv2d>,
    resolution: usize,
    out_channels: usize,
}

impl Trunk {
    fn new(store: &mut ParamStore, cfg: &EnsembleConfig, in_ch: usize, resolution: usize) -> Result<Self> {
        let depth = pyramid_depth(resolution, "resolution")?;
        let from = Conv2d::new(store, "from", in_ch, cfg.channels(0), 1, 1, 1)?;
        let blocks = (1..=depth)
            .map(|l| Conv2d::new(store, &format!("down{l}"), cfg.channels(l - 1), cfg.channels(l), 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trunk {
            from,
            blocks,
            resolution,
            out_channels: cfg.channels(depth),
        })
    }

    fn detached(&self) -> Self {
        Trunk {
            from: self.from.detached(),
            blocks: self.blocks.iter().map(Conv2d::detached).collect(),
            ..self.clone()
        }
    }

    fn forward(&self, x: &Tensor, field: &str) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::argument(
                field,
                format!("expected {0}x{0} input, got {h}x{w}", self.resolution),
            ));
        }
        let mut y = lrelu(&self.from.forward(x)?)?;
        for b in &self.blocks {
            y = lrelu(&b.forward(&y)?)?;
        }
        Ok(y)
    }
}

/// StyleGAN-style convolutional discriminator with a minibatch-stddev feature.
#[derive(Debug, Clone)]
pub struct ConvDiscriminator {
    store: ParamStore,
    trunk: Trunk,
    mbstd_group: usize,
    last: Conv2d,
    fc: Linear,
    out: Linear,
}

impl ConvDiscriminator {
    pub fn new(seed: u64, cfg: &EnsembleConfig, in_ch: usize, resolution: usize) -> Result<Self> {
        let mut store = ParamStore::new(seed, true);
        let trunk = Trunk::new(&mut store, cfg, in_ch, resolution)?;
        let c = trunk.out_channels;
        let last = Conv2d::new(&mut store, "last", c + 1, c, 3, 1, 1)?;
        let fc = Linear::new(&mut store, "fc", c * 16, c, 0.0)?;
        let out = Linear::new(&mut store, "out", c, 1, 0.0)?;
        Ok(ConvDiscriminator {
            store,
            trunk,
            mbstd_group: cfg.mbstd_group,
            last,
            fc,
            out,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Same network with parameters excluded from gradient tracking.
    pub fn detached(&self) -> Self {
        ConvDiscriminator {
            store: self.store.clone(),
            trunk: self.trunk.detached(),
            mbstd_group: self.mbstd_group,
            last: self.last.detached(),
            fc: self.fc.detached(),
            out: self.out.detached(),
        }
    }

    /// One logit per batch element, shape `(N,)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.trunk.forward(x, "input")?;
        let y = minibatch_stddev(&y, self.mbstd_group)?;
        let y = lrelu(&self.last.forward(&y)?)?;
        let y = lrelu(&self.fc.forward(&y.flatten_from(1)?)?)?;
        Ok(self.out.forward(&y)?.squeeze(1)?)
    }
}

/// Two-branch discriminator: frozen global embedding of the image (branch A)
/// fused with a trainable pyramid over the image and its condition (branch B).
#[derive(Debug, Clone)]
pub struct SemanticDiscriminator {
    store: ParamStore,
    trunk: Trunk,
    projection: Linear,
    fc1_b: Linear,
    fc1_a: Linear,
    fc2: Linear,
}

impl SemanticDiscriminator {
    pub fn new(seed: u64, cfg: &EnsembleConfig, embed_dim: usize, in_ch: usize, resolution: usize) -> Result<Self> {
        let mut store = ParamStore::new(seed, true);
        let trunk = Trunk::new(&mut store, cfg, in_ch, resolution)?;
        let flat = trunk.out_channels * 16;
        let projection = Linear::new(&mut store, "projection", embed_dim, cfg.projection_dim, 0.0)?;
        let fc1_b = Linear::new(&mut store, "fc1_b", flat, cfg.hidden_dim, 0.0)?;
        let fc1_a = Linear::without_bias(&mut store, "fc1_a", cfg.projection_dim, cfg.hidden_dim)?;
        let fc2 = Linear::new(&mut store, "fc2", cfg.hidden_dim, 1, 0.0)?;
        Ok(SemanticDiscriminator {
            store,
            trunk,
            projection,
            fc1_b,
            fc1_a,
            fc2,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn detached(&self) -> Self {
        SemanticDiscriminator {
            store: self.store.clone(),
            trunk: self.trunk.detached(),
            projection: self.projection.detached(),
            fc1_b: self.fc1_b.detached(),
            fc1_a: self.fc1_a.detached(),
            fc2: self.fc2.detached(),
        }
    }

    /// Sets the branch-A projection (weights and bias) to zero.
    pub fn zero_projection(&self) -> Result<()> {
        for name in ["projection.weight", "projection.bias"] {
            let t = self.store.get(name).expect("projection registered");
            self.store.set(name, &t.zeros_like()?)?;
        }
        Ok(())
    }

    fn hidden_b(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.trunk.forward(x, "input")?.flatten_from(1)?;
        self.fc1_b.forward(&b)
    }

    pub fn forward(&self, encoder: &FrozenVisionEncoder, x: &Tensor, image: &Tensor) -> Result<Tensor> {
        let a = self.projection.forward(&encoder.forward(image)?)?;
        let h = (self.hidden_b(x)? + self.fc1_a.forward(&a)?)?;
        Ok(self.fc2.forward(&lrelu(&h)?)?.squeeze(1)?)
    }

    /// Forward through the trainable branch alone.
    pub fn forward_branch_b(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden_b(x)?;
        Ok(self.fc2.forward(&lrelu(&h)?)?.squeeze(1)?)
    }
}

/// Batched image-level inputs `(N,3,H,W)`, `(N,1,H,W)`, `(N,C_g,H,W)`.
#[derive(Debug, Clone)]
pub struct ImageInputs {
    pub image: Tensor,
    pub mask: Tensor,
    pub guidance: Tensor,
}

impl ImageInputs {
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.image, &self.mask, &self.guidance], 1)?)
    }
}

/// Batched crop inputs; `shape` is the binary instance-shape map.
#[derive(Debug, Clone)]
pub struct CropInputs {
    pub image: Tensor,
    pub mask: Tensor,
    pub guidance: Tensor,
    pub shape: Tensor,
}

impl CropInputs {
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.image, &self.mask, &self.guidance, &self.shape], 1)?)
    }
}

/// The four members, each with its own parameters, plus the shared frozen encoder.
#[derive(Debug, Clone)]
pub struct DiscriminatorEnsemble {
    config: EnsembleConfig,
    pub image_d: ConvDiscriminator,
    pub image_semantic_d: SemanticDiscriminator,
    pub object_d: ConvDiscriminator,
    pub object_semantic_d: SemanticDiscriminator,
    encoder: Arc<FrozenVisionEncoder>,
}

impl DiscriminatorEnsemble {
    pub fn new(seed: u64, config: EnsembleConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Arc::new(FrozenVisionEncoder::new(config.encoder.clone())?);
        let s = |m: Member| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(m.seed_offset());
        let dv = encoder.embedding_dim();
        let image_d = ConvDiscriminator::new(s(Member::ImageD), &config, config.image_channels(), config.resolution)?;
        let image_semantic_d = SemanticDiscriminator::new(
            s(Member::ImageSemanticD),
            &config,
            dv,
            config.image_channels(),
            config.resolution,
        )?;
        let object_d = ConvDiscriminator::new(s(Member::ObjectD), &config, config.crop_channels(), config.crop_size)?;
        let object_semantic_d = SemanticDiscriminator::new(
            s(Member::ObjectSemanticD),
            &config,
            dv,
            config.crop_channels(),
            config.crop_size,
        )?;
        Ok(DiscriminatorEnsemble {
            config,
            image_d,
            image_semantic_d,
            object_d,
            object_semantic_d,
            encoder,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    /// View whose forward passes propagate gradients to inputs only.
    pub fn detached(&self) -> Self {
        DiscriminatorEnsemble {
            config: self.config.clone(),
            image_d: self.image_d.detached(),
            image_semantic_d: self.image_semantic_d.detached(),
            object_d: self.object_d.detached(),
            object_semantic_d: self.object_semantic_d.detached(),
            encoder: Arc::clone(&self.encoder),
        }
    }

    pub fn enabled(&self) -> Enabled {
        self.config.enabled
    }

    pub fn set_enabled(&mut self, enabled: Enabled) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.enabled = enabled;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn encoder(&self) -> &FrozenVisionEncoder {
        &self.encoder
    }

    pub fn store(&self, m: Member) -> &ParamStore {
        match m {
            Member::ImageD => self.image_d.store(),
            Member::ImageSemanticD => self.image_semantic_d.store(),
            Member::ObjectD => self.object_d.store(),
            Member::ObjectSemanticD => self.object_semantic_d.store(),
        }
    }

    pub fn d_image(&self, x: &ImageInputs) -> Result<Tensor> {
        self.image_d.forward(&x.concat()?)
    }

    pub fn d_semantic(&self, x: &ImageInputs) -> Result<Tensor> {
        self.image_semantic_d.forward(&self.encoder, &x.concat()?, &x.image)
    }

    pub fn d_object(&self, c: &CropInputs) -> Result<Tensor> {
        self.check_crop(c)?;
        self.object_d.forward(&c.concat()?)
    }

    pub fn d_object_semantic(&self, c: &CropInputs) -> Result<Tensor> {
        self.check_crop(c)?;
        self.object_semantic_d.forward(&self.encoder, &c.concat()?, &c.image)
    }

    fn check_crop(&self, c: &CropInputs) -> Result<()> {
        let (_, _, h, w) = c.image.dims4()?;
        if h != self.config.crop_size || w != self.config.crop_size {
            return Err(Error::argument(
                "crop",
                format!("crop is {h}x{w}, discriminator expects {0}x{0}", self.config.crop_size),
            ));
        }
        Ok(())
    }

    /// Logit of an image-level member.
    pub fn image_logits(&self, m: Member, x: &ImageInputs) -> Result<Tensor> {
        match m {
            Member::ImageD => self.d_image(x),
            Member::ImageSemanticD => self.d_semantic(x),
            _ => Err(Error::argument("member", format!("{} is object-level", m.as_str()))),
        }
    }

    /// Logit of an object-level member.
    pub fn crop_logits(&self, m: Member, c: &CropInputs) -> Result<Tensor> {
        match m {
            Member::ObjectD => self.d_object(c),
            Member::ObjectSemanticD => self.d_object_semantic(c),
            _ => Err(Error::argument("member", format!("{} is image-level", m.as_str()))),
        }
    }

    /// Checksums of every trainable member and the frozen encoder.
    pub fn checksums(&self) -> Result<BTreeMap<String, u64>> {
        let mut out = BTreeMap::new();
        for m in Member::ALL {
            out.insert(m.as_str().to_string(), self.store(m).checksum()?);
        }
        out.insert("frozen_encoder".into(), self.encoder.checksum()?);
        Ok(out)
    }
}
