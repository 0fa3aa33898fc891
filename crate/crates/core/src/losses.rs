//! Training objective: non-saturating adversarial terms for each enabled
//! discriminator plus a multi-scale perceptual reconstruction loss.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminators::{CropInputs, DiscriminatorEnsemble, Enabled, ImageInputs, Member};
use crate::error::{Error, Result};
use crate::nn::{lrelu, scalar, softplus, softplus_scalar, Conv2d, ParamStore};

fn finite_logits(values: &[f64], field: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {field} logit")));
    }
    if values.is_empty() {
        return Err(Error::argument(field, "no logits"));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// `mean softplus(−real) + mean softplus(fake)`.
pub fn adv_d_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    finite_logits(real, "real")?;
    finite_logits(fake, "fake")?;
    Ok(mean(real.iter().map(|&r| softplus_scalar(-r))) + mean(fake.iter().map(|&f| softplus_scalar(f))))
}

/// `mean softplus(−fake)`.
pub fn adv_g_loss(fake: &[f64]) -> Result<f64> {
    finite_logits(fake, "fake")?;
    Ok(mean(fake.iter().map(|&f| softplus_scalar(-f))))
}

/// Real and fake halves of the discriminator loss as differentiable scalars.
pub fn adv_d_terms(real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((softplus(&real.neg()?)?.mean_all()?, softplus(fake)?.mean_all()?))
}

pub fn adv_g_term(fake: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake.neg()?)?.mean_all()?)
}

/// Frozen feature network exposing one feature map per scale.
pub trait PerceptualExtractor: Send + Sync {
    fn tag(&self) -> &str;
    fn num_scales(&self) -> usize;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    fn checksum(&self) -> Result<u64>;
}

/// Single-scale extractor whose feature map is the input itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl PerceptualExtractor for IdentityExtractor {
    fn tag(&self) -> &str {
        "identity"
    }

    fn num_scales(&self) -> usize {
        1
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }

    fn checksum(&self) -> Result<u64> {
        Ok(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub tag: String,
    /// Channel width per scale.
    pub widths: Vec<usize>,
    pub seed: u64,
    pub weights: Option<PathBuf>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            tag: "dilated-pyramid-random".into(),
            widths: vec![8, 16, 24, 32],
            seed: 0x0fee_d5ca,
            weights: None,
        }
    }
}

/// Frozen four-scale convolutional pyramid. Each scale after the first halves
/// the resolution and then applies a dilated convolution, giving a large
/// receptive field at the deepest taps.
#[derive(Debug, Clone)]
pub struct DilatedPyramid {
    config: PyramidConfig,
    store: ParamStore,
    stages: Vec<(Conv2d, Conv2d)>,
}

impl DilatedPyramid {
    pub fn new(config: PyramidConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config("perceptual pyramid widths must be nonempty and positive".into()));
        }
        let mut store = ParamStore::new(config.seed, false);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (l, &c) in config.widths.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            let a = Conv2d::new(&mut store, &format!("scale{l}.a"), cin, c, 3, stride, 1)?;
            let b = Conv2d::new(&mut store, &format!("scale{l}.b"), c, c, 3, 1, 1 << l)?;
            stages.push((a, b));
            cin = c;
        }
        if let Some(path) = &config.weights {
            let tensors = candle_core::safetensors::load(path, &Device::Cpu)
                .map_err(|e| Error::load(path, e))?
                .into_iter()
                .collect::<BTreeMap<_, _>>();
            store.import("", &tensors)?;
        }
        Ok(DilatedPyramid { config, store, stages })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

impl PerceptualExtractor for DilatedPyramid {
    fn tag(&self) -> &str {
        &self.config.tag
    }

    fn num_scales(&self) -> usize {
        self.stages.len()
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x.clone();
        for (a, b) in &self.stages {
            y = lrelu(&a.forward(&y)?)?;
            y = lrelu(&b.forward(&y)?)?;
            out.push(y.clone());
        }
        Ok(out)
    }

    fn checksum(&self) -> Result<u64> {
        self.store.checksum()
    }
}

/// `Σ_l mean |Φ_l(a) − Φ_l(b)|` as a differentiable scalar.
pub fn perceptual_loss(generated: &Tensor, target: &Tensor, extractor: &dyn PerceptualExtractor) -> Result<Tensor> {
    if generated.dims() != target.dims() {
        return Err(Error::argument(
            "target",
            format!("shape {:?} differs from generated {:?}", target.dims(), generated.dims()),
        ));
    }
    let fa = extractor.features(generated)?;
    let fb = extractor.features(target)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let term = (a - b)?.abs()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::Config("perceptual extractor produced no scales".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub image_d: f64,
    pub image_semantic_d: f64,
    pub object_d: f64,
    pub object_semantic_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            image_d: 1.0,
            image_semantic_d: 1.0,
            object_d: 1.0,
            object_semantic_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn adversarial(&self, m: Member) -> f64 {
        match m {
            Member::ImageD => self.image_d,
            Member::ImageSemanticD => self.image_semantic_d,
            Member::ObjectD => self.object_d,
            Member::ObjectSemanticD => self.object_semantic_d,
        }
    }
}

/// Scalar breakdown of one evaluation of the objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Discriminator terms per member: `mean softplus(−real)`.
    pub d_real: BTreeMap<String, f64>,
    /// Discriminator terms per member: `mean softplus(fake)`.
    pub d_fake: BTreeMap<String, f64>,
    /// Generator adversarial terms per member.
    pub g_adv: BTreeMap<String, f64>,
    pub perceptual: f64,
    pub r1: f64,
    pub g_total: f64,
    pub d_total: f64,
    pub object_skipped: bool,
}

fn checked(t: &Tensor, term: &str) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::Training {
            term: term.to_string(),
            message: format!("value {v}"),
        });
    }
    Ok(v)
}

fn accumulate(total: Option<Tensor>, term: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match total {
        None => term,
        Some(t) => (t + term)?,
    }))
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::new(0f32, &Device::Cpu)?)
}

/// Discriminator objective from per-member `(real, fake)` logits. Object
/// members absent from `logits` are skipped.
pub fn discriminator_objective(
    enabled: Enabled,
    logits: &BTreeMap<Member, (Tensor, Tensor)>,
    weights: &LossWeights,
    report: &mut LossReport,
) -> Result<Tensor> {
    let mut total = None;
    for m in enabled.members() {
        let Some((real, fake)) = logits.get(&m) else {
            if m.is_object() {
                report.object_skipped = true;
                continue;
            }
            return Err(Error::Training {
                term: m.as_str().into(),
                message: "missing logits for an enabled image-level member".into(),
            });
        };
        let (r, f) = adv_d_terms(real, fake)?;
        report.d_real.insert(m.as_str().into(), checked(&r, &format!("{}.real", m.as_str()))?);
        report.d_fake.insert(m.as_str().into(), checked(&f, &format!("{}.fake", m.as_str()))?);
        total = accumulate(total, ((r + f)? * weights.adversarial(m))?)?;
    }
    let total = match total {
        Some(t) => t,
        None => zero()?,
    };
    report.d_total = checked(&total, "d_total")?;
    Ok(total)
}

/// Generator objective: weighted adversarial terms plus `λ_rec ·` perceptual.
pub fn generator_objective(
    enabled: Enabled,
    fake_logits: &BTreeMap<Member, Tensor>,
    perceptual: Option<&Tensor>,
    weights: &LossWeights,
    report: &mut LossReport,
) -> Result<Tensor> {
    let mut total = None;
    for m in enabled.members() {
        let Some(fake) = fake_logits.get(&m) else {
            if m.is_object() {
                report.object_skipped = true;
                continue;
            }
            return Err(Error::Training {
                term: m.as_str().into(),
                message: "missing logits for an enabled image-level member".into(),
            });
        };
        let g = adv_g_term(fake)?;
        report.g_adv.insert(m.as_str().into(), checked(&g, &format!("{}.g", m.as_str()))?);
        total = accumulate(total, (g * weights.adversarial(m))?)?;
    }
    if let Some(p) = perceptual {
        report.perceptual = checked(p, "perceptual")?;
        if weights.rec != 0.0 {
            total = accumulate(total, (p * weights.rec)?)?;
        }
    }
    let total = match total {
        Some(t) => t,
        None => zero()?,
    };
    report.g_total = checked(&total, "g_total")?;
    Ok(total)
}

/// Differentiable totals together with their scalar report.
#[derive(Debug, Clone)]
pub struct Objective {
    pub g_total: Tensor,
    pub d_total: Tensor,
    pub report: LossReport,
}

/// Evaluates every enabled member on the real and generated bundles (and
/// their crops, when an instance was sampled) and assembles both totals.
pub fn total_losses(
    ensemble: &DiscriminatorEnsemble,
    fake: &ImageInputs,
    real: &ImageInputs,
    crops: Option<(&CropInputs, &CropInputs)>,
    extractor: &dyn PerceptualExtractor,
    weights: &LossWeights,
) -> Result<Objective> {
    let enabled = ensemble.enabled();
    let mut pairs = BTreeMap::new();
    for m in enabled.members() {
        if m.is_object() {
            if let Some((fc, rc)) = crops {
                pairs.insert(m, (ensemble.crop_logits(m, rc)?, ensemble.crop_logits(m, fc)?));
            }
        } else {
            pairs.insert(m, (ensemble.image_logits(m, real)?, ensemble.image_logits(m, fake)?));
        }
    }
    let fakes: BTreeMap<Member, Tensor> = pairs.iter().map(|(m, (_, f))| (*m, f.clone())).collect();
    let perceptual = perceptual_loss(&fake.image, &real.image, extractor)?;
    let mut report = LossReport::default();
    let d_total = discriminator_objective(enabled, &pairs, weights, &mut report)?;
    let g_total = generator_objective(enabled, &fakes, Some(&perceptual), weights, &mut report)?;
    Ok(Objective { g_total, d_total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn analytic_values() {
        assert!((adv_d_loss(&[0.0], &[0.0]).unwrap() - 2.0 * LN2).abs() < 1e-12);
        assert!((adv_g_loss(&[0.0]).unwrap() - LN2).abs() < 1e-12);
        assert!((adv_d_loss(&[1.0], &[-1.0]).unwrap() - 0.626523).abs() < 1e-6);
        assert!((adv_g_loss(&[-1.0]).unwrap() - 1.313262).abs() < 1e-6);
        let sat = adv_d_loss(&[20.0], &[-20.0]).unwrap();
        assert!(sat <= 2e-8 && sat >= 0.0);
        assert!(adv_g_loss(&[20.0]).unwrap() <= 1e-8);
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        assert!(matches!(adv_g_loss(&[f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(adv_d_loss(&[0.0], &[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn tensor_terms_match_scalar_forms() {
        let r = Tensor::new(&[0.5f32, -2.0, 3.0], &Device::Cpu).unwrap();
        let f = Tensor::new(&[1.0f32, -0.25, 0.0], &Device::Cpu).unwrap();
        let (a, b) = adv_d_terms(&r, &f).unwrap();
        let want = adv_d_loss(&[0.5, -2.0, 3.0], &[1.0, -0.25, 0.0]).unwrap();
        assert!((scalar(&a).unwrap() + scalar(&b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn identity_perceptual_hand_summed() {
        let a = Tensor::new(&[[[[0.0f32, 0.5], [-1.0, 1.0]]]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[[[0.25f32, 0.5], [0.0, -1.0]]]], &Device::Cpu).unwrap();
        let l = perceptual_loss(&a, &b, &IdentityExtractor).unwrap();
        // (0.25 + 0 + 1 + 2) / 4
        assert!((scalar(&l).unwrap() - 0.8125).abs() < 1e-7);
    }

    #[test]
    fn pyramid_has_four_scales_and_is_frozen() {
        let p = DilatedPyramid::new(PyramidConfig::default()).unwrap();
        assert_eq!(p.num_scales(), 4);
        assert!(!p.store().is_trainable());
        let mut s = ParamStore::new(1, false);
        let x = s.randn("x", &[1, 3, 32, 32], 0.5).unwrap();
        let f = p.features(&x).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(f[3].dims(), &[1, 32, 4, 4]);
        let zero = perceptual_loss(&x, &x, &p).unwrap();
        assert_eq!(to_vec(&zero).unwrap(), vec![0.0]);
    }
}
