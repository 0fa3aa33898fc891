//! FID and paired/unpaired discriminative scores over a pluggable feature
//! extractor.

use candle_core::Device;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discriminators::{EncoderConfig, FrozenVisionEncoder};
use crate::error::{Error, Result};
use crate::nn::to_vec;
use crate::raster::RgbImage;
use crate::tensors::images_tensor;

/// `N × d` feature rows tagged with the extractor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    tag: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::argument("features", format!("{} values for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("features", "non-finite feature value"));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            tag: tag.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], tag: impl Into<String>) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("features", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat(), tag)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Maps images to fixed-length feature vectors.
pub trait FeatureExtractor: Send + Sync {
    fn tag(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// One row per image.
pub fn extract_features(images: &[RgbImage], extractor: &dyn FeatureExtractor) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::argument("images", "empty batch"));
    }
    let rows = images.iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_rows(&rows, extractor.tag())
}

/// Flattens the image (channel-major) and multiplies by a fixed `d × 3HW` matrix.
#[derive(Debug, Clone)]
pub struct LinearExtractor {
    tag: String,
    height: usize,
    width: usize,
    matrix: DMatrix<f64>,
}

impl LinearExtractor {
    pub fn new(tag: impl Into<String>, height: usize, width: usize, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() != 3 * height * width {
            return Err(Error::Config(format!(
                "projection has {} columns, expected {}",
                matrix.ncols(),
                3 * height * width
            )));
        }
        Ok(LinearExtractor {
            tag: tag.into(),
            height,
            width,
            matrix,
        })
    }
}

impl FeatureExtractor for LinearExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        if image.shape() != (self.height, self.width) {
            return Err(Error::argument(
                "image",
                format!("extractor expects {}x{}, got {:?}", self.height, self.width, image.shape()),
            ));
        }
        let x = DVector::from_iterator(image.data().len(), image.data().iter().map(|&v| v as f64));
        Ok((&self.matrix * x).iter().copied().collect())
    }
}

/// Box-downsamples to `grid × grid` and applies a fixed Gaussian projection.
#[derive(Debug, Clone)]
pub struct RandomProjectionExtractor {
    tag: String,
    grid: usize,
    inner: LinearExtractor,
}

impl RandomProjectionExtractor {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Result<Self> {
        if grid == 0 || dim == 0 {
            return Err(Error::Config("grid and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * grid * grid;
        let scale = 1.0 / (n as f64).sqrt();
        let m = DMatrix::from_fn(dim, n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        let tag = format!("randproj-g{grid}-d{dim}-s{seed}");
        Ok(RandomProjectionExtractor {
            inner: LinearExtractor::new(tag.clone(), grid, grid, m)?,
            tag,
            grid,
        })
    }

    fn downsample(&self, image: &RgbImage) -> Result<RgbImage> {
        let (h, w) = image.shape();
        let g = self.grid;
        let mut out = vec![0f32; 3 * g * g];
        for c in 0..3 {
            for gy in 0..g {
                let (r0, r1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1).min(h));
                for gx in 0..g {
                    let (c0, c1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1).min(w));
                    let mut s = 0f64;
                    for r in r0..r1 {
                        for col in c0..c1 {
                            s += image.get(c, r, col) as f64;
                        }
                    }
                    out[c * g * g + gy * g + gx] = (s / ((r1 - r0) * (c1 - c0)) as f64) as f32;
                }
            }
        }
        RgbImage::new(g, g, out)
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.inner.extract(&self.downsample(image)?)
    }
}

/// Global embedding of a (typically pretrained) frozen vision encoder.
#[derive(Debug, Clone)]
pub struct EncoderExtractor {
    tag: String,
    encoder: FrozenVisionEncoder,
}

impl EncoderExtractor {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let encoder = FrozenVisionEncoder::new(config)?;
        Ok(EncoderExtractor {
            tag: format!("encoder-{}", encoder.tag()),
            encoder,
        })
    }
}

impl FeatureExtractor for EncoderExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.encoder.embedding_dim()
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let y = self.encoder.forward(&images_tensor(&[image])?.to_device(&Device::Cpu)?)?;
        Ok(to_vec(&y)?.into_iter().map(f64::from).collect())
    }
}

/// Extractor selection for evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExtractorConfig {
    RandomProjection { grid: usize, dim: usize, seed: u64 },
    Encoder(EncoderConfig),
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::RandomProjection { grid: 8, dim: 16, seed: 0 }
    }
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorConfig::RandomProjection { grid, dim, seed } => {
                Box::new(RandomProjectionExtractor::new(*grid, *dim, *seed)?)
            }
            ExtractorConfig::Encoder(cfg) => Box::new(EncoderExtractor::new(cfg.clone())?),
        })
    }
}

/// Column means and unbiased covariance.
pub fn mean_and_covariance(x: &FeatureMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let m = x.to_matrix();
    let n = m.nrows() as f64;
    let mu = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn symmetric_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn near_singular(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = eig.eigenvalues.max().abs().max(f64::MIN_POSITIVE);
    eig.eigenvalues.min() <= 1e-10 * max
}

/// `‖μ_r−μ_f‖² + Tr(Σ_r + Σ_f − 2(Σ_r Σ_f)^{1/2})`. The trace of the root is
/// taken from the symmetric product `Σ_r^{1/2} Σ_f Σ_r^{1/2}`, whose
/// eigenvalues match those of `Σ_r Σ_f`.
pub fn fid(real: &FeatureMatrix, fake: &FeatureMatrix) -> Result<f64> {
    if real.cols() != fake.cols() {
        return Err(Error::argument(
            "fake",
            format!("feature dims differ: {} vs {}", real.cols(), fake.cols()),
        ));
    }
    for (m, field) in [(real, "real"), (fake, "fake")] {
        if m.rows() < 2 {
            return Err(Error::argument(field, "need at least 2 rows"));
        }
        if m.rows() < m.cols() + 1 {
            log::warn!("{field}: {} rows for {} features; covariance is rank-deficient", m.rows(), m.cols());
        }
    }
    let (mu_r, mut s_r) = mean_and_covariance(real);
    let (mu_f, mut s_f) = mean_and_covariance(fake);
    let d = real.cols();
    let product_singular = near_singular(&s_r) || near_singular(&s_f);
    if product_singular {
        let mean_diag = (s_r.trace() + s_f.trace()) / (2 * d) as f64;
        let eps = 1e-6 * mean_diag.max(f64::MIN_POSITIVE);
        for i in 0..d {
            s_r[(i, i)] += eps;
            s_f[(i, i)] += eps;
        }
    }
    let root_r = symmetric_sqrt(&s_r);
    let inner = &root_r * &s_f * &root_r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (mu_r - mu_f).norm_squared();
    let value = diff + s_r.trace() + s_f.trace() - 2.0 * tr_root;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("fid evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

/// Dual coordinate-descent linear SVM (hinge loss, L2 regularization) with a
/// bias folded in as a constant feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearSvm {
    /// Fits on rows of `x` with labels `y ∈ {−1, +1}` after standardizing
    /// every feature with the pooled mean and deviation.
    pub fn fit(x: &[&[f64]], y: &[f64], cfg: &SvmConfig) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::argument("features", "label/row count mismatch"));
        }
        let d = x[0].len();
        let mut shift = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let v = x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            shift[j] = m;
            scale[j] = if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                let mut v: Vec<f64> = (0..d).map(|j| (r[j] - shift[j]) * scale[j]).collect();
                v.push(1.0);
                v
            })
            .collect();
        let q: Vec<f64> = z.iter().map(|v| v.iter().map(|a| a * a).sum()).collect();
        let mut w = vec![0.0; d + 1];
        let mut alpha = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut max_step = 0.0f64;
            for &i in &order {
                if q[i] == 0.0 {
                    continue;
                }
                let g = y[i] * dot(&w, &z[i]) - 1.0;
                let next = (alpha[i] - g / q[i]).clamp(0.0, cfg.c);
                let delta = next - alpha[i];
                if delta != 0.0 {
                    alpha[i] = next;
                    for (wj, zj) in w.iter_mut().zip(&z[i]) {
                        *wj += delta * y[i] * zj;
                    }
                    max_step = max_step.max(delta.abs());
                }
            }
            if max_step < 1e-12 {
                break;
            }
        }
        let bias = w.pop().expect("bias slot");
        Ok(LinearSvm {
            weights: w,
            bias,
            shift,
            scale,
        })
    }

    /// Decision value; positive means "real".
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.bias
            + row
                .iter()
                .zip(&self.weights)
                .enumerate()
                .map(|(j, (v, w))| (v - self.shift[j]) * self.scale[j] * w)
                .sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdsResult {
    pub u_ids: f64,
    /// Present only for row-aligned (paired) inputs.
    pub p_ids: Option<f64>,
    pub svm_c: f64,
}

/// U-IDS is the fitting-set misclassification rate of the real-vs-fake SVM;
/// P-IDS counts pairs whose fake scores strictly more real than its real.
pub fn ids(real: &FeatureMatrix, fake: &FeatureMatrix, paired: bool) -> Result<IdsResult> {
    ids_with(real, fake, paired, &SvmConfig::default())
}

pub fn ids_with(real: &FeatureMatrix, fake: &FeatureMatrix, paired: bool, cfg: &SvmConfig) -> Result<IdsResult> {
    let n = real.rows();
    if n < 2 {
        return Err(Error::argument("real", "need at least 2 rows"));
    }
    if fake.rows() != n {
        return Err(Error::argument("fake", format!("{} rows, expected {n}", fake.rows())));
    }
    if fake.cols() != real.cols() {
        return Err(Error::argument("fake", "feature dims differ"));
    }
    let mut rows: Vec<&[f64]> = (0..n).map(|i| real.row(i)).collect();
    rows.extend((0..n).map(|i| fake.row(i)));
    let labels: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
    let svm = LinearSvm::fit(&rows, &labels, cfg)?;
    let mut wrong = 0usize;
    for (row, &label) in rows.iter().zip(&labels) {
        let predicted_real = svm.decision(row) > 0.0;
        if predicted_real != (label > 0.0) {
            wrong += 1;
        }
    }
    let p_ids = paired.then(|| {
        let wins = (0..n).filter(|&i| svm.decision(fake.row(i)) > svm.decision(real.row(i))).count();
        wins as f64 / n as f64
    });
    Ok(IdsResult {
        u_ids: wrong as f64 / (2 * n) as f64,
        p_ids,
        svm_c: cfg.c,
    })
}

/// Output of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub u_ids: f64,
    pub p_ids: Option<f64>,
    pub n: usize,
    pub extractor_tag: String,
    pub mask_scheme: String,
}

pub fn report(real: &FeatureMatrix, fake: &FeatureMatrix, paired: bool, mask_scheme: &str) -> Result<MetricsReport> {
    let f = fid(real, fake)?;
    let s = ids(real, fake, paired)?;
    Ok(MetricsReport {
        fid: f,
        u_ids: s.u_ids,
        p_ids: s.p_ids,
        n: real.rows(),
        extractor_tag: real.tag().to_string(),
        mask_scheme: mask_scheme.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, "t").unwrap()
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = fm(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0], vec![-2.0, 1.5]]);
        assert!(fid(&a, &a).unwrap() <= 1e-9);
    }

    #[test]
    fn fid_rejects_dim_mismatch_and_tiny_sets() {
        let a = fm(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        let b = fm(&[vec![1.0], vec![0.0]]);
        assert!(fid(&a, &b).is_err());
        let c = fm(&[vec![1.0, 2.0]]);
        assert!(fid(&c, &c).is_err());
    }

    #[test]
    fn separable_ids() {
        let real = fm(&vec![vec![1.0]; 6]);
        let fake = fm(&vec![vec![-1.0]; 6]);
        let r = ids(&real, &fake, true).unwrap();
        assert_eq!(r.u_ids, 0.0);
        assert_eq!(r.p_ids, Some(0.0));
    }

    #[test]
    fn unpaired_has_no_p_ids() {
        let real = fm(&[vec![1.0], vec![2.0]]);
        let fake = fm(&[vec![0.0], vec![-1.0]]);
        assert_eq!(ids(&real, &fake, false).unwrap().p_ids, None);
    }

    #[test]
    fn linear_extractor_hand_computed() {
        // 2x2 image, projection picks (R00 + B11) and (G01 - G10)
        let mut m = DMatrix::zeros(2, 12);
        m[(0, 0)] = 1.0;
        m[(0, 11)] = 1.0;
        m[(1, 5)] = 1.0;
        m[(1, 6)] = -1.0;
        let ex = LinearExtractor::new("lin", 2, 2, m).unwrap();
        let img = RgbImage::new(
            2,
            2,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, -0.1, -0.2, -0.3],
        )
        .unwrap();
        let f = ex.extract(&img).unwrap();
        assert!((f[0] - (0.1f32 as f64 + (-0.3f32) as f64)).abs() < 1e-12);
        assert!((f[1] - (0.6f32 as f64 - 0.7f32 as f64)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let ex = RandomProjectionExtractor::new(4, 3, 0).unwrap();
        assert!(extract_features(&[], &ex).is_err());
    }
}
