//! Fréchet distance between Gaussian fits of image features.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::inference::{reconstruct, sample_images, SampleMode};
use crate::models::CvaeModel;

/// Relative tolerance for negative eigenvalues treated as round-off.
const EIG_TOL: f64 = 1e-6;
const CHUNK: usize = 256;

/// Sample mean and unbiased covariance of `n` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// From a mean of length `F` and a row-major `F x F` covariance.
    pub fn from_slices(mean: &[f64], cov: &[f64], n: usize) -> Result<Self> {
        let f = mean.len();
        if cov.len() != f * f {
            return Err(Error::DimensionMismatch {
                op: "FeatureStats::from_slices",
                expected: f * f,
                got: cov.len(),
            });
        }
        Ok(Self {
            mean: DVector::from_row_slice(mean),
            cov: DMatrix::from_row_slice(f, f, cov),
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// True when `n < F + 1`, so the covariance cannot be full rank.
    pub fn is_singular(&self) -> bool {
        self.n < self.dim() + 1
    }
}

/// `n x dim` row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub n: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(n: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * dim {
            return Err(Error::DimensionMismatch {
                op: "FeatureTable::new",
                expected: n * dim,
                got: values.len(),
            });
        }
        Ok(Self { n, dim, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Moments of `features`. One row yields a zero covariance.
pub fn fit_stats(features: &FeatureTable) -> Result<FeatureStats> {
    let (n, f) = (features.n, features.dim);
    if n == 0 {
        return Err(Error::EmptyDataset("fit_stats"));
    }
    let x = DMatrix::from_row_slice(n, f, &features.values);
    let mean: DVector<f64> = x.row_mean().transpose();
    let cov = if n > 1 {
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let c = centered.transpose() * &centered / (n - 1) as f64;
        (&c + c.transpose()) * 0.5
    } else {
        DMatrix::zeros(f, f)
    };
    Ok(FeatureStats { mean, cov, n })
}

/// Eigenvalues of a symmetric matrix with small negatives zeroed; large negatives are an error.
fn clipped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() {
            return Err(Error::MatrixSqrt(format!("{what}: non-finite eigenvalue")));
        }
        if *v < 0.0 {
            if *v < -EIG_TOL * scale {
                return Err(Error::MatrixSqrt(format!(
                    "{what} is not positive semi-definite (eigenvalue {v:e})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `V diag(sqrt(lambda))`, a factor `B` with `B B^T = m`.
fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(m, what)?;
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)))
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(m, what)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Principal square root of `a * b` for positive definite `a` and positive semi-definite `b`,
/// computed as `a^{1/2} (a^{1/2} b a^{1/2})^{1/2} a^{-1/2}`.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(a, "first covariance")?;
    let max = eig.eigenvalues.max();
    if eig.eigenvalues.iter().any(|v| *v <= EIG_TOL * max.max(1.0)) {
        return Err(Error::MatrixSqrt("first covariance is singular".into()));
    }
    let v = &eig.eigenvectors;
    let half = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
    let inv_half = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt())) * v.transpose();
    let inner = sqrt_psd(&(&half * b * &half), "covariance product")?;
    Ok(half * inner * inv_half)
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            op: "frechet_distance",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    // With S = B B^T, tr (S_a S_b)^{1/2} is the sum of singular values of B_a^T B_b. This
    // avoids square roots of near-zero eigenvalues and is symmetric in (a, b).
    let fa = psd_factor(&a.cov, "first covariance")?;
    let fb = psd_factor(&b.cov, "second covariance")?;
    let tr_sqrt: f64 = (fa.transpose() * fb).singular_values().sum();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite {
            term: "frechet distance".into(),
        });
    }
    Ok(d.max(0.0))
}

/// Maps one `[C, H, W]` image to a feature vector.
pub trait FeatureExtractor {
    fn dim(&self, channels: usize, height: usize, width: usize) -> usize;
    fn extract(&self, image: &[f32], channels: usize, height: usize, width: usize) -> Vec<f64>;
}

/// Adaptive average pooling to a `grid x grid` map per channel, flattened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PooledPixels {
    pub grid: usize,
}

impl Default for PooledPixels {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl FeatureExtractor for PooledPixels {
    fn dim(&self, channels: usize, _height: usize, _width: usize) -> usize {
        channels * self.grid * self.grid
    }

    fn extract(&self, image: &[f32], channels: usize, height: usize, width: usize) -> Vec<f64> {
        let g = self.grid;
        let bounds = |i: usize, len: usize| (i * len / g, ((i + 1) * len).div_ceil(g));
        let mut out = Vec::with_capacity(channels * g * g);
        for c in 0..channels {
            let plane = &image[c * height * width..(c + 1) * height * width];
            for gy in 0..g {
                let (y0, y1) = bounds(gy, height);
                for gx in 0..g {
                    let (x0, x1) = bounds(gx, width);
                    let mut s = 0.0f64;
                    for y in y0..y1 {
                        s += plane[y * width + x0..y * width + x1]
                            .iter()
                            .map(|v| *v as f64)
                            .sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }
}

/// Features of `n` concatenated `[C, H, W]` images.
pub fn extract_all(
    extractor: &dyn FeatureExtractor,
    images: &[f32],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<FeatureTable> {
    let len = channels * height * width;
    let dim = extractor.dim(channels, height, width);
    let mut values = Vec::with_capacity(images.len() / len.max(1) * dim);
    for img in images.chunks(len) {
        let f = extractor.extract(img, channels, height, width);
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                op: "extract_all",
                expected: dim,
                got: f.len(),
            });
        }
        values.extend(f);
    }
    FeatureTable::new(images.len() / len.max(1), dim, values)
}

/// Reads a plain-text table: a `N F` header line, then `N` rows of `F` numbers.
pub fn read_feature_file(path: &Path) -> Result<FeatureTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::FeatureFile {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("header {header:?}: {e}")))?;
    let [n, f] = dims[..] else {
        return Err(bad(format!("header {header:?} must be `N F`")));
    };
    let mut values = Vec::with_capacity(n * f);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        if row.len() != f {
            return Err(bad(format!(
                "row {} has {} values, expected {f}",
                i + 1,
                row.len()
            )));
        }
        values.extend(row);
    }
    if values.len() != n * f {
        return Err(bad(format!(
            "expected {n} rows, found {}",
            values.len() / f.max(1)
        )));
    }
    FeatureTable::new(n, f, values)
}

pub fn write_feature_file(path: &Path, table: &FeatureTable) -> Result<()> {
    let mut out = format!("{} {}\n", table.n, table.dim);
    for i in 0..table.n {
        let row: Vec<String> = table.row(i).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Anything that can reconstruct and conditionally sample images.
pub trait ImageModel {
    /// Reconstructions of `batch`, concatenated `[C, H, W]` images.
    fn reconstruct_batch(&self, batch: &LabeledBatch) -> Result<Vec<f32>>;
    /// One sample per attribute row.
    fn sample_batch(&self, attrs: &[Vec<f32>], seed: u64) -> Result<Vec<f32>>;
}

fn to_f32(t: candle_core::Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

impl ImageModel for CvaeModel {
    fn reconstruct_batch(&self, batch: &LabeledBatch) -> Result<Vec<f32>> {
        let (x, y) = batch.to_tensors(self.dtype())?;
        to_f32(reconstruct(self, &x, &y)?)
    }

    fn sample_batch(&self, attrs: &[Vec<f32>], seed: u64) -> Result<Vec<f32>> {
        sample_images(self, attrs, seed, SampleMode::Affine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidMode {
    Recon,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidResult {
    pub fid: f64,
    /// Number of generated images compared against the test set.
    pub generated: usize,
}

/// Fréchet distance between features of generated images and of `test`.
///
/// `Recon` reconstructs every test image; `Sampled` draws one sample per test attribute
/// vector. `reference` replaces the extracted test features when given.
pub fn fid_protocol(
    model: &dyn ImageModel,
    test: &Dataset,
    mode: FidMode,
    extractor: &dyn FeatureExtractor,
    seed: u64,
    reference: Option<&FeatureTable>,
) -> Result<FidResult> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("fid_protocol"));
    }
    let (c, h, w) = (test.channels(), test.height(), test.width());
    let mut generated = Vec::with_capacity(test.len() * test.image_len());
    match mode {
        FidMode::Recon => {
            for start in (0..test.len()).step_by(CHUNK) {
                let idx: Vec<usize> = (start..(start + CHUNK).min(test.len())).collect();
                generated.extend(model.reconstruct_batch(&test.batch(&idx))?);
            }
        }
        FidMode::Sampled => {
            let attrs: Vec<Vec<f32>> = (0..test.len()).map(|i| test.attrs(i).to_vec()).collect();
            generated = model.sample_batch(&attrs, seed)?;
        }
    }
    if generated.len() != test.len() * test.image_len() {
        return Err(Error::DimensionMismatch {
            op: "fid_protocol",
            expected: test.len() * test.image_len(),
            got: generated.len(),
        });
    }
    let fake = extract_all(extractor, &generated, c, h, w)?;
    let real_owned;
    let real = match reference {
        Some(r) => r,
        None => {
            let mut all = Vec::with_capacity(test.len() * test.image_len());
            for i in 0..test.len() {
                all.extend_from_slice(test.image(i));
            }
            real_owned = extract_all(extractor, &all, c, h, w)?;
            &real_owned
        }
    };
    if real.dim != fake.dim {
        return Err(Error::DimensionMismatch {
            op: "fid_protocol (feature dim)",
            expected: fake.dim,
            got: real.dim,
        });
    }
    let fid = frechet_distance(&fit_stats(&fake)?, &fit_stats(real)?)?;
    Ok(FidResult {
        fid,
        generated: fake.n,
    })
}
