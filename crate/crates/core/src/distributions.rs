//! Diagonal Gaussian kernels.
//!
//! [`DiagGaussian`] is batch-shaped: `mean` and `log_std` are `[N, D]` tensors and every
//! density or divergence reduces over the last axis, returning one value per row. The
//! same type parameterizes the approximate posterior, the label-conditioned base
//! distribution of the prior, and (through [`optimal_sigma_sq`]) the decoder likelihood.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{ensure_dim, Error, Result};

/// `ln(1e-4)`, the lower clamp applied to `log_std`.
pub const LOG_STD_MIN: f64 = -9.210_340_371_976_182;
/// `ln(1e4)`, the upper clamp applied to `log_std`.
pub const LOG_STD_MAX: f64 = 9.210_340_371_976_182;
/// Floor on the calibrated decoder variance.
pub const SIGMA_SQ_FLOOR: f64 = 1e-6;
/// `0.5 * ln(2 * pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone)]
pub struct DiagGaussian {
    mean: Tensor,
    log_std: Tensor,
}

impl DiagGaussian {
    /// Builds a batch of diagonal Gaussians. Rank-1 inputs are treated as a batch of one.
    ///
    /// `log_std` is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`; non-finite entries are rejected.
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        let mean = as_batch(mean)?;
        let log_std = as_batch(log_std)?;
        if mean.dims() != log_std.dims() {
            return Err(Error::Shape {
                op: "DiagGaussian::new",
                msg: format!("mean {:?} vs log_std {:?}", mean.dims(), log_std.dims()),
            });
        }
        let check = (mean.sum_all()? + log_std.sum_all()?)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::NonFinite {
                term: "DiagGaussian parameters".into(),
            });
        }
        let log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(Self { mean, log_std })
    }

    pub fn from_slices(mean: &[f64], log_std: &[f64]) -> Result<Self> {
        ensure_dim("DiagGaussian::from_slices", mean.len(), log_std.len())?;
        let dev = Device::Cpu;
        Self::new(
            Tensor::from_slice(mean, (1, mean.len()), &dev)?,
            Tensor::from_slice(log_std, (1, log_std.len()), &dev)?,
        )
    }

    /// `N` copies of `N(0, I)` in dimension `dim`.
    pub fn standard(batch: usize, dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let zeros = Tensor::zeros((batch, dim), dtype, device)?;
        Ok(Self {
            mean: zeros.clone(),
            log_std: zeros,
        })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_std(&self) -> &Tensor {
        &self.log_std
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok(self.log_std.exp()?)
    }

    pub fn batch_size(&self) -> usize {
        self.mean.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.dims()[1]
    }

    /// Row-wise `log N(x; mean, diag(std^2))` with all normalizing constants kept.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let x = as_batch(x.clone())?;
        self.check_operand("log_prob", &x)?;
        let z = x
            .broadcast_sub(&self.mean)?
            .broadcast_mul(&self.log_std.neg()?.exp()?)?;
        let per_coord = ((z.sqr()? * -0.5)? - self.log_std.broadcast_as(z.shape())?)?;
        let d = self.dim() as f64;
        Ok((per_coord.sum(D::Minus1)? - d * HALF_LN_2PI)?)
    }

    /// `mean + std * noise`; differentiable in `mean` and `log_std`.
    pub fn sample_reparam(&self, noise: &Tensor) -> Result<Tensor> {
        let noise = as_batch(noise.clone())?;
        self.check_operand("sample_reparam", &noise)?;
        Ok(noise.broadcast_mul(&self.std()?)?.broadcast_add(&self.mean)?)
    }

    /// Row-wise closed form `KL(self || N(0, I))`.
    pub fn kl_standard(&self) -> Result<Tensor> {
        let var = (self.log_std.clone() * 2.0)?.exp()?;
        let terms = ((var + self.mean.sqr()?)? - 1.0)?;
        let terms = (terms - (self.log_std.clone() * 2.0)?)?;
        Ok((terms.sum(D::Minus1)? * 0.5)?)
    }

    fn check_operand(&self, op: &'static str, x: &Tensor) -> Result<()> {
        ensure_dim(op, self.dim(), x.dims()[1])?;
        let n = x.dims()[0];
        if n != self.batch_size() && self.batch_size() != 1 {
            return Err(Error::Shape {
                op,
                msg: format!("batch {} vs distribution batch {}", n, self.batch_size()),
            });
        }
        Ok(())
    }
}

fn as_batch(t: Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => Ok(t.unsqueeze(0)?),
        2 => Ok(t),
        r => Err(Error::Shape {
            op: "DiagGaussian",
            msg: format!("expected rank 1 or 2, got rank {r}"),
        }),
    }
}

/// Maximum-likelihood variance of an isotropic Gaussian centred at `x_hat`:
/// `max(MSE(x, x_hat), SIGMA_SQ_FLOOR)`.
pub fn optimal_sigma_sq(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    ensure_dim("optimal_sigma_sq", x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(Error::EmptyBatch("optimal_sigma_sq"));
    }
    let sse: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / x.len() as f64).max(SIGMA_SQ_FLOOR))
}

/// `(P / 2) * ln(optimal_sigma_sq(x, x_hat))`.
///
/// The additive constant `P/2 * (1 + ln 2pi)` is dropped, unlike [`DiagGaussian::log_prob`].
pub fn nll_optimal_sigma(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    let sigma_sq = optimal_sigma_sq(x, x_hat)?;
    Ok(0.5 * x.len() as f64 * sigma_sq.ln())
}

/// Negative log-density of `x` under `N(x_hat, sigma_sq * I)` with constants.
pub fn isotropic_nll(x: &[f64], x_hat: &[f64], sigma_sq: f64) -> Result<f64> {
    ensure_dim("isotropic_nll", x.len(), x_hat.len())?;
    let sse: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let p = x.len() as f64;
    Ok(sse / (2.0 * sigma_sq) + 0.5 * p * sigma_sq.ln() + p * HALF_LN_2PI)
}
