//! Training objectives for the three settings.
//!
//! All losses are per-image averages over the batch (`P` = pixels per image):
//!
//! | setting       | reconstruction                     | KL                             |
//! |---------------|------------------------------------|--------------------------------|
//! | `gaussian`    | `0.5 * mean ||x - x_hat||^2`       | closed form vs `N(0, I)`       |
//! | `sigma_nonnf` | `(P / 2) ln sigma*^2`              | closed form vs `N(0, I)`       |
//! | `sigma_nf`    | `(P / 2) ln sigma*^2`              | `log q(z) - log p(z | y)` at a sampled `z` |
//!
//! `sigma*^2` is the batch MSE floored at [`SIGMA_SQ_FLOOR`]. It is held fixed during
//! backpropagation, so the reconstruction gradient is that of `P / (2 sigma*^2) * MSE`.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::distributions::{DiagGaussian, SIGMA_SQ_FLOOR};
use crate::error::{Error, Result};
use crate::flow::{conditional_prior_log_prob, FlowStack};
use crate::models::{CvaeModel, Setting};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    /// Decoder variance used for this batch (1 in the gaussian setting).
    pub sigma_sq_batch: f64,
}

/// Differentiable loss plus its scalar breakdown.
#[derive(Debug)]
pub struct LossOutput {
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_pair(op: &'static str, x: &Tensor, x_hat: &Tensor) -> Result<usize> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape {
            op,
            msg: format!("{:?} vs {:?}", x.dims(), x_hat.dims()),
        });
    }
    let n = x.dims().first().copied().unwrap_or(0);
    if n == 0 || x.elem_count() == 0 {
        return Err(Error::EmptyBatch(op));
    }
    Ok(n)
}

/// `(P / 2) * MSE` averaged over the batch, i.e. `0.5 * sum ||x - x_hat||^2 / N`.
pub fn recon_loss_unit_sigma(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let n = check_pair("recon_loss_unit_sigma", x, x_hat)?;
    let sse = (x - x_hat)?.sqr()?.sum_all()?;
    Ok((sse * (0.5 / n as f64))?)
}

/// Returns `((P / 2) ln sigma*^2, sigma*^2)` with `sigma*^2 = max(batch MSE, floor)`.
///
/// The returned tensor has the value above but the gradient of
/// `P / (2 sigma*^2) * MSE`, with `sigma*^2` treated as a constant.
pub fn recon_loss_optimal_sigma(x: &Tensor, x_hat: &Tensor) -> Result<(Tensor, f64)> {
    let n = check_pair("recon_loss_optimal_sigma", x, x_hat)?;
    let pixels = (x.elem_count() / n) as f64;
    let mse = (x - x_hat)?.sqr()?.mean_all()?;
    let sigma_sq = to_f64(&mse)?.max(SIGMA_SQ_FLOOR);
    let value = 0.5 * pixels * sigma_sq.ln();
    let surrogate = (&mse - mse.detach())?;
    let loss = (surrogate * (0.5 * pixels / sigma_sq))?.affine(1.0, value)?;
    Ok((loss, sigma_sq))
}

/// Batch mean of `KL(q || N(0, I))`.
pub fn kl_loss_standard(q: &DiagGaussian) -> Result<Tensor> {
    Ok(q.kl_standard()?.mean(D::Minus1)?)
}

/// Batch mean of the single-sample estimate `log q(z) - log p(z | y)`, where
/// `p(z | y) = N(f(z); base) |det df/dz|` and `z` was drawn from `q` by reparameterization.
pub fn kl_loss_nf(
    q: &DiagGaussian,
    z_sample: &Tensor,
    base: &DiagGaussian,
    flow: &FlowStack,
) -> Result<Tensor> {
    let log_q = q.log_prob(z_sample)?;
    let log_p = conditional_prior_log_prob(z_sample, base, flow)?;
    Ok((log_q - log_p)?.mean(D::Minus1)?)
}

/// Standard-normal noise of shape `[rows, cols]` drawn from `rng` in row-major order.
pub fn standard_normal(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Full objective with caller-provided reparameterization noise (`[N, D]`).
pub fn total_loss_with_noise(
    model: &CvaeModel,
    images: &Tensor,
    attrs: &Tensor,
    noise: &Tensor,
) -> Result<LossOutput> {
    let q = model.encode(images, attrs)?;
    let z = q.sample_reparam(noise)?;
    let x_hat = model.decode(&z, attrs)?;
    let (recon, sigma_sq) = match model.setting() {
        Setting::Gaussian => (recon_loss_unit_sigma(images, &x_hat)?, 1.0),
        Setting::SigmaNonnf | Setting::SigmaNf => recon_loss_optimal_sigma(images, &x_hat)?,
    };
    let kl = match model.setting() {
        Setting::Gaussian | Setting::SigmaNonnf => kl_loss_standard(&q)?,
        Setting::SigmaNf => {
            let base = model.encode_label(attrs)?;
            let flow = model
                .flow()
                .ok_or_else(|| Error::Config("sigma_nf model without a flow".into()))?;
            kl_loss_nf(&q, &z, &base, flow)?
        }
    };
    let (recon_v, kl_v) = (to_f64(&recon)?, to_f64(&kl)?);
    let loss = (recon + kl)?;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: recon_v + kl_v,
            recon: recon_v,
            kl: kl_v,
            sigma_sq_batch: sigma_sq,
        },
        loss,
    })
}

/// Full objective for one batch, drawing the reparameterization noise from `rng`.
pub fn total_loss(model: &CvaeModel, batch: &LabeledBatch, rng: &mut ChaCha8Rng) -> Result<LossOutput> {
    let (images, attrs) = batch.to_tensors(model.dtype())?;
    let noise = standard_normal(rng, batch.len(), model.config().latent_dim, model.dtype())?;
    total_loss_with_noise(model, &images, &attrs, &noise)
}
