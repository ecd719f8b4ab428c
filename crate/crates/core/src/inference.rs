//! Reconstruction and attribute-conditioned sampling.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::write_png;
use crate::error::{Error, Result};
use crate::losses::standard_normal;
use crate::models::CvaeModel;

/// Images per forward pass when sampling or reconstructing many inputs.
const CHUNK: usize = 256;

/// How `sigma_nf` models turn noise into a latent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// `z_hat = mu_p + eps * sigma_p`; the flow is not applied.
    #[default]
    Affine,
    /// `z_hat = f^-1(mu_p + eps * sigma_p)`, an exact draw from the flow prior.
    ThroughFlow,
}

/// `decode(mu_q(x, y), y)`.
pub fn reconstruct(model: &CvaeModel, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let q = model.encode(x, y)?;
    model.decode(q.mean(), y)
}

/// Maps standard-normal `noise` (`[N, D]`) to latents for attributes `y` (`[N, A]`).
///
/// Settings without a label encoder use the noise unchanged.
pub fn latent_from_noise(model: &CvaeModel, y: &Tensor, noise: &Tensor, mode: SampleMode) -> Result<Tensor> {
    if !model.setting().uses_flow_prior() {
        return Ok(noise.clone());
    }
    let base = model.encode_label(y)?;
    let z = base.sample_reparam(noise)?;
    match (mode, model.flow()) {
        (SampleMode::ThroughFlow, Some(flow)) => flow.inverse(&z),
        _ => Ok(z),
    }
}

/// Builds the `[N, A]` attribute tensor, checking every row length.
pub fn attr_tensor(model: &CvaeModel, rows: &[Vec<f32>]) -> Result<Tensor> {
    let a = model.config().attr_dim;
    let mut flat = Vec::with_capacity(rows.len() * a);
    for row in rows {
        if row.len() != a {
            return Err(Error::DimensionMismatch {
                op: "sample_conditional",
                expected: a,
                got: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Ok(Tensor::from_vec(flat, (rows.len(), a), &Device::Cpu)?.to_dtype(model.dtype())?)
}

/// One image per attribute row. Row `i` uses the `i`-th noise vector drawn from `seed`.
pub fn sample_conditional(
    model: &CvaeModel,
    attrs: &[Vec<f32>],
    seed: u64,
    mode: SampleMode,
) -> Result<Tensor> {
    if attrs.is_empty() {
        return Err(Error::EmptyBatch("sample_conditional"));
    }
    let y = attr_tensor(model, attrs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal(&mut rng, attrs.len(), model.config().latent_dim, model.dtype())?;
    let mut parts = Vec::new();
    for start in (0..attrs.len()).step_by(CHUNK) {
        let len = CHUNK.min(attrs.len() - start);
        let yc = y.narrow(0, start, len)?;
        let z = latent_from_noise(model, &yc, &noise.narrow(0, start, len)?, mode)?;
        parts.push(model.decode(&z, &yc)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// [`sample_conditional`] as concatenated `[C, H, W]` f32 images.
pub fn sample_images(model: &CvaeModel, attrs: &[Vec<f32>], seed: u64, mode: SampleMode) -> Result<Vec<f32>> {
    let t = sample_conditional(model, attrs, seed, mode)?;
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Writes a PNG with one row per attribute vector and `cols` samples per row, no spacing.
///
/// Cell `(r, c)` is sample `r * cols + c` of [`sample_conditional`], so a 1x1 grid is
/// pixel-identical to a single sample with the same seed.
pub fn sample_grid(
    model: &CvaeModel,
    attr_rows: &[Vec<f32>],
    cols: usize,
    seed: u64,
    mode: SampleMode,
    out_path: &Path,
) -> Result<()> {
    if cols == 0 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let attrs: Vec<Vec<f32>> = attr_rows
        .iter()
        .flat_map(|r| std::iter::repeat_n(r.clone(), cols))
        .collect();
    let pixels = sample_images(model, &attrs, seed, mode)?;
    let cfg = model.config();
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let rows = attr_rows.len();
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = vec![0.0f32; c * gh * gw];
    for (k, img) in pixels.chunks(c * h * w).enumerate() {
        let (r, col) = (k / cols, k % cols);
        for ch in 0..c {
            for i in 0..h {
                let src = &img[ch * h * w + i * w..ch * h * w + (i + 1) * w];
                let dst = ch * gh * gw + (r * h + i) * gw + col * w;
                grid[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    write_png(out_path, &grid, c, gh, gw)
}

/// Parses an attribute row given either as comma-separated 0/1 values (one per attribute) or
/// as a comma-separated list of attribute names to switch on. An empty string is all zeros.
pub fn parse_attr_row(text: &str, names: &[String]) -> Result<Vec<f32>> {
    let tokens: Vec<&str> = text.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    let mut row = vec![0.0f32; names.len()];
    if !tokens.is_empty() && tokens.iter().all(|t| *t == "0" || *t == "1") {
        if tokens.len() != names.len() {
            return Err(Error::Attributes(format!(
                "{:?} has {} values, expected {}",
                text,
                tokens.len(),
                names.len()
            )));
        }
        for (v, t) in row.iter_mut().zip(&tokens) {
            *v = if *t == "1" { 1.0 } else { 0.0 };
        }
        return Ok(row);
    }
    for t in tokens {
        let i = names.iter().position(|n| n == t).ok_or_else(|| {
            Error::Attributes(format!("unknown attribute {t:?}; known: {}", names.join(",")))
        })?;
        row[i] = 1.0;
    }
    Ok(row)
}
