//! Minibatch training with test-NLL early stopping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Augmentations, Dataset, LabeledBatch};
use crate::distributions::HALF_LN_2PI;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::models::{CvaeModel, Setting};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(alias = "adaptive-moment", alias = "adaptive_moment")]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between evaluations; 0 evaluates once at the end of every epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: Augmentations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 20,
            patience: 3,
            eval_every: 0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 10.0,
            augment: Augmentations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        let negative = |v: f64| v.is_nan() || v < 0.0;
        if negative(self.learning_rate) || negative(self.grad_clip) {
            return Err(Error::Config(
                "learning_rate and grad_clip must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD or Adam over a [`ParamStore`], with moment buffers that can be checkpointed.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adam moment buffers as `(first, second)`.
    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, steps: u64, first: BTreeMap<String, Tensor>, second: BTreeMap<String, Tensor>) {
        self.steps = steps;
        self.first = first;
        self.second = second;
    }

    /// Applies one update. Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, clip: f64) -> Result<f64> {
        let mut present = Vec::new();
        let mut sq_norm = 0.0f64;
        for (name, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq_norm += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                present.push((name, var, g));
            }
        }
        let norm = sq_norm.sqrt();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        for (name, var, g) in present {
            // gradients carry op graphs back to the forward pass; detach so optimizer
            // state does not keep every step's graph alive
            let g = g.detach();
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let update = match self.kind {
                OptimizerKind::Sgd => (g * self.lr)?,
                OptimizerKind::Adam => {
                    let m = match self.first.get(name) {
                        Some(m) => ((m * BETA1)? + (&g * (1.0 - BETA1))?)?,
                        None => (&g * (1.0 - BETA1))?,
                    }
                    .detach();
                    let v = match self.second.get(name) {
                        Some(v) => ((v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?,
                        None => (g.sqr()? * (1.0 - BETA2))?,
                    }
                    .detach();
                    let m_hat = (&m / (1.0 - BETA1.powi(t)))?;
                    let v_hat = (&v / (1.0 - BETA2.powi(t)))?;
                    let step = (m_hat / (v_hat.sqrt()? + ADAM_EPS)?)?;
                    self.first.insert(name.clone(), m);
                    self.second.insert(name.clone(), v);
                    (step * self.lr)?
                }
            };
            var.set(&(var.as_tensor() - update)?.detach())?;
        }
        Ok(norm)
    }
}

/// Mutable training state. After [`fit`] returns, the parameters and `sigma_sq` are those
/// of the best evaluation; the optimizer, step and RNG reflect the last step taken.
#[derive(Debug)]
pub struct TrainState {
    pub model: CvaeModel,
    pub optimizer: Optimizer,
    pub step: u64,
    pub epoch: usize,
    pub best_test_nll: Option<f64>,
    pub evals_since_best: usize,
    /// Last calibrated decoder variance (1 in the gaussian setting).
    pub sigma_sq: f64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: CvaeModel, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Self {
            model,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            step: 0,
            epoch: 0,
            best_test_nll: None,
            evals_since_best: 0,
            sigma_sq: 1.0,
            rng,
        }
    }
}

/// One record per evaluation point, serialized as a JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    /// Mean training losses over the steps since the previous record.
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub sigma_sq: f64,
    pub test_nll: f64,
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    for (term, v) in [("recon", b.recon), ("kl", b.kl), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: format!("{term} loss ({v})"),
            });
        }
    }
    Ok(())
}

/// One gradient step on `batch`. Noise for the reparameterization comes from `state.rng`.
pub fn train_step(state: &mut TrainState, batch: &LabeledBatch, clip: f64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("train_step"));
    }
    let out = total_loss(&state.model, batch, &mut state.rng)?;
    check_finite(&out.breakdown)?;
    let grads = out.loss.backward()?;
    let norm = state.optimizer.step(state.model.params(), &grads, clip)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            term: "gradient norm".into(),
        });
    }
    state.step += 1;
    state.sigma_sq = out.breakdown.sigma_sq_batch;
    Ok(out.breakdown)
}

/// Mean per-image `-log p(x | z = mu_q, y)` over `dataset`, constants included.
///
/// The decoder variance is 1 in the gaussian setting and `sigma_sq` otherwise.
pub fn evaluate_nll(model: &CvaeModel, dataset: &Dataset, sigma_sq: f64, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluate_nll"));
    }
    let var = match model.setting() {
        Setting::Gaussian => 1.0,
        Setting::SigmaNonnf | Setting::SigmaNf => sigma_sq,
    };
    let p = dataset.image_len() as f64;
    let constant = 0.5 * p * var.ln() + p * HALF_LN_2PI;
    let mut total = 0.0;
    for idx in dataset.batch_indices(batch_size, None) {
        let batch = dataset.batch(&idx);
        let (x, y) = batch.to_tensors(model.dtype())?;
        let q = model.encode(&x, &y)?;
        let x_hat = model.decode(q.mean(), &y)?;
        let sse = (x - x_hat)?
            .sqr()?
            .flatten_from(1)?
            .sum(1)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        total += sse.iter().map(|s| s / (2.0 * var) + constant).sum::<f64>();
    }
    Ok(total / dataset.len() as f64)
}

/// Trains until `max_epochs` or until `patience` consecutive evaluations fail to improve the
/// test NLL, then restores the best parameters.
pub fn fit(
    config: &TrainConfig,
    model: CvaeModel,
    train: &Dataset,
    test: &Dataset,
) -> Result<(TrainState, Vec<HistoryRecord>)> {
    fit_with(config, model, train, test, |_| {})
}

/// [`fit`] with a callback invoked on every history record as it is produced.
pub fn fit_with(
    config: &TrainConfig,
    model: CvaeModel,
    train: &Dataset,
    test: &Dataset,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<(TrainState, Vec<HistoryRecord>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("fit (train)"));
    }
    let mut state = TrainState::new(model, config);
    let mut history = Vec::new();
    let mut best: Option<(BTreeMap<String, Tensor>, f64)> = None;
    let mut acc = (0.0, 0.0, 0.0, 0usize);

    'epochs: for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        let chunks = train.batch_indices(config.batch_size, Some(&mut state.rng));
        let n_chunks = chunks.len();
        for (k, idx) in chunks.into_iter().enumerate() {
            let batch = augment(&train.batch(&idx), &config.augment, &mut state.rng);
            let b = train_step(&mut state, &batch, config.grad_clip)?;
            acc = (acc.0 + b.total, acc.1 + b.recon, acc.2 + b.kl, acc.3 + 1);
            let due = if config.eval_every > 0 {
                state.step.is_multiple_of(config.eval_every as u64)
            } else {
                k + 1 == n_chunks
            };
            if !due {
                continue;
            }
            let nll = evaluate_nll(&state.model, test, state.sigma_sq, config.batch_size)?;
            let steps = acc.3.max(1) as f64;
            let record = HistoryRecord {
                step: state.step,
                total: acc.0 / steps,
                recon: acc.1 / steps,
                kl: acc.2 / steps,
                sigma_sq: state.sigma_sq,
                test_nll: nll,
            };
            acc = (0.0, 0.0, 0.0, 0);
            on_record(&record);
            history.push(record);
            if !nll.is_finite() {
                return Err(Error::NonFinite {
                    term: "test NLL".into(),
                });
            }
            if state.best_test_nll.is_none_or(|b| nll < b) {
                state.best_test_nll = Some(nll);
                state.evals_since_best = 0;
                best = Some((state.model.params().snapshot()?, state.sigma_sq));
            } else {
                state.evals_since_best += 1;
                if state.evals_since_best >= config.patience {
                    break 'epochs;
                }
            }
        }
    }
    if let Some((params, sigma_sq)) = best {
        state.model.params().restore(&params)?;
        state.sigma_sq = sigma_sq;
    }
    Ok((state, history))
}
