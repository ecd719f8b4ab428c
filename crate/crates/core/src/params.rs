//! Named trainable parameters and the layer constructors that draw from them.
//!
//! Every parameter lives in a [`ParamStore`] keyed by a dotted name. Layers hold clones of
//! the underlying tensors, which share storage with the store's `Var`s, so optimizer
//! updates made through the store are visible to the layers without rebuilding them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::{Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform on `[-sqrt(3 / fan_in), sqrt(3 / fan_in)]`.
    FanIn(usize),
}

#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new parameter and returns a tensor sharing its storage.
    pub fn create(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn(fan_in) => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameter values in place. Every stored parameter must be present.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter. Used to move a freshly
    /// initialized model (zero heads, identity flows) away from its symmetric start.
    pub fn perturb(&self, scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        for var in self.vars.values() {
            let noise: Vec<f64> = (0..var.elem_count())
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            let noise = Tensor::from_vec(noise, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            let updated = (var.as_tensor() + noise)?;
            var.set(&updated)?;
        }
        Ok(())
    }
}

pub(crate) fn linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    zero_init: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Linear> {
    let init = if zero_init {
        Init::Zeros
    } else {
        Init::FanIn(in_dim)
    };
    let w = store.create(&format!("{name}.weight"), (out_dim, in_dim), init, rng)?;
    let b = store.create(&format!("{name}.bias"), out_dim, Init::Zeros, rng)?;
    Ok(Linear::new(w, Some(b)))
}

pub(crate) fn conv2d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: Conv2dConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Conv2d> {
    let fan_in = in_ch * kernel * kernel;
    let w = store.create(
        &format!("{name}.weight"),
        (out_ch, in_ch, kernel, kernel),
        Init::FanIn(fan_in),
        rng,
    )?;
    let b = store.create(&format!("{name}.bias"), out_ch, Init::Zeros, rng)?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub(crate) fn conv_transpose2d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: ConvTranspose2dConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ConvTranspose2d> {
    // Each output pixel sees roughly in_ch * kernel^2 / stride^2 inputs.
    let fan_in = (in_ch * kernel * kernel).div_ceil(cfg.stride * cfg.stride);
    let w = store.create(
        &format!("{name}.weight"),
        (in_ch, out_ch, kernel, kernel),
        Init::FanIn(fan_in),
        rng,
    )?;
    let b = store.create(&format!("{name}.bias"), out_ch, Init::Zeros, rng)?;
    Ok(ConvTranspose2d::new(w, Some(b), cfg))
}

pub(crate) fn conv1d(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    cfg: Conv1dConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Conv1d> {
    let w = store.create(
        &format!("{name}.weight"),
        (out_ch, in_ch, kernel),
        Init::FanIn(in_ch * kernel),
        rng,
    )?;
    let b = store.create(&format!("{name}.bias"), out_ch, Init::Zeros, rng)?;
    Ok(Conv1d::new(w, Some(b), cfg))
}
