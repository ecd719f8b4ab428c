//! Encoder `q(z | x, y)`, label encoder `p(z | y)`, transposed-convolution decoder, and
//! their composition into a [`CvaeModel`] for one of the three [`Setting`]s.
//!
//! Spatial arithmetic: every encoder stage is a 3x3 convolution with stride 2 and padding 1,
//! so a side of length `h` becomes `ceil(h / 2)`. Decoder stage `i` runs the same kernel
//! transposed without padding, producing `2 * h_{i+1} + 1`, then crops one leading pixel and
//! keeps `h_i` of the rest. This equals a padded transposed convolution with output padding
//! `h_i - 2 * h_{i+1} + 1` and also works for 1x1 maps. For 86x86 inputs the sides are
//! 86 -> 43 -> 22 -> 11 -> 6 and back.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::flow::FlowStack;
use crate::params::{conv1d, conv2d, conv_transpose2d, linear, ParamStore};

const KERNEL: usize = 3;
const STAGES: usize = 4;

/// The three model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Unit-variance Gaussian decoder, `N(0, I)` prior, `q(z | x, y)`.
    Gaussian,
    /// Calibrated decoder variance, `N(0, I)` prior, `q(z | x)`.
    #[serde(alias = "sigma-nonnf")]
    SigmaNonnf,
    /// Calibrated decoder variance, flow prior `p(z | y)`, `q(z | x, y)`.
    #[serde(alias = "sigma-nf")]
    SigmaNf,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Gaussian, Setting::SigmaNonnf, Setting::SigmaNf];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Gaussian => "gaussian",
            Setting::SigmaNonnf => "sigma_nonnf",
            Setting::SigmaNf => "sigma_nf",
        }
    }

    /// Whether the posterior encoder sees the attributes.
    pub fn posterior_conditioned(self) -> bool {
        !matches!(self, Setting::SigmaNonnf)
    }

    pub fn calibrated_variance(self) -> bool {
        !matches!(self, Setting::Gaussian)
    }

    pub fn uses_flow_prior(self) -> bool {
        matches!(self, Setting::SigmaNf)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Setting::Gaussian),
            "sigma_nonnf" | "sigma-nonnf" => Ok(Setting::SigmaNonnf),
            "sigma_nf" | "sigma-nf" => Ok(Setting::SigmaNf),
            other => Err(Error::Config(format!("unknown setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub setting: Setting,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub attr_dim: usize,
    pub enc_channels: [usize; 4],
    pub label_channels: [usize; 2],
    pub flow_depth: usize,
    pub flow_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            setting: Setting::SigmaNf,
            channels: 3,
            height: 86,
            width: 86,
            latent_dim: 128,
            attr_dim: 40,
            enc_channels: [32, 64, 128, 256],
            label_channels: [16, 32],
            flow_depth: 4,
            flow_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("latent_dim", self.latent_dim),
            ("attr_dim", self.attr_dim),
            ("flow_hidden", self.flow_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.enc_channels.contains(&0) || self.label_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.setting.uses_flow_prior() {
            if self.latent_dim < 2 {
                return Err(Error::Config("flow prior needs latent_dim >= 2".into()));
            }
            if self.flow_depth < 2 {
                return Err(Error::Config("flow_depth must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// Side lengths at the input and after each encoder stage.
pub fn stage_sizes(side: usize) -> [usize; STAGES + 1] {
    let mut out = [side; STAGES + 1];
    for i in 0..STAGES {
        out[i + 1] = out[i].div_ceil(2);
    }
    out
}

/// Zero-pads every dimension after the channel axis by one on each side. Convolutions run
/// unpadded on the result, which keeps candle's backward pass away from its length
/// underflow on maps of side 1 or 2.
fn pad_trailing(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for d in 2..x.rank() {
        out = out.pad_with_zeros(d, 1, 1)?;
    }
    Ok(out)
}

/// Unpadded stride-1 `Conv1d` evaluated as a height-1 2-D convolution. candle's own 1-D
/// backward pass returns wrong gradients when there is more than one output channel.
fn conv1d_via_2d(conv: &Conv1d, x: &Tensor) -> Result<Tensor> {
    let w = conv.weight().unsqueeze(2)?;
    let out = x.unsqueeze(2)?.conv2d(&w, 0, 1, 1, 1)?.squeeze(2)?;
    match conv.bias() {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, b.dims1()?, 1))?)?),
        None => Ok(out),
    }
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

fn split_params(out: &Tensor, latent_dim: usize) -> Result<DiagGaussian> {
    let mean = out.narrow(1, 0, latent_dim)?;
    let log_std = out.narrow(1, latent_dim, latent_dim)?;
    DiagGaussian::new(mean, log_std)
}

fn check_shape(op: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.dims() != expected {
        return Err(Error::Shape {
            op,
            msg: format!("expected {:?}, got {:?}", expected, t.dims()),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EncoderQ {
    convs: Vec<Conv2d>,
    head: Linear,
    conditioned: bool,
    latent_dim: usize,
}

impl EncoderQ {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conditioned = cfg.setting.posterior_conditioned();
        let mut in_ch = cfg.channels + if conditioned { cfg.attr_dim } else { 0 };
        let conv_cfg = Conv2dConfig {
            stride: 2,
            ..Default::default()
        };
        let mut convs = Vec::with_capacity(STAGES);
        for (i, &out_ch) in cfg.enc_channels.iter().enumerate() {
            convs.push(conv2d(
                store,
                &format!("encoder_q.conv{i}"),
                in_ch,
                out_ch,
                KERNEL,
                conv_cfg,
                rng,
            )?);
            in_ch = out_ch;
        }
        let (hs, ws) = (stage_sizes(cfg.height), stage_sizes(cfg.width));
        let features = cfg.enc_channels[STAGES - 1] * hs[STAGES] * ws[STAGES];
        let head = linear(store, "encoder_q.head", features, 2 * cfg.latent_dim, true, rng)?;
        Ok(Self {
            convs,
            head,
            conditioned,
            latent_dim: cfg.latent_dim,
        })
    }

    fn forward(&self, x: &Tensor, y: &Tensor) -> Result<DiagGaussian> {
        let mut h = if self.conditioned {
            let (n, _, height, width) = x.dims4()?;
            let a = y.dims()[1];
            let planes = y.reshape((n, a, 1, 1))?.broadcast_as((n, a, height, width))?;
            Tensor::cat(&[x, &planes], 1)?
        } else {
            x.clone()
        };
        for conv in &self.convs {
            h = silu(&conv.forward(&pad_trailing(&h)?)?)?;
        }
        let out = self.head.forward(&h.flatten_from(1)?)?;
        split_params(&out, self.latent_dim)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderP {
    convs: Vec<Conv1d>,
    head: Linear,
    latent_dim: usize,
}

impl EncoderP {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv_cfg = Conv1dConfig::default();
        let [c1, c2] = cfg.label_channels;
        let convs = vec![
            conv1d(store, "encoder_p.conv0", 1, c1, KERNEL, conv_cfg, rng)?,
            conv1d(store, "encoder_p.conv1", c1, c2, KERNEL, conv_cfg, rng)?,
        ];
        let head = linear(
            store,
            "encoder_p.head",
            c2 * cfg.attr_dim,
            2 * cfg.latent_dim,
            true,
            rng,
        )?;
        Ok(Self {
            convs,
            head,
            latent_dim: cfg.latent_dim,
        })
    }

    fn forward(&self, y: &Tensor) -> Result<DiagGaussian> {
        let mut h = y.unsqueeze(1)?;
        for conv in &self.convs {
            h = silu(&conv1d_via_2d(conv, &pad_trailing(&h)?)?)?;
        }
        let out = self.head.forward(&h.flatten_from(1)?)?;
        split_params(&out, self.latent_dim)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    lift: Linear,
    deconvs: Vec<ConvTranspose2d>,
    /// Output `(height, width)` of each decoder stage.
    targets: Vec<(usize, usize)>,
    base_shape: (usize, usize, usize),
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (hs, ws) = (stage_sizes(cfg.height), stage_sizes(cfg.width));
        let top = cfg.enc_channels[STAGES - 1];
        let base_shape = (top, hs[STAGES], ws[STAGES]);
        let lift = linear(
            store,
            "decoder.lift",
            cfg.latent_dim + cfg.attr_dim,
            top * hs[STAGES] * ws[STAGES],
            false,
            rng,
        )?;
        // channel widths mirror the encoder: top -> ... -> enc[0] -> image channels
        let mut widths: Vec<usize> = cfg.enc_channels.iter().rev().copied().collect();
        widths.push(cfg.channels);
        let mut deconvs = Vec::with_capacity(STAGES);
        let mut targets = Vec::with_capacity(STAGES);
        for k in 0..STAGES {
            let stage = STAGES - 1 - k;
            targets.push((hs[stage], ws[stage]));
            let deconv_cfg = ConvTranspose2dConfig {
                padding: 0,
                output_padding: 0,
                stride: 2,
                dilation: 1,
            };
            deconvs.push(conv_transpose2d(
                store,
                &format!("decoder.deconv{k}"),
                widths[k],
                widths[k + 1],
                KERNEL,
                deconv_cfg,
                rng,
            )?);
        }
        Ok(Self {
            lift,
            deconvs,
            targets,
            base_shape,
        })
    }

    fn forward(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        let n = z.dims()[0];
        let (c, h, w) = self.base_shape;
        let zy = Tensor::cat(&[z, y], 1)?;
        let mut x = silu(&self.lift.forward(&zy)?.reshape((n, c, h, w))?)?;
        let last = self.deconvs.len() - 1;
        for (k, (deconv, &(th, tw))) in self.deconvs.iter().zip(&self.targets).enumerate() {
            x = deconv.forward(&x)?.narrow(2, 1, th)?.narrow(3, 1, tw)?;
            if k < last {
                x = silu(&x)?;
            }
        }
        // logistic squashing to [0, 1]
        Ok((x.neg()?.exp()? + 1.0)?.recip()?)
    }
}

/// Encoder `q`, optional label encoder `p`, decoder, and optional flow for one setting.
#[derive(Debug)]
pub struct CvaeModel {
    config: ModelConfig,
    store: ParamStore,
    encoder_q: EncoderQ,
    encoder_p: Option<EncoderP>,
    decoder: Decoder,
    flow: Option<FlowStack>,
}

impl CvaeModel {
    /// Builds a freshly initialized model. Each component draws from its own ChaCha stream
    /// of `seed`, so the decoder initialization does not depend on which other parts exist.
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let mut store = ParamStore::new(dtype);
        let encoder_q = EncoderQ::new(&mut store, &config, &mut stream(1))?;
        let decoder = Decoder::new(&mut store, &config, &mut stream(2))?;
        let (encoder_p, flow) = if config.setting.uses_flow_prior() {
            let p = EncoderP::new(&mut store, &config, &mut stream(3))?;
            let f = FlowStack::new(
                &mut store,
                "flow",
                config.latent_dim,
                config.flow_depth,
                config.flow_hidden,
                &mut stream(4),
            )?;
            (Some(p), Some(f))
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            store,
            encoder_q,
            encoder_p,
            decoder,
            flow,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn setting(&self) -> Setting {
        self.config.setting
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn flow(&self) -> Option<&FlowStack> {
        self.flow.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_attrs(&self, op: &'static str, y: &Tensor) -> Result<usize> {
        if y.rank() != 2 || y.dims()[1] != self.config.attr_dim {
            return Err(Error::Shape {
                op,
                msg: format!(
                    "attributes {:?}, expected [N, {}]",
                    y.dims(),
                    self.config.attr_dim
                ),
            });
        }
        Ok(y.dims()[0])
    }

    /// Posterior `q(z | x, y)`; in the `sigma_nonnf` setting `y` is ignored by the encoder
    /// but its shape is still checked.
    pub fn encode(&self, x: &Tensor, y: &Tensor) -> Result<DiagGaussian> {
        let n = self.check_attrs("encode", y)?;
        let c = &self.config;
        check_shape("encode", x, &[n, c.channels, c.height, c.width])?;
        self.encoder_q.forward(x, y)
    }

    /// Base distribution `N(mu_p(y), sigma_p(y))` of the conditional prior.
    pub fn encode_label(&self, y: &Tensor) -> Result<DiagGaussian> {
        self.check_attrs("encode_label", y)?;
        match &self.encoder_p {
            Some(p) => p.forward(y),
            None => Err(Error::Config(format!(
                "setting {} has no label encoder",
                self.config.setting
            ))),
        }
    }

    /// Decoder mean `x_hat` in `[0, 1]` with shape `[N, C, H, W]`.
    pub fn decode(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        let n = self.check_attrs("decode", y)?;
        check_shape("decode", z, &[n, self.config.latent_dim])?;
        self.decoder.forward(z, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny(setting: Setting) -> ModelConfig {
        ModelConfig {
            setting,
            channels: 1,
            height: 4,
            width: 4,
            latent_dim: 2,
            attr_dim: 2,
            enc_channels: [2, 2, 2, 2],
            label_channels: [2, 2],
            flow_depth: 2,
            flow_hidden: 3,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn stage_arithmetic() {
        assert_eq!(stage_sizes(86), [86, 43, 22, 11, 6]);
        assert_eq!(stage_sizes(32), [32, 16, 8, 4, 2]);
        assert_eq!(stage_sizes(64), [64, 32, 16, 8, 4]);
        assert_eq!(stage_sizes(4), [4, 2, 1, 1, 1]);
        for side in 1..200 {
            let s = stage_sizes(side);
            for i in 0..STAGES {
                // the unpadded transposed output has room for the crop
                assert!(s[i] <= 2 * s[i + 1]);
                assert!(s[i] + 1 >= 2 * s[i + 1]);
            }
        }
    }

    #[test]
    fn zero_inputs_give_zero_mean() {
        let cfg = tiny(Setting::SigmaNf);
        let m = CvaeModel::new(cfg, DType::F64, 0).unwrap();
        let x = Tensor::zeros((3, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((3, 2), DType::F64, &Device::Cpu).unwrap();
        let q = m.encode(&x, &y).unwrap();
        assert_eq!(q.dim(), 2);
        assert!(q
            .mean()
            .to_vec2::<f64>()
            .unwrap()
            .iter()
            .flatten()
            .all(|v| *v == 0.0));
        let p = m.encode_label(&y).unwrap();
        assert!(p
            .mean()
            .to_vec2::<f64>()
            .unwrap()
            .iter()
            .flatten()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn label_encoder_only_in_flow_setting() {
        let y = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        for setting in [Setting::Gaussian, Setting::SigmaNonnf] {
            let m = CvaeModel::new(tiny(setting), DType::F64, 0).unwrap();
            assert!(m.encode_label(&y).is_err());
            assert!(m.flow().is_none());
        }
        let m = CvaeModel::new(tiny(Setting::SigmaNf), DType::F64, 0).unwrap();
        assert!(m.flow().is_some());
    }

    #[test]
    fn encode_and_decode_are_deterministic() {
        let m = CvaeModel::new(tiny(Setting::Gaussian), DType::F64, 3).unwrap();
        m.params()
            .perturb(0.2, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let x = rand_tensor(&[2, 1, 4, 4], 5);
        let y = rand_tensor(&[2, 2], 6);
        let a = m.encode(&x, &y).unwrap().mean().to_vec2::<f64>().unwrap();
        let b = m.encode(&x, &y).unwrap().mean().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        let z = rand_tensor(&[2, 2], 7);
        let d1 = m
            .decode(&z, &y)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let d2 = m
            .decode(&z, &y)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn decode_range_and_shape() {
        let cfg = ModelConfig {
            height: 32,
            width: 32,
            channels: 3,
            latent_dim: 8,
            attr_dim: 5,
            enc_channels: [4, 4, 8, 8],
            ..tiny(Setting::SigmaNonnf)
        };
        let m = CvaeModel::new(cfg, DType::F32, 1).unwrap();
        let z = rand_tensor(&[100, 8], 1)
            .affine(20.0, -10.0)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let y = rand_tensor(&[100, 5], 2)
            .round()
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let out = m.decode(&z, &y).unwrap();
        assert_eq!(out.dims(), &[100, 3, 32, 32]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn shape_errors() {
        let m = CvaeModel::new(tiny(Setting::SigmaNf), DType::F64, 0).unwrap();
        let x = Tensor::zeros((2, 1, 5, 4), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(m.encode(&x, &y), Err(Error::Shape { .. })));
        let y3 = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(m.encode_label(&y3).is_err());
        let z = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(m.decode(&z, &y).is_err());
    }

    /// Hand count for the tiny config, stage by stage.
    #[allow(clippy::identity_op)]
    fn tiny_count(setting: Setting, latent: usize) -> usize {
        let (c, a, w) = (1, 2, 2);
        let in_ch = c + if setting.posterior_conditioned() { a } else { 0 };
        let enc = (in_ch * w * 9 + w) + 3 * (w * w * 9 + w);
        let enc_head = (w * 1 * 1) * 2 * latent + 2 * latent;
        let lift = (latent + a) * w + w;
        let dec = 3 * (w * w * 9 + w) + (w * c * 9 + c);
        let mut total = enc + enc_head + lift + dec;
        if setting.uses_flow_prior() {
            let p = (1 * 2 * 3 + 2) + (2 * 2 * 3 + 2) + (2 * a) * 2 * latent + 2 * latent;
            let h = 3;
            let half = latent / 2;
            let mlp = |i: usize, o: usize| (i * h + h) + (h * h + h) + (h * o + o);
            // two layers, each with s and t nets over halves of the latent
            let flow = 2 * 2 * mlp(half, latent - half);
            total += p + flow;
        }
        total
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn parameter_counts() {
        for setting in Setting::ALL {
            let m = CvaeModel::new(tiny(setting), DType::F64, 0).unwrap();
            assert_eq!(m.parameter_count(), tiny_count(setting, 2), "{setting}");
            let again = CvaeModel::new(tiny(setting), DType::F64, 9).unwrap();
            assert_eq!(m.parameter_count(), again.parameter_count());
        }
        // D -> D + 1 changes the posterior head, the lift, (and the label head)
        let cfg = tiny(Setting::Gaussian);
        let bigger = ModelConfig {
            latent_dim: 3,
            ..cfg.clone()
        };
        let a = CvaeModel::new(cfg, DType::F64, 0).unwrap().parameter_count();
        let b = CvaeModel::new(bigger, DType::F64, 0).unwrap().parameter_count();
        let head_delta = (2 * 1 * 1) * 2 + 2;
        let lift_delta = 2;
        assert_eq!(b - a, head_delta + lift_delta);
    }

    #[test]
    fn setting_parsing() {
        assert_eq!("sigma-nf".parse::<Setting>().unwrap(), Setting::SigmaNf);
        assert_eq!("sigma_nonnf".parse::<Setting>().unwrap(), Setting::SigmaNonnf);
        assert!("beta".parse::<Setting>().is_err());
        let s: Setting = serde_json::from_str("\"sigma-nonnf\"").unwrap();
        assert_eq!(s, Setting::SigmaNonnf);
    }
}
