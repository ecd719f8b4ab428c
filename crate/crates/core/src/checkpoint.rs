//! Checkpoints as a single safetensors file.
//!
//! Tensors are stored under `param/`, `adam_m/` and `adam_v/` prefixes. The header metadata
//! carries the model config, the training counters and the RNG state as JSON strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CvaeModel, ModelConfig};
use crate::training::{Optimizer, OptimizerKind, TrainState};

pub const FORMAT: &str = "cvae-nf-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Counters {
    step: u64,
    epoch: usize,
    best_test_nll: Option<f64>,
    evals_since_best: usize,
    sigma_sq: f64,
    optimizer: OptimizerKind,
    learning_rate: f64,
    optimizer_steps: u64,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

/// Writes the full training state to `path`.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let model = &state.model;
    let counters = Counters {
        step: state.step,
        epoch: state.epoch,
        best_test_nll: state.best_test_nll,
        evals_since_best: state.evals_since_best,
        sigma_sq: state.sigma_sq,
        optimizer: state.optimizer.kind(),
        learning_rate: state.optimizer.learning_rate(),
        optimizer_steps: state.optimizer.steps(),
    };
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("dtype".to_string(), dtype_name(model.dtype())?.to_string()),
        ("model_config".to_string(), to_json(model.config())?),
        ("train_state".to_string(), to_json(&counters)?),
        ("rng".to_string(), to_json(&state.rng)?),
    ]);
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, value) in model.params().snapshot()? {
        tensors.push((format!("param/{name}"), value));
    }
    let (m, v) = state.optimizer.moments();
    for (name, value) in m {
        tensors.push((format!("adam_m/{name}"), value.clone()));
    }
    for (name, value) in v {
        tensors.push((format!("adam_v/{name}"), value.clone()));
    }
    let mut bytes =
        safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    canonicalize_header(&mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rewrites the JSON header with sorted keys so identical states give identical files.
/// The metadata map is a `HashMap`, whose iteration order varies between processes.
fn canonicalize_header(bytes: &mut [u8]) -> Result<()> {
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header = &mut bytes[8..8 + len];
    let value: serde_json::Value =
        serde_json::from_slice(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    // serde_json's map is ordered by key; same entries give the same length
    let sorted = serde_json::to_vec(&value).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let end = sorted.len();
    if end > len || header[end..].iter().any(|b| *b != b' ') {
        return Err(Error::Checkpoint("header changed length when sorted".into()));
    }
    header[..end].copy_from_slice(&sorted);
    Ok(())
}

struct Raw {
    meta: HashMap<String, String>,
    tensors: HashMap<String, Tensor>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    match meta.get("format") {
        Some(f) if f == FORMAT => {}
        _ => {
            return Err(Error::Checkpoint(format!(
                "{} is not a {FORMAT} file",
                path.display()
            )))
        }
    }
    let version = meta.get("version").map(String::as_str).unwrap_or("");
    if version != VERSION.to_string() {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version:?}"
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?;
    Ok(Raw { meta, tensors })
}

impl Raw {
    fn field(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata field {key:?}")))
    }

    fn json<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.field(key)?)
            .map_err(|e| Error::Checkpoint(format!("metadata field {key:?}: {e}")))
    }

    fn prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    fn model(&self) -> Result<CvaeModel> {
        let config: ModelConfig = self.json("model_config")?;
        let dtype = parse_dtype(self.field("dtype")?)?;
        let model = CvaeModel::new(config, dtype, 0)?;
        let params = self.prefixed("param/");
        let expected = model.params().len();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameter tensors, found {}",
                params.len()
            )));
        }
        for name in params.keys() {
            if model.params().get(name).is_none() {
                return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
            }
        }
        model.params().restore(&params)?;
        Ok(model)
    }
}

/// Restores the complete training state written by [`save`].
pub fn load_state(path: &Path) -> Result<TrainState> {
    let raw = read_raw(path)?;
    let model = raw.model()?;
    let c: Counters = raw.json("train_state")?;
    let rng: ChaCha8Rng = raw.json("rng")?;
    let mut optimizer = Optimizer::new(c.optimizer, c.learning_rate);
    optimizer.restore(
        c.optimizer_steps,
        raw.prefixed("adam_m/"),
        raw.prefixed("adam_v/"),
    );
    Ok(TrainState {
        model,
        optimizer,
        step: c.step,
        epoch: c.epoch,
        best_test_nll: c.best_test_nll,
        evals_since_best: c.evals_since_best,
        sigma_sq: c.sigma_sq,
        rng,
    })
}

/// Loads only what inference needs: the model and its decoder variance.
pub fn load_model(path: &Path) -> Result<(CvaeModel, f64)> {
    let raw = read_raw(path)?;
    let c: Counters = raw.json("train_state")?;
    Ok((raw.model()?, c.sigma_sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, DatasetSpec};
    use crate::models::Setting;
    use crate::training::{train_step, TrainConfig};

    fn flat(map: &BTreeMap<String, Tensor>) -> Vec<(String, Vec<u64>)> {
        map.iter()
            .map(|(k, t)| {
                let bits = t
                    .flatten_all()
                    .unwrap()
                    .to_dtype(DType::F64)
                    .unwrap()
                    .to_vec1::<f64>()
                    .unwrap()
                    .into_iter()
                    .map(f64::to_bits)
                    .collect();
                (k.clone(), bits)
            })
            .collect()
    }

    fn state(dtype: DType) -> TrainState {
        let cfg = ModelConfig {
            setting: Setting::SigmaNf,
            channels: 3,
            height: 8,
            width: 8,
            latent_dim: 4,
            attr_dim: 5,
            enc_channels: [4, 4, 4, 4],
            label_channels: [2, 2],
            flow_depth: 2,
            flow_hidden: 8,
        };
        let model = CvaeModel::new(cfg, dtype, 9).unwrap();
        let mut s = TrainState::new(model, &TrainConfig::default());
        let data = make_synthetic(4, &DatasetSpec::synthetic(8, 8), 1).unwrap();
        train_step(&mut s, &data.batch(&[0, 1, 2, 3]), 10.0).unwrap();
        s.best_test_nll = Some(12.5);
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        for dtype in [DType::F32, DType::F64] {
            let s = state(dtype);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.safetensors");
            save(&path, &s).unwrap();
            let r = load_state(&path).unwrap();
            assert_eq!(
                flat(&s.model.params().snapshot().unwrap()),
                flat(&r.model.params().snapshot().unwrap())
            );
            assert_eq!(flat(s.optimizer.moments().0), flat(r.optimizer.moments().0));
            assert_eq!(flat(s.optimizer.moments().1), flat(r.optimizer.moments().1));
            assert_eq!(s.rng, r.rng);
            assert_eq!(
                (s.step, s.sigma_sq.to_bits(), s.best_test_nll),
                (r.step, r.sigma_sq.to_bits(), r.best_test_nll)
            );
            assert_eq!(s.model.config(), r.model.config());
            assert_eq!(r.model.dtype(), dtype);
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let data = make_synthetic(4, &DatasetSpec::synthetic(8, 8), 1).unwrap();
        let batch = data.batch(&[3, 2, 1, 0]);
        let mut a = state(DType::F64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        save(&path, &a).unwrap();
        let mut b = load_state(&path).unwrap();
        let la = train_step(&mut a, &batch, 10.0).unwrap();
        let lb = train_step(&mut b, &batch, 10.0).unwrap();
        assert_eq!(la, lb);
        assert_eq!(
            flat(&a.model.params().snapshot().unwrap()),
            flat(&b.model.params().snapshot().unwrap())
        );
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));

        let t = Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
        let bytes = safetensors::serialize([("a", &t)], None).unwrap();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checkpoint(_))));

        assert!(load_model(&dir.path().join("missing")).is_err());
    }
}
