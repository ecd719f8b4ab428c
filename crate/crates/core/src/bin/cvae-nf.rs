//! Command-line front end: `make-synth`, `train`, `eval`, `sample`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cvae_nf::checkpoint;
use cvae_nf::config::{RunConfig, ATTR_TABLE};
use cvae_nf::data::DataSource;
use cvae_nf::inference::{parse_attr_row, sample_grid, SampleMode};
use cvae_nf::metrics::{fid_protocol, read_feature_file, FidMode, PooledPixels};
use cvae_nf::models::{CvaeModel, Setting};
use cvae_nf::training::{evaluate_nll, fit_with};
use cvae_nf::{Error, Result};

const CONFIG_ECHO: &str = "config.json";
const CHECKPOINT: &str = "checkpoint.safetensors";
const HISTORY: &str = "history.jsonl";

#[derive(Parser)]
#[command(
    name = "cvae-nf",
    version,
    about = "Conditional VAEs with calibrated variance and flow priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset to an image folder with an attribute table
    MakeSynth(Common),
    /// Train a model and write config.json, checkpoint.safetensors and history.jsonl
    Train(Common),
    /// Report test NLL and FID (recon and sampled) as JSON
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out-dir>/checkpoint.safetensors)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `N F` feature table of the test images, replacing the built-in extractor for them
        #[arg(long)]
        features_file: Option<PathBuf>,
    },
    /// Write a PNG grid with one row of samples per attribute vector
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Attribute row: comma-separated 0/1 values or attribute names; repeat for more rows
        #[arg(long = "attrs", required = true)]
        attrs: Vec<String>,
        /// Samples per row
        #[arg(long, default_value_t = 8)]
        cols: usize,
        /// Map samples through the inverse flow (sigma-nf only)
        #[arg(long)]
        through_flow: bool,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// gaussian, sigma-nonnf or sigma-nf
    #[arg(long)]
    setting: Option<Setting>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

impl Common {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(path)) if path.exists() => RunConfig::from_file(path)?,
            _ => RunConfig::default(),
        };
        if let Some(s) = self.setting {
            cfg.setting = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn make_synth(common: &Common) -> Result<serde_json::Value> {
    let mut cfg = common.resolve(None)?;
    cfg.data_source = DataSource::Synthetic;
    let data = cfg.load_dataset()?;
    let dir = &common.out_dir;
    data.write_folder(dir)?;
    // the echo points at the folder so `train --config <dir>/config.json` reads it back
    cfg.data_source = DataSource::Folder;
    cfg.data_dir = Some(fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?);
    cfg.attr_table = None;
    cfg.attr_names = data.attr_names().to_vec();
    write_file(&dir.join(CONFIG_ECHO), &cfg.to_json()?)?;
    Ok(json!({
        "images": data.len(),
        "attr_table": dir.join(ATTR_TABLE),
        "config": dir.join(CONFIG_ECHO),
    }))
}

fn train(common: &Common) -> Result<serde_json::Value> {
    let mut cfg = common.resolve(None)?;
    let (train, test) = cfg.load_split()?;
    cfg.attr_names = train.attr_names().to_vec();
    let dir = &common.out_dir;
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_ECHO), &cfg.to_json()?)?;

    let model = CvaeModel::new(cfg.model_config(train.attr_dim()), cfg.dtype()?, cfg.seed)?;
    let history_path = dir.join(HISTORY);
    let mut history = fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut write_err = None;
    let result = fit_with(&cfg.train_config(), model, &train, &test, |rec| {
        let line = serde_json::to_string(rec).expect("plain numbers serialize");
        if let Err(e) = writeln!(history, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(&history_path, e));
    }
    let (state, records) = result?;
    checkpoint::save(&dir.join(CHECKPOINT), &state)?;
    Ok(json!({
        "setting": cfg.setting,
        "seed": cfg.seed,
        "steps": state.step,
        "evaluations": records.len(),
        "best_test_nll": state.best_test_nll,
        "checkpoint": dir.join(CHECKPOINT),
    }))
}

/// Checkpoint path and the run config, defaulting to the echo next to the checkpoint.
fn load_run(common: &Common, checkpoint: &Option<PathBuf>) -> Result<(PathBuf, RunConfig)> {
    let ck = checkpoint
        .clone()
        .unwrap_or_else(|| common.out_dir.join(CHECKPOINT));
    let echo = ck.parent().map(|p| p.join(CONFIG_ECHO));
    let cfg = common.resolve(echo.as_deref())?;
    Ok((ck, cfg))
}

fn eval(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    features: &Option<PathBuf>,
) -> Result<serde_json::Value> {
    let (ck, cfg) = load_run(common, checkpoint)?;
    let (model, sigma_sq) = checkpoint::load_model(&ck)?;
    let (_, test) = cfg.load_split()?;
    let reference = features.as_deref().map(read_feature_file).transpose()?;
    if let Some(r) = &reference {
        if r.n != test.len() {
            return Err(Error::DimensionMismatch {
                op: "eval (feature rows)",
                expected: test.len(),
                got: r.n,
            });
        }
    }
    let ex = PooledPixels { grid: cfg.fid_grid };
    let nll = evaluate_nll(&model, &test, sigma_sq, cfg.batch_size)?;
    let recon = fid_protocol(&model, &test, FidMode::Recon, &ex, cfg.seed, reference.as_ref())?;
    let sampled = fid_protocol(&model, &test, FidMode::Sampled, &ex, cfg.seed, reference.as_ref())?;
    Ok(json!({
        "test_nll": nll,
        "fid_recon": recon.fid,
        "fid_sampled": sampled.fid,
        "setting": model.setting(),
        "seed": cfg.seed,
    }))
}

fn sample(
    common: &Common,
    checkpoint: &Option<PathBuf>,
    attrs: &[String],
    cols: usize,
    through_flow: bool,
) -> Result<serde_json::Value> {
    let (ck, cfg) = load_run(common, checkpoint)?;
    let (model, _) = checkpoint::load_model(&ck)?;
    let names = if cfg.attr_names.len() == model.config().attr_dim {
        cfg.attr_names.clone()
    } else {
        cfg.dataset_spec().attr_names
    };
    if names.len() != model.config().attr_dim {
        return Err(Error::Config(format!(
            "config lists {} attribute names but the model takes {}",
            names.len(),
            model.config().attr_dim
        )));
    }
    let rows = attrs
        .iter()
        .map(|a| parse_attr_row(a, &names))
        .collect::<Result<Vec<_>>>()?;
    let mode = if through_flow {
        SampleMode::ThroughFlow
    } else {
        SampleMode::Affine
    };
    create_dir(&common.out_dir)?;
    let out = common.out_dir.join("samples.png");
    sample_grid(&model, &rows, cols, cfg.seed, mode, &out)?;
    Ok(json!({ "grid": out, "rows": rows.len(), "cols": cols }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::MakeSynth(c) => make_synth(c),
        Command::Train(c) => train(c),
        Command::Eval {
            common,
            checkpoint,
            features_file,
        } => eval(common, checkpoint, features_file),
        Command::Sample {
            common,
            checkpoint,
            attrs,
            cols,
            through_flow,
        } => sample(common, checkpoint, attrs, *cols, *through_flow),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
