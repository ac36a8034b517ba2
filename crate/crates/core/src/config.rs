//! Flat `key=value` configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Every tunable of data generation, the model and training in one flat record.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Where `train` writes the checkpoint and history.
    pub out_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig {
            model: ModelConfig {
                classes: synth.classes,
                channels: synth.channels,
                ..ModelConfig::default()
            },
            seed: synth.seed,
            train_manifest: "data/train.tsv".into(),
            eval_manifest: Some("data/eval.tsv".into()),
            ..TrainConfig::default()
        };
        Self {
            synth,
            train,
            out_dir: "run".into(),
        }
    }
}

/// Keys in serialisation order.
pub const KEYS: &[&str] = &[
    "seed",
    "classes",
    "channels",
    "height",
    "width",
    "samples",
    "eval_samples",
    "shapes_min",
    "shapes_max",
    "snr",
    "mask_scale",
    "tokens",
    "dense_hidden",
    "sparse_hidden",
    "decoder_layers",
    "heads",
    "upscale",
    "pixel_dim",
    "output_tokens",
    "lr",
    "batch_size",
    "max_steps",
    "temperature",
    "pcl",
    "fixed_prototypes",
    "eval_every",
    "threshold",
    "train_manifest",
    "eval_manifest",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for key {key}"))),
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (s, t) = (&mut self.synth, &mut self.train);
        match key {
            "seed" => {
                s.seed = parse(key, value)?;
                t.seed = s.seed;
            }
            "classes" => {
                s.classes = parse(key, value)?;
                t.model.classes = s.classes;
            }
            "channels" => {
                s.channels = parse(key, value)?;
                t.model.channels = s.channels;
            }
            "height" => s.height = parse(key, value)?,
            "width" => s.width = parse(key, value)?,
            "samples" => s.samples = parse(key, value)?,
            "eval_samples" => s.eval_samples = parse(key, value)?,
            "shapes_min" => s.shapes_min = parse(key, value)?,
            "shapes_max" => s.shapes_max = parse(key, value)?,
            "snr" => s.snr = parse(key, value)?,
            "mask_scale" => s.mask_scale = parse(key, value)?,
            "tokens" => t.model.tokens = parse(key, value)?,
            "dense_hidden" => t.model.dense_hidden = parse(key, value)?,
            "sparse_hidden" => t.model.sparse_hidden = parse(key, value)?,
            "decoder_layers" => t.model.decoder_layers = parse(key, value)?,
            "heads" => t.model.heads = parse(key, value)?,
            "upscale" => t.model.upscale = parse(key, value)?,
            "pixel_dim" => t.model.pixel_dim = parse(key, value)?,
            "output_tokens" => t.model.output_tokens = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "pcl" => t.pcl = parse_bool(key, value)?,
            "fixed_prototypes" => t.fixed_prototypes = parse_bool(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "train_manifest" => t.train_manifest = value.into(),
            "eval_manifest" => {
                t.eval_manifest = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "out_dir" => self.out_dir = value.into(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (s, t) = (&self.synth, &self.train);
        let path = |p: &Path| p.display().to_string();
        Some(match key {
            "seed" => s.seed.to_string(),
            "classes" => s.classes.to_string(),
            "channels" => s.channels.to_string(),
            "height" => s.height.to_string(),
            "width" => s.width.to_string(),
            "samples" => s.samples.to_string(),
            "eval_samples" => s.eval_samples.to_string(),
            "shapes_min" => s.shapes_min.to_string(),
            "shapes_max" => s.shapes_max.to_string(),
            "snr" => s.snr.to_string(),
            "mask_scale" => s.mask_scale.to_string(),
            "tokens" => t.model.tokens.to_string(),
            "dense_hidden" => t.model.dense_hidden.to_string(),
            "sparse_hidden" => t.model.sparse_hidden.to_string(),
            "decoder_layers" => t.model.decoder_layers.to_string(),
            "heads" => t.model.heads.to_string(),
            "upscale" => t.model.upscale.to_string(),
            "pixel_dim" => t.model.pixel_dim.to_string(),
            "output_tokens" => t.model.output_tokens.to_string(),
            "lr" => t.lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "max_steps" => t.max_steps.to_string(),
            "temperature" => t.temperature.to_string(),
            "pcl" => t.pcl.to_string(),
            "fixed_prototypes" => t.fixed_prototypes.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "threshold" => t.threshold.to_string(),
            "train_manifest" => path(&t.train_manifest),
            "eval_manifest" => t.eval_manifest.as_deref().map(path).unwrap_or_default(),
            "out_dir" => path(&self.out_dir),
            _ => return None,
        })
    }

    /// Every key in [`KEYS`] order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Makes relative paths relative to `base` (normally the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train.train_manifest);
        if let Some(p) = self.train.eval_manifest.as_mut() {
            fix(p);
        }
        fix(&mut self.out_dir);
    }
}
