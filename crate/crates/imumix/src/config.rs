//! Run configuration: the TOML config file schema, flag merging and the
//! reproducibility manifest written next to every run's outputs.
//!
//! Precedence, lowest to highest: built-in defaults, config file values,
//! command-line flags.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::MixerConfig;
use crate::optim::TrainConfig;
use crate::stream::StreamConfig;

/// Resolves a Table-style variant name (`mixer/{es|ms|s}/{32|16|8}`).
pub fn resolve_variant(name: &str) -> Result<MixerConfig> {
    MixerConfig::variant(name)
}

/// Contents of a TOML config file; every field optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub stream: Option<StreamSection>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Named variant, e.g. `"mixer/ms/8"`. Explicit fields below override
    /// the variant's values.
    pub variant: Option<String>,
    pub clip_len: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_classes: Option<usize>,
    pub token_hidden: Option<usize>,
    pub channel_hidden: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub initial_lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_every: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_improvement: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub stride: Option<usize>,
    pub silence_window_s: Option<f64>,
    pub cooldown_s: Option<f64>,
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl ModelSection {
    /// Applies the section on top of a base config (the variant, if named,
    /// replaces the base first).
    pub fn resolve(&self, base: MixerConfig) -> Result<MixerConfig> {
        let mut cfg = match &self.variant {
            Some(name) => resolve_variant(name)?,
            None => base,
        };
        let derived_widths = self.token_hidden.is_none() && self.channel_hidden.is_none();
        if let Some(v) = self.clip_len {
            cfg.clip_len = v;
        }
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.num_layers {
            cfg.num_layers = v;
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        if derived_widths {
            // keep the 4c / 4h defaults in sync with overridden dims
            if cfg.clip_len != 0 && cfg.window_len % cfg.clip_len == 0 {
                cfg.token_hidden = 4 * (cfg.window_len / cfg.clip_len);
            }
            cfg.channel_hidden = 4 * cfg.hidden_dim;
        }
        if let Some(v) = self.token_hidden {
            cfg.token_hidden = v;
        }
        if let Some(v) = self.channel_hidden {
            cfg.channel_hidden = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainSection {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.initial_lr {
            cfg.schedule.initial_lr = v;
        }
        if let Some(v) = self.decay_factor {
            cfg.schedule.decay_factor = v;
        }
        if let Some(v) = self.decay_every {
            cfg.schedule.decay_every = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.schedule.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.schedule.patience = v;
        }
        if let Some(v) = self.min_improvement {
            cfg.schedule.min_improvement = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.adamw.weight_decay = v;
        }
        if let Some(v) = self.beta1 {
            cfg.adamw.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.adamw.beta2 = v;
        }
        if let Some(v) = self.eps {
            cfg.adamw.eps = v;
        }
    }
}

impl StreamSection {
    pub fn apply(&self, cfg: &mut StreamConfig) {
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.silence_window_s {
            cfg.silence_window_s = v;
        }
        if let Some(v) = self.cooldown_s {
            cfg.cooldown_s = v;
        }
    }
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Reproducibility record written as `manifest.json` into every run's output
/// directory: resolved configuration, seed, tool version and input digests.
/// Rerunning with the same manifest inputs reproduces the outputs bitwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<MixerConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamConfig>,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            model: None,
            train: None,
            stream: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_resolution_round_trip() {
        let cfg = resolve_variant("mixer/ms/8").unwrap();
        assert_eq!(
            (cfg.num_layers, cfg.hidden_dim, cfg.clip_len),
            (4, 256, 8)
        );
        assert!(resolve_variant("mixer/xl/8").is_err());
        assert!(resolve_variant("resnet/18").is_err());
    }

    #[test]
    fn file_config_parses_and_applies() {
        let text = r#"
[model]
variant = "mixer/es/16"

[train]
batch_size = 32
max_epochs = 100
initial_lr = 0.001

[stream]
stride = 32
"#;
        let file: FileConfig = toml::from_str(text).unwrap();
        let model = file
            .model
            .as_ref()
            .unwrap()
            .resolve(MixerConfig::variant("mixer/ms/8").unwrap())
            .unwrap();
        assert_eq!(model.hidden_dim, 128);
        assert_eq!(model.clip_len, 16);

        let mut train = TrainConfig::default();
        file.train.as_ref().unwrap().apply(&mut train);
        assert_eq!(train.batch_size, 32);
        assert_eq!(train.schedule.max_epochs, 100);
        assert_eq!(train.schedule.initial_lr, 0.001);
        // untouched fields keep their defaults
        assert_eq!(train.schedule.patience, 40);

        let mut stream = StreamConfig::default();
        file.stream.as_ref().unwrap().apply(&mut stream);
        assert_eq!(stream.stride, 32);
        assert_eq!(stream.silence_window_s, 1800.0);
    }

    #[test]
    fn explicit_model_fields_override_variant() {
        let section = ModelSection {
            variant: Some("mixer/es/32".into()),
            num_classes: Some(4),
            clip_len: Some(16),
            ..Default::default()
        };
        let cfg = section
            .resolve(MixerConfig::variant("mixer/ms/8").unwrap())
            .unwrap();
        assert_eq!(cfg.num_classes, 4);
        assert_eq!(cfg.clip_len, 16);
        assert_eq!(cfg.token_hidden, 4 * (128 / 16), "derived width follows");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[model]\nvariannt = \"mixer/ms/8\"\n";
        assert!(toml::from_str::<FileConfig>(text).is_err());
    }

    #[test]
    fn manifest_serializes_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("data.jsonl");
        std::fs::write(&input, b"{}\n").unwrap();
        let mut manifest = Manifest::new("eval", 7);
        manifest.record_input(&input).unwrap();
        manifest.outputs.push("report.json".into());
        let p1 = dir.path().join("m1.json");
        let p2 = dir.path().join("m2.json");
        manifest.write(&p1).unwrap();
        manifest.write(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.contains("sha") || text.contains("\"inputs\""));
    }
}
