//! TOML run configuration.
//!
//! Relative paths are resolved against the directory of the config file (or
//! the working directory when no file is given), and the fully resolved
//! config is written back as `resolved_config.toml` by every command.

use std::path::{Path, PathBuf};

use battsynth_core::data::{CsvOptions, PrepConfig, SchemaMap};
use battsynth_core::eval::{RunConfig, DEFAULT_HORIZONS};
use battsynth_core::numcore::OptimizerKind;
use battsynth_core::train::OptimizerConfig;
use battsynth_core::{ForecastOptions, ModelKind, ModelSpec, Target};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SNAPSHOT: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Seeds initialization, shuffling, forecast sampling and synthesis noise.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Written by `train`, read by `evaluate` and `synthesize`.
    /// Defaults to `<out_dir>/checkpoint.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub windows: PrepConfig,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub forecast: ForecastSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub synthesize: SynthSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("battsynth-out")
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            checkpoint: None,
            data: DataSection::default(),
            windows: PrepConfig::default(),
            model: None,
            optimizer: OptimizerSection::default(),
            forecast: ForecastSection::default(),
            compare: CompareSection::default(),
            synthesize: SynthSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Battery CSV; the bundled sine fixture when unset.
    pub path: Option<PathBuf>,
    pub target: Target,
    pub delimiter: char,
    /// Canonical column name to file header.
    pub schema: SchemaMap,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            target: Target::Voltage,
            delimiter: ',',
            schema: SchemaMap::auto(),
        }
    }
}

impl DataSection {
    pub fn csv_options(&self) -> Result<CsvOptions, CliError> {
        if !self.delimiter.is_ascii() {
            return Err(CliError::Config(format!(
                "data.delimiter must be a single ASCII character, got {:?}",
                self.delimiter
            )));
        }
        Ok(CsvOptions {
            delimiter: self.delimiter as u8,
            schema: self.schema.clone(),
        })
    }
}

/// Optimizer settings; the seed comes from the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            kind: d.kind,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            early_stop_patience: d.early_stop_patience,
            grad_clip: d.grad_clip.unwrap_or(0.0),
            max_batches_per_epoch: d.max_batches_per_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub n_samples: usize,
    pub noise_scale: f64,
}

impl Default for ForecastSection {
    fn default() -> Self {
        let d = ForecastOptions::default();
        Self {
            n_samples: d.n_samples,
            noise_scale: d.noise_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub variables: Vec<Target>,
    pub horizons: Vec<usize>,
    pub parallel: bool,
    pub models: Vec<ModelSpec>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            variables: vec![Target::Voltage, Target::Capacity],
            horizons: DEFAULT_HORIZONS.to_vec(),
            parallel: true,
            models: ModelKind::ALL.iter().map(|k| ModelSpec::default_for(*k)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_variants: usize,
    pub noise_scale: f64,
    /// Rows copied from the seed table at the start of each cycle; defaults
    /// to the conditioning length the model was trained with.
    pub prefix: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_variants: 3,
            noise_scale: 1.0,
            prefix: None,
        }
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Config {
    /// Reads `path` (or starts from defaults), applies overrides and resolves paths.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let cwd = std::env::current_dir().map_err(|e| CliError::io("working directory", e))?;
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                let base = p.parent().map(|d| cwd.join(d)).unwrap_or_else(|| cwd.clone());
                (parse(&text)?, base)
            }
            None => (Config::default(), cwd.clone()),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        cfg.out_dir = match &overrides.out {
            Some(o) => cwd.join(o),
            None => base.join(&cfg.out_dir),
        };
        cfg.data.path = cfg.data.path.map(|p| base.join(p));
        cfg.checkpoint = cfg.checkpoint.map(|c| base.join(c));
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.ckpt"))
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            kind: o.kind,
            learning_rate: o.learning_rate,
            batch_size: o.batch_size,
            max_epochs: o.max_epochs,
            early_stop_patience: o.early_stop_patience,
            seed: self.seed,
            grad_clip: (o.grad_clip > 0.0).then_some(o.grad_clip),
            max_batches_per_epoch: o.max_batches_per_epoch,
        }
    }

    pub fn forecast_options(&self) -> ForecastOptions {
        ForecastOptions {
            n_samples: self.forecast.n_samples,
            seed: self.seed,
            noise_scale: self.forecast.noise_scale,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            prep: self.windows.clone(),
            optimizer: self.optimizer_config(),
            forecast: self.forecast_options(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Other(format!("cannot serialize resolved config: {e}")))
    }

    /// Creates the output directory and writes the resolved snapshot into it.
    pub fn write_snapshot(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::io(&format!("cannot create {}", self.out_dir.display()), e))?;
        let path = self.out_dir.join(SNAPSHOT);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&format!("cannot write {}", path.display()), e))?;
        Ok(path)
    }
}

/// Parses config text, reporting the dotted path of any offending field.
pub fn parse(text: &str) -> Result<Config, CliError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().message().to_string();
        let at = |field: &str| if path == "." { field.to_string() } else { format!("{path}.{field}") };
        let detail = match field_in(&msg, "missing field `") {
            Some(f) => format!("missing field `{}`", at(f)),
            None if path == "." => msg,
            None => format!("in `{path}`: {msg}"),
        };
        CliError::Config(detail)
    })
}

fn field_in<'a>(msg: &'a str, prefix: &str) -> Option<&'a str> {
    let rest = &msg[msg.find(prefix)? + prefix.len()..];
    Some(&rest[..rest.find('`')?])
}
