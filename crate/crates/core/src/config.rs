//! Run configuration: one TOML file whose dotted keys mirror the module
//! configs (`train.max_epochs = 20`, `filter.window = 141`, ...). Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, IoContext, Result};
use crate::eval::EvalConfig;
use crate::filter::FilterConfig;
use crate::manifest::{LoadOptions, Phase, DEFAULT_PATH_TEMPLATE, DEFAULT_SAMPLE_RATE_HZ};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticDatasetConfig;
use crate::train::TrainConfig;
use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory the view paths are resolved against.
    pub root: Option<PathBuf>,
    /// `participant_id,phase,session_id,start_sec,end_sec,class_id` CSV.
    pub annotations: Option<PathBuf>,
    pub path_template: String,
    pub sample_rate_hz: f64,
    /// Keep one phase only; both phases are pooled when absent.
    pub phase: Option<Phase>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: None,
            annotations: None,
            path_template: DEFAULT_PATH_TEMPLATE.to_string(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            phase: None,
        }
    }
}

impl DatasetSection {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            path_template: self.path_template.clone(),
            sample_rate_hz: self.sample_rate_hz,
            phase: self.phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreSection {
    /// Defaults to `<out>/store`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    /// Generate the dataset and embeddings under `<out>` instead of reading
    /// real footage.
    pub enabled: bool,
    pub num_participants: usize,
    pub num_classes: usize,
    pub frames_per_class: usize,
    pub sample_rate_hz: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticDatasetConfig::default();
        SyntheticSection {
            enabled: false,
            num_participants: d.num_participants,
            num_classes: d.num_classes,
            frames_per_class: d.frames_per_class,
            sample_rate_hz: d.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub store: StoreSection,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `window` is in frames and should be tuned to match the typical
    /// duration of the driver activities (141 frames at 30 Hz).
    pub filter: FilterConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            out: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            store: StoreSection::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

/// Settings applied under `--synthetic` before the config file: the
/// synthetic encoder, a filter window shorter than the generated activity
/// segments, and a schedule that converges on a few thousand frames.
pub const SYNTHETIC_PRESET: &str = r#"
synthetic.enabled = true
encoder.kind = "synthetic"
filter.window = 15
train.max_epochs = 20
train.batch_size = 64
train.base_lr = 1e-3
"#;

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

impl RunConfig {
    /// Defaults, then the synthetic preset when requested, then `file`.
    pub fn load(file: Option<&Path>, synthetic: bool) -> Result<RunConfig> {
        let defaults = toml::to_string(&RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = parse_table(&defaults, "defaults")?;
        if synthetic {
            merge(&mut table, parse_table(SYNTHETIC_PRESET, "synthetic preset")?);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).io_context(|| format!("reading config {}", path.display()))?;
            merge(&mut table, parse_table(&text, &path.display().to_string())?);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        self.eval.validate()?;
        self.synthetic_dataset().validate()?;
        if self.encoder.embed_dim != self.model.embed_dim {
            return Err(Error::Config(format!(
                "encoder.embed_dim {} differs from model.embed_dim {}",
                self.encoder.embed_dim, self.model.embed_dim
            )));
        }
        if self.synthetic.enabled && self.encoder.kind != EncoderKind::Synthetic {
            return Err(Error::Config("synthetic.enabled requires encoder.kind = \"synthetic\"".into()));
        }
        Ok(())
    }

    pub fn synthetic_dataset(&self) -> SyntheticDatasetConfig {
        SyntheticDatasetConfig {
            num_participants: self.synthetic.num_participants,
            num_classes: self.synthetic.num_classes,
            frames_per_class: self.synthetic.frames_per_class,
            sample_rate_hz: self.synthetic.sample_rate_hz,
            seed: self.seed,
        }
    }

    pub fn store_dir(&self) -> PathBuf {
        self.store.dir.clone().unwrap_or_else(|| self.out.join("store"))
    }

    pub fn manifest_cache(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    pub fn synthetic_root(&self) -> PathBuf {
        self.out.join("synthetic_data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    pub fn history_path(&self) -> PathBuf {
        self.out.join("history.csv")
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn dump(&self, command: &str) -> Result<PathBuf> {
        crate::util::create_dir_all(&self.out)?;
        let path = self.out.join(format!("effective_config.{command}.toml"));
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}
