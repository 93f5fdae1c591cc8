//! Per-frame image embeddings.
//!
//! Two backends share one interface: a frozen contrastive vision-language
//! vision transformer (ViT-B/32) for real footage, and a synthetic generator
//! that draws class/view-conditioned vectors for desk-scale runs.

mod clip;
pub mod frames;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clip::{write_random_weights, ClipBackend, ClipVisionSettings, Pooling, CLIP_MEAN, CLIP_STD};
pub use synthetic::SyntheticBackend;

pub const DEFAULT_EMBED_DIM: usize = 768;

/// One frame in the vision-language latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("embedding must not be empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("embedding entry {i} is not finite")));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn cosine_similarity(&self, other: &Embedding) -> f32 {
        let dot: f32 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na: f32 = self.0.iter().map(|a| a * a).sum::<f32>().sqrt();
        let nb: f32 = other.0.iter().map(|b| b * b).sum::<f32>().sqrt();
        dot / (na * nb)
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    PretrainedVl,
    Synthetic,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained_vl" => Ok(EncoderKind::PretrainedVl),
            "synthetic" => Ok(EncoderKind::Synthetic),
            _ => Err(Error::Config(format!("unknown encoder kind {s:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::PretrainedVl => "pretrained_vl",
            EncoderKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSettings {
    pub sigma: f32,
    pub center_seed: u64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        SyntheticSettings {
            sigma: 0.1,
            center_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Safetensors file, or a directory holding `model.safetensors` and
    /// optionally `config.json`.
    pub model_id_or_path: Option<PathBuf>,
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub batch_size: usize,
    pub synthetic: SyntheticSettings,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::PretrainedVl,
            model_id_or_path: None,
            embed_dim: DEFAULT_EMBED_DIM,
            pooling: Pooling::Cls,
            batch_size: 32,
            synthetic: SyntheticSettings::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("encoder.embed_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("encoder.batch_size must be positive".into()));
        }
        if !(self.synthetic.sigma >= 0.0 && self.synthetic.sigma.is_finite()) {
            return Err(Error::Config("encoder.synthetic.sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Backend that turns decoded frames into embeddings.
///
/// Sealed: downstream code only sees [`EncoderBackend`], so an alternative
/// runtime can be slotted in here without touching callers.
pub trait ImageEncoder: private::Sealed + Send + Sync {
    fn embed_dim(&self) -> usize;

    fn encode_image(&self, image: &DynamicImage) -> Result<Embedding>;

    /// Element `i` equals `encode_image(&images[i])` bit for bit.
    fn encode_batch(&self, images: &[DynamicImage]) -> Result<Vec<Embedding>> {
        if images.is_empty() {
            return Err(Error::Input("encode_batch needs at least one image".into()));
        }
        images
            .iter()
            .enumerate()
            .map(|(index, img)| {
                self.encode_image(img).map_err(|e| Error::BatchItem {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

mod private {
    pub trait Sealed {}
    impl Sealed for super::ClipBackend {}
    impl Sealed for super::SyntheticBackend {}
    impl Sealed for super::EncoderBackend {}
}

pub enum EncoderBackend {
    PretrainedVl(ClipBackend),
    Synthetic(SyntheticBackend),
}

impl EncoderBackend {
    pub fn from_config(cfg: &EncoderConfig, num_classes: usize, num_views: usize) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            EncoderKind::PretrainedVl => {
                let path = cfg.model_id_or_path.as_ref().ok_or_else(|| {
                    Error::EncoderInit("encoder.model_id_or_path is required for the pretrained backend".into())
                })?;
                let backend = ClipBackend::load(path, cfg.pooling)?;
                if backend.embed_dim() != cfg.embed_dim {
                    return Err(Error::Config(format!(
                        "encoder.embed_dim is {} but the model produces {}",
                        cfg.embed_dim,
                        backend.embed_dim()
                    )));
                }
                Ok(EncoderBackend::PretrainedVl(backend))
            }
            EncoderKind::Synthetic => Ok(EncoderBackend::Synthetic(SyntheticBackend::new(
                cfg.embed_dim,
                num_classes,
                num_views,
                cfg.synthetic.sigma,
                cfg.synthetic.center_seed,
            )?)),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderBackend::PretrainedVl(_) => EncoderKind::PretrainedVl,
            EncoderBackend::Synthetic(_) => EncoderKind::Synthetic,
        }
    }

    pub fn as_synthetic(&self) -> Option<&SyntheticBackend> {
        match self {
            EncoderBackend::Synthetic(s) => Some(s),
            _ => None,
        }
    }
}

impl ImageEncoder for EncoderBackend {
    fn embed_dim(&self) -> usize {
        match self {
            EncoderBackend::PretrainedVl(b) => b.embed_dim(),
            EncoderBackend::Synthetic(b) => b.embed_dim(),
        }
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Embedding> {
        match self {
            EncoderBackend::PretrainedVl(b) => b.encode_image(image),
            EncoderBackend::Synthetic(b) => b.encode_image(image),
        }
    }

    fn encode_batch(&self, images: &[DynamicImage]) -> Result<Vec<Embedding>> {
        match self {
            EncoderBackend::PretrainedVl(b) => b.encode_batch(images),
            EncoderBackend::Synthetic(b) => b.encode_batch(images),
        }
    }
}

/// Decodes an encoded image (PNG, JPEG) from memory.
pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))
}
