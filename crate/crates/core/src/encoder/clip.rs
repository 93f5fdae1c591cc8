use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{LayerNorm, VarBuilder, VarMap};
use candle_transformers::models::clip::text_model::Activation;
use candle_transformers::models::clip::vision_model::{ClipVisionConfig, ClipVisionTransformer};
use image::imageops::FilterType;
use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Embedding, ImageEncoder};
use crate::error::{Error, IoContext, Result};

/// Per-channel normalization statistics published with the CLIP backbones.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Class token after the final layer norm (the backbone's pooled output).
    #[default]
    Cls,
    /// Mean of the patch tokens, then the final layer norm.
    Mean,
}

/// Vision tower hyper-parameters, in the layout of the `vision_config`
/// block of a Hugging Face CLIP `config.json`. Missing keys default to
/// ViT-B/32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipVisionSettings {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub projection_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for ClipVisionSettings {
    fn default() -> Self {
        ClipVisionSettings {
            hidden_size: 768,
            intermediate_size: 3072,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            projection_dim: 512,
            image_size: 224,
            patch_size: 32,
        }
    }
}

impl ClipVisionSettings {
    fn to_candle(&self) -> ClipVisionConfig {
        ClipVisionConfig {
            embed_dim: self.hidden_size,
            activation: Activation::QuickGelu,
            intermediate_size: self.intermediate_size,
            num_hidden_layers: self.num_hidden_layers,
            num_attention_heads: self.num_attention_heads,
            projection_dim: self.projection_dim,
            num_channels: 3,
            image_size: self.image_size,
            patch_size: self.patch_size,
        }
    }

    fn from_config_json(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Full {
            vision_config: Option<ClipVisionSettings>,
        }
        let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        let full: Full = serde_json::from_slice(&bytes)?;
        match full.vision_config {
            Some(v) => Ok(v),
            None => Ok(serde_json::from_slice(&bytes)?),
        }
    }
}

/// Frozen CLIP vision transformer running on the CPU.
pub struct ClipBackend {
    model: ClipVisionTransformer,
    post_layernorm: LayerNorm,
    settings: ClipVisionSettings,
    pooling: Pooling,
    device: Device,
}

impl ClipBackend {
    /// Loads weights from a safetensors file, or from a directory with
    /// `model.safetensors` and an optional `config.json`. Both the full
    /// CLIP checkpoint layout (`vision_model.*`) and a bare vision tower
    /// are accepted.
    pub fn load(path: &Path, pooling: Pooling) -> Result<Self> {
        let (weights, config) = if path.is_dir() {
            (path.join("model.safetensors"), path.join("config.json"))
        } else {
            (path.to_path_buf(), path.with_file_name("config.json"))
        };
        if !weights.is_file() {
            return Err(Error::EncoderInit(format!("weights not found at {}", weights.display())));
        }
        let settings = if config.is_file() {
            ClipVisionSettings::from_config_json(&config)?
        } else {
            ClipVisionSettings::default()
        };
        let device = Device::Cpu;
        // SAFETY: the file is opened read-only and not modified while mapped.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[&weights], DType::F32, &device) }
            .map_err(|e| Error::EncoderInit(format!("{}: {e}", weights.display())))?;
        let vb = if vb.contains_tensor("vision_model.embeddings.class_embedding") {
            vb.pp("vision_model")
        } else {
            vb
        };
        // The backbone would otherwise draw an unseeded random class token.
        if !vb.contains_tensor("embeddings.class_embedding") {
            return Err(Error::EncoderInit(format!(
                "{} has no embeddings.class_embedding tensor",
                weights.display()
            )));
        }
        Self::from_var_builder(vb, settings, pooling, device)
    }

    fn from_var_builder(vb: VarBuilder, settings: ClipVisionSettings, pooling: Pooling, device: Device) -> Result<Self> {
        let cfg = settings.to_candle();
        let init = |e: candle_core::Error| Error::EncoderInit(e.to_string());
        let model = ClipVisionTransformer::new(vb.clone(), &cfg).map_err(init)?;
        let post_layernorm = candle_nn::layer_norm(cfg.embed_dim, 1e-5, vb.pp("post_layernorm")).map_err(init)?;
        Ok(ClipBackend {
            model,
            post_layernorm,
            settings,
            pooling,
            device,
        })
    }

    pub fn settings(&self) -> &ClipVisionSettings {
        &self.settings
    }

    /// Resize the short side to the native resolution (bicubic), center
    /// crop, scale to [0, 1] and normalize with [`CLIP_MEAN`]/[`CLIP_STD`].
    /// Returns a `(3, size, size)` channel-major buffer.
    pub fn preprocess(&self, image: &DynamicImage) -> Vec<f32> {
        preprocess(image, self.settings.image_size)
    }

    fn pixels_to_tensor(&self, pixels: Vec<f32>) -> Result<Tensor> {
        let s = self.settings.image_size;
        Ok(Tensor::from_vec(pixels, (1, 3, s, s), &self.device)?)
    }
}

pub(crate) fn preprocess(image: &DynamicImage, size: usize) -> Vec<f32> {
    let (w, h) = (image.width().max(1), image.height().max(1));
    let scale = size as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(size as u32);
    let nh = ((h as f64 * scale).round() as u32).max(size as u32);
    let resized = image.resize_exact(nw, nh, FilterType::CatmullRom).to_rgb8();
    let x0 = (nw - size as u32) / 2;
    let y0 = (nh - size as u32) / 2;
    let mut out = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = resized.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..3 {
                out[c * size * size + y * size + x] = (p[c] as f32 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
    }
    out
}

impl ImageEncoder for ClipBackend {
    fn embed_dim(&self) -> usize {
        self.settings.hidden_size
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Embedding> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Decode("image has zero size".into()));
        }
        let pixels = self.pixels_to_tensor(self.preprocess(image))?;
        let pooled = match self.pooling {
            Pooling::Cls => self.model.forward(&pixels)?,
            Pooling::Mean => {
                // Last entry is the pooled class token; the one before it is
                // the final encoder layer's token sequence.
                let states = self.model.output_hidden_states(&pixels)?;
                let last = &states[states.len() - 2];
                let patches = last.i((.., 1.., ..))?.mean(D::Minus2)?;
                self.post_layernorm.forward(&patches)?
            }
        };
        let values = pooled.flatten_all()?.to_vec1::<f32>()?;
        Embedding::new(values).map_err(|e| Error::Decode(format!("encoder produced an invalid vector: {e}")))
    }
}

/// Writes a randomly initialized vision tower (seeded normal weights,
/// layer-norm gains of one) plus a matching `config.json` into `dir`.
///
/// Useful as a stand-in checkpoint for smoke tests where the pretrained
/// weights are not available.
pub fn write_random_weights(dir: &Path, settings: &ClipVisionSettings, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    let device = Device::Cpu;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
    let cfg = settings.to_candle();
    ClipVisionTransformer::new(vb.pp("vision_model"), &cfg)?;

    let vars = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
    let mut tensors = HashMap::new();
    for name in names {
        let shape = vars[name].shape().clone();
        let n = shape.elem_count();
        let values: Vec<f32> = if name.contains("layer_norm") || name.contains("layrnorm") || name.contains("layernorm") {
            if name.ends_with("weight") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            }
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        tensors.insert(name.clone(), Tensor::from_vec(values, shape, &device)?);
    }
    let class_token: Vec<f32> = (0..settings.hidden_size).map(|_| normal.sample(&mut rng)).collect();
    tensors.insert(
        "vision_model.embeddings.class_embedding".to_string(),
        Tensor::from_vec(class_token, settings.hidden_size, &device)?,
    );
    let weights = dir.join("model.safetensors");
    candle_core::safetensors::save(&tensors, &weights)?;
    let config = serde_json::json!({ "vision_config": settings });
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&config)?)
        .io_context(|| format!("writing config into {}", dir.display()))?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn tiny() -> ClipVisionSettings {
        ClipVisionSettings {
            num_hidden_layers: 1,
            intermediate_size: 256,
            image_size: 64,
            ..ClipVisionSettings::default()
        }
    }

    fn image(seed: u8) -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_fn(80, 60, |x, y| {
            Rgb([(x as u8).wrapping_mul(seed), (y as u8).wrapping_add(seed), seed])
        }))
    }

    #[test]
    fn preprocess_shape_and_normalization() {
        let white = DynamicImage::ImageRgb8(RgbImage::from_pixel(50, 30, Rgb([255, 255, 255])));
        let px = preprocess(&white, 32);
        assert_eq!(px.len(), 3 * 32 * 32);
        for c in 0..3 {
            let expected = (1.0 - CLIP_MEAN[c]) / CLIP_STD[c];
            assert!((px[c * 1024 + 17] - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn random_tower_encodes_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        write_random_weights(dir.path(), &tiny(), 1).unwrap();
        let backend = ClipBackend::load(dir.path(), Pooling::Cls).unwrap();
        let a = backend.encode_image(&image(3)).unwrap();
        let b = backend.encode_image(&image(3)).unwrap();
        assert_eq!(a.dim(), 768);
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.is_finite()));
        let c = backend.encode_image(&image(90)).unwrap();
        assert!(a.cosine_similarity(&c) < 1.0);

        let mean = ClipBackend::load(&dir.path().join("model.safetensors"), Pooling::Mean).unwrap();
        let m = mean.encode_image(&image(3)).unwrap();
        assert_eq!(m.dim(), 768);
        assert_ne!(m, a);
    }

    #[test]
    fn missing_weights_is_init_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ClipBackend::load(dir.path(), Pooling::Cls),
            Err(Error::EncoderInit(_))
        ));
    }
}
