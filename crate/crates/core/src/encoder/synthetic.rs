use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Embedding, ImageEncoder};
use crate::error::{Error, Result};
use crate::util::mix_seed;

/// Minimum center separation in units of the noise scale.
pub const MIN_CENTER_SEPARATION_SIGMAS: f32 = 8.0;

/// Draws embeddings as `center(class, view) + N(0, sigma^2 I)`.
///
/// Centers are unit-norm Gaussian directions seeded by `(center_seed, class,
/// view)`. If some pair ends up closer than `8 sigma` all centers are scaled
/// up uniformly until the closest pair is exactly that far apart.
pub struct SyntheticBackend {
    embed_dim: usize,
    num_classes: usize,
    num_views: usize,
    sigma: f32,
    centers: Vec<Vec<f32>>,
    min_center_distance: f32,
}

impl SyntheticBackend {
    pub fn new(embed_dim: usize, num_classes: usize, num_views: usize, sigma: f32, center_seed: u64) -> Result<Self> {
        if embed_dim == 0 || num_classes == 0 || num_views == 0 {
            return Err(Error::Config("synthetic backend needs positive dims, classes and views".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("synthetic sigma must be finite and >= 0, got {sigma}")));
        }
        let mut centers: Vec<Vec<f32>> = (0..num_classes * num_views)
            .map(|i| {
                let (class, view) = (i / num_views, i % num_views);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[center_seed, class as u64, view as u64, 0xC3]));
                let v: Vec<f32> = (0..embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut min_d = min_pairwise_distance(&centers);
        let required = MIN_CENTER_SEPARATION_SIGMAS * sigma;
        if centers.len() > 1 && min_d < required {
            if min_d <= 0.0 {
                return Err(Error::Config("synthetic centers coincide; increase embed_dim".into()));
            }
            let scale = required / min_d;
            for c in &mut centers {
                c.iter_mut().for_each(|x| *x *= scale);
            }
            min_d = min_pairwise_distance(&centers);
        }
        if centers.len() > 1 && min_d < required * (1.0 - 1e-5) {
            return Err(Error::Config(format!(
                "synthetic centers are {min_d} apart, need at least {required}"
            )));
        }
        Ok(SyntheticBackend {
            embed_dim,
            num_classes,
            num_views,
            sigma,
            centers,
            min_center_distance: min_d,
        })
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    /// Smallest Euclidean distance between any two (class, view) centers.
    pub fn min_center_distance(&self) -> f32 {
        self.min_center_distance
    }

    pub fn center(&self, class_id: usize, view_id: usize) -> Result<&[f32]> {
        self.check_ids(class_id, view_id)?;
        Ok(&self.centers[class_id * self.num_views + view_id])
    }

    fn check_ids(&self, class_id: usize, view_id: usize) -> Result<()> {
        if class_id >= self.num_classes {
            return Err(Error::Input(format!(
                "class id {class_id} out of range [0, {})",
                self.num_classes
            )));
        }
        if view_id >= self.num_views {
            return Err(Error::Input(format!("view id {view_id} out of range [0, {})", self.num_views)));
        }
        Ok(())
    }

    pub fn synthetic_encode(&self, class_id: usize, view_id: usize, rng_seed: u64) -> Result<Embedding> {
        let center = self.center(class_id, view_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[rng_seed, class_id as u64, view_id as u64]));
        let values = center
            .iter()
            .map(|&c| {
                let z: f32 = StandardNormal.sample(&mut rng);
                c + self.sigma * z
            })
            .collect();
        Embedding::new(values)
    }
}

fn min_pairwise_distance(centers: &[Vec<f32>]) -> f32 {
    let mut best = f32::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

impl ImageEncoder for SyntheticBackend {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode_image(&self, _image: &DynamicImage) -> Result<Embedding> {
        Err(Error::Input(
            "the synthetic backend draws embeddings from labels and cannot encode pixels".into(),
        ))
    }
}
