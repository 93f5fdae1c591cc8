//! SRLF-Net: per-view fully-connected branches, concatenation, and a deep
//! fully-connected fusion head.
//!
//! ```text
//! view 0 ─ [768→512 BN ReLU drop .5] ─ [512→256 BN ReLU drop .6] ─┐
//! view 1 ─ [768→512 BN ReLU drop .5] ─ [512→256 BN ReLU drop .6] ─┼─ concat(768)
//! view 2 ─ [768→512 BN ReLU drop .5] ─ [512→256 BN ReLU drop .6] ─┘      │
//!   [768→768 BN ReLU] [768→512 BN ReLU] [512→256 BN ReLU] [256→128 BN ReLU] [128→n]
//! ```
//!
//! Branch weights are independent per view, so the network is not
//! permutation invariant in its inputs.

mod checkpoint;
mod forward;
pub mod gradcheck;

use ndarray::{Array1, Array2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{cross_entropy_grad, softmax, Mode, Tape};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_views: usize,
    pub embed_dim: usize,
    /// Output widths of the per-view branch layers.
    pub branch_sizes: Vec<usize>,
    /// One dropout rate per branch layer.
    pub branch_dropout: Vec<f64>,
    /// Widths of the fusion head, starting with its input (the
    /// concatenation, `num_views * last branch size`). Each consecutive
    /// pair is one hidden layer; a final layer maps the last width to
    /// `num_classes`.
    pub fusion_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_views: 3,
            embed_dim: 768,
            branch_sizes: vec![512, 256],
            branch_dropout: vec![0.5, 0.6],
            fusion_sizes: vec![768, 768, 512, 256, 128],
            num_classes: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_views == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return bad("num_views, embed_dim and num_classes must be positive".into());
        }
        if self.branch_sizes.is_empty() {
            return bad("branch_sizes must not be empty".into());
        }
        if self.branch_dropout.len() != self.branch_sizes.len() {
            return bad(format!(
                "branch_dropout has {} rates for {} branch layers",
                self.branch_dropout.len(),
                self.branch_sizes.len()
            ));
        }
        if self.branch_sizes.contains(&0) || self.fusion_sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if let Some(p) = self.branch_dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("dropout rate {p} outside [0, 1)"));
        }
        let concat = self.num_views * self.branch_sizes.last().unwrap();
        match self.fusion_sizes.first() {
            Some(&first) if first == concat => Ok(()),
            Some(&first) => bad(format!(
                "fusion input {first} must equal num_views x last branch size = {concat}"
            )),
            None => bad("fusion_sizes must start with the concatenation width".into()),
        }
    }

    /// `(in, out)` of every branch layer.
    pub fn branch_layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.branch_sizes.len());
        let mut prev = self.embed_dim;
        for &s in &self.branch_sizes {
            dims.push((prev, s));
            prev = s;
        }
        dims
    }

    /// `(in, out)` of every hidden fusion layer (batch-norm + ReLU).
    pub fn fusion_layer_dims(&self) -> Vec<(usize, usize)> {
        self.fusion_sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (*self.fusion_sizes.last().unwrap(), self.num_classes)
    }

    pub fn concat_width(&self) -> usize {
        self.num_views * self.branch_sizes.last().copied().unwrap_or(0)
    }
}

/// Closed-form trainable parameter count: `in*out + out` per linear layer,
/// plus `2*out` per batch-norm layer.
pub fn param_count(config: &ModelConfig) -> usize {
    let hidden = |(i, o): (usize, usize)| i * o + o + 2 * o;
    let branch: usize = config.branch_layer_dims().into_iter().map(hidden).sum();
    let fusion: usize = config.fusion_layer_dims().into_iter().map(hidden).sum();
    let (i, o) = config.output_dims();
    config.num_views * branch + fusion + i * o + o
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(in, out)`, so a batch is transformed as `x.dot(&weight)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

/// Linear, batch-norm, ReLU, then dropout in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<T> {
    pub linear: Linear<T>,
    pub norm: BatchNorm<T>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrlfNet<T> {
    config: ModelConfig,
    pub branches: Vec<Vec<HiddenLayer<T>>>,
    pub fusion: Vec<HiddenLayer<T>>,
    pub output: Linear<T>,
}

/// Single-precision parameters, as trained and checkpointed.
pub type ModelParams = SrlfNet<f32>;

pub(crate) fn cast<T: NdFloat>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

fn uniform_linear<T: NdFloat>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = || cast::<T>(rng.random_range(-bound..bound));
    let weight = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
    let bias = Array1::from_shape_simple_fn(fan_out, &mut draw);
    Linear { weight, bias }
}

fn hidden<T: NdFloat>(fan_in: usize, fan_out: usize, dropout: f64, rng: &mut ChaCha8Rng) -> HiddenLayer<T> {
    HiddenLayer {
        linear: uniform_linear(fan_in, fan_out, rng),
        norm: BatchNorm {
            gamma: Array1::ones(fan_out),
            beta: Array1::zeros(fan_out),
            running_mean: Array1::zeros(fan_out),
            running_var: Array1::ones(fan_out),
        },
        dropout,
    }
}

impl<T: NdFloat> SrlfNet<T> {
    /// Fan-in scaled uniform weights and biases, `U(-1/sqrt(in), 1/sqrt(in))`;
    /// batch-norm scale 1, shift 0, running mean 0, running variance 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = (0..config.num_views)
            .map(|_| {
                config
                    .branch_layer_dims()
                    .into_iter()
                    .zip(&config.branch_dropout)
                    .map(|((i, o), &p)| hidden(i, o, p, &mut rng))
                    .collect()
            })
            .collect();
        let fusion = config
            .fusion_layer_dims()
            .into_iter()
            .map(|(i, o)| hidden(i, o, 0.0, &mut rng))
            .collect();
        let (i, o) = config.output_dims();
        let output = uniform_linear(i, o, &mut rng);
        Ok(SrlfNet {
            config: config.clone(),
            branches,
            fusion,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn hidden_layers(&self) -> impl Iterator<Item = &HiddenLayer<T>> {
        self.branches.iter().flatten().chain(&self.fusion)
    }

    fn hidden_layers_mut(&mut self) -> impl Iterator<Item = &mut HiddenLayer<T>> {
        self.branches.iter_mut().flatten().chain(&mut self.fusion)
    }

    /// Trainable tensors in canonical order: for each branch in view order,
    /// then each fusion layer, `weight, bias, gamma, beta`; finally the
    /// output `weight, bias`. Weights are row-major `(in, out)`.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in self.hidden_layers() {
            out.push(l.linear.weight.as_slice().expect("standard layout"));
            out.push(l.linear.bias.as_slice().unwrap());
            out.push(l.norm.gamma.as_slice().unwrap());
            out.push(l.norm.beta.as_slice().unwrap());
        }
        out.push(self.output.weight.as_slice().expect("standard layout"));
        out.push(self.output.bias.as_slice().unwrap());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        let (layers, output) = (
            self.branches.iter_mut().flatten().chain(self.fusion.iter_mut()),
            &mut self.output,
        );
        for l in layers {
            out.push(l.linear.weight.as_slice_mut().expect("standard layout"));
            out.push(l.linear.bias.as_slice_mut().unwrap());
            out.push(l.norm.gamma.as_slice_mut().unwrap());
            out.push(l.norm.beta.as_slice_mut().unwrap());
        }
        out.push(output.weight.as_slice_mut().expect("standard layout"));
        out.push(output.bias.as_slice_mut().unwrap());
        out
    }

    /// Batch-norm running statistics, `running_mean, running_var` per
    /// hidden layer in the same order as [`SrlfNet::params`].
    pub fn buffers(&self) -> Vec<&[T]> {
        self.hidden_layers()
            .flat_map(|l| [l.norm.running_mean.as_slice().unwrap(), l.norm.running_var.as_slice().unwrap()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.hidden_layers_mut()
            .flat_map(|l| {
                let n = &mut l.norm;
                [n.running_mean.as_slice_mut().unwrap(), n.running_var.as_slice_mut().unwrap()]
            })
            .collect()
    }

    /// Number of trainable scalars actually allocated.
    pub fn allocated_param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: NdFloat>(&self) -> SrlfNet<U> {
        let c = |a: &Array1<T>| a.mapv(|x| cast::<U>(x.to_f64().unwrap()));
        let c2 = |a: &Array2<T>| a.mapv(|x| cast::<U>(x.to_f64().unwrap()));
        let layer = |l: &HiddenLayer<T>| HiddenLayer {
            linear: Linear {
                weight: c2(&l.linear.weight),
                bias: c(&l.linear.bias),
            },
            norm: BatchNorm {
                gamma: c(&l.norm.gamma),
                beta: c(&l.norm.beta),
                running_mean: c(&l.norm.running_mean),
                running_var: c(&l.norm.running_var),
            },
            dropout: l.dropout,
        };
        SrlfNet {
            config: self.config.clone(),
            branches: self.branches.iter().map(|b| b.iter().map(layer).collect()).collect(),
            fusion: self.fusion.iter().map(layer).collect(),
            output: Linear {
                weight: c2(&self.output.weight),
                bias: c(&self.output.bias),
            },
        }
    }
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, seed)
}

/// Argmax of `probs`, ties to the smallest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub probabilities: Vec<f32>,
}

impl ModelParams {
    /// Eval-mode forward followed by softmax and argmax.
    pub fn predict(&self, views: &[&[f32]]) -> Result<Prediction> {
        let logits = self.forward_eval(views)?;
        let probabilities = softmax(&logits);
        Ok(Prediction {
            class_id: argmax(&logits),
            probabilities,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate() -> ModelConfig {
        ModelConfig {
            num_views: 1,
            embed_dim: 2,
            branch_sizes: vec![2],
            branch_dropout: vec![0.0],
            fusion_sizes: vec![2, 2],
            num_classes: 2,
        }
    }

    /// Walks every allocated tensor of an initialized model.
    fn allocation_walk(cfg: &ModelConfig) -> usize {
        let net = SrlfNet::<f32>::init(cfg, 0).unwrap();
        let mut n = 0;
        for l in net.branches.iter().flatten().chain(&net.fusion) {
            n += l.linear.weight.len() + l.linear.bias.len() + l.norm.gamma.len() + l.norm.beta.len();
        }
        n + net.output.weight.len() + net.output.bias.len()
    }

    #[test]
    fn degenerate_counts_by_hand() {
        // Branch 2->2 with norm, fusion hidden 2->2 with norm, output 2->2.
        let cfg = degenerate();
        let hand = (2 * 2 + 2) + (2 * 2) + (2 * 2 + 2) + (2 * 2) + (2 * 2 + 2);
        assert_eq!(hand, 26);
        assert_eq!(param_count(&cfg), hand);
        assert_eq!(allocation_walk(&cfg), hand);

        // Fusion widths list only the concatenation: no hidden fusion layer.
        let bare = ModelConfig {
            fusion_sizes: vec![2],
            ..degenerate()
        };
        assert_eq!(param_count(&bare), (2 * 2 + 2) + (2 * 2) + (2 * 2 + 2));
        assert_eq!(allocation_walk(&bare), 16);
    }

    #[test]
    fn default_count_matches_allocation() {
        let cfg = ModelConfig::default();
        let branch = (768 * 512 + 512 + 2 * 512) + (512 * 256 + 256 + 2 * 256);
        let head = (768 * 768 + 768 + 2 * 768)
            + (768 * 512 + 512 + 2 * 512)
            + (512 * 256 + 256 + 2 * 256)
            + (256 * 128 + 128 + 2 * 128)
            + (128 * 16 + 16);
        assert_eq!(param_count(&cfg), 3 * branch + head);
        assert_eq!(param_count(&cfg), 2_733_712);
        assert_eq!(allocation_walk(&cfg), param_count(&cfg));
        let net = init_model(&cfg, 1).unwrap();
        assert_eq!(net.allocated_param_count(), param_count(&cfg));
    }

    #[test]
    fn doubling_classes_adds_final_layer_only() {
        let base = ModelConfig::default();
        let doubled = ModelConfig {
            num_classes: 32,
            ..base.clone()
        };
        assert_eq!(param_count(&doubled) - param_count(&base), 128 * 16 + 16);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            branch_dropout: vec![0.5],
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&bad, 0), Err(Error::Config(_))));
        let bad_fusion = ModelConfig {
            fusion_sizes: vec![512, 128],
            ..ModelConfig::default()
        };
        assert!(bad_fusion.validate().is_err());
        let bad_rate = ModelConfig {
            branch_dropout: vec![0.5, 1.0],
            ..ModelConfig::default()
        };
        assert!(bad_rate.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 4).unwrap());
        let net = init_model(&cfg, 3).unwrap();
        let bound = 1.0 / (768f32).sqrt();
        assert!(net.branches[0][0].linear.weight.iter().all(|w| w.abs() <= bound));
        assert!(net.buffers().iter().step_by(2).all(|m| m.iter().all(|&x| x == 0.0)));
        assert!(net.buffers().iter().skip(1).step_by(2).all(|v| v.iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn branches_do_not_share_weights() {
        let net = init_model(&ModelConfig::default(), 0).unwrap();
        assert_ne!(net.branches[0][0].linear.weight, net.branches[1][0].linear.weight);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 16]), 0);
    }
}
