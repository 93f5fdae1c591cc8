//! Finite-difference verification of [`SrlfNet::backward`].

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy_grad, Mode, ModelConfig, SrlfNet};
use crate::error::{Error, Result};

/// A model small enough for exhaustive finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_views: 3,
        embed_dim: 4,
        branch_sizes: vec![5, 3],
        branch_dropout: vec![0.0, 0.0],
        fusion_sizes: vec![9, 6],
        num_classes: 4,
    }
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every trainable scalar, using central differences with step `h` in f64.
///
/// Batch-norm layers use batch statistics when `train_mode` is set and
/// (randomized) running statistics otherwise. Dropout must be zero so the
/// loss is a deterministic function of the parameters.
pub fn max_relative_error(config: &ModelConfig, seed: u64, h: f64, train_mode: bool, floor: f64) -> Result<f64> {
    if config.branch_dropout.iter().any(|&p| p != 0.0) {
        return Err(Error::Config("gradient checks need zero dropout".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SrlfNet::<f64>::init(config, seed)?;
    for l in net.branches.iter_mut().flatten().chain(net.fusion.iter_mut()) {
        l.norm.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        l.norm.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        l.norm.running_mean.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        l.norm.running_var.mapv_inplace(|_| rng.random_range(0.5..1.5));
    }
    let batch = 6;
    let inputs: Vec<Array2<f64>> = (0..config.num_views)
        .map(|_| Array2::from_shape_simple_fn((batch, config.embed_dim), || rng.random_range(-1.0..1.0)))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..config.num_classes)).collect();
    let weights: Vec<f64> = (0..config.num_classes).map(|_| rng.random_range(0.5..2.0)).collect();

    let loss_and_grad = |net: &SrlfNet<f64>| -> Result<(f64, Vec<Vec<f64>>)> {
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let mut step_rng = ChaCha8Rng::seed_from_u64(0);
        let mode = if train_mode { Mode::Train(&mut step_rng) } else { Mode::Eval };
        let (logits, tape) = net.forward_tape(&views, mode)?;
        let (loss, d) = cross_entropy_grad(logits.view(), &labels, Some(&weights))?;
        Ok((loss, net.backward(&tape, &d)))
    };

    let (_, analytic) = loss_and_grad(&net)?;
    let mut worst = 0.0f64;
    let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = net.params()[t][i];
            net.params_mut()[t][i] = orig + h;
            let (plus, _) = loss_and_grad(&net)?;
            net.params_mut()[t][i] = orig - h;
            let (minus, _) = loss_and_grad(&net)?;
            net.params_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_mode_gradients_match_finite_differences() {
        for seed in 0..10 {
            let err = max_relative_error(&tiny_config(), seed, 1e-4, false, 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        for seed in 0..10 {
            let err = max_relative_error(&tiny_config(), seed, 1e-4, true, 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn dropout_is_rejected() {
        let cfg = ModelConfig {
            branch_dropout: vec![0.5, 0.0],
            ..tiny_config()
        };
        assert!(max_relative_error(&cfg, 0, 1e-4, false, 1e-6).is_err());
    }
}
