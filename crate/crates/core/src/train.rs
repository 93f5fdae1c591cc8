//! Training loop: weighted cross-entropy, Adam, a one-cycle learning-rate
//! schedule, early stopping on validation loss, and per-sample view-order
//! augmentation.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::split_indices;
use crate::model::{argmax, cross_entropy_grad, init_model, Mode, ModelConfig, ModelParams};
use crate::util::{mix_seed, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub base_lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub early_stop_patience: usize,
    pub permute_views: bool,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            base_lr: 1e-4,
            batch_size: 256,
            val_fraction: 0.2,
            early_stop_patience: 10,
            permute_views: true,
            class_weights: None,
            seed: 0,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("train.base_lr must be positive");
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return bad("train.pct_start must lie in (0, 1)");
        }
        if self.early_stop_patience == 0 {
            return bad("train.early_stop_patience must be at least 1");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("train.max_epochs and train.batch_size must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("train.val_fraction must lie in (0, 1)");
        }
        if !(self.div_factor > 0.0 && self.final_div_factor > 0.0) {
            return bad("train.div_factor and train.final_div_factor must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad("train.class_weights must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of a `total_steps` one-cycle schedule: cosine
/// warmup from `base_lr / div_factor` to `base_lr` at step
/// `round(pct_start * total_steps)`, then cosine anneal to
/// `base_lr / final_div_factor` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Input(format!("step {step} outside [0, {total_steps})")));
    }
    let peak_step = ((cfg.pct_start * total_steps as f64).round() as usize).min(total_steps - 1);
    let start = cfg.base_lr / cfg.div_factor;
    let end = cfg.base_lr / cfg.final_div_factor;
    let cos_interp = |from: f64, to: f64, f: f64| from + (to - from) * (1.0 - (PI * f).cos()) / 2.0;
    Ok(if step < peak_step {
        cos_interp(start, cfg.base_lr, step as f64 / peak_step as f64)
    } else if step == peak_step {
        cfg.base_lr
    } else {
        let f = (step - peak_step) as f64 / (total_steps - 1 - peak_step) as f64;
        cos_interp(cfg.base_lr, end, f)
    })
}

/// Uniformly random ordering of `0..n`.
pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Returns the views in a uniformly random order.
pub fn permute_views<T: Clone, R: Rng + ?Sized>(views: &[T], rng: &mut R) -> Vec<T> {
    random_permutation(views.len(), rng)
        .into_iter()
        .map(|i| views[i].clone())
        .collect()
}

/// Cross-entropy of one logit vector, scaled by `class_weights[label]`.
pub fn compute_loss(logits: &[f64], label: usize, class_weights: Option<&[f64]>) -> Result<f64> {
    let view = ArrayView2::from_shape((1, logits.len()), logits).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(cross_entropy_grad(view, &[label], class_weights)?.0)
}

/// Stops once validation loss has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation loss; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimizer step taken.
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Labeled multi-view samples held contiguously as `(sample, view, dim)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    pub num_views: usize,
    pub embed_dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(num_views: usize, embed_dim: usize) -> Self {
        EmbeddingSet {
            num_views,
            embed_dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, views: &[&[f32]], label: usize) -> Result<()> {
        if views.len() != self.num_views {
            return Err(Error::Shape(format!("{} views, expected {}", views.len(), self.num_views)));
        }
        for v in views {
            if v.len() != self.embed_dim {
                return Err(Error::DimMismatch {
                    expected: self.embed_dim,
                    actual: v.len(),
                });
            }
            self.features.extend_from_slice(v);
        }
        self.labels.push(label);
        Ok(())
    }

    pub fn view(&self, sample: usize, view: usize) -> &[f32] {
        let start = (sample * self.num_views + view) * self.embed_dim;
        &self.features[start..start + self.embed_dim]
    }

    pub fn views(&self, sample: usize) -> Vec<&[f32]> {
        (0..self.num_views).map(|v| self.view(sample, v)).collect()
    }

    /// One `(batch, dim)` matrix per network input. `orders[k][j]` names the
    /// stored view fed to input `j` for the `k`-th sample.
    pub fn batch(&self, samples: &[usize], orders: Option<&[Vec<usize>]>) -> Vec<Array2<f32>> {
        (0..self.num_views)
            .map(|j| {
                let mut m = Array2::zeros((samples.len(), self.embed_dim));
                for (k, &s) in samples.iter().enumerate() {
                    let v = orders.map_or(j, |o| o[k][j]);
                    m.row_mut(k).assign(&ndarray::aview1(self.view(s, v)));
                }
                m
            })
            .collect()
    }

    pub fn subset(&self, samples: &[usize]) -> EmbeddingSet {
        let mut out = EmbeddingSet::new(self.num_views, self.embed_dim);
        for &s in samples {
            let start = s * self.num_views * self.embed_dim;
            out.features
                .extend_from_slice(&self.features[start..start + self.num_views * self.embed_dim]);
            out.labels.push(self.labels[s]);
        }
        out
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Mean weighted loss and accuracy of `model` (eval mode, stored view order).
pub fn evaluate_set(
    model: &ModelParams,
    data: &EmbeddingSet,
    class_weights: Option<&[f64]>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty set".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in all.chunks(batch_size.max(1)) {
        let inputs = data.batch(chunk, None);
        let views: Vec<_> = inputs.iter().map(|m| m.view()).collect();
        let logits = model.forward_eval_batch(&views)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let (l, _) = cross_entropy_grad(logits.view(), &labels, class_weights)?;
        loss += f64::from(l) * chunk.len() as f64;
        for (row, &y) in logits.outer_iter().zip(&labels) {
            correct += usize::from(argmax(row.as_slice().unwrap()) == y);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Batches of one sample are dropped from training when the epoch holds
/// more than one sample: batch statistics of a single row are degenerate.
fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|c| c.len() > 1 || order.len() == 1)
        .collect()
}

/// Trains on a frame-level random split of `data` and returns the
/// parameters of the epoch with the lowest validation loss.
pub fn train(
    data: &EmbeddingSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    model_cfg.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if data.num_views != model_cfg.num_views || data.embed_dim != model_cfg.embed_dim {
        return Err(Error::Shape(format!(
            "data holds {} views of {} dims, model expects {} of {}",
            data.num_views, data.embed_dim, model_cfg.num_views, model_cfg.embed_dim
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= model_cfg.num_classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {})", model_cfg.num_classes)));
    }
    let weights = cfg.class_weights.as_deref();
    if let Some(w) = weights {
        if w.len() != model_cfg.num_classes {
            return Err(Error::Config(format!(
                "train.class_weights has {} entries for {} classes",
                w.len(),
                model_cfg.num_classes
            )));
        }
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, mix_seed(&[cfg.seed, 1]))?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Validation(format!(
            "{} samples are too few for a train/validation split at fraction {}",
            data.len(),
            cfg.val_fraction
        )));
    }
    let train_set = data.subset(&train_idx);
    let val_set = data.subset(&val_idx);

    let mut model = init_model(model_cfg, mix_seed(&[cfg.seed, 2]))?;
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&shapes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 3]));

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = epoch_batches(&order, cfg.batch_size).len();
    let total_steps = steps_per_epoch * cfg.max_epochs;

    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut lr_trace = Vec::with_capacity(total_steps);
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (b, chunk) in epoch_batches(&order, cfg.batch_size).into_iter().enumerate() {
            let lr = one_cycle_lr(lr_trace.len(), total_steps, cfg)?;
            lr_trace.push(lr);
            let orders: Option<Vec<Vec<usize>>> = cfg
                .permute_views
                .then(|| chunk.iter().map(|_| random_permutation(data.num_views, &mut rng)).collect());
            let inputs = train_set.batch(chunk, orders.as_deref());
            let views: Vec<_> = inputs.iter().map(|m| m.view()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (logits, tape) = model.forward_tape(&views, Mode::Train(&mut rng))?;
            let (loss, dlogits) = cross_entropy_grad(logits.view(), &labels, weights)?;
            if !loss.is_finite() {
                log::error!("non-finite loss; recent learning rates: {:?}", &lr_trace[lr_trace.len().saturating_sub(5)..]);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr,
                    loss: f64::from(loss),
                });
            }
            let grads = model.backward(&tape, &dlogits);
            model.update_running_stats(&tape);
            adam.step(model.params_mut(), &grads, lr);
            loss_sum += f64::from(loss) * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_loss, val_acc) = evaluate_set(&model, &val_set, weights, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: steps_per_epoch,
                lr: *lr_trace.last().unwrap_or(&0.0),
                loss: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_acc,
            lr: *lr_trace.last().unwrap_or(&0.0),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} val_acc {:.4}",
            record.train_loss,
            val_loss,
            val_acc
        );
        epochs.push(record);
        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let history = TrainHistory {
        epochs,
        lr_trace,
        best_epoch: stopper.best_epoch().expect("at least one epoch ran"),
        stop_reason,
    };
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_views: 3,
            embed_dim: 4,
            branch_sizes: vec![5],
            branch_dropout: vec![0.0],
            fusion_sizes: vec![15, 6],
            num_classes: 3,
        }
    }

    /// Three well separated classes with a per-view offset.
    fn toy_data(n_per_class: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = EmbeddingSet::new(3, 4);
        for i in 0..n_per_class * 3 {
            let y = i % 3;
            let views: Vec<Vec<f32>> = (0..3)
                .map(|v| {
                    (0..4)
                        .map(|d| {
                            let center = if d == y { 2.0 } else { 0.0 } + 0.1 * v as f32;
                            center + rng.random_range(-0.3f32..0.3)
                        })
                        .collect()
                })
                .collect();
            let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
            set.push(&refs, y).unwrap();
        }
        set
    }

    #[test]
    fn permutation_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = ["a", "b", "c"];
        let mut counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
        for _ in 0..6000 {
            let out = permute_views(&input, &mut rng);
            let mut sorted = out.clone();
            sorted.sort();
            assert_eq!(sorted, input);
            *counts.entry(out).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / 6000.0 - 1.0 / 6.0).abs() <= 0.03);
        }
        assert_eq!(permute_views(&[7], &mut rng), vec![7]);
    }

    #[test]
    fn loss_examples() {
        let uniform = vec![0.0; 16];
        assert!((compute_loss(&uniform, 3, None).unwrap() - 16f64.ln()).abs() < 1e-12);
        let mut confident = vec![0.0; 16];
        confident[5] = 100.0;
        assert!(compute_loss(&confident, 5, None).unwrap() < 1e-6);
        assert!(compute_loss(&confident, 4, None).unwrap() > 99.0);
        let mut w = vec![1.0; 16];
        w[3] = 2.0;
        assert!((compute_loss(&uniform, 3, Some(&w)).unwrap() - 2.0 * 16f64.ln()).abs() < 1e-12);
        assert!(matches!(compute_loss(&uniform, 16, None), Err(Error::Input(_))));
    }

    #[test]
    fn one_cycle_reference_points() {
        let cfg = TrainConfig::default();
        let total = 1000;
        assert!((one_cycle_lr(0, total, &cfg).unwrap() - 4e-6).abs() < 1e-18);
        assert!((one_cycle_lr(300, total, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        assert!((one_cycle_lr(999, total, &cfg).unwrap() - 1e-8).abs() < 1e-18);
        assert!(one_cycle_lr(1000, total, &cfg).is_err());
        let trace: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, &cfg).unwrap()).collect();
        assert!(trace.iter().all(|&x| x > 0.0));
        assert!(trace[..=300].windows(2).all(|w| w[1] >= w[0]));
        assert!(trace[300..].windows(2).all(|w| w[1] <= w[0]));
        let max = trace.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1e-4);
    }

    #[test]
    fn early_stop_rule() {
        let mut s = EarlyStopping::new(1);
        assert!(s.observe(1, 1.0));
        assert!(!s.should_stop());
        assert!(s.observe(2, 0.9));
        assert!(!s.observe(3, 1.1));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch(), Some(2));
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig { base_lr: 0.0, ..Default::default() },
            TrainConfig { pct_start: 1.0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { class_weights: Some(vec![-1.0]), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn trains_toy_problem_deterministically() {
        let data = toy_data(40, 1);
        let cfg = TrainConfig {
            max_epochs: 30,
            base_lr: 1e-2,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        let (model, hist) = train(&data, &tiny_model(), &cfg).unwrap();
        let (model2, hist2) = train(&data, &tiny_model(), &cfg).unwrap();
        assert_eq!(hist, hist2);
        assert_eq!(model, model2);
        let best = &hist.epochs[hist.best_epoch - 1];
        assert!(hist.epochs.iter().all(|e| best.val_loss <= e.val_loss));
        assert!(best.val_acc >= 0.95, "{hist:?}");
        let max_lr = hist.lr_trace.iter().copied().fold(0.0, f64::max);
        assert!(max_lr <= cfg.base_lr * (1.0 + 1e-12));
        let csv = hist.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_acc,lr\n"));
        assert_eq!(csv.lines().count(), hist.epochs.len() + 1);
    }

    #[test]
    fn single_epoch_history() {
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let (_, hist) = train(&toy_data(5, 2), &tiny_model(), &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 1);
        assert_eq!(hist.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn rejects_empty_and_mislabeled_sets() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&EmbeddingSet::new(3, 4), &tiny_model(), &cfg),
            Err(Error::Validation(_))
        ));
        let mut data = toy_data(3, 0);
        data.labels[0] = 7;
        assert!(matches!(train(&data, &tiny_model(), &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn exploding_lr_aborts_with_diagnostics() {
        let mut data = toy_data(20, 3);
        data.features.iter_mut().for_each(|x| *x *= 1e30);
        let cfg = TrainConfig {
            base_lr: 1e30,
            max_epochs: 50,
            batch_size: 8,
            ..Default::default()
        };
        match train(&data, &tiny_model(), &cfg) {
            Err(Error::NonFiniteLoss { epoch, lr, .. }) => {
                assert!(epoch >= 1);
                assert!(lr > 0.0);
            }
            other => panic!("expected a non-finite loss abort, got {other:?}"),
        }
    }

    /// Gradient of the batch loss for `sample` with each of its views
    /// reordered by `order`, on a frozen eval-mode model.
    fn grad_for_order(model: &ModelParams, data: &EmbeddingSet, order: &[usize]) -> Vec<f64> {
        let inputs = data.batch(&[0], Some(&[order.to_vec()]));
        let views: Vec<_> = inputs.iter().map(|m| m.view()).collect();
        let (logits, tape) = model.forward_tape(&views, Mode::Eval).unwrap();
        let (_, d) = cross_entropy_grad(logits.view(), &data.labels[..1], None).unwrap();
        model.backward(&tape, &d).into_iter().flatten().map(f64::from).collect()
    }

    #[test]
    fn augmented_gradient_expectation_matches_enumeration() {
        let data = toy_data(1, 4);
        let model = init_model(&tiny_model(), 9).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let grads: Vec<Vec<f64>> = perms.iter().map(|p| grad_for_order(&model, &data, p)).collect();
        let exact: Vec<f64> = (0..grads[0].len())
            .map(|i| grads.iter().map(|g| g[i]).sum::<f64>() / 6.0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 20_000;
        let mut sampled = vec![0.0; exact.len()];
        for _ in 0..draws {
            let p = random_permutation(3, &mut rng);
            let idx = perms.iter().position(|q| q[..] == p[..]).unwrap();
            for (s, g) in sampled.iter_mut().zip(&grads[idx]) {
                *s += g / draws as f64;
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = sampled.iter().zip(&exact).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) / norm(&exact) < 1e-2, "{}", norm(&diff) / norm(&exact));
    }

    #[test]
    fn zero_class_weight_removes_gradient() {
        let data = toy_data(4, 5);
        let model = init_model(&tiny_model(), 1).unwrap();
        let class1: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 1).collect();
        let inputs = data.batch(&class1, None);
        let views: Vec<_> = inputs.iter().map(|m| m.view()).collect();
        let labels: Vec<usize> = class1.iter().map(|&i| data.labels[i]).collect();
        let (logits, tape) = model.forward_tape(&views, Mode::Eval).unwrap();
        let (loss, d) = cross_entropy_grad(logits.view(), &labels, Some(&[1.0, 0.0, 1.0])).unwrap();
        assert_eq!(loss, 0.0);
        let norm: f32 = model.backward(&tape, &d).iter().flatten().map(|g| g * g).sum();
        assert_eq!(norm, 0.0);
        let (_, d1) = cross_entropy_grad(logits.view(), &labels, None).unwrap();
        let norm1: f32 = model.backward(&tape, &d1).iter().flatten().map(|g| g * g).sum();
        assert!(norm1 > 0.0);
    }
}
