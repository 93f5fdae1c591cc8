use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::{Rng, RngCore};

use super::{cast, HiddenLayer, SrlfNet, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};

/// Training mode draws dropout masks from the given RNG and normalizes with
/// batch statistics; eval mode is deterministic and uses running statistics.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    input: Array2<T>,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    /// ReLU indicator times the dropout scale.
    mask: Array2<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    train: bool,
    batch: usize,
    branches: Vec<Vec<LayerTape<T>>>,
    fusion: Vec<LayerTape<T>>,
    head_input: Array2<T>,
}

impl<T> Tape<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

fn hidden_forward<T: NdFloat>(
    layer: &HiddenLayer<T>,
    x: Array2<T>,
    train: bool,
    rng: &mut Option<&mut dyn RngCore>,
) -> (Array2<T>, LayerTape<T>) {
    let eps = cast::<T>(BN_EPS);
    let z = x.dot(&layer.linear.weight) + &layer.linear.bias;
    let (mean, var) = if train {
        let inv_n = cast::<T>(1.0 / z.nrows() as f64);
        let mean = z.sum_axis(Axis(0)) * inv_n;
        let var = (&z - &mean).mapv(|d| d * d).sum_axis(Axis(0)) * inv_n;
        (mean, var)
    } else {
        (layer.norm.running_mean.clone(), layer.norm.running_var.clone())
    };
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let xhat = (&z - &mean) * &inv_std;
    let y = &xhat * &layer.norm.gamma + &layer.norm.beta;
    let keep = 1.0 - layer.dropout;
    let scale = cast::<T>(1.0 / keep);
    let mut mask = y.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
    if train && layer.dropout > 0.0 {
        let rng = rng.as_mut().expect("training mode carries an rng");
        mask.mapv_inplace(|m| if rng.random::<f64>() < keep { m * scale } else { T::zero() });
    }
    let out = &y * &mask;
    (
        out,
        LayerTape {
            input: x,
            xhat,
            inv_std,
            mask,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Returns `dx` and pushes `[dW, db, dgamma, dbeta]` onto `grads`.
fn hidden_backward<T: NdFloat>(
    layer: &HiddenLayer<T>,
    tape: &LayerTape<T>,
    dout: Array2<T>,
    train: bool,
    grads: &mut Vec<Vec<T>>,
) -> Array2<T> {
    let dy = dout * &tape.mask;
    let dgamma = (&dy * &tape.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &layer.norm.gamma;
    let dz = if train {
        let b = cast::<T>(tape.xhat.nrows() as f64);
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &tape.xhat).sum_axis(Axis(0));
        let inner = dxhat.mapv(|v| v * b) - &sum_dxhat - &(&tape.xhat * &sum_dxhat_xhat);
        inner * &tape.inv_std.mapv(|s| s / b)
    } else {
        dxhat * &tape.inv_std
    };
    let dw = tape.input.t().dot(&dz);
    let db = dz.sum_axis(Axis(0));
    let dx = dz.dot(&layer.linear.weight.t());
    grads.push(dw.iter().copied().collect());
    grads.push(db.to_vec());
    grads.push(dgamma.to_vec());
    grads.push(dbeta.to_vec());
    dx
}

impl<T: NdFloat> SrlfNet<T> {
    fn check_batch(&self, inputs: &[ArrayView2<T>]) -> Result<usize> {
        let cfg = self.config();
        if inputs.len() != cfg.num_views {
            return Err(Error::Shape(format!(
                "expected {} view inputs, got {}",
                cfg.num_views,
                inputs.len()
            )));
        }
        let batch = inputs[0].nrows();
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        for (v, x) in inputs.iter().enumerate() {
            if x.ncols() != cfg.embed_dim || x.nrows() != batch {
                return Err(Error::Shape(format!(
                    "view {v} input is {}x{}, expected {batch}x{}",
                    x.nrows(),
                    x.ncols(),
                    cfg.embed_dim
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("view {v} input contains NaN or infinity")));
            }
        }
        Ok(batch)
    }

    /// Batched forward pass. `inputs[v]` is a `(batch, embed_dim)` matrix fed
    /// to branch `v`. Returns `(batch, num_classes)` logits and the tape for
    /// [`SrlfNet::backward`].
    pub fn forward_tape(&self, inputs: &[ArrayView2<T>], mode: Mode<'_>) -> Result<(Array2<T>, Tape<T>)> {
        let batch = self.check_batch(inputs)?;
        let train = mode.is_train();
        let mut rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Eval => None,
        };
        let mut branch_tapes = Vec::with_capacity(self.branches.len());
        let mut branch_outs = Vec::with_capacity(self.branches.len());
        for (branch, x) in self.branches.iter().zip(inputs) {
            let mut h = x.to_owned();
            let mut tapes = Vec::with_capacity(branch.len());
            for layer in branch {
                let (out, tape) = hidden_forward(layer, h, train, &mut rng);
                tapes.push(tape);
                h = out;
            }
            branch_tapes.push(tapes);
            branch_outs.push(h);
        }
        let views: Vec<_> = branch_outs.iter().map(|a| a.view()).collect();
        let mut h = concatenate(Axis(1), &views).expect("branch outputs share the batch size");
        let mut fusion_tapes = Vec::with_capacity(self.fusion.len());
        for layer in &self.fusion {
            let (out, tape) = hidden_forward(layer, h, train, &mut rng);
            fusion_tapes.push(tape);
            h = out;
        }
        let logits = h.dot(&self.output.weight) + &self.output.bias;
        Ok((
            logits,
            Tape {
                train,
                batch,
                branches: branch_tapes,
                fusion: fusion_tapes,
                head_input: h,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every trainable tensor, in
    /// the order of [`SrlfNet::params`], given `dlogits = dLoss/dlogits`.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &Array2<T>) -> Vec<Vec<T>> {
        let mut fusion_grads = Vec::new();
        let out_dw = tape.head_input.t().dot(dlogits);
        let out_db = dlogits.sum_axis(Axis(0));
        let mut dh = dlogits.dot(&self.output.weight.t());
        let mut per_layer: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.fusion.len());
        for (layer, lt) in self.fusion.iter().zip(&tape.fusion).rev() {
            let mut g = Vec::with_capacity(4);
            dh = hidden_backward(layer, lt, dh, tape.train, &mut g);
            per_layer.push(g);
        }
        per_layer.reverse();
        fusion_grads.extend(per_layer.into_iter().flatten());

        let width = *self.config().branch_sizes.last().unwrap();
        let mut grads = Vec::new();
        for (v, (branch, tapes)) in self.branches.iter().zip(&tape.branches).enumerate() {
            let mut d = dh.slice(s![.., v * width..(v + 1) * width]).to_owned();
            let mut per_layer = Vec::with_capacity(branch.len());
            for (layer, lt) in branch.iter().zip(tapes).rev() {
                let mut g = Vec::with_capacity(4);
                d = hidden_backward(layer, lt, d, tape.train, &mut g);
                per_layer.push(g);
            }
            per_layer.reverse();
            grads.extend(per_layer.into_iter().flatten());
        }
        grads.extend(fusion_grads);
        grads.push(out_dw.iter().copied().collect());
        grads.push(out_db.to_vec());
        grads
    }

    /// Folds the batch statistics of a training-mode tape into the running
    /// statistics (momentum 0.1, unbiased batch variance).
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        if !tape.train {
            return;
        }
        let m = cast::<T>(BN_MOMENTUM);
        let keep = T::one() - m;
        let b = tape.batch as f64;
        let unbias = cast::<T>(if tape.batch > 1 { b / (b - 1.0) } else { 1.0 });
        let tapes = tape.branches.iter().flatten().chain(&tape.fusion);
        for (layer, lt) in self.branches.iter_mut().flatten().chain(self.fusion.iter_mut()).zip(tapes) {
            let n = &mut layer.norm;
            n.running_mean = &n.running_mean * keep + &lt.batch_mean * m;
            n.running_var = &n.running_var * keep + &(&lt.batch_var * unbias) * m;
        }
    }

    pub fn forward_eval_batch(&self, inputs: &[ArrayView2<T>]) -> Result<Array2<T>> {
        Ok(self.forward_tape(inputs, Mode::Eval)?.0)
    }

    /// Eval-mode logits for one frame triplet.
    pub fn forward_eval(&self, views: &[&[T]]) -> Result<Vec<T>> {
        let inputs = single_batch(views, self.config().embed_dim)?;
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        Ok(self.forward_eval_batch(&views)?.row(0).to_vec())
    }

    /// Logits for one frame triplet. In training mode this is a batch of one:
    /// batch-norm sees zero variance and running statistics are updated.
    pub fn forward(&mut self, views: &[&[T]], mode: Mode<'_>) -> Result<Vec<T>> {
        let inputs = single_batch(views, self.config().embed_dim)?;
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let (logits, tape) = self.forward_tape(&views, mode)?;
        self.update_running_stats(&tape);
        Ok(logits.row(0).to_vec())
    }
}

fn single_batch<T: NdFloat>(views: &[&[T]], embed_dim: usize) -> Result<Vec<Array2<T>>> {
    views
        .iter()
        .enumerate()
        .map(|(v, x)| {
            if x.len() != embed_dim {
                return Err(Error::Shape(format!(
                    "view {v} has length {}, expected {embed_dim}",
                    x.len()
                )));
            }
            Ok(Array2::from_shape_vec((1, embed_dim), x.to_vec()).unwrap())
        })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax<T: NdFloat>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean weighted cross-entropy over a batch and its gradient with respect
/// to the logits: `L = (1/B) * sum_i w[y_i] * -log softmax(z_i)[y_i]`.
pub fn cross_entropy_grad<T: NdFloat>(
    logits: ArrayView2<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<(T, Array2<T>)> {
    let (b, n) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Input(format!("label {bad} outside [0, {n})")));
    }
    if let Some(w) = class_weights {
        if w.len() != n {
            return Err(Error::Shape(format!("{} class weights for {n} classes", w.len())));
        }
    }
    let inv_b = cast::<T>(1.0 / b as f64);
    let mut grad = Array2::zeros((b, n));
    let mut total = T::zero();
    for (i, row) in logits.outer_iter().enumerate() {
        let y = labels[i];
        let w = cast::<T>(class_weights.map_or(1.0, |w| w[y]));
        let p = softmax(&row.to_vec());
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).fold(T::zero(), |a, e| a + e).ln();
        total += w * (lse - row[y]);
        for (j, pj) in p.into_iter().enumerate() {
            let target = if j == y { T::one() } else { T::zero() };
            grad[[i, j]] = w * (pj - target) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}
